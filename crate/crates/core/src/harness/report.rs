//! CSV emission. Every file starts with a `# rowguard-report v1` line that
//! carries the seed, config hash and activation latency, then a header row;
//! LF line endings.

use std::fmt::Write as _;

pub const REPORT_MAGIC: &str = "# rowguard-report v1";

pub const ATTACK_COLUMNS: &[&str] = &[
    "scenario",
    "defender",
    "attacker",
    "sb",
    "target_rows",
    "t_rh",
    "flips_attempted",
    "flips_landed",
    "target_row_flips",
    "collateral_flips",
    "clean_accuracy",
    "post_attack_accuracy",
    "flips_to_degrade",
    "total_swaps",
    "deadline_misses",
    "simulated_seconds",
    "seed",
    "config_hash",
];

/// What produced a report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub t_act: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportRow {
    pub scenario: String,
    pub defender: String,
    pub attacker: String,
    pub sb: usize,
    pub target_rows: usize,
    pub t_rh: u64,
    pub flips_attempted: usize,
    pub flips_landed: usize,
    pub target_row_flips: usize,
    pub collateral_flips: usize,
    pub clean_accuracy: f64,
    pub post_attack_accuracy: f64,
    pub flips_to_degrade: Option<usize>,
    pub total_swaps: usize,
    pub deadline_misses: usize,
    pub simulated_seconds: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl ReportRow {
    fn fields(&self) -> Vec<String> {
        vec![
            self.scenario.clone(),
            self.defender.clone(),
            self.attacker.clone(),
            self.sb.to_string(),
            self.target_rows.to_string(),
            self.t_rh.to_string(),
            self.flips_attempted.to_string(),
            self.flips_landed.to_string(),
            self.target_row_flips.to_string(),
            self.collateral_flips.to_string(),
            fmt_f(self.clean_accuracy),
            fmt_f(self.post_attack_accuracy),
            self.flips_to_degrade.map_or(String::new(), |n| n.to_string()),
            self.total_swaps.to_string(),
            self.deadline_misses.to_string(),
            format!("{:.9}", self.simulated_seconds),
            self.seed.to_string(),
            self.config_hash.clone(),
        ]
    }
}

pub fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

pub fn header_line(p: &Provenance) -> String {
    format!(
        "{REPORT_MAGIC} seed={} config={} t_act={}\n",
        p.seed, p.config_hash, p.t_act
    )
}

pub fn attack_csv(rows: &[ReportRow], p: &Provenance) -> String {
    let mut s = header_line(p);
    s.push_str(&ATTACK_COLUMNS.join(","));
    s.push('\n');
    append_rows(&mut s, rows);
    s
}

/// `existing` with `rows` appended, or a fresh file when `existing` is not
/// an attack report with the current columns.
pub fn append_attack_csv(existing: Option<&str>, rows: &[ReportRow], p: &Provenance) -> String {
    match existing {
        Some(text)
            if parse_csv(text).is_some_and(|(_, h, _)| h == ATTACK_COLUMNS) && text.ends_with('\n') =>
        {
            let mut s = text.to_string();
            append_rows(&mut s, rows);
            s
        }
        _ => attack_csv(rows, p),
    }
}

fn append_rows(s: &mut String, rows: &[ReportRow]) {
    for r in rows {
        s.push_str(&r.fields().join(","));
        s.push('\n');
    }
}

/// Long-format sweep table.
pub fn sweep_csv(axis: &str, rows: &[(u64, &str, f64)], p: &Provenance) -> String {
    let mut s = header_line(p);
    s.push_str("axis,value,metric,metric_value\n");
    for (v, m, x) in rows {
        let _ = writeln!(s, "{axis},{v},{m},{}", fmt_f(*x));
    }
    s
}

/// Two-column quantity table.
pub fn kv_csv(rows: &[(String, String)], p: &Provenance) -> String {
    let mut s = header_line(p);
    s.push_str("quantity,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// Parses a report file into its header fields and data rows.
pub fn parse_csv(text: &str) -> Option<(String, Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let magic = lines.next()?;
    if !magic.starts_with(REPORT_MAGIC) {
        return None;
    }
    let header: Vec<String> = lines.next()?.split(',').map(str::to_string).collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Some((magic.to_string(), header, rows))
}

/// Left-aligned text table.
pub fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let mut w: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            if i < w.len() {
                w[i] = w[i].max(c.len());
            }
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            let width = w.get(i).copied().unwrap_or(0);
            let _ = write!(s, "{c:<width$}  ");
        }
        s.trim_end().to_string() + "\n"
    };
    let mut s = line(header);
    for r in rows {
        s.push_str(&line(r));
    }
    s
}
