//! Scenario orchestration behind the `rowguard` CLI: profiling, attack
//! runs, sweeps, closed-form analysis and report emission.

pub mod config;
pub mod report;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{self, AnalysisError, Calibration, SecurityParams};
use crate::attack::{self, AddressMap, AttackContext, AttackOutcome, AttackerCapabilities};
use crate::bfa::{self, AttackPlan, BfaError, ProfilingResult, StopCriterion};
use crate::defense::{self, DefenseConfig, ProtectionProfile, SwapRecord};
use crate::dram::{Dram, DramGeometry, FlipEvent, FlipModel, Ns, RowAddr, TimingParams};
use crate::qnn::{self, Batch, BitLocation, QnnError, QuantizedModel};
use crate::sim::{SimCore, SimError, Simulation, WeightFlip};

pub use config::{config_hash, ScenarioConfig, SweepAxis};
pub use report::ReportRow;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("file format error: {0}")]
    Format(String),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// Process exit code: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Format(_) => 2,
            HarnessError::Runtime(_) => 1,
        }
    }
}

impl From<SimError> for HarnessError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => HarnessError::Config(m),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

impl From<QnnError> for HarnessError {
    fn from(e: QnnError) -> Self {
        match e {
            QnnError::Format(_) | QnnError::Dataset(_) | QnnError::Io(_) => {
                HarnessError::Format(e.to_string())
            }
            QnnError::Shape(_) => HarnessError::Runtime(e.to_string()),
        }
    }
}

impl From<BfaError> for HarnessError {
    fn from(e: BfaError) -> Self {
        match e {
            BfaError::NoRounds | BfaError::Budget { .. } => HarnessError::Config(e.to_string()),
            BfaError::Qnn(q) => q.into(),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

impl From<AnalysisError> for HarnessError {
    fn from(e: AnalysisError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

fn io(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Runtime(format!("{}: {e}", path.display()))
}

pub fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io(path, e))
}

/// Model, attack batch, held-out batch and degradation criterion.
#[derive(Debug, Clone)]
pub struct Workload {
    pub model: QuantizedModel,
    pub attack_batch: Batch,
    pub eval_batch: Batch,
    pub stop: StopCriterion,
}

impl Workload {
    /// The attack batch is a class-balanced seeded draw; the rest of the
    /// dataset is the held-out batch.
    pub fn load(cfg: &ScenarioConfig, seed: u64) -> Result<Self, HarnessError> {
        let model = qnn::read_checkpoint(&cfg.model.checkpoint)?;
        let data = qnn::load_digits_csv(&cfg.model.dataset)?;
        let classes = model.num_classes();
        let (attack_batch, eval_batch) = data.stratified_split(cfg.model.attack_batch, classes, seed);
        Ok(Self {
            stop: StopCriterion::near_random_guess(classes, cfg.model.margin),
            model,
            attack_batch,
            eval_batch,
        })
    }

    pub fn profile(&self, rounds: usize) -> Result<ProfilingResult, HarnessError> {
        let mut m = self.model.clone();
        Ok(bfa::profile_vulnerable_bits(&mut m, &self.attack_batch, self.stop, rounds)?)
    }

    /// Plain search against the undefended model.
    pub fn plan(&self) -> Result<AttackPlan, HarnessError> {
        let mut m = self.model.clone();
        Ok(bfa::bfa_search(&mut m, &self.attack_batch, &Default::default(), self.stop)?)
    }
}

/// Secured bits selected by the profile section. A prefix longer than the
/// profiled set is a config error.
pub fn secured_bits(cfg: &ScenarioConfig, prof: &ProfilingResult) -> Result<Vec<BitLocation>, HarnessError> {
    let mut bits = match cfg.profile.sb_rounds {
        Some(r) if r > prof.rounds.len() => {
            return Err(HarnessError::Config(format!(
                "sb_rounds {r} exceeds the {} profiling rounds",
                prof.rounds.len()
            )))
        }
        Some(r) => ProfilingResult {
            rounds: prof.rounds.iter().take(r).cloned().collect(),
        }
        .secured_bits(),
        None => prof.secured_bits(),
    };
    if let Some(n) = cfg.profile.sb_prefix {
        if n > bits.len() {
            return Err(HarnessError::Config(format!(
                "sb_prefix {n} exceeds the {} profiled secured bits",
                bits.len()
            )));
        }
        bits.truncate(n);
    }
    Ok(bits)
}

/// Everything one simulated scenario produced.
#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub row: ReportRow,
    pub outcome: AttackOutcome,
    pub swaps: Vec<SwapRecord>,
    pub flips: Vec<FlipEvent>,
    pub weight_flips: Vec<WeightFlip>,
    pub final_model: QuantizedModel,
}

pub fn flip_model(cfg: &ScenarioConfig, seed: u64) -> FlipModel {
    FlipModel {
        mode: cfg.flip.mode,
        rng_seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xF11F,
        saturate: cfg.flip.saturate,
    }
}

/// Protection profile for `secured`: rows holding any secured bit are
/// targets, the other data rows are non-targets.
pub fn protection_profile(
    geometry: &DramGeometry,
    map: &AddressMap,
    secured: &[BitLocation],
    reserved_per_subarray: u32,
) -> ProtectionProfile {
    let targets: BTreeSet<RowAddr> = secured
        .iter()
        .map(|b| map.row_of(map.data_row_of(*b)))
        .collect();
    let non_targets: BTreeSet<RowAddr> = map
        .rows()
        .iter()
        .copied()
        .filter(|r| !targets.contains(r))
        .collect();
    ProtectionProfile::with_tail_reserved(
        targets,
        non_targets,
        geometry.rows_per_subarray,
        reserved_per_subarray,
    )
}

/// Builds the device, installs the model, arms the defense and runs the
/// configured attacker.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    work: &Workload,
    secured: &[BitLocation],
    plan: Option<&AttackPlan>,
    seed: u64,
    scenario: &str,
) -> Result<ScenarioResult, HarnessError> {
    let dram = Dram::new(cfg.geometry, cfg.timing, flip_model(cfg, seed))
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let map = AddressMap::layer_major(&cfg.geometry, &work.model.layer_weight_counts(), cfg.layout)?;
    let mut core = SimCore::new(dram, map.clone());
    map.install(&mut core.dram, &work.model)?;
    let profile = protection_profile(&cfg.geometry, &map, secured, cfg.defender.reserved_per_subarray);
    let dcfg = DefenseConfig {
        seed: seed ^ 0xDEF,
        ..cfg.defender.clone()
    };
    let defense = defense::build(&dcfg, &profile, &mut core)?;
    let mut sim = Simulation::new(core, defense);

    let mut attacker = attack::build(&cfg.attacker.kind)?;
    let mut caps = if attacker.name() == "semi_whitebox" {
        AttackerCapabilities::semi_whitebox()
    } else {
        AttackerCapabilities::whitebox()
    };
    caps.activation_rate = cfg.attacker.activation_rate;
    let own_plan;
    let plan = match (plan, attacker.name()) {
        (Some(p), _) => Some(p),
        (None, "semi_whitebox") => {
            own_plan = work.plan()?;
            Some(&own_plan)
        }
        _ => None,
    };
    let ctx = AttackContext {
        model: &work.model,
        attack_batch: &work.attack_batch,
        eval_batch: &work.eval_batch,
        original_map: &map,
        plan,
        stop: work.stop,
        horizon: cfg.horizon(),
        caps,
        params: attack::AttackParams {
            seed: seed ^ 0xA77,
            ..cfg.attacker.params
        },
        record_trace: false,
    };
    let outcome = attacker.run(&mut sim, &ctx)?;
    let final_model = sim.core.map.extract(&sim.core.dram, &work.model).map_err(SimError::from)?;
    let row = ReportRow {
        scenario: scenario.to_string(),
        defender: cfg.defender.kind.clone(),
        attacker: outcome.attacker.clone(),
        sb: secured.len(),
        target_rows: profile.target_rows.len(),
        t_rh: cfg.timing.t_rh,
        flips_attempted: outcome.attempted,
        flips_landed: outcome.landed.len(),
        target_row_flips: outcome.target_row_flips,
        collateral_flips: outcome.collateral,
        clean_accuracy: outcome.clean_accuracy,
        post_attack_accuracy: outcome.final_accuracy,
        flips_to_degrade: outcome.flips_to_degrade,
        total_swaps: sim.defense().swaps().len(),
        deadline_misses: sim.defense().deadline_misses().iter().filter(|m| m.target).count(),
        simulated_seconds: outcome.sim_time as f64 * 1e-9,
        seed,
        config_hash: String::new(),
    };
    Ok(ScenarioResult {
        row,
        swaps: sim.defense().swaps().to_vec(),
        flips: sim.core.dram.flip_log().to_vec(),
        weight_flips: sim.core.weight_flips().to_vec(),
        outcome,
        final_model,
    })
}

pub fn flip_log_tsv(flips: &[FlipEvent], weight: &[WeightFlip]) -> String {
    let mut s = String::from("time\trow\tcolumn\trole\tweight_bit\n");
    let mut wi = weight.iter().peekable();
    for f in flips {
        let bit = match wi.peek() {
            Some(w) if w.event == *f => {
                let w = wi.next().expect("peeked");
                format!(
                    "{}:{}:{}",
                    w.location.layer, w.location.weight_index, w.location.bit
                )
            }
            _ => "-".into(),
        };
        let _ = writeln!(s, "{}\t{}\t{}\t{:?}\t{bit}", f.time, f.addr, f.column, f.role);
    }
    s
}

/// Options shared by every command, taken from the global CLI flags.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: ScenarioConfig,
    pub config_text: String,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunOptions {
    pub fn new(config: ScenarioConfig, config_text: String, seed: Option<u64>, out: PathBuf) -> Self {
        let seed = seed.unwrap_or(config.seed);
        Self {
            config,
            config_text,
            seed,
            out,
        }
    }

    pub fn hash(&self) -> String {
        config_hash(&self.config_text, self.seed)
    }

    pub fn provenance(&self) -> report::Provenance {
        report::Provenance {
            seed: self.seed,
            config_hash: self.hash(),
            t_act: self.config.timing.t_act,
        }
    }
}

/// Multi-round profiling; writes `profile.tsv` and `profile_summary.txt`.
pub fn cmd_profile(opts: &RunOptions, rounds: Option<usize>) -> Result<ProfilingResult, HarnessError> {
    let rounds = rounds.unwrap_or(opts.config.profile.rounds);
    if rounds == 0 {
        return Err(HarnessError::Config("rounds must be at least 1".into()));
    }
    let work = Workload::load(&opts.config, opts.seed)?;
    let prof = work.profile(rounds)?;
    write_file(&opts.out.join("profile.tsv"), &prof.to_text())?;
    let mut summary = report::header_line(&opts.provenance());
    let _ = writeln!(summary, "rounds {}", prof.rounds.len());
    for (i, n) in prof.round_sizes().iter().enumerate() {
        let _ = writeln!(summary, "R{} {n}", i + 1);
    }
    let _ = writeln!(summary, "secured_bits {}", prof.secured_bits().len());
    write_file(&opts.out.join("profile_summary.txt"), &summary)?;
    Ok(prof)
}

/// The configured scenario end to end; writes `report.csv`, `swaps.tsv` and
/// `flips.tsv`.
pub fn cmd_attack(opts: &RunOptions) -> Result<ScenarioResult, HarnessError> {
    let cfg = &opts.config;
    let work = Workload::load(cfg, opts.seed)?;
    let (secured, plan) = secured_and_plan(cfg, &work)?;
    let mut res = run_scenario(cfg, &work, &secured, plan.as_ref(), opts.seed, "attack")?;
    res.row.config_hash = opts.hash();
    let path = opts.out.join("report.csv");
    let existing = std::fs::read_to_string(&path).ok();
    write_file(
        &path,
        &report::append_attack_csv(existing.as_deref(), std::slice::from_ref(&res.row), &opts.provenance()),
    )?;
    write_file(&opts.out.join("swaps.tsv"), &defense::swap_log_tsv(&res.swaps))?;
    write_file(&opts.out.join("flips.tsv"), &flip_log_tsv(&res.flips, &res.weight_flips))?;
    Ok(res)
}

/// Secured bits (when a defender needs them) and the replay plan (for the
/// replaying attacker, the first profiling round).
fn secured_and_plan(
    cfg: &ScenarioConfig,
    work: &Workload,
) -> Result<(Vec<BitLocation>, Option<AttackPlan>), HarnessError> {
    let needs_profile = cfg.defender.kind != "none" || cfg.attacker.kind == "semi_whitebox";
    if !needs_profile {
        return Ok((Vec::new(), None));
    }
    let prof = work.profile(cfg.profile.rounds)?;
    let plan = (cfg.attacker.kind == "semi_whitebox").then(|| AttackPlan {
        flips: prof.rounds[0].clone(),
        stop: work.stop,
    });
    let secured = if cfg.defender.kind == "none" {
        Vec::new()
    } else {
        secured_bits(cfg, &prof)?
    };
    Ok((secured, plan))
}

/// Aggregated sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: u64,
    pub rows: Vec<ReportRow>,
}

impl SweepPoint {
    fn mean(&self, f: impl Fn(&ReportRow) -> f64) -> f64 {
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    /// Mean flips to reach the degradation criterion. A replicate that never
    /// got there contributes its landed count, a lower bound.
    pub fn flips_to_degrade(&self) -> f64 {
        self.mean(|r| r.flips_to_degrade.unwrap_or(r.flips_landed) as f64)
    }

    pub fn censored(&self) -> usize {
        self.rows.iter().filter(|r| r.flips_to_degrade.is_none()).count()
    }
}

/// One attack per (value, replicate), in parallel; points sorted by value.
pub fn run_sweep(opts: &RunOptions) -> Result<Vec<SweepPoint>, HarnessError> {
    let cfg = &opts.config;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| HarnessError::Config("missing [sweep] section".into()))?;
    let reps: Vec<u64> = (0..sweep.replicates).map(|r| opts.seed + r).collect();
    let rounds = match sweep.axis {
        SweepAxis::SbRounds => cfg.profile.rounds.max(*sweep.values.last().expect("nonempty") as usize),
        _ => cfg.profile.rounds,
    };
    let prepared: Vec<(u64, Workload, ProfilingResult)> = reps
        .par_iter()
        .map(|&seed| {
            let w = Workload::load(cfg, seed)?;
            let p = w.profile(rounds.max(1))?;
            Ok((seed, w, p))
        })
        .collect::<Result<_, HarnessError>>()?;
    let jobs: Vec<(u64, usize)> = sweep
        .values
        .iter()
        .flat_map(|&v| (0..prepared.len()).map(move |i| (v, i)))
        .collect();
    let rows: Vec<(u64, ReportRow)> = jobs
        .par_iter()
        .map(|&(v, i)| {
            let (seed, work, prof) = &prepared[i];
            let mut c = cfg.clone();
            match sweep.axis {
                SweepAxis::Sb => c.profile.sb_prefix = Some(v as usize),
                SweepAxis::SbRounds => c.profile.sb_rounds = Some(v as usize),
                SweepAxis::TRh => c.timing.t_rh = v,
            }
            c.validate()?;
            let secured = if c.defender.kind == "none" {
                Vec::new()
            } else {
                secured_bits(&c, prof)?
            };
            let plan = (c.attacker.kind == "semi_whitebox").then(|| AttackPlan {
                flips: prof.rounds[0].clone(),
                stop: work.stop,
            });
            let name = format!("{}={v}", sweep.axis.as_str());
            let r = run_scenario(&c, work, &secured, plan.as_ref(), *seed, &name)?;
            Ok((v, r.row))
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(sweep
        .values
        .iter()
        .map(|&v| SweepPoint {
            value: v,
            rows: rows.iter().filter(|(x, _)| *x == v).map(|(_, r)| r.clone()).collect(),
        })
        .collect())
}

/// Sweep plus `sweep.csv`.
pub fn cmd_sweep(opts: &RunOptions) -> Result<Vec<SweepPoint>, HarnessError> {
    let points = run_sweep(opts)?;
    let cfg = &opts.config;
    let sweep = cfg.sweep.as_ref().expect("checked by run_sweep");
    let calibration = cfg
        .analysis
        .calibration
        .as_ref()
        .map(|p| Calibration::load(p))
        .transpose()?;
    let mut rows: Vec<(u64, &str, f64)> = Vec::new();
    for p in &points {
        let v = p.value;
        rows.push((v, "flips_to_degrade", p.flips_to_degrade()));
        rows.push((v, "censored", p.censored() as f64));
        rows.push((v, "flips_landed", p.mean(|r| r.flips_landed as f64)));
        rows.push((v, "flips_attempted", p.mean(|r| r.flips_attempted as f64)));
        rows.push((v, "target_row_flips", p.mean(|r| r.target_row_flips as f64)));
        rows.push((v, "post_attack_accuracy", p.mean(|r| r.post_attack_accuracy)));
        rows.push((v, "secured_bits", p.mean(|r| r.sb as f64)));
        rows.push((v, "target_rows", p.mean(|r| r.target_rows as f64)));
        rows.push((v, "total_swaps", p.mean(|r| r.total_swaps as f64)));
        rows.push((v, "deadline_misses", p.mean(|r| r.deadline_misses as f64)));
        if let (SweepAxis::TRh, Some(c)) = (sweep.axis, &calibration) {
            rows.push((v, "time_to_break_days", c.time_to_break(v)));
        }
    }
    write_file(
        &opts.out.join("sweep.csv"),
        &report::sweep_csv(sweep.axis.as_str(), &rows, &opts.provenance()),
    )?;
    Ok(points)
}

/// Swaps the defense issues in bank 0 over one refresh interval, with
/// `ceil(s_bit / banks)` synthetic target rows spread over its sub-arrays.
pub fn simulated_swaps_per_refresh(p: &SecurityParams, t_rng: Ns) -> Result<u64, HarnessError> {
    let n_s = analysis::rows_per_bank(p);
    let timing = TimingParams {
        t_act: p.t_act,
        t_aap: p.t_aap,
        t_ref: p.t_ref,
        t_rh: p.t_rh,
    };
    timing.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let geometry = DramGeometry::default();
    let per_sub = (geometry.rows_per_subarray - 8) / 3;
    if n_s > u64::from(per_sub * geometry.subarrays_per_bank) {
        return Err(HarnessError::Config(format!(
            "{n_s} rows per bank exceed the cross-check device"
        )));
    }
    let dram = Dram::new(geometry, timing, FlipModel::default())
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let targets: BTreeSet<RowAddr> = (0..n_s as u32)
        .map(|i| {
            let s = i % geometry.subarrays_per_bank;
            RowAddr::new(0, s, 2 + 3 * (i / geometry.subarrays_per_bank))
        })
        .collect();
    let profile =
        ProtectionProfile::with_tail_reserved(targets, BTreeSet::new(), geometry.rows_per_subarray, 1);
    let mut core = SimCore::new(dram, AddressMap::default());
    let dcfg = DefenseConfig {
        t_rng,
        ..DefenseConfig::default()
    };
    let defense = defense::build(&dcfg, &profile, &mut core)?;
    let mut sim = Simulation::new(core, defense);
    sim.advance_to(p.t_ref)?;
    Ok(sim
        .defense()
        .swaps()
        .iter()
        .filter(|s| s.t1 < p.t_ref)
        .count() as u64)
}

/// Closed-form quantities for `p`, plus the simulated cross-check when asked.
pub fn analyze(
    p: &SecurityParams,
    calibration: Option<&Calibration>,
    t_rng: Ns,
    cross_check: bool,
) -> Result<Vec<(String, String)>, HarnessError> {
    let mut rows = vec![
        ("t_act_ns".to_string(), p.t_act.to_string()),
        ("t_aap_ns".into(), p.t_aap.to_string()),
        ("t_swap_ns".into(), p.t_swap().to_string()),
        ("t_rh".into(), p.t_rh.to_string()),
        ("t_ref_ns".into(), p.t_ref.to_string()),
        ("s_bit".into(), p.s_bit.to_string()),
        ("banks".into(), p.banks.to_string()),
        ("rows_per_bank".into(), analysis::rows_per_bank(p).to_string()),
        ("window_time_ns".into(), analysis::window_time(p).to_string()),
        ("swaps_per_refresh".into(), analysis::swaps_per_refresh(p)?.to_string()),
        (
            "max_swaps_per_window".into(),
            analysis::max_swaps_per_window(p.t_act, p.t_aap, p.t_rh).to_string(),
        ),
    ];
    if let Some(c) = calibration {
        let days = analysis::time_to_break(p, c.flips_needed, c.windows_per_flip);
        rows.push(("flips_needed".into(), c.flips_needed.to_string()));
        rows.push(("time_to_break_days".into(), report::fmt_f(days)));
    }
    if cross_check {
        let sim = simulated_swaps_per_refresh(p, t_rng)?;
        rows.push(("simulated_swaps_per_refresh".into(), sim.to_string()));
    }
    Ok(rows)
}

/// Prints the analysis table and writes `analysis.csv`.
pub fn cmd_analyze(opts: &RunOptions) -> Result<String, HarnessError> {
    let cfg = &opts.config;
    let calibration = cfg
        .analysis
        .calibration
        .as_ref()
        .map(|p| Calibration::load(p))
        .transpose()?;
    let rows = analyze(
        &cfg.security_params(),
        calibration.as_ref(),
        cfg.defender.t_rng,
        cfg.analysis.cross_check,
    )?;
    write_file(&opts.out.join("analysis.csv"), &report::kv_csv(&rows, &opts.provenance()))?;
    let cells: Vec<Vec<String>> = rows.into_iter().map(|(k, v)| vec![k, v]).collect();
    Ok(report::aligned(&["quantity".into(), "value".into()], &cells))
}

/// Plain-text summary of every report CSV in the output directory.
pub fn cmd_report(opts: &RunOptions) -> Result<String, HarnessError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&opts.out)
        .map_err(|e| io(&opts.out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    let mut out = String::new();
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| io(&f, e))?;
        let Some((magic, header, rows)) = report::parse_csv(&text) else {
            continue;
        };
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(out, "== {name} ({})", magic.trim_start_matches("# "));
        out.push_str(&report::aligned(&header, &rows));
        out.push('\n');
    }
    write_file(&opts.out.join("summary.txt"), &out)?;
    Ok(out)
}
