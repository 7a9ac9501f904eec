//! Defense strategies. Each one implements [`Defense`] and is registered by
//! name in [`REGISTRY`]; the harness picks one from the scenario config.

mod baseline;
mod victim;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dram::{Ns, RowAddr};
use crate::sim::{SimCore, SimError};

pub use baseline::AggressorSwap;
pub use victim::{DeadlineMiss, VictimSwap};

pub trait Defense: Send {
    fn name(&self) -> &'static str;

    /// Performs all work that starts before `limit`.
    fn run_until(&mut self, core: &mut SimCore, limit: Ns) -> Result<(), SimError>;

    /// Observes an attacker activation of `physical` at `time`.
    fn on_activate(&mut self, _core: &mut SimCore, _physical: RowAddr, _time: Ns) -> Result<(), SimError> {
        Ok(())
    }

    /// Attacker-side row address to physical row.
    fn translate(&self, logical: RowAddr) -> RowAddr {
        logical
    }

    fn logical_of(&self, physical: RowAddr) -> RowAddr {
        physical
    }

    fn swaps(&self) -> &[SwapRecord];

    fn deadline_misses(&self) -> &[DeadlineMiss] {
        &[]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapRecord {
    pub swap_id: u64,
    /// Row the protected (or aggressor) content left.
    pub target_row: RowAddr,
    /// Row it moved to.
    pub random_row: RowAddr,
    /// Row copied into the scratch slot by the last step.
    pub non_target_row: Option<RowAddr>,
    pub t1: Ns,
    pub t2: Ns,
    pub t3: Ns,
    pub t4: Ns,
}

pub const SWAP_LOG_HEADER: &str = "swap_id\ttarget_row\trandom_row\tnon_target_row\tt1\tt2\tt3\tt4";

pub fn swap_log_tsv(records: &[SwapRecord]) -> String {
    let mut s = String::from(SWAP_LOG_HEADER);
    s.push('\n');
    for r in records {
        let nt = r.non_target_row.map_or("-".to_string(), |a| a.to_string());
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.swap_id, r.target_row, r.random_row, nt, r.t1, r.t2, r.t3, r.t4
        );
    }
    s
}

/// Rows the defender is responsible for, by initial address.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProtectionProfile {
    pub target_rows: BTreeSet<RowAddr>,
    pub non_target_rows: BTreeSet<RowAddr>,
    /// Scratch rows per `(bank, subarray)`.
    pub reserved_rows: BTreeMap<(u32, u32), Vec<RowAddr>>,
}

impl ProtectionProfile {
    /// Reserves the last `per_subarray` rows of every sub-array that holds a
    /// target or non-target row.
    pub fn with_tail_reserved(
        target_rows: BTreeSet<RowAddr>,
        non_target_rows: BTreeSet<RowAddr>,
        rows_per_subarray: u32,
        per_subarray: u32,
    ) -> Self {
        let mut reserved_rows = BTreeMap::new();
        for a in target_rows.iter().chain(&non_target_rows) {
            reserved_rows.entry((a.bank, a.subarray)).or_insert_with(|| {
                (rows_per_subarray.saturating_sub(per_subarray)..rows_per_subarray)
                    .map(|r| RowAddr::new(a.bank, a.subarray, r))
                    .collect()
            });
        }
        Self {
            target_rows,
            non_target_rows,
            reserved_rows,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let reserved: BTreeSet<RowAddr> = self.reserved_rows.values().flatten().copied().collect();
        if let Some(a) = self.target_rows.intersection(&self.non_target_rows).next() {
            return Err(SimError::Config(format!("{a} is both target and non-target")));
        }
        for a in self.target_rows.iter().chain(&self.non_target_rows) {
            if reserved.contains(a) {
                return Err(SimError::Config(format!("protected row {a} is reserved")));
            }
        }
        for a in &self.target_rows {
            if self
                .reserved_rows
                .get(&(a.bank, a.subarray))
                .is_none_or(Vec::is_empty)
            {
                return Err(SimError::Config(format!(
                    "no reserved row in bank {} sub-array {}",
                    a.bank, a.subarray
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub kind: String,
    /// Overlap each swap's first step with the previous swap's last step.
    pub pipeline: bool,
    /// Random-number generation latency paid once per batch (pipelined) or
    /// once per swap.
    pub t_rng: Ns,
    pub reserved_per_subarray: u32,
    /// Round period override; default is the per-bank window time.
    pub period: Option<Ns>,
    /// Aggressor baseline: activations after which the aggressor is moved.
    /// Default `t_rh / 6`.
    pub swap_threshold: Option<u64>,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: "victim_swap".into(),
            pipeline: true,
            t_rng: 10,
            reserved_per_subarray: 1,
            period: None,
            swap_threshold: None,
            seed: 0,
        }
    }
}

type Builder = fn(&DefenseConfig, &ProtectionProfile, &mut SimCore) -> Result<Box<dyn Defense>, SimError>;

pub const REGISTRY: &[(&str, Builder)] = &[
    ("none", |_, _, _| Ok(Box::new(NoDefense))),
    ("victim_swap", |c, p, core| Ok(Box::new(VictimSwap::new(c, p, core)?))),
    ("aggressor_baseline", |c, p, core| {
        Ok(Box::new(AggressorSwap::new(c, p, core)?))
    }),
];

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build(
    config: &DefenseConfig,
    profile: &ProtectionProfile,
    core: &mut SimCore,
) -> Result<Box<dyn Defense>, SimError> {
    let (_, b) = REGISTRY
        .iter()
        .find(|(n, _)| *n == config.kind)
        .ok_or_else(|| {
            SimError::Config(format!(
                "unknown defender {:?}; expected one of {:?}",
                config.kind,
                names()
            ))
        })?;
    b(config, profile, core)
}

#[derive(Debug, Default)]
pub struct NoDefense;

impl Defense for NoDefense {
    fn name(&self) -> &'static str {
        "none"
    }

    fn run_until(&mut self, _core: &mut SimCore, _limit: Ns) -> Result<(), SimError> {
        Ok(())
    }

    fn swaps(&self) -> &[SwapRecord] {
        &[]
    }
}
