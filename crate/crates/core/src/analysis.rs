//! Closed-form timing and security formulas.
//!
//! Integer variants round the way hardware does: protected rows per bank are
//! rounded up, completed windows per refresh interval are rounded down. The
//! `*_real` variants keep the plain ratios and are what the calibration fit
//! uses.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::Ns;

pub const NS_PER_DAY: f64 = 86_400e9;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("window time is zero")]
    Division,
    #[error("calibration: {0}")]
    Calibration(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityParams {
    pub s_bit: u64,
    pub banks: u64,
    pub t_act: Ns,
    pub t_aap: Ns,
    pub t_rh: u64,
    pub t_ref: Ns,
}

impl Default for SecurityParams {
    fn default() -> Self {
        Self {
            s_bit: 0,
            banks: 16,
            t_act: 45,
            t_aap: 90,
            t_rh: 4800,
            t_ref: 64_000_000,
        }
    }
}

impl SecurityParams {
    pub fn t_swap(&self) -> Ns {
        3 * self.t_aap
    }
}

/// N_s: protected rows per bank.
pub fn rows_per_bank(p: &SecurityParams) -> u64 {
    p.s_bit.div_ceil(p.banks.max(1))
}

pub fn rows_per_bank_real(p: &SecurityParams) -> f64 {
    p.s_bit as f64 / p.banks.max(1) as f64
}

/// T_n: one hammer threshold window plus the swaps that fit into it.
pub fn window_time(p: &SecurityParams) -> Ns {
    p.t_act * p.t_rh + p.t_swap() * rows_per_bank(p)
}

pub fn window_time_real(p: &SecurityParams) -> f64 {
    (p.t_act * p.t_rh) as f64 + p.t_swap() as f64 * rows_per_bank_real(p)
}

/// N: swaps issued per bank in one refresh interval.
pub fn swaps_per_refresh(p: &SecurityParams) -> Result<u64, AnalysisError> {
    let tn = window_time(p);
    if tn == 0 {
        return Err(AnalysisError::Division);
    }
    Ok(p.t_ref / tn * rows_per_bank(p))
}

pub fn swaps_per_refresh_real(p: &SecurityParams) -> Result<f64, AnalysisError> {
    let tn = window_time_real(p);
    if tn == 0.0 {
        return Err(AnalysisError::Division);
    }
    Ok(p.t_ref as f64 / tn * rows_per_bank_real(p))
}

pub fn max_swaps_per_window(t_act: Ns, t_aap: Ns, t_rh: u64) -> u64 {
    let t_swap = 3 * t_aap;
    if t_swap == 0 {
        return 0;
    }
    t_act * t_rh / t_swap
}

/// Expected days for an adaptive attacker to land `flips_needed` targeted
/// flips: each flip costs `windows_per_flip` exhausted windows of `T_n`.
pub fn time_to_break(p: &SecurityParams, flips_needed: u64, windows_per_flip: f64) -> f64 {
    flips_needed as f64 * windows_per_flip * window_time_real(p) / NS_PER_DAY
}

/// Fitted constants for [`time_to_break`], stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub format_version: u32,
    pub s_bit: u64,
    pub banks: u64,
    pub t_act: Ns,
    pub t_aap: Ns,
    pub t_ref: Ns,
    pub t_rng: Ns,
    pub flips_needed: u64,
    pub windows_per_flip: f64,
    /// Anchor the fit reproduces: `target_days` at `target_t_rh`.
    pub target_t_rh: u64,
    pub target_days: f64,
    /// Flip budgets of the attack at each threshold in `budget_t_rh`.
    pub budget_t_rh: Vec<u64>,
    pub bfa_budgets: Vec<u64>,
}

impl Calibration {
    pub fn from_toml(text: &str) -> Result<Self, AnalysisError> {
        let c: Self = toml::from_str(text).map_err(|e| AnalysisError::Calibration(e.to_string()))?;
        if c.format_version != 1 {
            return Err(AnalysisError::Calibration(format!(
                "unsupported format_version {}",
                c.format_version
            )));
        }
        if c.budget_t_rh.len() != c.bfa_budgets.len() {
            return Err(AnalysisError::Calibration(
                "budget_t_rh and bfa_budgets differ in length".into(),
            ));
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AnalysisError::Calibration(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn params(&self, t_rh: u64) -> SecurityParams {
        SecurityParams {
            s_bit: self.s_bit,
            banks: self.banks,
            t_act: self.t_act,
            t_aap: self.t_aap,
            t_rh,
            t_ref: self.t_ref,
        }
    }

    pub fn time_to_break(&self, t_rh: u64) -> f64 {
        time_to_break(&self.params(t_rh), self.flips_needed, self.windows_per_flip)
    }

    /// Solves for the `windows_per_flip` that puts `target_t_rh` exactly on
    /// `target_days`.
    pub fn fit_windows_per_flip(&self) -> f64 {
        let per_window = time_to_break(&self.params(self.target_t_rh), self.flips_needed, 1.0);
        self.target_days / per_window
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s_bit: u64, banks: u64) -> SecurityParams {
        SecurityParams {
            s_bit,
            banks,
            ..Default::default()
        }
    }

    #[test]
    fn rows_per_bank_rounds_up() {
        assert_eq!(rows_per_bank(&p(16, 16)), 1);
        assert_eq!(rows_per_bank(&p(0, 16)), 0);
        assert_eq!(rows_per_bank(&p(24_000, 16)), 1500);
        assert_eq!(rows_per_bank(&p(17, 16)), 2);
    }

    #[test]
    fn window_and_swap_counts() {
        let mut q = p(1600, 16);
        assert_eq!(rows_per_bank(&q), 100);
        assert_eq!(window_time(&q), 243_000);
        assert_eq!(swaps_per_refresh(&q).unwrap(), 26_300);
        q.s_bit = 0;
        assert_eq!(window_time(&q), 216_000);
        assert_eq!(swaps_per_refresh(&q).unwrap(), 0);
        let zero = SecurityParams {
            t_act: 0,
            t_aap: 0,
            ..p(0, 1)
        };
        assert_eq!(swaps_per_refresh(&zero), Err(AnalysisError::Division));
    }

    #[test]
    fn refresh_equal_to_window_gives_one_round() {
        let mut q = p(48, 16);
        q.t_ref = window_time(&q);
        assert_eq!(swaps_per_refresh(&q).unwrap(), rows_per_bank(&q));
    }

    #[test]
    fn max_swaps() {
        assert_eq!(max_swaps_per_window(45, 90, 4800), 800);
        assert_eq!(max_swaps_per_window(45, 90, 0), 0);
        assert_eq!(max_swaps_per_window(45, 90, 9600), 1600);
    }

    #[test]
    fn time_to_break_basics() {
        let q = p(24_000, 16);
        assert_eq!(time_to_break(&q, 0, 3.0), 0.0);
        let mut q2 = q;
        q2.t_rh *= 2;
        assert!(time_to_break(&q2, 5, 3.0) > time_to_break(&q, 5, 3.0));
        assert!(time_to_break(&q, 6, 3.0) > time_to_break(&q, 5, 3.0));
    }
}
