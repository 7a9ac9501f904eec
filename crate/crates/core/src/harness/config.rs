//! Scenario configuration (TOML, `format_version = 1`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::analysis::SecurityParams;
use crate::attack::{AttackParams, LayoutParams};
use crate::defense::DefenseConfig;
use crate::dram::{DramGeometry, FlipMode, Ns, TimingParams};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub format_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub geometry: DramGeometry,
    #[serde(default)]
    pub timing: TimingParams,
    #[serde(default)]
    pub flip: FlipSection,
    pub model: ModelSection,
    #[serde(default)]
    pub layout: LayoutParams,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub defender: DefenseConfig,
    #[serde(default)]
    pub attacker: AttackerSection,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlipSection {
    pub mode: FlipMode,
    pub saturate: bool,
}

impl Default for FlipSection {
    fn default() -> Self {
        Self {
            mode: FlipMode::AttackerPrecise,
            saturate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    #[serde(default = "default_attack_batch")]
    pub attack_batch: usize,
    /// Degradation criterion: attack-batch accuracy at most
    /// `1 / classes + margin`.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn default_attack_batch() -> usize {
    128
}

fn default_margin() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub rounds: usize,
    /// Protect only the first `sb_prefix` secured bits.
    pub sb_prefix: Option<usize>,
    /// Protect the bits of the first `sb_rounds` rounds.
    pub sb_rounds: Option<usize>,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            rounds: 4,
            sb_prefix: None,
            sb_rounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackerSection {
    pub kind: String,
    /// Horizon in refresh intervals, used when `horizon_ns` is absent.
    pub refresh_intervals: u64,
    pub horizon_ns: Option<Ns>,
    pub activation_rate: Option<f64>,
    #[serde(flatten)]
    pub params: AttackParams,
}

impl Default for AttackerSection {
    fn default() -> Self {
        Self {
            kind: "whitebox".into(),
            refresh_intervals: 3,
            horizon_ns: None,
            activation_rate: None,
            params: AttackParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Secured-bit prefix length.
    Sb,
    /// Number of profiling rounds whose bits are protected.
    SbRounds,
    TRh,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Sb => "sb",
            SweepAxis::SbRounds => "sb_rounds",
            SweepAxis::TRh => "t_rh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<u64>,
    /// Independent replicates per value (seeds `seed..seed + replicates`).
    #[serde(default = "one")]
    pub replicates: u64,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub s_bit: u64,
    pub banks: u64,
    pub calibration: Option<PathBuf>,
    /// Also simulate one refresh interval and count swaps.
    pub cross_check: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            s_bit: 0,
            banks: 16,
            calibration: None,
            cross_check: false,
        }
    }
}

impl ScenarioConfig {
    /// Parses and validates a config; relative paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        if !first.trim_start().starts_with("format_version") {
            return Err(HarnessError::Config(
                "first line must be `format_version = 1`".into(),
            ));
        }
        let mut c: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if c.format_version != CONFIG_VERSION {
            return Err(HarnessError::Config(format!(
                "unsupported format_version {}",
                c.format_version
            )));
        }
        for p in [&mut c.model.checkpoint, &mut c.model.dataset] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = c.analysis.calibration.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<(Self, String), HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok((Self::from_toml(&text, base)?, text))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |e: String| HarnessError::Config(e);
        self.geometry.validate().map_err(|e| cfg(e.to_string()))?;
        self.timing.validate().map_err(|e| cfg(e.to_string()))?;
        if self.profile.rounds == 0 {
            return Err(cfg("profile.rounds must be at least 1".into()));
        }
        if self.model.attack_batch == 0 {
            return Err(cfg("model.attack_batch must be positive".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(cfg("sweep.values is empty".into()));
            }
            if s.values.windows(2).any(|w| w[0] >= w[1]) {
                return Err(cfg("sweep.values must be strictly increasing".into()));
            }
            if s.replicates == 0 {
                return Err(cfg("sweep.replicates must be at least 1".into()));
            }
        }
        for p in [&self.model.checkpoint, &self.model.dataset] {
            if !p.exists() {
                return Err(cfg(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> Ns {
        self.attacker
            .horizon_ns
            .unwrap_or(self.attacker.refresh_intervals * self.timing.t_ref)
    }

    pub fn security_params(&self) -> SecurityParams {
        SecurityParams {
            s_bit: self.analysis.s_bit,
            banks: self.analysis.banks,
            t_act: self.timing.t_act,
            t_aap: self.timing.t_aap,
            t_rh: self.timing.t_rh,
            t_ref: self.timing.t_ref,
        }
    }
}

/// Hash of the config text and the effective seed, carried in every report.
pub fn config_hash(text: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(seed.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}
