use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RowAddr;

/// How the column of an induced flip is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipMode {
    /// The attacker designates the vulnerable column of each victim row it
    /// aims at. Rows without a designation fall back to a seeded draw.
    AttackerPrecise,
    /// Every flip lands on a uniformly drawn column.
    UniformRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipModel {
    pub mode: FlipMode,
    pub rng_seed: u64,
    /// Emit at most one flip between two charge restores of a row.
    #[serde(default)]
    pub saturate: bool,
}

impl Default for FlipModel {
    fn default() -> Self {
        Self {
            mode: FlipMode::AttackerPrecise,
            rng_seed: 0,
            saturate: false,
        }
    }
}

/// Runtime state behind a [`FlipModel`].
#[derive(Debug, Clone)]
pub(crate) struct FlipInjector {
    pub(crate) model: FlipModel,
    rng: ChaCha8Rng,
    designated: HashMap<RowAddr, u32>,
}

impl FlipInjector {
    pub(crate) fn new(model: FlipModel) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(model.rng_seed),
            designated: HashMap::new(),
        }
    }

    pub(crate) fn designate(&mut self, row: RowAddr, column: u32) {
        self.designated.insert(row, column);
    }

    pub(crate) fn clear(&mut self, row: RowAddr) {
        self.designated.remove(&row);
    }

    pub(crate) fn column_for(&mut self, row: RowAddr, row_width: u32) -> u32 {
        match self.model.mode {
            FlipMode::AttackerPrecise => match self.designated.get(&row) {
                Some(&c) => c,
                None => self.rng.gen_range(0..row_width),
            },
            FlipMode::UniformRandom => self.rng.gen_range(0..row_width),
        }
    }
}
