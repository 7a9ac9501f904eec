//! Progressive bit search and multi-round vulnerable-bit profiling.
//!
//! Each search iteration ranks loss-ascending bit flips per layer by their
//! first-order magnitude (intra-layer step), flips each layer's best
//! candidate on the search copy, measures the resulting loss exactly, and
//! commits the candidate with the largest post-flip loss (inter-layer step).

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::qnn::{
    eligible_bits, sort_ranked, Batch, BitGradient, BitLocation, FlipDirection, QnnError,
    QuantizedModel,
};

#[derive(Debug, Error)]
pub enum BfaError {
    #[error("no eligible bits remain after {} committed flips", partial.flips.len())]
    Exhausted { partial: AttackPlan },
    #[error("budget {requested} exceeds the model's {total} bits")]
    Budget { requested: usize, total: usize },
    #[error("profiling needs at least one round")]
    NoRounds,
    #[error("malformed bit record on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Qnn(#[from] QnnError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopCriterion {
    /// Stop once accuracy on the attack batch is at or below this value.
    pub accuracy_threshold: Option<f64>,
    /// Stop once this many flips are planned.
    pub flip_budget: Option<usize>,
}

impl StopCriterion {
    /// Accuracy within `margin` of random guessing. A collapsed network
    /// scores its majority class's share of the batch, which is rarely
    /// exactly `1 / num_classes`, so an exact random-guess target can be
    /// unreachable.
    pub fn near_random_guess(num_classes: usize, margin: f64) -> Self {
        Self {
            accuracy_threshold: Some(1.0 / num_classes as f64 + margin),
            flip_budget: None,
        }
    }

    pub fn budget(n: usize) -> Self {
        Self {
            accuracy_threshold: None,
            flip_budget: Some(n),
        }
    }

    pub fn with_budget(self, n: usize) -> Self {
        Self {
            flip_budget: Some(n),
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlannedFlip {
    pub location: BitLocation,
    pub direction: FlipDirection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackPlan {
    pub flips: Vec<PlannedFlip>,
    pub stop: StopCriterion,
}

impl AttackPlan {
    pub fn len(&self) -> usize {
        self.flips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flips.is_empty()
    }

    pub fn locations(&self) -> impl Iterator<Item = BitLocation> + '_ {
        self.flips.iter().map(|f| f.location)
    }

    /// Applies the first `n` flips to `model`.
    pub fn apply_prefix(&self, model: &mut QuantizedModel, n: usize) {
        for f in self.flips.iter().take(n) {
            model.flip_bit(f.location);
        }
    }

    pub fn to_text(&self) -> String {
        write_records(std::iter::once(&self.flips[..]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfilingResult {
    pub rounds: Vec<Vec<PlannedFlip>>,
}

impl ProfilingResult {
    /// Priority-ordered union of all rounds (round first, then rank).
    pub fn secured_bits(&self) -> Vec<BitLocation> {
        let mut seen = HashSet::new();
        self.rounds
            .iter()
            .flatten()
            .map(|f| f.location)
            .filter(|l| seen.insert(*l))
            .collect()
    }

    pub fn round_sizes(&self) -> Vec<usize> {
        self.rounds.iter().map(Vec::len).collect()
    }

    pub fn to_text(&self) -> String {
        write_records(self.rounds.iter().map(Vec::as_slice))
    }

    pub fn from_text(text: &str) -> Result<Self, BfaError> {
        let mut rounds: Vec<Vec<PlannedFlip>> = Vec::new();
        for (line_no, rec) in parse_records(text)? {
            if rec.round == 0 {
                return Err(BfaError::Parse {
                    line: line_no,
                    reason: "rounds start at 1".into(),
                });
            }
            while rounds.len() < rec.round {
                rounds.push(Vec::new());
            }
            let r = &mut rounds[rec.round - 1];
            if rec.rank != r.len() + 1 {
                return Err(BfaError::Parse {
                    line: line_no,
                    reason: format!("rank {} out of order", rec.rank),
                });
            }
            r.push(rec.flip);
        }
        Ok(Self { rounds })
    }
}

pub const BITS_FORMAT_HEADER: &str = "# rowguard-bits v1";
const BITS_COLUMNS: &str = "round\trank\tlayer\tweight_index\tbit\tdirection";

fn write_records<'a>(rounds: impl Iterator<Item = &'a [PlannedFlip]>) -> String {
    let mut s = String::new();
    s.push_str(BITS_FORMAT_HEADER);
    s.push('\n');
    s.push_str(BITS_COLUMNS);
    s.push('\n');
    for (r, flips) in rounds.enumerate() {
        for (k, f) in flips.iter().enumerate() {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r + 1,
                k + 1,
                f.location.layer,
                f.location.weight_index,
                f.location.bit,
                f.direction.as_str()
            );
        }
    }
    s
}

struct Record {
    round: usize,
    rank: usize,
    flip: PlannedFlip,
}

fn parse_records(text: &str) -> Result<Vec<(usize, Record)>, BfaError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == BITS_FORMAT_HEADER => {}
        _ => {
            return Err(BfaError::Parse {
                line: 1,
                reason: format!("expected {BITS_FORMAT_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.is_empty() || line.starts_with('#') || line == BITS_COLUMNS {
            continue;
        }
        let err = |reason: &str| BfaError::Parse {
            line: line_no,
            reason: reason.to_string(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(err("expected 6 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
        let bit = num(f[4])?;
        if bit > 7 {
            return Err(err("bit out of range"));
        }
        out.push((
            line_no,
            Record {
                round: num(f[0])?,
                rank: num(f[1])?,
                flip: PlannedFlip {
                    location: BitLocation::new(num(f[2])?, num(f[3])?, bit as u8),
                    direction: FlipDirection::parse(f[5]).ok_or_else(|| err("bad direction"))?,
                },
            },
        ));
    }
    Ok(out)
}

/// Parses a single-round plan written by [`AttackPlan::to_text`].
pub fn plan_from_text(text: &str, stop: StopCriterion) -> Result<AttackPlan, BfaError> {
    let p = ProfilingResult::from_text(text)?;
    Ok(AttackPlan {
        flips: p.rounds.into_iter().flatten().collect(),
        stop,
    })
}

fn reached(model: &QuantizedModel, batch: &Batch, stop: &StopCriterion, planned: usize) -> Result<bool, QnnError> {
    if stop.flip_budget.is_some_and(|b| planned >= b) {
        return Ok(true);
    }
    match stop.accuracy_threshold {
        Some(th) => Ok(model.accuracy(batch)? <= th),
        None => Ok(false),
    }
}

/// Per-layer candidate lists, best first.
fn ranked_by_layer(
    model: &QuantizedModel,
    batch: &Batch,
    excluded: &HashSet<BitLocation>,
) -> Result<(f64, Vec<Vec<BitGradient>>), QnnError> {
    let (loss, grads) = model.loss_and_weight_grad(batch)?;
    let mut out = Vec::with_capacity(grads.len());
    for (li, (l, g)) in model.layers().iter().zip(&grads).enumerate() {
        let mut v: Vec<BitGradient> = l
            .codes
            .iter()
            .zip(g)
            .enumerate()
            .flat_map(|(k, (&c, &gw))| eligible_bits(li, k, c, gw, l.scale))
            .filter(|b| !excluded.contains(&b.location))
            .collect();
        sort_ranked(&mut v);
        out.push(v);
    }
    Ok((loss, out))
}

/// Runs the progressive bit search on `model`, committing every chosen flip
/// to it. Bits in `skip` are never chosen.
pub fn bfa_search(
    model: &mut QuantizedModel,
    batch: &Batch,
    skip: &HashSet<BitLocation>,
    stop: StopCriterion,
) -> Result<AttackPlan, BfaError> {
    let mut plan = AttackPlan {
        flips: Vec::new(),
        stop,
    };
    let mut excluded = skip.clone();
    while !reached(model, batch, &stop, plan.flips.len())? {
        let (loss, per_layer) = ranked_by_layer(model, batch, &excluded)?;
        let widest = per_layer.iter().map(Vec::len).max().unwrap_or(0);
        if widest == 0 {
            return Err(BfaError::Exhausted { partial: plan });
        }
        // top-1 per layer; widen only if no candidate keeps the loss from falling
        let mut depth = 1;
        let winner = loop {
            let mut best: Option<(f64, &BitGradient)> = None;
            for cands in &per_layer {
                for c in cands.iter().take(depth) {
                    model.flip_bit(c.location);
                    let l = model.loss(batch)?;
                    model.flip_bit(c.location);
                    if best.is_none_or(|(bl, _)| l > bl) {
                        best = Some((l, c));
                    }
                }
            }
            match best {
                Some((l, c)) if l >= loss => break Some(*c),
                _ if depth >= widest => break None,
                _ => depth = (depth * 2).min(widest),
            }
        };
        let Some(w) = winner else {
            return Err(BfaError::Exhausted { partial: plan });
        };
        model.flip_bit(w.location);
        excluded.insert(w.location);
        plan.flips.push(PlannedFlip {
            location: w.location,
            direction: w.ascent_flip_direction,
        });
    }
    Ok(plan)
}

/// Repeats the search `rounds` times; round `c` skips every bit found in
/// rounds `1..c`. The model is restored bit-exactly after each round.
pub fn profile_vulnerable_bits(
    model: &mut QuantizedModel,
    batch: &Batch,
    stop: StopCriterion,
    rounds: usize,
) -> Result<ProfilingResult, BfaError> {
    if rounds == 0 {
        return Err(BfaError::NoRounds);
    }
    let mut result = ProfilingResult { rounds: Vec::new() };
    let mut skip = HashSet::new();
    for _ in 0..rounds {
        let res = bfa_search(model, batch, &skip, stop);
        let plan = match res {
            Ok(p) => p,
            Err(BfaError::Exhausted { partial }) => {
                revert(model, &partial);
                return Err(BfaError::Exhausted { partial });
            }
            Err(e) => return Err(e),
        };
        revert(model, &plan);
        skip.extend(plan.locations());
        result.rounds.push(plan.flips);
    }
    Ok(result)
}

fn revert(model: &mut QuantizedModel, plan: &AttackPlan) {
    for f in plan.flips.iter().rev() {
        model.flip_bit(f.location);
    }
}

/// `n` distinct uniformly drawn bits of a model with the given per-layer
/// weight counts.
pub fn random_attack_plan(
    layer_weights: &[usize],
    n: usize,
    seed: u64,
) -> Result<AttackPlan, BfaError> {
    let total: usize = layer_weights.iter().sum::<usize>() * 8;
    if n > total {
        return Err(BfaError::Budget {
            requested: n,
            total,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = sample(&mut rng, total, n).into_vec();
    let flips = idx
        .into_iter()
        .map(|g| {
            let (mut w, bit) = (g / 8, (g % 8) as u8);
            let mut layer = 0;
            while w >= layer_weights[layer] {
                w -= layer_weights[layer];
                layer += 1;
            }
            PlannedFlip {
                location: BitLocation::new(layer, w, bit),
                direction: if rng.gen::<bool>() {
                    FlipDirection::ZeroToOne
                } else {
                    FlipDirection::OneToZero
                },
            }
        })
        .collect();
    Ok(AttackPlan {
        flips,
        stop: StopCriterion::budget(n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_plan_is_seeded_and_complete() {
        let shape = [3, 2];
        let a = random_attack_plan(&shape, 7, 11).unwrap();
        assert_eq!(a, random_attack_plan(&shape, 7, 11).unwrap());
        let all = random_attack_plan(&shape, 40, 3).unwrap();
        let uniq: HashSet<_> = all.locations().collect();
        assert_eq!(uniq.len(), 40);
        assert!(uniq.iter().all(|l| l.layer < 2 && l.weight_index < shape[l.layer] && l.bit < 8));
        assert!(matches!(
            random_attack_plan(&shape, 41, 0),
            Err(BfaError::Budget { .. })
        ));
    }

    #[test]
    fn text_format_round_trip() {
        let f = |l, k, b| PlannedFlip {
            location: BitLocation::new(l, k, b),
            direction: FlipDirection::OneToZero,
        };
        let p = ProfilingResult {
            rounds: vec![vec![f(0, 3, 7), f(1, 2, 6)], vec![f(0, 9, 7)]],
        };
        let text = p.to_text();
        assert!(text.starts_with(BITS_FORMAT_HEADER));
        assert!(text.contains("2\t1\t0\t9\t7\t1to0\n"));
        assert_eq!(ProfilingResult::from_text(&text).unwrap(), p);
        assert!(ProfilingResult::from_text("1\t1\t0\t0\t0\t0to1\n").is_err());
        let bad = format!("{BITS_FORMAT_HEADER}\n1\t1\t0\t0\t9\t0to1\n");
        assert!(ProfilingResult::from_text(&bad).is_err());
    }
}
