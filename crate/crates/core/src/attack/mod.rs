//! Address mapping, model installation and the executable threat models.

mod map;

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bfa::{bfa_search, AttackPlan, BfaError, StopCriterion};
use crate::dram::{DramGeometry, Ns, RowAddr, RowRole};
use crate::qnn::{Batch, BitLocation, QuantizedModel};
use crate::sim::{Activation, SimError, Simulation};

pub use map::{AddressMap, LayoutParams, Relocation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackerCapabilities {
    pub can_read_map_updates: bool,
    pub knows_defense: bool,
    /// Activations per second; `None` issues one per `t_act`.
    pub activation_rate: Option<f64>,
}

impl AttackerCapabilities {
    pub fn semi_whitebox() -> Self {
        Self {
            can_read_map_updates: false,
            knows_defense: false,
            activation_rate: None,
        }
    }

    pub fn whitebox() -> Self {
        Self {
            can_read_map_updates: true,
            knows_defense: true,
            activation_rate: None,
        }
    }

    fn interval(&self, t_act: Ns) -> Ns {
        match self.activation_rate {
            Some(r) if r > 0.0 => t_act.max((1e9 / r).ceil() as Ns),
            _ => t_act,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackParams {
    /// Activations spent on one bit before it counts as failed. Default
    /// `3 * t_rh`.
    pub patience: Option<u64>,
    /// Flips per regenerated plan.
    pub plan_chunk: usize,
    /// Cap on flip attempts.
    pub max_attempts: Option<usize>,
    pub stop_on_success: bool,
    /// Give up on a data row after this many failed attempts on it with no
    /// landed flip. `0` only skips the failed bits themselves.
    pub row_strikes: u32,
    pub seed: u64,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            patience: None,
            plan_chunk: 8,
            max_attempts: None,
            stop_on_success: true,
            row_strikes: 2,
            seed: 0,
        }
    }
}

/// What an attacker works with.
pub struct AttackContext<'a> {
    pub model: &'a QuantizedModel,
    pub attack_batch: &'a Batch,
    pub eval_batch: &'a Batch,
    /// Layout as installed, before any relocation.
    pub original_map: &'a AddressMap,
    /// Offline plan for replaying attackers.
    pub plan: Option<&'a AttackPlan>,
    /// Degradation criterion on the attack batch.
    pub stop: StopCriterion,
    pub horizon: Ns,
    pub caps: AttackerCapabilities,
    pub params: AttackParams,
    /// Keep the logical address of every activation.
    pub record_trace: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LandedFlip {
    pub location: BitLocation,
    pub row: RowAddr,
    pub column: u32,
    pub time: Ns,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackOutcome {
    pub attacker: String,
    pub attempted: usize,
    pub landed: Vec<LandedFlip>,
    pub failed: Vec<BitLocation>,
    /// Weight-bit flips the attacker did not aim at.
    pub collateral: usize,
    /// Flips that hit rows holding target content.
    pub target_row_flips: usize,
    pub activations: u64,
    pub sim_time: Ns,
    pub clean_accuracy: f64,
    pub final_accuracy: f64,
    pub final_attack_accuracy: f64,
    /// Landed flips when the attack batch first met the degradation
    /// criterion.
    pub flips_to_degrade: Option<usize>,
    pub exhausted: bool,
    pub trace: Vec<RowAddr>,
}

pub trait Attacker {
    fn name(&self) -> &'static str;
    fn run(&mut self, sim: &mut Simulation, ctx: &AttackContext) -> Result<AttackOutcome, SimError>;
}

type Builder = fn() -> Box<dyn Attacker>;

pub const REGISTRY: &[(&str, Builder)] = &[
    ("semi_whitebox", || Box::new(SemiWhitebox)),
    ("whitebox", || Box::new(WhiteboxAdaptive)),
    ("random_aggressor", || Box::new(RandomAggressor)),
];

pub fn names() -> Vec<&'static str> {
    REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build(kind: &str) -> Result<Box<dyn Attacker>, SimError> {
    REGISTRY
        .iter()
        .find(|(n, _)| *n == kind)
        .map(|(_, b)| b())
        .ok_or_else(|| {
            SimError::Config(format!(
                "unknown attacker {kind:?}; expected one of {:?}",
                names()
            ))
        })
}

/// Picks the neighbor of `victim` to hammer, preferring a side whose far
/// neighbor holds nothing worth keeping.
fn aggressor_for(
    g: &DramGeometry,
    victim: RowAddr,
    occupied: impl Fn(RowAddr) -> bool,
) -> Option<RowAddr> {
    let mut sides = Vec::with_capacity(2);
    if victim.row > 0 {
        sides.push((RowAddr::new(victim.bank, victim.subarray, victim.row - 1), victim.row.checked_sub(2)));
    }
    if victim.row + 1 < g.rows_per_subarray {
        let far = victim.row + 2;
        sides.push((
            RowAddr::new(victim.bank, victim.subarray, victim.row + 1),
            (far < g.rows_per_subarray).then_some(far),
        ));
    }
    let clean = |(a, far): &(RowAddr, Option<u32>)| {
        !occupied(*a)
            && far.is_none_or(|r| !occupied(RowAddr::new(victim.bank, victim.subarray, r)))
    };
    sides
        .iter()
        .find(|s| clean(s))
        .or_else(|| sides.iter().find(|(a, _)| !occupied(*a)))
        .or(sides.first())
        .map(|(a, _)| *a)
}

struct Run<'a> {
    ctx: &'a AttackContext<'a>,
    interval: Ns,
    next: Ns,
    out: AttackOutcome,
    start_acts: u64,
}

impl<'a> Run<'a> {
    fn new(name: &str, sim: &Simulation, ctx: &'a AttackContext<'a>) -> Result<Self, SimError> {
        let t_act = sim.core.dram.timing().t_act;
        Ok(Self {
            ctx,
            interval: ctx.caps.interval(t_act),
            next: sim.now(),
            start_acts: sim.core.dram.activations(),
            out: AttackOutcome {
                attacker: name.to_string(),
                clean_accuracy: ctx.model.accuracy(ctx.eval_batch).map_err(qnn_err)?,
                ..Default::default()
            },
        })
    }

    /// One activation, or `None` once the horizon is reached.
    fn act(&mut self, sim: &mut Simulation, logical: RowAddr) -> Result<Option<Activation>, SimError> {
        if self.next >= self.ctx.horizon {
            return Ok(None);
        }
        let a = sim.attacker_activate(logical, self.next)?;
        if a.time >= self.ctx.horizon {
            self.next = a.time;
            return Ok(None);
        }
        self.next = a.time + self.interval;
        if self.ctx.record_trace {
            self.out.trace.push(logical);
        }
        Ok(Some(a))
    }

    fn finish(mut self, sim: &mut Simulation) -> Result<AttackOutcome, SimError> {
        let end = self.next.min(self.ctx.horizon).max(sim.now());
        sim.advance_to(end)?;
        let flips = sim.core.weight_flips();
        let aimed: HashSet<(BitLocation, Ns)> =
            self.out.landed.iter().map(|l| (l.location, l.time)).collect();
        self.out.collateral = flips
            .iter()
            .filter(|f| !aimed.contains(&(f.location, f.event.time)))
            .count();
        self.out.target_row_flips = sim
            .core
            .dram
            .flip_log()
            .iter()
            .filter(|e| e.role == RowRole::TargetVictim)
            .count();
        self.out.activations = sim.core.dram.activations() - self.start_acts;
        self.out.sim_time = end;
        let m = sim.core.map.extract(&sim.core.dram, self.ctx.model)?;
        self.out.final_accuracy = m.accuracy(self.ctx.eval_batch).map_err(qnn_err)?;
        self.out.final_attack_accuracy = m.accuracy(self.ctx.attack_batch).map_err(qnn_err)?;
        Ok(self.out)
    }
}

fn qnn_err(e: crate::qnn::QnnError) -> SimError {
    SimError::Config(e.to_string())
}

fn hit(sim: &Simulation, from: usize, loc: BitLocation) -> Option<LandedFlip> {
    sim.core.weight_flips()[from..]
        .iter()
        .find(|f| f.location == loc)
        .map(|f| LandedFlip {
            location: loc,
            row: f.event.addr,
            column: f.event.column,
            time: f.event.time,
        })
}

/// Replays a fixed plan against the original layout, `t_rh` activations
/// per planned bit.
pub struct SemiWhitebox;

impl Attacker for SemiWhitebox {
    fn name(&self) -> &'static str {
        "semi_whitebox"
    }

    fn run(&mut self, sim: &mut Simulation, ctx: &AttackContext) -> Result<AttackOutcome, SimError> {
        if ctx.caps.can_read_map_updates || ctx.caps.knows_defense {
            return Err(SimError::Config(
                "the replaying attacker neither tracks the map nor knows the defense".into(),
            ));
        }
        let mut run = Run::new(self.name(), sim, ctx)?;
        let g = *sim.core.dram.geometry();
        let t_rh = sim.core.dram.timing().t_rh;
        let empty = AttackPlan {
            flips: Vec::new(),
            stop: ctx.stop,
        };
        let plan = ctx.plan.unwrap_or(&empty);
        let mut degraded = ctx.model.clone();
        'plan: for f in &plan.flips {
            let (victim, column) = ctx.original_map.locate(f.location);
            let Some(aggr) = aggressor_for(&g, victim, |a| ctx.original_map.data_row_at(a).is_some())
            else {
                continue;
            };
            sim.core.dram.designate(victim, column)?;
            let mark = sim.core.weight_flips().len();
            run.out.attempted += 1;
            for _ in 0..t_rh {
                if run.act(sim, aggr)?.is_none() {
                    sim.core.dram.clear_designation(victim);
                    break 'plan;
                }
            }
            sim.core.dram.clear_designation(victim);
            match hit(sim, mark, f.location) {
                Some(l) => {
                    run.out.landed.push(l);
                    degraded.flip_bit(f.location);
                    if run.out.flips_to_degrade.is_none()
                        && degraded.accuracy(ctx.attack_batch).map_err(qnn_err)?
                            <= ctx.stop.accuracy_threshold.unwrap_or(f64::NEG_INFINITY)
                    {
                        run.out.flips_to_degrade = Some(run.out.landed.len());
                    }
                }
                None => run.out.failed.push(f.location),
            }
        }
        run.finish(sim)
    }
}

/// Tracks relocations, re-aims at the live neighbor of each bit and
/// regenerates its plan from the current DRAM contents, skipping bits that
/// failed.
pub struct WhiteboxAdaptive;

impl WhiteboxAdaptive {
    fn attempt(
        run: &mut Run,
        sim: &mut Simulation,
        loc: BitLocation,
        patience: u64,
    ) -> Result<Option<Option<LandedFlip>>, SimError> {
        let g = *sim.core.dram.geometry();
        let mut spent = 0u64;
        while spent < patience {
            let (victim, column) = sim.core.map.locate(loc);
            let core = &sim.core;
            let Some(aggr) = aggressor_for(&g, victim, |a| {
                core.map.data_row_at(a).is_some() || core.role(a) == RowRole::Reserved
            }) else {
                return Ok(Some(None));
            };
            let logical = sim.logical_for(aggr);
            sim.core.dram.designate(victim, column)?;
            let mark = sim.core.weight_flips().len();
            let aimed = loop {
                if spent >= patience {
                    break false;
                }
                if run.act(sim, logical)?.is_none() {
                    sim.core.dram.clear_designation(victim);
                    return Ok(None);
                }
                spent += 1;
                if let Some(l) = hit(sim, mark, loc) {
                    sim.core.dram.clear_designation(victim);
                    return Ok(Some(Some(l)));
                }
                if sim.core.map.locate(loc).0 != victim || sim.resolve(logical) != aggr {
                    break true;
                }
            };
            sim.core.dram.clear_designation(victim);
            if !aimed {
                break;
            }
        }
        Ok(Some(None))
    }
}

impl Attacker for WhiteboxAdaptive {
    fn name(&self) -> &'static str {
        "whitebox"
    }

    fn run(&mut self, sim: &mut Simulation, ctx: &AttackContext) -> Result<AttackOutcome, SimError> {
        if !ctx.caps.can_read_map_updates {
            return Err(SimError::Config("the adaptive attacker must see map updates".into()));
        }
        let mut run = Run::new(self.name(), sim, ctx)?;
        let patience = ctx
            .params
            .patience
            .unwrap_or(3 * sim.core.dram.timing().t_rh);
        let threshold = ctx.stop.accuracy_threshold;
        let mut skip: HashSet<BitLocation> = HashSet::new();
        let mut strikes: HashMap<u32, u32> = HashMap::new();
        let mut hit_rows: HashSet<u32> = HashSet::new();
        let chunk = ctx.params.plan_chunk.max(1);
        'outer: loop {
            let mut copy = sim.core.map.extract(&sim.core.dram, ctx.model)?;
            let acc = copy.accuracy(ctx.attack_batch).map_err(qnn_err)?;
            if threshold.is_some_and(|th| acc <= th) {
                if run.out.flips_to_degrade.is_none() {
                    run.out.flips_to_degrade = Some(run.out.landed.len());
                }
                if ctx.params.stop_on_success {
                    break;
                }
            }
            let stop = StopCriterion {
                accuracy_threshold: if ctx.params.stop_on_success { threshold } else { None },
                flip_budget: Some(chunk),
            };
            let plan = match bfa_search(&mut copy, ctx.attack_batch, &skip, stop) {
                Ok(p) => p,
                Err(BfaError::Exhausted { partial }) => partial,
                Err(e) => return Err(SimError::Config(e.to_string())),
            };
            if plan.is_empty() {
                run.out.exhausted = true;
                break;
            }
            for f in &plan.flips {
                if ctx
                    .params
                    .max_attempts
                    .is_some_and(|m| run.out.attempted >= m)
                {
                    break 'outer;
                }
                run.out.attempted += 1;
                skip.insert(f.location);
                match Self::attempt(&mut run, sim, f.location, patience)? {
                    None => break 'outer,
                    Some(Some(l)) => {
                        hit_rows.insert(ctx.original_map.data_row_of(f.location));
                        run.out.landed.push(l);
                    }
                    Some(None) => {
                        run.out.failed.push(f.location);
                        let dr = ctx.original_map.data_row_of(f.location);
                        let s = strikes.entry(dr).or_insert(0);
                        *s += 1;
                        if ctx.params.row_strikes > 0
                            && *s == ctx.params.row_strikes
                            && !hit_rows.contains(&dr)
                        {
                            skip.extend(ctx.original_map.bits_of(dr));
                        }
                        continue 'outer;
                    }
                }
            }
        }
        run.finish(sim)
    }
}

/// Layout-unaware hammering: seeded random rows of the bank holding the
/// model, `t_rh` activations each.
pub struct RandomAggressor;

impl Attacker for RandomAggressor {
    fn name(&self) -> &'static str {
        "random_aggressor"
    }

    fn run(&mut self, sim: &mut Simulation, ctx: &AttackContext) -> Result<AttackOutcome, SimError> {
        let mut run = Run::new(self.name(), sim, ctx)?;
        let g = *sim.core.dram.geometry();
        let t_rh = sim.core.dram.timing().t_rh;
        let bank = ctx.original_map.rows().first().map_or(0, |r| r.bank);
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.params.seed);
        'outer: loop {
            if ctx.params.max_attempts.is_some_and(|m| run.out.attempted >= m) {
                break;
            }
            let aggr = RowAddr::new(
                bank,
                rng.gen_range(0..g.subarrays_per_bank),
                rng.gen_range(0..g.rows_per_subarray),
            );
            run.out.attempted += 1;
            for _ in 0..t_rh {
                if run.act(sim, aggr)?.is_none() {
                    break 'outer;
                }
            }
        }
        run.finish(sim)
    }
}
