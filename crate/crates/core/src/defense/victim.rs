//! Victim-row swap defense: every protected target row is moved to a random
//! row of its sub-array once per round, through a reserved scratch row, and
//! the last step of each swap refreshes a non-target row and stages it as
//! the next swap's random row.
//!
//! Rounds run per bank with period `t_act * t_rh + 3 * t_aap * m` for `m`
//! target rows in the bank. A pipelined round of `m` swaps takes
//! `t_rng + t_aap * (4 + 3 (m - 1))`, so the attacker gets at most
//! `t_act * t_rh - t_rng - t_aap` of bank time between two moves of the same
//! content.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Defense, DefenseConfig, ProtectionProfile, SwapRecord};
use crate::analysis::max_swaps_per_window;
use crate::dram::{Ns, RowAddr, RowRole};
use crate::sim::{SimCore, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeadlineMiss {
    /// Where the content sat when its window ran out.
    pub row: RowAddr,
    pub target: bool,
    pub time: Ns,
    /// Bank time the attacker had against the row.
    pub exposed: Ns,
}

#[derive(Debug, Clone)]
struct Content {
    target: bool,
    loc: RowAddr,
    refreshed_at: Ns,
    busy_at: Ns,
}

#[derive(Debug, Clone)]
struct Sub {
    reserved: RowAddr,
    staged: Option<RowAddr>,
    non_targets: Vec<usize>,
    cursor: usize,
}

#[derive(Debug, Clone)]
struct BankPlan {
    bank: u32,
    targets: Vec<usize>,
    period: Ns,
    next_start: Ns,
    busy: Ns,
}

pub struct VictimSwap {
    pipeline: bool,
    t_rng: Ns,
    t_aap: Ns,
    exposure_limit: Ns,
    rng: ChaCha8Rng,
    contents: Vec<Content>,
    at: HashMap<RowAddr, usize>,
    subs: BTreeMap<(u32, u32), Sub>,
    banks: Vec<BankPlan>,
    log: Vec<SwapRecord>,
    misses: Vec<DeadlineMiss>,
    batch: Option<(Ns, Ns)>,
}

impl VictimSwap {
    pub fn new(
        config: &DefenseConfig,
        profile: &ProtectionProfile,
        core: &mut SimCore,
    ) -> Result<Self, SimError> {
        profile.validate()?;
        let timing = *core.dram.timing();
        let cap = max_swaps_per_window(timing.t_act, timing.t_aap, timing.t_rh);
        let mut per_sub: BTreeMap<(u32, u32), u64> = BTreeMap::new();
        for a in &profile.target_rows {
            *per_sub.entry((a.bank, a.subarray)).or_default() += 1;
        }
        let over: Vec<String> = per_sub
            .iter()
            .filter(|(_, &n)| n > cap)
            .map(|((b, s), n)| format!("bank {b} sub-array {s} ({n} targets)"))
            .collect();
        if !over.is_empty() {
            return Err(SimError::Config(format!(
                "infeasible schedule, more than {cap} targets per window in: {}",
                over.join(", ")
            )));
        }

        let mut contents = Vec::new();
        let mut at = HashMap::new();
        for (a, target) in profile
            .target_rows
            .iter()
            .map(|a| (*a, true))
            .chain(profile.non_target_rows.iter().map(|a| (*a, false)))
        {
            at.insert(a, contents.len());
            contents.push(Content {
                target,
                loc: a,
                refreshed_at: 0,
                busy_at: 0,
            });
            let role = if target {
                RowRole::TargetVictim
            } else {
                RowRole::NonTargetVictim
            };
            core.dram.set_role(a, role)?;
        }
        let mut subs = BTreeMap::new();
        for (&key, rows) in &profile.reserved_rows {
            for r in rows {
                core.dram.set_role(*r, RowRole::Reserved)?;
            }
            if let Some(&reserved) = rows.first() {
                subs.insert(
                    key,
                    Sub {
                        reserved,
                        staged: None,
                        non_targets: Vec::new(),
                        cursor: 0,
                    },
                );
            }
        }
        for (id, c) in contents.iter().enumerate() {
            if !c.target {
                if let Some(s) = subs.get_mut(&(c.loc.bank, c.loc.subarray)) {
                    s.non_targets.push(id);
                }
            }
        }
        let mut banks: Vec<BankPlan> = Vec::new();
        for (id, c) in contents.iter().enumerate().filter(|(_, c)| c.target) {
            match banks.iter_mut().find(|b| b.bank == c.loc.bank) {
                Some(b) => b.targets.push(id),
                None => banks.push(BankPlan {
                    bank: c.loc.bank,
                    targets: vec![id],
                    period: 0,
                    next_start: 0,
                    busy: 0,
                }),
            }
        }
        for b in &mut banks {
            b.period = config.period.unwrap_or(
                timing.t_act * timing.t_rh + timing.t_swap() * b.targets.len() as u64,
            );
        }
        Ok(Self {
            pipeline: config.pipeline,
            t_rng: config.t_rng,
            t_aap: timing.t_aap,
            exposure_limit: timing.t_act * timing.t_rh,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            contents,
            at,
            subs,
            banks,
            log: Vec::new(),
            misses: Vec::new(),
            batch: None,
        })
    }

    /// Round period of `bank`, if it holds targets.
    pub fn period(&self, bank: u32) -> Option<Ns> {
        self.banks.iter().find(|b| b.bank == bank).map(|b| b.period)
    }

    /// Current row of every target content, in schedule order.
    pub fn target_locations(&self) -> Vec<RowAddr> {
        self.contents.iter().filter(|c| c.target).map(|c| c.loc).collect()
    }

    /// Swaps the target content currently at `target_row`, starting at `time`.
    pub fn swap_protect(
        &mut self,
        core: &mut SimCore,
        target_row: RowAddr,
        time: Ns,
    ) -> Result<SwapRecord, SimError> {
        let (mut recs, _) = self.run_batch(core, &[target_row], time)?;
        Ok(recs.remove(0))
    }

    /// Swaps the targets currently at `rows` as one batch starting at
    /// `start`. Returns the records and the completion time.
    pub fn run_batch(
        &mut self,
        core: &mut SimCore,
        rows: &[RowAddr],
        start: Ns,
    ) -> Result<(Vec<SwapRecord>, Ns), SimError> {
        let ids = rows
            .iter()
            .map(|r| match self.at.get(r) {
                Some(&id) if self.contents[id].target => Ok(id),
                _ => Err(SimError::Config(format!("{r} holds no target content"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let bank = rows.first().map_or(0, |r| r.bank);
        let from = self.log.len();
        let acc = self.banks.iter().find(|b| b.bank == bank).map_or(0, |b| b.busy);
        let end = self.execute(core, bank, &ids, start.max(core.bank_free_at(bank)), acc)?;
        if let Some(b) = self.banks.iter_mut().find(|b| b.bank == bank) {
            b.busy = acc + (end - start);
        }
        Ok((self.log[from..].to_vec(), end))
    }

    fn busy_at(&self, t: Ns) -> Ns {
        let (s, acc) = self.batch.expect("inside a batch");
        acc + (t - s)
    }

    /// Marks content `id` refreshed at `t`, logging a miss if the attacker
    /// could have fit a full threshold of activations since the last time.
    fn refresh_content(&mut self, id: usize, t: Ns) {
        let busy = self.busy_at(t);
        let c = &mut self.contents[id];
        let exposed = (t - c.refreshed_at).saturating_sub(busy - c.busy_at);
        if exposed >= self.exposure_limit {
            self.misses.push(DeadlineMiss {
                row: c.loc,
                target: c.target,
                time: t,
                exposed,
            });
        }
        c.refreshed_at = t;
        c.busy_at = busy;
    }

    fn fresh_random(&mut self, core: &SimCore, key: (u32, u32)) -> Result<RowAddr, SimError> {
        let g = *core.dram.geometry();
        let staged = self.subs.get(&key).and_then(|s| s.staged);
        let risky = |r: RowRole| r != RowRole::Normal;
        let candidates: Vec<RowAddr> = (0..g.rows_per_subarray)
            .map(|r| RowAddr::new(key.0, key.1, r))
            .filter(|&a| {
                Some(a) != staged
                    && core.role(a) == RowRole::Normal
                    && g.neighbors(a).all(|n| !risky(core.role(n)))
            })
            .collect();
        if candidates.is_empty() {
            return Err(SimError::NoRandomRow {
                bank: key.0,
                subarray: key.1,
            });
        }
        Ok(candidates[self.rng.gen_range(0..candidates.len())])
    }

    /// Row copied to the scratch slot by step four when no non-target content
    /// was displaced: the next non-target row of the sub-array, or a fresh
    /// random row if it has none.
    fn next_refresh(&mut self, core: &SimCore, key: (u32, u32)) -> Result<(RowAddr, Option<usize>), SimError> {
        let s = self.subs.get_mut(&key).expect("sub-array has a reserved row");
        if s.non_targets.is_empty() {
            s.staged = None;
            return Ok((self.fresh_random(core, key)?, None));
        }
        let id = s.non_targets[s.cursor % s.non_targets.len()];
        s.cursor += 1;
        Ok((self.contents[id].loc, Some(id)))
    }

    fn execute(
        &mut self,
        core: &mut SimCore,
        bank: u32,
        ids: &[usize],
        start: Ns,
        acc: Ns,
    ) -> Result<Ns, SimError> {
        self.batch = Some((start, acc));
        let aap = self.t_aap;
        let mut t = start;
        let mut prev: Option<((u32, u32), RowAddr)> = None;
        let mut end = start;
        for (k, &id) in ids.iter().enumerate() {
            if k == 0 || !self.pipeline {
                t += self.t_rng;
            }
            let target = self.contents[id].loc;
            let key = (target.bank, target.subarray);
            let reserved = self
                .subs
                .get(&key)
                .map(|s| s.reserved)
                .ok_or_else(|| SimError::Config(format!("no reserved row for {target}")))?;
            let random = match self.subs.get_mut(&key).and_then(|s| s.staged.take()) {
                Some(r) => r,
                None => self.fresh_random(core, key)?,
            };
            let t1 = t;
            let merged = self.pipeline && prev == Some((key, random));
            if !merged {
                core.clone_row(random, reserved, t1)?;
            }
            let t2 = t1 + aap;
            core.clone_row(target, random, t2)?;
            let t3 = t2 + aap;
            core.clone_row(reserved, target, t3)?;
            let displaced = self.at.remove(&random);
            self.at.remove(&target);
            core.exchange(target, random, t2)?;
            self.refresh_content(id, t2);
            self.contents[id].loc = random;
            self.at.insert(random, id);
            if let Some(d) = displaced {
                self.refresh_content(d, t3);
                self.contents[d].loc = target;
                self.at.insert(target, d);
            }
            let t4 = t3 + aap;
            // the non-target content just moved into the target's old row is
            // staged again, so it becomes the next swap's random row
            let (next, nt) = match displaced {
                Some(d) if !self.contents[d].target => (target, Some(d)),
                _ => self.next_refresh(core, key)?,
            };
            core.clone_row(next, reserved, t4)?;
            if let Some(n) = nt {
                self.refresh_content(n, t4);
            }
            if let Some(s) = self.subs.get_mut(&key) {
                s.staged = Some(next);
            }
            self.log.push(SwapRecord {
                swap_id: self.log.len() as u64,
                target_row: target,
                random_row: random,
                non_target_row: nt.map(|_| next),
                t1,
                t2,
                t3,
                t4,
            });
            prev = Some((key, next));
            end = t4 + aap;
            t = if self.pipeline { t4 } else { end };
        }
        core.occupy(bank, end);
        self.batch = None;
        Ok(end)
    }
}

impl Defense for VictimSwap {
    fn name(&self) -> &'static str {
        "victim_swap"
    }

    fn run_until(&mut self, core: &mut SimCore, limit: Ns) -> Result<(), SimError> {
        loop {
            let Some(i) = (0..self.banks.len())
                .filter(|&i| self.banks[i].next_start < limit)
                .min_by_key(|&i| (self.banks[i].next_start, self.banks[i].bank))
            else {
                return Ok(());
            };
            let (bank, scheduled, acc) = {
                let b = &self.banks[i];
                (b.bank, b.next_start, b.busy)
            };
            let start = scheduled.max(core.bank_free_at(bank));
            let ids = self.banks[i].targets.clone();
            let end = self.execute(core, bank, &ids, start, acc)?;
            let b = &mut self.banks[i];
            b.busy = acc + (end - start);
            b.next_start = scheduled + b.period;
        }
    }

    fn swaps(&self) -> &[SwapRecord] {
        &self.log
    }

    fn deadline_misses(&self) -> &[DeadlineMiss] {
        &self.misses
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::attack::{AddressMap, LayoutParams};
    use crate::dram::{Dram, DramGeometry, FlipModel, TimingParams};
    use crate::sim::Simulation;

    fn setup(targets: &[RowAddr], non_targets: &[RowAddr], t_rh: u64) -> (SimCore, ProtectionProfile) {
        let g = DramGeometry::default();
        let t = TimingParams::new(45, 90, 64_000_000, t_rh).unwrap();
        let mut dram = Dram::new(g, t, FlipModel::default()).unwrap();
        for (i, a) in targets.iter().chain(non_targets).enumerate() {
            dram.load_row(*a, &vec![i as u8 + 1; g.row_bytes()]).unwrap();
        }
        let profile = ProtectionProfile::with_tail_reserved(
            targets.iter().copied().collect(),
            non_targets.iter().copied().collect(),
            g.rows_per_subarray,
            1,
        );
        (SimCore::new(dram, AddressMap::default()), profile)
    }

    fn row(s: u32, r: u32) -> RowAddr {
        RowAddr::new(0, s, r)
    }

    #[test]
    fn swap_steps_and_content() {
        let (mut core, profile) = setup(&[row(0, 2)], &[row(0, 5)], 4800);
        let before = core.dram.peek_row(row(0, 2)).unwrap().to_vec();
        let mut d = VictimSwap::new(&DefenseConfig::default(), &profile, &mut core).unwrap();
        let r = d.swap_protect(&mut core, row(0, 2), 0).unwrap();
        assert_eq!((r.t1, r.t2, r.t3, r.t4), (10, 100, 190, 280));
        assert_eq!(r.non_target_row, Some(row(0, 5)));
        assert_eq!(core.dram.peek_row(r.random_row).unwrap(), &before[..]);
        assert_eq!(d.target_locations(), vec![r.random_row]);
        assert_eq!(core.role(r.random_row), RowRole::TargetVictim);
        assert_eq!(core.role(row(0, 127)), RowRole::Reserved);
        // staged non-target row becomes the next random row
        let r2 = d.swap_protect(&mut core, r.random_row, 1000).unwrap();
        assert_eq!(r2.random_row, row(0, 5));
        assert_eq!(core.dram.peek_row(row(0, 5)).unwrap(), &before[..]);
        assert_eq!(core.dram.peek_row(r.random_row).unwrap(), &[2u8; 32][..]);
    }

    #[test]
    fn infeasible_schedule_names_subarray() {
        // t_act * t_rh / t_swap = 45 * 12 / 270 = 2 swaps per window
        let (mut core, profile) = setup(&[row(3, 2), row(3, 5), row(3, 8), row(1, 2)], &[], 12);
        let err = VictimSwap::new(&DefenseConfig::default(), &profile, &mut core)
            .err()
            .expect("config error")
            .to_string();
        assert!(err.contains("sub-array 3"), "{err}");
        assert!(!err.contains("sub-array 1"), "{err}");
    }

    #[test]
    fn period_follows_target_count() {
        let (mut core, profile) = setup(&[row(0, 2), row(1, 2), row(1, 5)], &[], 4800);
        let d = VictimSwap::new(&DefenseConfig::default(), &profile, &mut core).unwrap();
        assert_eq!(d.period(0), Some(45 * 4800 + 3 * 270));
        assert_eq!(d.period(1), None);
    }

    #[test]
    fn one_refresh_interval_keeps_weights_and_deadlines() {
        let g = DramGeometry::default();
        let t = TimingParams::new(45, 90, 64_000_000, 4800).unwrap();
        let mut dram = Dram::new(g, t, FlipModel::default()).unwrap();
        let map = AddressMap::layer_major(&g, &[32 * 24], LayoutParams::default()).unwrap();
        for (i, a) in map.rows().iter().enumerate() {
            dram.load_row(*a, &vec![i as u8; g.row_bytes()]).unwrap();
        }
        let snapshot: Vec<Vec<u8>> = map.rows().iter().map(|a| dram.peek_row(*a).unwrap().to_vec()).collect();
        let rows: Vec<RowAddr> = map.rows().to_vec();
        let targets: BTreeSet<RowAddr> = rows.iter().step_by(3).copied().collect();
        let others: BTreeSet<RowAddr> = rows.iter().copied().filter(|r| !targets.contains(r)).collect();
        let profile = ProtectionProfile::with_tail_reserved(targets, others, g.rows_per_subarray, 1);
        let mut core = SimCore::new(dram, map);
        let d = VictimSwap::new(&DefenseConfig::default(), &profile, &mut core).unwrap();
        let mut sim = Simulation::new(core, Box::new(d));
        sim.advance_to(64_000_000).unwrap();
        assert!(sim.defense().swaps().len() > 1000);
        assert!(sim.defense().deadline_misses().iter().all(|m| !m.target));
        for (dr, want) in snapshot.iter().enumerate() {
            let at = sim.core.map.row_of(dr as u32);
            assert_eq!(sim.core.dram.peek_row(at).unwrap(), &want[..], "data row {dr}");
        }
        assert!(sim.core.dram.flip_log().is_empty());
    }
}
