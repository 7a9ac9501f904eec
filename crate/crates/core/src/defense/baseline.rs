//! Aggressor-focused comparator: an activation oracle per physical row and,
//! once a row's count reaches the swap threshold, an exchange of that row
//! with a random row of its sub-array. Attacker-side addresses are remapped
//! so the moved aggressor keeps its logical address.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Defense, DefenseConfig, ProtectionProfile, SwapRecord};
use crate::dram::{Ns, RowAddr, RowRole};
use crate::sim::{SimCore, SimError};

pub struct AggressorSwap {
    threshold: u64,
    t_act: Ns,
    t_aap: Ns,
    rng: ChaCha8Rng,
    reserved: HashMap<(u32, u32), RowAddr>,
    l2p: HashMap<RowAddr, RowAddr>,
    p2l: HashMap<RowAddr, RowAddr>,
    counts: HashMap<RowAddr, u64>,
    epoch: u64,
    log: Vec<SwapRecord>,
}

impl AggressorSwap {
    pub fn new(
        config: &DefenseConfig,
        profile: &ProtectionProfile,
        core: &mut SimCore,
    ) -> Result<Self, SimError> {
        let timing = *core.dram.timing();
        let threshold = config.swap_threshold.unwrap_or((timing.t_rh / 6).max(1));
        if threshold == 0 {
            return Err(SimError::Config("swap_threshold must be positive".into()));
        }
        let g = *core.dram.geometry();
        let mut reserved = HashMap::new();
        for b in 0..g.banks {
            for s in 0..g.subarrays_per_bank {
                let r = profile
                    .reserved_rows
                    .get(&(b, s))
                    .and_then(|v| v.first().copied())
                    .unwrap_or(RowAddr::new(b, s, g.rows_per_subarray - 1));
                core.dram.set_role(r, RowRole::Reserved)?;
                reserved.insert((b, s), r);
            }
        }
        for a in &profile.target_rows {
            core.dram.set_role(*a, RowRole::TargetVictim)?;
        }
        for a in &profile.non_target_rows {
            core.dram.set_role(*a, RowRole::NonTargetVictim)?;
        }
        Ok(Self {
            threshold,
            t_act: timing.t_act,
            t_aap: timing.t_aap,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            reserved,
            l2p: HashMap::new(),
            p2l: HashMap::new(),
            counts: HashMap::new(),
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }
}

impl Defense for AggressorSwap {
    fn name(&self) -> &'static str {
        "aggressor_baseline"
    }

    fn run_until(&mut self, _core: &mut SimCore, _limit: Ns) -> Result<(), SimError> {
        Ok(())
    }

    fn on_activate(&mut self, core: &mut SimCore, physical: RowAddr, time: Ns) -> Result<(), SimError> {
        if core.refreshes() != self.epoch {
            self.epoch = core.refreshes();
            self.counts.clear();
        }
        let c = self.counts.entry(physical).or_default();
        *c += 1;
        if *c < self.threshold {
            return Ok(());
        }
        let key = (physical.bank, physical.subarray);
        let reserved = self.reserved[&key];
        let rows = core.dram.geometry().rows_per_subarray;
        let other = loop {
            let r = RowAddr::new(key.0, key.1, self.rng.gen_range(0..rows));
            if r != physical && r != reserved {
                break r;
            }
        };
        let t1 = (time + self.t_act).max(core.bank_free_at(physical.bank));
        let t2 = t1 + self.t_aap;
        let t3 = t2 + self.t_aap;
        core.clone_row(other, reserved, t1)?;
        core.clone_row(physical, other, t2)?;
        core.clone_row(reserved, physical, t3)?;
        core.exchange(physical, other, t2)?;
        core.occupy(physical.bank, t3 + self.t_aap);
        let la = self.logical_of(physical);
        let lb = self.logical_of(other);
        for (l, p) in [(la, other), (lb, physical)] {
            if l == p {
                self.l2p.remove(&l);
                self.p2l.remove(&p);
            } else {
                self.l2p.insert(l, p);
                self.p2l.insert(p, l);
            }
        }
        self.counts.insert(physical, 0);
        self.counts.insert(other, 0);
        self.log.push(SwapRecord {
            swap_id: self.log.len() as u64,
            target_row: physical,
            random_row: other,
            non_target_row: None,
            t1,
            t2,
            t3,
            t4: t3,
        });
        Ok(())
    }

    fn translate(&self, logical: RowAddr) -> RowAddr {
        self.l2p.get(&logical).copied().unwrap_or(logical)
    }

    fn logical_of(&self, physical: RowAddr) -> RowAddr {
        self.p2l.get(&physical).copied().unwrap_or(physical)
    }

    fn swaps(&self) -> &[SwapRecord] {
        &self.log
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::*;
    use crate::attack::AddressMap;
    use crate::dram::{Dram, DramGeometry, FlipModel, TimingParams};
    use crate::sim::Simulation;

    fn sim(t_rh: u64) -> Simulation {
        let g = DramGeometry::default();
        let t = TimingParams::new(45, 90, 64_000_000, t_rh).unwrap();
        let mut core = SimCore::new(Dram::new(g, t, FlipModel::default()).unwrap(), AddressMap::default());
        let profile = ProtectionProfile::with_tail_reserved(
            BTreeSet::from([RowAddr::new(0, 0, 6)]),
            BTreeSet::new(),
            g.rows_per_subarray,
            1,
        );
        let d = AggressorSwap::new(&DefenseConfig::default(), &profile, &mut core).unwrap();
        Simulation::new(core, Box::new(d))
    }

    #[test]
    fn hammered_row_moves_at_threshold() {
        let mut s = sim(600);
        let aggr = RowAddr::new(0, 0, 5);
        for i in 0..99 {
            s.attacker_activate(aggr, i * 45).unwrap();
        }
        assert!(s.defense().swaps().is_empty());
        s.attacker_activate(aggr, 0).unwrap();
        let sw = s.defense().swaps()[0];
        assert_eq!(sw.target_row, aggr);
        assert_eq!(sw.t2 - sw.t1, 90);
        // the logical aggressor now lives at the random row
        assert_eq!(s.resolve(aggr), sw.random_row);
        assert_eq!(s.logical_for(sw.random_row), aggr);
        let moved = s.attacker_activate(aggr, 0).unwrap();
        assert_eq!(moved.physical, sw.random_row);
        assert!(moved.time >= sw.t3 + 90);
    }

    #[test]
    fn counts_reset_each_refresh_interval() {
        let mut s = sim(600);
        let aggr = RowAddr::new(0, 0, 5);
        for _ in 0..60 {
            s.attacker_activate(aggr, 0).unwrap();
        }
        s.advance_to(64_000_000).unwrap();
        for _ in 0..60 {
            s.attacker_activate(aggr, 0).unwrap();
        }
        assert!(s.defense().swaps().is_empty());
    }
}
