//! Global-clock simulation: one DRAM device, its address map, the periodic
//! refresh and a defense co-process that shares the banks with the attacker.

use thiserror::Error;

use crate::attack::AddressMap;
use crate::defense::Defense;
use crate::dram::{Dram, DramError, FlipEvent, Ns, RowAddr, RowRole};
use crate::qnn::BitLocation;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error("{0}")]
    Config(String),
    #[error("no eligible random row in bank {bank} sub-array {subarray}")]
    NoRandomRow { bank: u32, subarray: u32 },
}

/// A flip that hit a mapped weight bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightFlip {
    pub location: BitLocation,
    pub event: FlipEvent,
}

/// State shared by every actor: device, map, refresh clock and bank
/// occupancy.
#[derive(Debug, Clone)]
pub struct SimCore {
    pub dram: Dram,
    pub map: AddressMap,
    next_refresh: Ns,
    refreshes: u64,
    busy_until: Vec<Ns>,
    weight_flips: Vec<WeightFlip>,
    scanned: usize,
}

impl SimCore {
    pub fn new(dram: Dram, map: AddressMap) -> Self {
        let banks = dram.geometry().banks as usize;
        let t_ref = dram.timing().t_ref;
        Self {
            dram,
            map,
            next_refresh: t_ref,
            refreshes: 0,
            busy_until: vec![0; banks],
            weight_flips: Vec::new(),
            scanned: 0,
        }
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    /// Applies every refresh due at or before `t`.
    pub fn sync_refresh(&mut self, t: Ns) {
        while self.next_refresh <= t {
            self.dram.refresh_all(self.next_refresh);
            self.next_refresh += self.dram.timing().t_ref;
            self.refreshes += 1;
        }
    }

    pub fn bank_free_at(&self, bank: u32) -> Ns {
        self.busy_until[bank as usize]
    }

    pub fn occupy(&mut self, bank: u32, until: Ns) {
        let b = &mut self.busy_until[bank as usize];
        *b = (*b).max(until);
    }

    /// Flips that landed on weight bits, attributed through the map at the
    /// moment they happened.
    pub fn weight_flips(&self) -> &[WeightFlip] {
        &self.weight_flips
    }

    fn scan(&mut self) {
        for ev in &self.dram.flip_log()[self.scanned..] {
            if let Some(location) = self.map.bit_at(ev.addr, ev.column) {
                self.weight_flips.push(WeightFlip {
                    location,
                    event: *ev,
                });
            }
        }
        self.scanned = self.dram.flip_log().len();
    }

    pub fn activate(&mut self, addr: RowAddr, t: Ns) -> Result<Vec<FlipEvent>, SimError> {
        self.sync_refresh(t);
        let flips = self.dram.activate(addr, t)?;
        self.scan();
        Ok(flips)
    }

    pub fn clone_row(&mut self, src: RowAddr, dst: RowAddr, t: Ns) -> Result<Ns, SimError> {
        self.sync_refresh(t);
        let done = self.dram.row_clone(src, dst, t)?;
        self.scan();
        Ok(done)
    }

    /// Records that the contents of `a` and `b` traded places; roles and the
    /// address map follow the content.
    pub fn exchange(&mut self, a: RowAddr, b: RowAddr, t: Ns) -> Result<(), SimError> {
        let ra = self.dram.role(a)?;
        let rb = self.dram.role(b)?;
        self.dram.set_role(a, rb)?;
        self.dram.set_role(b, ra)?;
        self.map.exchange(a, b, t);
        Ok(())
    }

    pub fn role(&self, addr: RowAddr) -> RowRole {
        self.dram.role(addr).unwrap_or(RowRole::Normal)
    }
}

/// Result of one attacker activation.
#[derive(Debug, Clone)]
pub struct Activation {
    pub time: Ns,
    pub physical: RowAddr,
    pub flips: Vec<FlipEvent>,
}

pub struct Simulation {
    pub core: SimCore,
    defense: Box<dyn Defense>,
    now: Ns,
}

impl Simulation {
    pub fn new(core: SimCore, defense: Box<dyn Defense>) -> Self {
        Self {
            core,
            defense,
            now: 0,
        }
    }

    pub fn now(&self) -> Ns {
        self.now
    }

    pub fn defense(&self) -> &dyn Defense {
        self.defense.as_ref()
    }

    pub fn defense_mut(&mut self) -> &mut dyn Defense {
        self.defense.as_mut()
    }

    /// Physical row an attacker-side address currently resolves to.
    pub fn resolve(&self, logical: RowAddr) -> RowAddr {
        self.defense.translate(logical)
    }

    /// Attacker-side address that currently resolves to `physical`.
    pub fn logical_for(&self, physical: RowAddr) -> RowAddr {
        self.defense.logical_of(physical)
    }

    /// Issues one attacker ACT at the earliest time `>= earliest` at which
    /// the bank is free. Defender work that would start before the ACT
    /// completes goes first.
    pub fn attacker_activate(&mut self, logical: RowAddr, earliest: Ns) -> Result<Activation, SimError> {
        let t_act = self.core.dram.timing().t_act;
        let bank = logical.bank;
        let mut t = earliest.max(self.now).max(self.core.bank_free_at(bank));
        loop {
            self.defense.run_until(&mut self.core, t + t_act)?;
            let free = self.core.bank_free_at(bank);
            if free <= t {
                break;
            }
            t = free;
        }
        let physical = self.defense.translate(logical);
        let flips = self.core.activate(physical, t)?;
        self.core.occupy(bank, t + t_act);
        self.defense.on_activate(&mut self.core, physical, t)?;
        self.now = t;
        Ok(Activation {
            time: t,
            physical,
            flips,
        })
    }

    /// Lets the defense and the refresh clock run up to `t`.
    pub fn advance_to(&mut self, t: Ns) -> Result<(), SimError> {
        self.defense.run_until(&mut self.core, t)?;
        self.core.sync_refresh(t);
        self.now = self.now.max(t);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defense::NoDefense;
    use crate::dram::{DramGeometry, FlipModel, TimingParams};

    fn core(t_rh: u64, t_ref: Ns) -> SimCore {
        let g = DramGeometry::default();
        let t = TimingParams::new(45, 90, t_ref, t_rh).unwrap();
        let map = AddressMap::layer_major(&g, &[64], Default::default()).unwrap();
        SimCore::new(Dram::new(g, t, FlipModel::default()).unwrap(), map)
    }

    #[test]
    fn refresh_clock_resets_disturbance() {
        let mut c = core(10, 1000);
        let v = RowAddr::new(0, 0, 6);
        for i in 0..9 {
            c.activate(RowAddr::new(0, 0, 5), i * 45).unwrap();
        }
        assert_eq!(c.dram.disturbance(v).unwrap(), 9);
        c.activate(RowAddr::new(0, 0, 5), 1000).unwrap();
        assert_eq!(c.refreshes(), 1);
        assert_eq!(c.dram.disturbance(v).unwrap(), 1);
    }

    #[test]
    fn flips_are_attributed_to_weights() {
        let mut c = core(10, 64_000_000);
        let victim = c.map.rows()[0];
        c.dram.designate(victim, 8 * 3 + 6).unwrap();
        let aggr = RowAddr::new(victim.bank, victim.subarray, victim.row + 1);
        for i in 0..10 {
            c.activate(aggr, i * 45).unwrap();
        }
        let wf = c.weight_flips();
        assert_eq!(wf.len(), 1);
        assert_eq!(wf[0].location, BitLocation::new(0, 3, 6));
        assert_eq!(wf[0].event.addr, victim);
    }

    #[test]
    fn attacker_waits_for_a_busy_bank() {
        let mut sim = Simulation::new(core(4800, 64_000_000), Box::new(NoDefense));
        sim.core.occupy(0, 500);
        let a = sim.attacker_activate(RowAddr::new(0, 1, 1), 100).unwrap();
        assert_eq!(a.time, 500);
        let b = sim.attacker_activate(RowAddr::new(0, 1, 1), 0).unwrap();
        assert_eq!(b.time, 545);
    }

    #[test]
    fn exchange_moves_roles_with_content() {
        let mut c = core(4800, 64_000_000);
        let a = c.map.rows()[0];
        let b = RowAddr::new(0, 0, 60);
        c.dram.set_role(a, RowRole::TargetVictim).unwrap();
        c.exchange(a, b, 0).unwrap();
        assert_eq!(c.role(b), RowRole::TargetVictim);
        assert_eq!(c.role(a), RowRole::Normal);
        assert_eq!(c.map.row_of(0), b);
    }
}
