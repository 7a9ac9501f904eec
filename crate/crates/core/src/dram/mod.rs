//! Deterministic DRAM substrate: rows, commands, disturbance accounting and
//! RowHammer flip injection.
//!
//! Every activation restores the charge of the activated row (its
//! disturbance drops to zero) and adds one unit of disturbance to each
//! physically adjacent row of the same sub-array. A row whose disturbance
//! reaches a positive multiple of `t_rh` gets one bit inverted.

mod flip;
mod geometry;

pub use flip::{FlipMode, FlipModel};
pub use geometry::{DramGeometry, Ns, RowAddr, TimingParams};

use flip::FlipInjector;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DramError {
    #[error("address {0} is outside the device geometry")]
    Address(RowAddr),
    #[error("row clone {src} -> {dst} crosses sub-arrays")]
    UnsupportedCopy { src: RowAddr, dst: RowAddr },
    #[error("row clone source and destination are both {0}")]
    SelfCopy(RowAddr),
    #[error("requester is not allowed to {0}")]
    Permission(&'static str),
    #[error("bank {bank} time went backwards ({time} < {last})")]
    TimeReversal { bank: u32, time: Ns, last: Ns },
    #[error("row content has {got} bytes, expected {expected}")]
    Width { got: usize, expected: usize },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid timing: {0}")]
    Timing(String),
}

/// Who is issuing a data command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Requester {
    /// Memory controller / harness with full access.
    Host,
    /// Unprivileged co-located process: may activate rows, never read or
    /// write them.
    Attacker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RowRole {
    Normal,
    TargetVictim,
    NonTargetVictim,
    Reserved,
}

#[derive(Debug, Clone)]
pub struct RowState {
    pub content: Vec<u8>,
    pub disturbance: u64,
    pub role: RowRole,
    pub flipped_bits_log: Vec<(u32, Ns)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlipEvent {
    pub addr: RowAddr,
    pub column: u32,
    pub time: Ns,
    /// Role of the row when the flip happened.
    pub role: RowRole,
}

#[derive(Debug, Clone)]
pub struct Dram {
    geometry: DramGeometry,
    timing: TimingParams,
    rows: Vec<RowState>,
    flips: FlipInjector,
    bank_time: Vec<Ns>,
    flip_log: Vec<FlipEvent>,
    activations: u64,
}

impl Dram {
    pub fn new(
        geometry: DramGeometry,
        timing: TimingParams,
        flip_model: FlipModel,
    ) -> Result<Self, DramError> {
        geometry.validate()?;
        timing.validate()?;
        let row = RowState {
            content: vec![0; geometry.row_bytes()],
            disturbance: 0,
            role: RowRole::Normal,
            flipped_bits_log: Vec::new(),
        };
        Ok(Self {
            geometry,
            timing,
            rows: vec![row; geometry.total_rows()],
            flips: FlipInjector::new(flip_model),
            bank_time: vec![0; geometry.banks as usize],
            flip_log: Vec::new(),
            activations: 0,
        })
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn timing(&self) -> &TimingParams {
        &self.timing
    }

    pub fn flip_model(&self) -> FlipModel {
        self.flips.model
    }

    pub fn flip_log(&self) -> &[FlipEvent] {
        &self.flip_log
    }

    pub fn activations(&self) -> u64 {
        self.activations
    }

    fn index(&self, addr: RowAddr) -> Result<usize, DramError> {
        self.geometry.index_of(addr).ok_or(DramError::Address(addr))
    }

    pub fn row(&self, addr: RowAddr) -> Result<&RowState, DramError> {
        Ok(&self.rows[self.index(addr)?])
    }

    pub fn disturbance(&self, addr: RowAddr) -> Result<u64, DramError> {
        Ok(self.row(addr)?.disturbance)
    }

    pub fn role(&self, addr: RowAddr) -> Result<RowRole, DramError> {
        Ok(self.row(addr)?.role)
    }

    pub fn set_role(&mut self, addr: RowAddr, role: RowRole) -> Result<(), DramError> {
        let i = self.index(addr)?;
        self.rows[i].role = role;
        Ok(())
    }

    /// Side-effect free inspection of a row, not a DRAM command.
    pub fn peek_row(&self, addr: RowAddr) -> Result<&[u8], DramError> {
        Ok(&self.row(addr)?.content)
    }

    /// Marks the column that flips when `victim` crosses the threshold
    /// (only meaningful in [`FlipMode::AttackerPrecise`]).
    pub fn designate(&mut self, victim: RowAddr, column: u32) -> Result<(), DramError> {
        self.index(victim)?;
        if column >= self.geometry.row_width {
            return Err(DramError::Address(victim));
        }
        self.flips.designate(victim, column);
        Ok(())
    }

    pub fn clear_designation(&mut self, victim: RowAddr) {
        self.flips.clear(victim);
    }

    fn advance_bank(&mut self, bank: u32, time: Ns) -> Result<(), DramError> {
        let last = self.bank_time[bank as usize];
        if time < last {
            return Err(DramError::TimeReversal { bank, time, last });
        }
        self.bank_time[bank as usize] = time;
        Ok(())
    }

    fn disturb(&mut self, victim: RowAddr, time: Ns, out: &mut Vec<FlipEvent>) {
        let t_rh = self.timing.t_rh;
        let saturate = self.flips.model.saturate;
        let i = self.geometry.index_of(victim).expect("neighbor in range");
        let d = {
            let r = &mut self.rows[i];
            r.disturbance += 1;
            r.disturbance
        };
        if d % t_rh != 0 || (saturate && d != t_rh) {
            return;
        }
        let column = self.flips.column_for(victim, self.geometry.row_width);
        let r = &mut self.rows[i];
        r.content[(column / 8) as usize] ^= 1 << (column % 8);
        r.flipped_bits_log.push((column, time));
        let ev = FlipEvent {
            addr: victim,
            column,
            time,
            role: r.role,
        };
        self.flip_log.push(ev);
        out.push(ev);
    }

    fn activate_inner(&mut self, addr: RowAddr, time: Ns, out: &mut Vec<FlipEvent>) {
        let i = self.geometry.index_of(addr).expect("validated");
        self.rows[i].disturbance = 0;
        self.activations += 1;
        let g = self.geometry;
        for n in g.neighbors(addr) {
            self.disturb(n, time, out);
        }
    }

    /// ACT command. Returns the flips it induced on neighboring rows.
    pub fn activate(&mut self, addr: RowAddr, time: Ns) -> Result<Vec<FlipEvent>, DramError> {
        self.index(addr)?;
        self.advance_bank(addr.bank, time)?;
        let mut out = Vec::new();
        self.activate_inner(addr, time, &mut out);
        Ok(out)
    }

    /// In-sub-array RowClone (AAP). Both rows are activated; returns the
    /// completion time.
    pub fn row_clone(&mut self, src: RowAddr, dst: RowAddr, time: Ns) -> Result<Ns, DramError> {
        let si = self.index(src)?;
        let di = self.index(dst)?;
        if src == dst {
            return Err(DramError::SelfCopy(src));
        }
        if !src.same_subarray(&dst) {
            return Err(DramError::UnsupportedCopy { src, dst });
        }
        self.advance_bank(src.bank, time)?;
        let content = self.rows[si].content.clone();
        self.rows[di].content = content;
        let mut sink = Vec::new();
        self.activations += 2;
        let g = self.geometry;
        for n in g.neighbors(src).chain(g.neighbors(dst)) {
            if n != src && n != dst {
                self.disturb(n, time, &mut sink);
            }
        }
        self.rows[si].disturbance = 0;
        self.rows[di].disturbance = 0;
        Ok(time + self.timing.t_aap)
    }

    /// Resets every disturbance counter. Content is untouched.
    pub fn refresh_all(&mut self, _time: Ns) {
        for r in &mut self.rows {
            r.disturbance = 0;
        }
    }

    pub fn read_row(
        &mut self,
        who: Requester,
        addr: RowAddr,
        time: Ns,
    ) -> Result<Vec<u8>, DramError> {
        if who == Requester::Attacker {
            return Err(DramError::Permission("read rows"));
        }
        self.activate(addr, time)?;
        Ok(self.rows[self.index(addr)?].content.clone())
    }

    pub fn write_row(
        &mut self,
        who: Requester,
        addr: RowAddr,
        bits: &[u8],
        time: Ns,
    ) -> Result<(), DramError> {
        if who == Requester::Attacker {
            return Err(DramError::Permission("write rows"));
        }
        let expected = self.geometry.row_bytes();
        if bits.len() != expected {
            return Err(DramError::Width {
                got: bits.len(),
                expected,
            });
        }
        self.activate(addr, time)?;
        let i = self.index(addr)?;
        self.rows[i].content.copy_from_slice(bits);
        Ok(())
    }

    /// Host-side bulk load that bypasses timing and disturbance, used to lay
    /// out a scenario before simulated time starts.
    pub fn load_row(&mut self, addr: RowAddr, bits: &[u8]) -> Result<(), DramError> {
        let expected = self.geometry.row_bytes();
        if bits.len() != expected {
            return Err(DramError::Width {
                got: bits.len(),
                expected,
            });
        }
        let i = self.index(addr)?;
        self.rows[i].content.copy_from_slice(bits);
        Ok(())
    }

    /// Order-independent digest of the device contents (roles and counters
    /// excluded).
    pub fn contents(&self) -> impl Iterator<Item = &[u8]> {
        self.rows.iter().map(|r| r.content.as_slice())
    }

    pub fn rows(&self) -> impl Iterator<Item = (RowAddr, &RowState)> {
        let g = self.geometry;
        self.rows.iter().enumerate().map(move |(i, r)| (g.addr_of(i), r))
    }
}
