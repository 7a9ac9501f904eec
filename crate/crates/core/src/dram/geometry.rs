use std::fmt;

use serde::{Deserialize, Serialize};

use super::DramError;

/// Simulated time in nanoseconds.
pub type Ns = u64;

/// Bank / sub-array / row organization of the simulated device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DramGeometry {
    pub banks: u32,
    pub subarrays_per_bank: u32,
    pub rows_per_subarray: u32,
    /// Row width in bits.
    pub row_width: u32,
}

impl Default for DramGeometry {
    /// 4 banks of 8 sub-arrays, 128 rows of 256 bits each.
    fn default() -> Self {
        Self {
            banks: 4,
            subarrays_per_bank: 8,
            rows_per_subarray: 128,
            row_width: 256,
        }
    }
}

impl DramGeometry {
    pub fn new(
        banks: u32,
        subarrays_per_bank: u32,
        rows_per_subarray: u32,
        row_width: u32,
    ) -> Result<Self, DramError> {
        let g = Self {
            banks,
            subarrays_per_bank,
            rows_per_subarray,
            row_width,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), DramError> {
        if self.banks == 0 || self.subarrays_per_bank == 0 || self.rows_per_subarray == 0 {
            return Err(DramError::Geometry("all counts must be at least 1".into()));
        }
        if self.row_width < 8 || !self.row_width.is_multiple_of(8) {
            return Err(DramError::Geometry(format!(
                "row width {} must be a positive multiple of 8",
                self.row_width
            )));
        }
        Ok(())
    }

    pub fn total_rows(&self) -> usize {
        self.banks as usize * self.subarrays_per_bank as usize * self.rows_per_subarray as usize
    }

    pub fn rows_per_bank(&self) -> usize {
        self.subarrays_per_bank as usize * self.rows_per_subarray as usize
    }

    pub fn row_bytes(&self) -> usize {
        (self.row_width / 8) as usize
    }

    pub fn contains(&self, addr: RowAddr) -> bool {
        addr.bank < self.banks
            && addr.subarray < self.subarrays_per_bank
            && addr.row < self.rows_per_subarray
    }

    /// Flat index of a row; `None` when out of range.
    pub fn index_of(&self, addr: RowAddr) -> Option<usize> {
        if !self.contains(addr) {
            return None;
        }
        Some(
            (addr.bank as usize * self.subarrays_per_bank as usize + addr.subarray as usize)
                * self.rows_per_subarray as usize
                + addr.row as usize,
        )
    }

    pub fn addr_of(&self, index: usize) -> RowAddr {
        let rows = self.rows_per_subarray as usize;
        let subs = self.subarrays_per_bank as usize;
        RowAddr {
            bank: (index / (rows * subs)) as u32,
            subarray: ((index / rows) % subs) as u32,
            row: (index % rows) as u32,
        }
    }

    /// Physically adjacent rows inside the same sub-array (one at the edges).
    pub fn neighbors(&self, addr: RowAddr) -> impl Iterator<Item = RowAddr> {
        let last = self.rows_per_subarray - 1;
        let below = (addr.row > 0).then(|| RowAddr {
            row: addr.row - 1,
            ..addr
        });
        let above = (addr.row < last).then(|| RowAddr {
            row: addr.row + 1,
            ..addr
        });
        below.into_iter().chain(above)
    }
}

/// Physical row address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowAddr {
    pub bank: u32,
    pub subarray: u32,
    pub row: u32,
}

impl RowAddr {
    pub const fn new(bank: u32, subarray: u32, row: u32) -> Self {
        Self {
            bank,
            subarray,
            row,
        }
    }

    pub fn same_subarray(&self, other: &RowAddr) -> bool {
        self.bank == other.bank && self.subarray == other.subarray
    }

    pub fn is_adjacent(&self, other: &RowAddr) -> bool {
        self.same_subarray(other) && self.row.abs_diff(other.row) == 1
    }
}

impl fmt::Display for RowAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.bank, self.subarray, self.row)
    }
}

/// Command latencies and the RowHammer threshold.
///
/// `t_rh` is an activation count, every other field is in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingParams {
    pub t_act: Ns,
    pub t_aap: Ns,
    pub t_ref: Ns,
    pub t_rh: u64,
}

impl TimingParams {
    pub fn new(t_act: Ns, t_aap: Ns, t_ref: Ns, t_rh: u64) -> Result<Self, DramError> {
        let t = Self {
            t_act,
            t_aap,
            t_ref,
            t_rh,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), DramError> {
        if self.t_act == 0 {
            return Err(DramError::Timing("t_act must be positive".into()));
        }
        if self.t_aap < 2 * self.t_act {
            return Err(DramError::Timing(format!(
                "t_aap ({}) must cover two activations (2 x {})",
                self.t_aap, self.t_act
            )));
        }
        if self.t_rh == 0 {
            return Err(DramError::Timing("t_rh must be at least 1".into()));
        }
        if self.t_ref <= self.t_act * self.t_rh {
            return Err(DramError::Timing(format!(
                "t_ref ({}) must exceed t_act x t_rh ({})",
                self.t_ref,
                self.t_act * self.t_rh
            )));
        }
        Ok(())
    }

    /// One swap costs three back-to-back RowClones.
    pub fn t_swap(&self) -> Ns {
        3 * self.t_aap
    }

    /// Time an attacker needs to reach the threshold on one aggressor.
    pub fn threshold_window(&self) -> Ns {
        self.t_act * self.t_rh
    }
}

impl Default for TimingParams {
    fn default() -> Self {
        // t_act and t_ref are conventional values; only t_aap and t_rh come from
        // published LPDDR4 numbers.
        Self {
            t_act: 45,
            t_aap: 90,
            t_ref: 64_000_000,
            t_rh: 4800,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_counts() {
        let g = DramGeometry::new(2, 3, 5, 16).unwrap();
        assert_eq!(g.total_rows(), 30);
        for i in 0..g.total_rows() {
            assert_eq!(g.index_of(g.addr_of(i)), Some(i));
        }
        assert!(DramGeometry::new(0, 1, 1, 8).is_err());
        assert!(DramGeometry::new(1, 1, 1, 12).is_err());
        assert!(DramGeometry::new(1, 1, 1, 0).is_err());
    }

    #[test]
    fn edge_rows_have_one_neighbor() {
        let g = DramGeometry::new(1, 1, 4, 8).unwrap();
        assert_eq!(g.neighbors(RowAddr::new(0, 0, 0)).count(), 1);
        assert_eq!(g.neighbors(RowAddr::new(0, 0, 3)).count(), 1);
        assert_eq!(g.neighbors(RowAddr::new(0, 0, 1)).count(), 2);
        let single = DramGeometry::new(1, 1, 1, 8).unwrap();
        assert_eq!(single.neighbors(RowAddr::new(0, 0, 0)).count(), 0);
    }

    #[test]
    fn timing_invariants() {
        let t = TimingParams::default();
        assert_eq!(t.t_swap(), 270);
        assert_eq!(t.threshold_window(), 216_000);
        assert!(TimingParams::new(45, 80, 64_000_000, 4800).is_err());
        assert!(TimingParams::new(45, 90, 64_000_000, 0).is_err());
        assert!(TimingParams::new(45, 90, 216_000, 4800).is_err());
    }
}
