//! Placement of weight bits in DRAM rows, tracked as content moves.

use std::collections::HashMap;

use crate::dram::{Dram, DramError, DramGeometry, Ns, RowAddr};
use crate::qnn::{BitLocation, QuantizedModel};
use crate::sim::SimError;

/// Parameters of the default layer-major layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutParams {
    /// Weights per data row; `1` is the one-weight-per-row worst case.
    pub weights_per_row: u32,
    /// Physical distance between consecutive data rows of a sub-array.
    pub row_stride: u32,
    pub first_row: u32,
    pub bank: u32,
    /// Rows at the top of each sub-array left free (spare/reserved area).
    pub tail_rows: u32,
}

impl Default for LayoutParams {
    fn default() -> Self {
        Self {
            weights_per_row: 32,
            row_stride: 3,
            first_row: 2,
            bank: 0,
            tail_rows: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Relocation {
    pub time: Ns,
    pub a: RowAddr,
    pub b: RowAddr,
}

/// Forward map (weight -> data row + slot), data row -> physical row and the
/// inverse. Data rows are the unit that moves: a relocation exchanges the
/// contents of two physical rows.
#[derive(Debug, Clone, Default)]
pub struct AddressMap {
    weights: Vec<Vec<(u32, u32)>>,
    row_of: Vec<RowAddr>,
    slots: Vec<Vec<(usize, usize)>>,
    at: HashMap<RowAddr, u32>,
    revisions: Vec<Relocation>,
}

impl AddressMap {
    /// Layer-major layout: each layer starts on a fresh data row, data rows
    /// are dealt round-robin over the sub-arrays of `p.bank`.
    pub fn layer_major(
        geometry: &DramGeometry,
        layer_weights: &[usize],
        p: LayoutParams,
    ) -> Result<Self, SimError> {
        let slots_per_row = geometry.row_width / 8;
        if p.weights_per_row == 0 || p.weights_per_row > slots_per_row {
            return Err(SimError::Config(format!(
                "weights_per_row must be in 1..={slots_per_row}"
            )));
        }
        if p.row_stride == 0 || p.bank >= geometry.banks {
            return Err(SimError::Config("bad row_stride or bank".into()));
        }
        let wpr = p.weights_per_row as usize;
        let rows_needed: usize = layer_weights.iter().map(|w| w.div_ceil(wpr)).sum();
        let subs = geometry.subarrays_per_bank as usize;
        let usable = geometry
            .rows_per_subarray
            .saturating_sub(p.first_row + p.tail_rows);
        let per_sub = usable.div_ceil(p.row_stride) as usize;
        if rows_needed > per_sub * subs {
            return Err(SimError::Config(format!(
                "model needs {rows_needed} data rows, bank {} holds {}",
                p.bank,
                per_sub * subs
            )));
        }
        let mut placements = Vec::new();
        let mut d = 0usize;
        for &n in layer_weights {
            for k in 0..n {
                let dr = d + k / wpr;
                let addr = RowAddr::new(
                    p.bank,
                    (dr % subs) as u32,
                    p.first_row + p.row_stride * (dr / subs) as u32,
                );
                placements.push((addr, (k % wpr) as u32));
            }
            d += n.div_ceil(wpr);
        }
        Self::explicit(geometry, layer_weights, &placements)
    }

    /// Builds a map from one `(row, slot)` per weight, in layer-major weight
    /// order.
    pub fn explicit(
        geometry: &DramGeometry,
        layer_weights: &[usize],
        placements: &[(RowAddr, u32)],
    ) -> Result<Self, SimError> {
        let total: usize = layer_weights.iter().sum();
        if placements.len() != total {
            return Err(SimError::Config(format!(
                "{} placements for {total} weights",
                placements.len()
            )));
        }
        let slots_per_row = geometry.row_width / 8;
        let mut map = Self::default();
        let mut it = placements.iter();
        for (layer, &n) in layer_weights.iter().enumerate() {
            let mut w = Vec::with_capacity(n);
            for idx in 0..n {
                let &(addr, slot) = it.next().expect("length checked");
                if !geometry.contains(addr) || slot >= slots_per_row {
                    return Err(SimError::Config(format!(
                        "weight {layer}:{idx} placed outside the device at {addr} slot {slot}"
                    )));
                }
                let dr = match map.at.get(&addr) {
                    Some(&dr) => dr,
                    None => {
                        let dr = map.row_of.len() as u32;
                        map.row_of.push(addr);
                        map.slots.push(vec![(usize::MAX, 0); slots_per_row as usize]);
                        map.at.insert(addr, dr);
                        dr
                    }
                };
                let cell = &mut map.slots[dr as usize][slot as usize];
                if cell.0 != usize::MAX {
                    return Err(SimError::Config(format!(
                        "weights {}:{} and {layer}:{idx} both at {addr} slot {slot}",
                        cell.0, cell.1
                    )));
                }
                *cell = (layer, idx);
                w.push((dr, slot));
            }
            map.weights.push(w);
        }
        Ok(map)
    }

    pub fn data_rows(&self) -> usize {
        self.row_of.len()
    }

    pub fn revision(&self) -> usize {
        self.revisions.len()
    }

    pub fn revisions(&self) -> &[Relocation] {
        &self.revisions
    }

    /// Data row holding `loc`.
    pub fn data_row_of(&self, loc: BitLocation) -> u32 {
        self.weights[loc.layer][loc.weight_index].0
    }

    /// Current physical row of a data row.
    pub fn row_of(&self, data_row: u32) -> RowAddr {
        self.row_of[data_row as usize]
    }

    /// Current physical row of every data row.
    pub fn rows(&self) -> &[RowAddr] {
        &self.row_of
    }

    pub fn data_row_at(&self, addr: RowAddr) -> Option<u32> {
        self.at.get(&addr).copied()
    }

    /// Every weight bit stored in a data row.
    pub fn bits_of(&self, data_row: u32) -> impl Iterator<Item = BitLocation> + '_ {
        self.slots[data_row as usize]
            .iter()
            .filter(|(layer, _)| *layer != usize::MAX)
            .flat_map(|&(layer, idx)| (0..8).map(move |b| BitLocation::new(layer, idx, b)))
    }

    /// Current `(row, column)` of a weight bit.
    pub fn locate(&self, loc: BitLocation) -> (RowAddr, u32) {
        let (dr, slot) = self.weights[loc.layer][loc.weight_index];
        (self.row_of[dr as usize], slot * 8 + u32::from(loc.bit))
    }

    /// Weight bit stored at `(row, column)` right now, if any.
    pub fn bit_at(&self, addr: RowAddr, column: u32) -> Option<BitLocation> {
        let dr = *self.at.get(&addr)?;
        let (layer, idx) = *self.slots[dr as usize].get((column / 8) as usize)?;
        (layer != usize::MAX).then(|| BitLocation::new(layer, idx, (column % 8) as u8))
    }

    /// Records that the contents of `a` and `b` traded places.
    pub fn exchange(&mut self, a: RowAddr, b: RowAddr, time: Ns) {
        let da = self.at.remove(&a);
        let db = self.at.remove(&b);
        if let Some(d) = da {
            self.row_of[d as usize] = b;
            self.at.insert(b, d);
        }
        if let Some(d) = db {
            self.row_of[d as usize] = a;
            self.at.insert(a, d);
        }
        if da.is_some() || db.is_some() {
            self.revisions.push(Relocation { time, a, b });
        }
    }

    fn row_bytes(&self, dr: usize, model: &QuantizedModel, width: usize) -> Vec<u8> {
        let mut bytes = vec![0u8; width];
        for (slot, &(layer, idx)) in self.slots[dr].iter().enumerate() {
            if layer != usize::MAX {
                bytes[slot] = model.code(layer, idx) as u8;
            }
        }
        bytes
    }

    /// Lays the model's weight codes into the mapped rows.
    pub fn install(&self, dram: &mut Dram, model: &QuantizedModel) -> Result<(), SimError> {
        if self.weights.len() != model.layers().len()
            || self
                .weights
                .iter()
                .zip(model.layer_weight_counts())
                .any(|(w, n)| w.len() != n)
        {
            return Err(SimError::Config("map does not match the model shape".into()));
        }
        let width = dram.geometry().row_bytes();
        for (dr, &addr) in self.row_of.iter().enumerate() {
            let bytes = self.row_bytes(dr, model, width);
            dram.load_row(addr, &bytes)?;
        }
        Ok(())
    }

    /// Reads the weight codes back out of DRAM into a copy of `template`.
    pub fn extract(&self, dram: &Dram, template: &QuantizedModel) -> Result<QuantizedModel, DramError> {
        let mut m = template.clone();
        for (layer, ws) in self.weights.iter().enumerate() {
            for (idx, &(dr, slot)) in ws.iter().enumerate() {
                let row = dram.peek_row(self.row_of[dr as usize])?;
                m.set_code(layer, idx, row[slot as usize] as i8);
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dram::{FlipModel, TimingParams};
    use crate::qnn::{Activation, Layer, LayerKind};

    fn model(sizes: &[(usize, usize)]) -> QuantizedModel {
        let layers = sizes
            .iter()
            .enumerate()
            .map(|(k, &(i, o))| Layer {
                kind: LayerKind::Dense { inputs: i, outputs: o },
                activation: Activation::Identity,
                scale: 0.1,
                codes: (0..i * o).map(|x| ((x * 7 + k) % 251) as i8).collect(),
                bias: vec![0.0; o],
            })
            .collect();
        QuantizedModel::new(layers, sizes.last().unwrap().1).unwrap()
    }

    #[test]
    fn layer_major_placement() {
        let g = DramGeometry::default();
        let m = AddressMap::layer_major(&g, &[40, 10], LayoutParams::default()).unwrap();
        // 40 weights take two rows, the next layer starts a third
        assert_eq!(m.data_rows(), 3);
        assert_eq!(m.rows()[0], RowAddr::new(0, 0, 2));
        assert_eq!(m.rows()[1], RowAddr::new(0, 1, 2));
        assert_eq!(m.rows()[2], RowAddr::new(0, 2, 2));
        let loc = BitLocation::new(0, 33, 5);
        assert_eq!(m.locate(loc), (RowAddr::new(0, 1, 2), 8 + 5));
        assert_eq!(m.bit_at(RowAddr::new(0, 1, 2), 13), Some(loc));
        assert_eq!(m.bit_at(RowAddr::new(0, 1, 2), 8 * 20), None);
        assert_eq!(m.bits_of(2).count(), 80);
    }

    #[test]
    fn stride_after_one_pass_over_subarrays() {
        let g = DramGeometry::default();
        let m = AddressMap::layer_major(&g, &[32 * 9], LayoutParams::default()).unwrap();
        assert_eq!(m.rows()[8], RowAddr::new(0, 0, 5));
    }

    #[test]
    fn capacity_is_checked() {
        let g = DramGeometry::new(1, 1, 8, 256).unwrap();
        assert!(AddressMap::layer_major(&g, &[32 * 10], LayoutParams::default()).is_err());
    }

    #[test]
    fn explicit_rejects_collisions() {
        let g = DramGeometry::default();
        let a = RowAddr::new(0, 0, 4);
        assert!(AddressMap::explicit(&g, &[2], &[(a, 0), (a, 0)]).is_err());
        assert!(AddressMap::explicit(&g, &[2], &[(a, 0), (RowAddr::new(9, 0, 0), 0)]).is_err());
        assert!(AddressMap::explicit(&g, &[2], &[(a, 0), (a, 32)]).is_err());
        assert!(AddressMap::explicit(&g, &[3], &[(a, 0)]).is_err());
        let m = AddressMap::explicit(&g, &[2], &[(a, 0), (RowAddr::new(0, 3, 1), 31)]).unwrap();
        assert_eq!(m.locate(BitLocation::new(0, 1, 7)), (RowAddr::new(0, 3, 1), 255));
    }

    #[test]
    fn install_extract_round_trip_through_exchange() {
        let g = DramGeometry::default();
        let m0 = model(&[(8, 8), (8, 3)]);
        let mut map = AddressMap::layer_major(&g, &m0.layer_weight_counts(), LayoutParams::default()).unwrap();
        let mut dram = Dram::new(g, TimingParams::default(), FlipModel::default()).unwrap();
        map.install(&mut dram, &m0).unwrap();
        assert_eq!(map.extract(&dram, &m0).unwrap(), m0);

        let a = map.rows()[0];
        let free = RowAddr::new(0, 0, 40);
        dram.row_clone(a, free, 0).unwrap();
        map.exchange(a, free, 0);
        assert_eq!(map.row_of(0), free);
        assert_eq!(map.data_row_at(a), None);
        assert_eq!(map.revision(), 1);
        assert_eq!(map.extract(&dram, &m0).unwrap(), m0);
    }

    #[test]
    fn exchange_of_free_rows_is_not_a_revision() {
        let g = DramGeometry::default();
        let mut map = AddressMap::layer_major(&g, &[4], LayoutParams::default()).unwrap();
        map.exchange(RowAddr::new(0, 3, 50), RowAddr::new(0, 3, 51), 7);
        assert_eq!(map.revision(), 0);
    }
}
