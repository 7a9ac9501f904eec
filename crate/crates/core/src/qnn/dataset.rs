use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::QnnError;

/// Row-major samples with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    data: Vec<f64>,
    labels: Vec<usize>,
}

impl Batch {
    pub fn new(dim: usize, data: Vec<f64>, labels: Vec<usize>) -> Result<Self, QnnError> {
        if dim == 0 || data.len() != dim * labels.len() {
            return Err(QnnError::Shape(format!(
                "{} values do not form {} samples of width {dim}",
                data.len(),
                labels.len()
            )));
        }
        Ok(Self { dim, data, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Batch {
            dim: self.dim,
            data,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Seeded draw of `n` distinct samples.
    pub fn sample_subset(&self, n: usize, seed: u64) -> Batch {
        let n = n.min(self.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample(&mut rng, self.len(), n).into_vec();
        self.select(&idx)
    }

    /// Seeded class-balanced draw: class counts differ by at most one, the
    /// extra samples going to the lowest class ids. Sample order is shuffled.
    pub fn stratified_subset(&self, n: usize, num_classes: usize, seed: u64) -> Batch {
        self.stratified_split(n, num_classes, seed).0
    }

    /// [`Batch::stratified_subset`] plus the samples it left out, in their
    /// original order.
    pub fn stratified_split(&self, n: usize, num_classes: usize, seed: u64) -> (Batch, Batch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            if l < num_classes {
                by_class[l].push(i);
            }
        }
        let mut idx = Vec::with_capacity(n);
        let (base, extra) = (n / num_classes, n % num_classes);
        for (c, pool) in by_class.iter_mut().enumerate() {
            let want = (base + usize::from(c < extra)).min(pool.len());
            pool.shuffle(&mut rng);
            idx.extend_from_slice(&pool[..want]);
        }
        idx.shuffle(&mut rng);
        let mut taken = vec![false; self.len()];
        for &i in &idx {
            taken[i] = true;
        }
        let rest: Vec<usize> = (0..self.len()).filter(|&i| !taken[i]).collect();
        (self.select(&idx), self.select(&rest))
    }
}

/// Loads `label,p0..p63` rows with 0..16 pixel intensities, scaled to [0, 1].
pub fn load_digits_csv(path: impl AsRef<Path>) -> Result<Batch, QnnError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| QnnError::Dataset("empty file".into()))?;
    let dim = header.split(',').count() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label = fields
            .next()
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| QnnError::Dataset(format!("line {}: bad label", n + 2)))?;
        let before = data.len();
        for v in fields {
            let px: f64 = v
                .parse()
                .map_err(|_| QnnError::Dataset(format!("line {}: bad pixel {v:?}", n + 2)))?;
            data.push(px / 16.0);
        }
        if data.len() - before != dim {
            return Err(QnnError::Dataset(format!("line {}: wrong width", n + 2)));
        }
        labels.push(label);
    }
    Batch::new(dim, data, labels)
}
