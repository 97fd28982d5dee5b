//! Partial-label datasets: the in-memory model, candidate-set synthesis,
//! a synthetic separable generator and the binary feature format.

mod format;
mod synthetic;

pub use format::{decode, encode, load_features, save_features, FORMAT_VERSION, MAGIC};
pub use synthetic::{generate_synthetic, SyntheticData, SyntheticSpec};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff_core::{gap, Tensor};
use crate::error::{Error, Result};

/// Instances with regional features, candidate sets and hidden labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialDataset {
    /// One `D × d_v` grid per instance.
    pub features: Vec<Tensor>,
    /// `N × Q` binary candidate indicators.
    pub candidates: Tensor,
    /// Evaluation-only ground truth.
    pub true_labels: Vec<usize>,
}

impl PartialDataset {
    pub fn new(features: Vec<Tensor>, candidates: Tensor, true_labels: Vec<usize>) -> Result<Self> {
        let ds = PartialDataset {
            features,
            candidates: candidates.as_matrix(),
            true_labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.true_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.candidates.cols()
    }

    pub fn regions(&self) -> usize {
        self.features.first().map_or(0, Tensor::rows)
    }

    pub fn visual_dim(&self) -> usize {
        self.features.first().map_or(0, Tensor::cols)
    }

    /// Checks shapes, binary candidates and that every true label is a
    /// candidate.
    pub fn validate(&self) -> Result<()> {
        let n = self.true_labels.len();
        if n == 0 {
            return Err(Error::Invalid("dataset has no instances".into()));
        }
        if self.features.len() != n || self.candidates.rows() != n {
            return Err(Error::Invalid(format!(
                "{} feature grids and {} candidate rows for {n} labels",
                self.features.len(),
                self.candidates.rows()
            )));
        }
        let (d, dv) = (self.regions(), self.visual_dim());
        if d == 0 || dv == 0 {
            return Err(Error::Invalid("feature grids must be non-empty".into()));
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.rows() != d || f.cols() != dv {
                return Err(Error::Invalid(format!(
                    "instance {i} has features {:?}, expected [{d}, {dv}]",
                    f.shape()
                )));
            }
            if !f.is_finite() {
                return Err(Error::Invalid(format!("instance {i} has non-finite features")));
            }
        }
        let q = self.num_classes();
        for (i, &y) in self.true_labels.iter().enumerate() {
            let row = self.candidates.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Invalid(format!("instance {i} has a non-binary candidate row")));
            }
            if y >= q {
                return Err(Error::Invalid(format!("instance {i} has label {y} outside {q} classes")));
            }
            if row[y] != 1.0 {
                return Err(Error::Invalid(format!(
                    "instance {i}: true label {y} missing from its candidate set"
                )));
            }
        }
        Ok(())
    }

    /// Fails if any candidate (or true label) is outside the first
    /// `num_seen` classes.
    pub fn check_seen_only(&self, num_seen: usize) -> Result<()> {
        for i in 0..self.len() {
            if let Some(c) = self.candidates.row(i)[num_seen..].iter().position(|&v| v != 0.0) {
                return Err(Error::Invalid(format!(
                    "instance {i} has unseen class {} in its candidate set",
                    num_seen + c
                )));
            }
        }
        Ok(())
    }

    /// GAP of every instance, `N × d_v`.
    pub fn pooled_features(&self) -> Result<Tensor> {
        let rows = self
            .features
            .iter()
            .map(|f| gap(f).map(Tensor::into_data))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Mean candidate-set size.
    pub fn mean_candidates(&self) -> f64 {
        self.candidates.sum() / self.len() as f64
    }
}

/// Seen/unseen partition: the last `num_unseen` classes are unseen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSplit {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl ClassSplit {
    pub fn new(num_classes: usize, num_unseen: usize) -> Result<Self> {
        if num_unseen == 0 || num_unseen + 2 > num_classes {
            return Err(Error::Config(format!(
                "{num_unseen} unseen of {num_classes} classes leaves fewer than 2 seen or no unseen class"
            )));
        }
        let num_seen = num_classes - num_unseen;
        Ok(ClassSplit {
            seen: (0..num_seen).collect(),
            unseen: (num_seen..num_classes).collect(),
        })
    }

    /// Default split: `⌈Q/5⌉` unseen.
    pub fn default_for(num_classes: usize) -> Result<Self> {
        Self::new(num_classes, num_classes.div_ceil(5))
    }

    pub fn num_seen(&self) -> usize {
        self.seen.len()
    }

    pub fn num_classes(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseProtocol {
    /// Each non-true seen class joins the candidate set with probability `q`.
    QBernoulli(f64),
    /// Exactly `r` distinct non-true seen classes join the candidate set.
    RCount(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub protocol: NoiseProtocol,
    pub seed: u64,
}

/// Builds candidate sets: the true label plus noisy labels drawn from the
/// other classes in `pool` (normally the seen classes).
pub fn synthesize_candidates(
    true_labels: &[usize],
    num_classes: usize,
    pool: &[usize],
    spec: &NoiseSpec,
) -> Result<Tensor> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    if let Some(&c) = pool.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Config(format!("pool class {c} outside {num_classes} classes")));
    }
    match spec.protocol {
        NoiseProtocol::QBernoulli(q) if !(0.0..=1.0).contains(&q) => {
            return Err(Error::Config(format!("q must lie in [0, 1], got {q}")));
        }
        NoiseProtocol::RCount(r) if r + 1 > pool.len() => {
            return Err(Error::Config(format!(
                "r = {r} false positives exceeds the {} available classes minus one",
                pool.len()
            )));
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Tensor::zeros(&[true_labels.len(), num_classes]);
    for (i, &y) in true_labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Invalid(format!("instance {i} has label {y} outside {num_classes} classes")));
        }
        let others: Vec<usize> = pool.iter().copied().filter(|&c| c != y).collect();
        let row = out.row_mut(i);
        row[y] = 1.0;
        match spec.protocol {
            NoiseProtocol::QBernoulli(q) => {
                for &c in &others {
                    if rng.random_bool(q) {
                        row[c] = 1.0;
                    }
                }
            }
            NoiseProtocol::RCount(r) => {
                if r > others.len() {
                    return Err(Error::Config(format!(
                        "instance {i}: r = {r} exceeds the {} non-true classes",
                        others.len()
                    )));
                }
                for j in index::sample(&mut rng, others.len(), r) {
                    row[others[j]] = 1.0;
                }
            }
        }
    }
    Ok(out)
}
