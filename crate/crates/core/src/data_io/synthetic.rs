//! Synthetic separable zero-shot data.
//!
//! Class semantics are well-separated binary-ish attribute patterns. Every
//! attribute owns a hidden visual direction and lives in one region
//! (`k mod D`); a region's feature is the strength-weighted sum of its
//! attributes' directions plus Gaussian noise. Pooled features are therefore
//! a linear image of the class semantics, for seen and unseen classes alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ClassSplit, PartialDataset};
use crate::diff_core::Tensor;
use crate::error::{Error, Result};
use crate::semantic_space::SemanticSpace;

const PATTERN_ATTEMPTS: usize = 1000;
const RESTARTS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub attributes: usize,
    pub visual_dim: usize,
    pub regions: usize,
    pub embed_dim: usize,
    /// Training instances per seen class.
    pub n_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Minimum pairwise Hamming distance between class patterns, as a
    /// fraction of `K`.
    pub margin: f64,
    pub noise_std: f64,
    pub num_unseen: Option<usize>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 20,
            attributes: 32,
            visual_dim: 64,
            regions: 9,
            embed_dim: 16,
            n_per_class: 30,
            val_per_class: 10,
            test_per_class: 20,
            margin: 0.25,
            noise_std: 0.5,
            num_unseen: None,
            seed: 0,
        }
    }
}

/// Generated semantics plus train (seen classes), validation and test
/// (all classes) splits. All candidate sets are clean singletons; add noise
/// with [`super::synthesize_candidates`].
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub semantic: SemanticSpace,
    pub split: ClassSplit,
    pub train: PartialDataset,
    pub val: PartialDataset,
    pub test: PartialDataset,
}

fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn class_patterns(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Option<Vec<Vec<bool>>> {
    let k = spec.attributes;
    let min_dist = (spec.margin * k as f64).ceil() as usize;
    let mut patterns: Vec<Vec<bool>> = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let found = (0..PATTERN_ATTEMPTS).find_map(|_| {
            let p: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
            let ok = p.iter().any(|&b| b) && patterns.iter().all(|q| hamming(&p, q) >= min_dist);
            ok.then_some(p)
        });
        patterns.push(found?);
    }
    let covered = (0..k).all(|j| patterns.iter().any(|p| p[j]));
    covered.then_some(patterns)
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.classes < 4 {
        return Err(Error::Config(format!("need at least 4 classes, got {}", spec.classes)));
    }
    if !(spec.margin > 0.0) {
        return Err(Error::Config(format!("margin must be positive, got {}", spec.margin)));
    }
    if spec.attributes < 2 || spec.visual_dim == 0 || spec.regions == 0 || spec.embed_dim == 0 {
        return Err(Error::Config("K >= 2 and positive d_v, D, d_w2v required".into()));
    }
    if spec.n_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Config("need at least one train and test instance per class".into()));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::Config(format!("noise_std must be >= 0, got {}", spec.noise_std)));
    }
    let split = match spec.num_unseen {
        Some(u) => ClassSplit::new(spec.classes, u)?,
        None => ClassSplit::default_for(spec.classes)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns = (0..RESTARTS)
        .find_map(|_| class_patterns(spec, &mut rng))
        .ok_or_else(|| {
            Error::Config(format!(
                "could not draw {} class patterns with Hamming separation {} of K = {}; \
                 use fewer classes or more attributes",
                spec.classes, spec.margin, spec.attributes
            ))
        })?;

    let (q, k) = (spec.classes, spec.attributes);
    let mut s = Tensor::zeros(&[q, k]);
    for (c, p) in patterns.iter().enumerate() {
        for (j, &bit) in p.iter().enumerate() {
            if bit {
                s.set(c, j, 0.8 + 0.2 * rng.random::<f64>());
            }
        }
    }
    let mut embed = gaussian_matrix(k, spec.embed_dim, &mut rng);
    for r in 0..k {
        let norm = embed.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        embed.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    let names = (0..q).map(|c| format!("class_{c}")).collect();
    let semantic = SemanticSpace::new(s, embed, names)?;
    let directions = gaussian_matrix(k, spec.visual_dim, &mut rng);

    let mut make_split = |classes: &[usize], per_class: usize| -> Result<PartialDataset> {
        let mut features = Vec::with_capacity(classes.len() * per_class);
        let mut labels = Vec::with_capacity(classes.len() * per_class);
        for &c in classes {
            for _ in 0..per_class {
                let mut f = gaussian_matrix(spec.regions, spec.visual_dim, &mut rng);
                f.data_mut().iter_mut().for_each(|v| *v *= spec.noise_std);
                for j in 0..k {
                    let strength = semantic.class_attributes.get(c, j);
                    if strength == 0.0 {
                        continue;
                    }
                    let region = f.row_mut(j % spec.regions);
                    for (x, g) in region.iter_mut().zip(directions.row(j)) {
                        *x += strength * g;
                    }
                }
                features.push(f);
                labels.push(c);
            }
        }
        let mut cand = Tensor::zeros(&[labels.len(), q]);
        for (i, &y) in labels.iter().enumerate() {
            cand.set(i, y, 1.0);
        }
        PartialDataset::new(features, cand, labels)
    };
    let all: Vec<usize> = (0..q).collect();
    let train = make_split(&split.seen, spec.n_per_class)?;
    let val = make_split(&all, spec.val_per_class.max(1))?;
    let test = make_split(&all, spec.test_per_class)?;
    Ok(SyntheticData {
        semantic,
        split,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_mean_accuracy(train: &PartialDataset, test: &PartialDataset, q: usize) -> f64 {
        let pooled = train.pooled_features().unwrap();
        let mut means = vec![vec![0.0; pooled.cols()]; q];
        let mut counts = vec![0usize; q];
        for (i, &y) in train.true_labels.iter().enumerate() {
            counts[y] += 1;
            for (m, v) in means[y].iter_mut().zip(pooled.row(i)) {
                *m += v;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        let t = test.pooled_features().unwrap();
        let mut hits = 0;
        for (i, &y) in test.true_labels.iter().enumerate() {
            let dist = |c: usize| -> f64 { means[c].iter().zip(t.row(i)).map(|(a, b)| (a - b).powi(2)).sum() };
            let best = (0..q)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
                .unwrap();
            hits += usize::from(best == y);
        }
        hits as f64 / test.len() as f64
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec {
            seed: 11,
            ..Default::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.semantic, b.semantic);
    }

    #[test]
    fn patterns_are_separated() {
        let spec = SyntheticSpec::default();
        let d = generate_synthetic(&spec).unwrap();
        let s = &d.semantic.class_attributes;
        for a in 0..s.rows() {
            for b in 0..a {
                let dist = (0..s.cols())
                    .filter(|&j| (s.get(a, j) > 0.0) != (s.get(b, j) > 0.0))
                    .count();
                assert!(dist >= 8, "classes {a},{b} differ in {dist} attributes");
            }
        }
        assert_eq!(d.train.len(), 16 * 30);
        assert!(d.train.check_seen_only(16).is_ok());
    }

    #[test]
    fn unreachable_separation_is_reported() {
        let spec = SyntheticSpec {
            classes: 40,
            attributes: 4,
            margin: 0.9,
            ..Default::default()
        };
        let err = generate_synthetic(&spec).unwrap_err();
        assert!(err.to_string().contains("more attributes"), "{err}");
    }

    #[test]
    fn default_data_passes_nearest_mean_floor() {
        let d = generate_synthetic(&SyntheticSpec::default()).unwrap();
        // class means fitted on the validation split, which covers all classes
        let acc = nearest_mean_accuracy(&d.val, &d.test, 20);
        assert!(acc >= 0.95, "nearest-mean accuracy {acc}");
    }

    #[test]
    fn noiseless_single_instance_is_exactly_linear() {
        let spec = SyntheticSpec {
            n_per_class: 1,
            noise_std: 0.0,
            ..Default::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        // every seen-class test instance coincides with its training instance
        let seen_test: Vec<usize> = (0..d.test.len()).filter(|&i| d.test.true_labels[i] < 16).collect();
        let pooled = d.test.pooled_features().unwrap();
        let train_pooled = d.train.pooled_features().unwrap();
        for i in seen_test {
            let y = d.test.true_labels[i];
            let diff: f64 = pooled
                .row(i)
                .iter()
                .zip(train_pooled.row(y))
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff < 1e-12);
        }
    }
}
