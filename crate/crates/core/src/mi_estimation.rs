//! Attribute-level mutual-information learning.
//!
//! Positive pairs join the same selected attribute across two instances of a
//! batch; negatives join an anchor with a different attribute of any
//! instance. A small MLP critic `V(x, y)` is trained with the Jensen–Shannon
//! objective `E_pos[softplus(−V)] + E_neg[softplus(V)]`, and the NWJ-style
//! estimate `E_pos[V] − E_neg[exp V] + 1` serves as the attribute MI term of
//! the joint loss.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diff_core::{sgd_step, OptimState, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::semantic_space::AttributeSelection;

pub const W1: &str = "critic.w1";
pub const B1: &str = "critic.b1";
pub const W2: &str = "critic.w2";
pub const B2: &str = "critic.b2";

pub const DEFAULT_EXP_CLAMP: f64 = 20.0;

/// Two-layer perceptron on concatenated pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub store: ParamStore,
}

impl CriticParams {
    /// `input_dim` is the width of one side of a pair.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "critic needs positive widths, got input {input_dim}, hidden {hidden}"
            )));
        }
        let mut store = ParamStore::new();
        store.insert_uniform(W1, 2 * input_dim, hidden, rng)?;
        store.insert(B1, Tensor::zeros(&[1, hidden]))?;
        store.insert_uniform(W2, hidden, 1, rng)?;
        store.insert(B2, Tensor::zeros(&[1, 1]))?;
        Ok(CriticParams {
            input_dim,
            hidden,
            store,
        })
    }

    pub fn from_store(input_dim: usize, hidden: usize, store: ParamStore) -> Result<Self> {
        for (name, shape) in [
            (W1, [2 * input_dim, hidden]),
            (B1, [1, hidden]),
            (W2, [hidden, 1]),
            (B2, [1, 1]),
        ] {
            let t = store.get(name)?;
            if t.rows() != shape[0] || t.cols() != shape[1] {
                return Err(Error::Shape {
                    op: "critic params",
                    left: t.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
        }
        Ok(CriticParams {
            input_dim,
            hidden,
            store,
        })
    }

    pub fn vars(&self, tape: &mut Tape) -> Result<CriticVars> {
        let mut p = |n: &str| -> Result<Var> { Ok(tape.param(n, self.store.get(n)?)) };
        Ok(CriticVars {
            w1: p(W1)?,
            b1: p(B1)?,
            w2: p(W2)?,
            b2: p(B2)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CriticVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// One end of a pair: attribute `attribute` of batch instance `instance`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub instance: usize,
    pub attribute: usize,
}

/// Index-level description of a pair batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairPlan {
    pub attributes: usize,
    pub positives: Vec<(Slot, Slot)>,
    pub negatives: Vec<(Slot, Slot)>,
}

impl PairPlan {
    fn row(&self, s: Slot) -> usize {
        s.instance * self.attributes + s.attribute
    }

    /// Row indices into the vertically stacked `[â_0; â_1; …]` matrix:
    /// (positive anchors, positives, negative anchors, negatives).
    pub fn rows(&self) -> [Vec<usize>; 4] {
        let split = |pairs: &[(Slot, Slot)]| -> (Vec<usize>, Vec<usize>) {
            pairs.iter().map(|&(a, b)| (self.row(a), self.row(b))).unzip()
        };
        let (pa, po) = split(&self.positives);
        let (na, no) = split(&self.negatives);
        [pa, po, na, no]
    }
}

/// Positive and negative pairs as stacked row matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub pos_anchor: Tensor,
    pub pos_other: Tensor,
    pub neg_anchor: Tensor,
    pub neg_other: Tensor,
}

impl PairBatch {
    pub fn new(pos_anchor: Tensor, pos_other: Tensor, neg_anchor: Tensor, neg_other: Tensor) -> Result<Self> {
        let (pa, po, na, no) = (
            pos_anchor.as_matrix(),
            pos_other.as_matrix(),
            neg_anchor.as_matrix(),
            neg_other.as_matrix(),
        );
        if pa.rows() == 0 || na.rows() == 0 {
            return Err(Error::Degenerate("pair batch needs positives and negatives".into()));
        }
        let cols = pa.cols();
        for (x, y) in [(&pa, &po), (&na, &no)] {
            if x.rows() != y.rows() || x.cols() != cols || y.cols() != cols {
                return Err(Error::Shape {
                    op: "pair batch",
                    left: x.shape().to_vec(),
                    right: y.shape().to_vec(),
                });
            }
        }
        if [&pa, &po, &na, &no].iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("pair batch".into()));
        }
        Ok(PairBatch {
            pos_anchor: pa,
            pos_other: po,
            neg_anchor: na,
            neg_other: no,
        })
    }

    pub fn num_positives(&self) -> usize {
        self.pos_anchor.rows()
    }

    pub fn num_negatives(&self) -> usize {
        self.neg_anchor.rows()
    }

    fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        Tensor::matrix(idx.len(), t.cols(), data).expect("consistent shape")
    }

    /// Subset of positives and negatives by row index.
    pub fn select(&self, pos: &[usize], neg: &[usize]) -> Result<PairBatch> {
        PairBatch::new(
            Self::gather(&self.pos_anchor, pos),
            Self::gather(&self.pos_other, pos),
            Self::gather(&self.neg_anchor, neg),
            Self::gather(&self.neg_other, neg),
        )
    }
}

/// Samples pair indices for a batch of `batch_size` instances with
/// `attributes` attributes each.
///
/// For every selected attribute `k` and every instance `i` there is one
/// positive `(â_k^i, â_k^j)` with `j ≠ i` drawn uniformly, followed by
/// `neg_per_pos` negatives `(â_k^i, â_{k'}^m)` with `k' ≠ k` and `m` drawn
/// uniformly from the batch.
pub fn sample_pairs<R: Rng>(
    batch_size: usize,
    attributes: usize,
    selection: &AttributeSelection,
    neg_per_pos: usize,
    rng: &mut R,
) -> Result<PairPlan> {
    if batch_size < 2 {
        return Err(Error::Degenerate(format!(
            "pair building needs at least 2 instances, got {batch_size}"
        )));
    }
    if selection.selected.is_empty() {
        return Err(Error::Degenerate("no attributes selected".into()));
    }
    if attributes < 2 {
        return Err(Error::Degenerate("negatives need at least 2 attributes".into()));
    }
    if let Some(&k) = selection.selected.iter().find(|&&k| k >= attributes) {
        return Err(Error::Invalid(format!("selected attribute {k} out of range {attributes}")));
    }
    let mut plan = PairPlan {
        attributes,
        ..Default::default()
    };
    for &k in &selection.selected {
        for i in 0..batch_size {
            let anchor = Slot {
                instance: i,
                attribute: k,
            };
            let mut j = rng.random_range(0..batch_size - 1);
            if j >= i {
                j += 1;
            }
            plan.positives.push((
                anchor,
                Slot {
                    instance: j,
                    attribute: k,
                },
            ));
            for _ in 0..neg_per_pos {
                let mut other = rng.random_range(0..attributes - 1);
                if other >= k {
                    other += 1;
                }
                let m = rng.random_range(0..batch_size);
                plan.negatives.push((
                    anchor,
                    Slot {
                        instance: m,
                        attribute: other,
                    },
                ));
            }
        }
    }
    Ok(plan)
}

/// Builds materialized pairs from per-instance refined attributes.
pub fn build_pairs<R: Rng>(
    batch_a_hat: &[Tensor],
    selection: &AttributeSelection,
    neg_per_pos: usize,
    rng: &mut R,
) -> Result<(PairPlan, PairBatch)> {
    let first = batch_a_hat
        .first()
        .ok_or_else(|| Error::Degenerate("empty batch".into()))?;
    let (k, dv) = (first.rows(), first.cols());
    let mut stacked = Vec::with_capacity(batch_a_hat.len() * k * dv);
    for t in batch_a_hat {
        if t.rows() != k || t.cols() != dv {
            return Err(Error::Shape {
                op: "build_pairs",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        stacked.extend_from_slice(t.data());
    }
    let plan = sample_pairs(batch_a_hat.len(), k, selection, neg_per_pos, rng)?;
    let all = Tensor::matrix(batch_a_hat.len() * k, dv, stacked)?;
    let [pa, po, na, no] = plan.rows();
    let g = |idx: &[usize]| PairBatch::gather(&all, idx);
    let batch = PairBatch::new(g(&pa), g(&po), g(&na), g(&no))?;
    Ok((plan, batch))
}

/// Critic scores for row pairs `(x_r, y_r)`, as a `P × 1` column.
pub fn critic_graph(tape: &mut Tape, c: &CriticVars, x: Var, y: Var) -> Result<Var> {
    let xy = tape.hcat(x, y)?;
    let h = tape.matmul(xy, c.w1)?;
    let h = tape.add_row(h, c.b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, c.w2)?;
    tape.add_row(out, c.b2)
}

/// Jensen–Shannon critic loss on the tape.
pub fn js_loss_graph(tape: &mut Tape, c: &CriticVars, pairs: [Var; 4]) -> Result<Var> {
    let [pa, po, na, no] = pairs;
    let vp = critic_graph(tape, c, pa, po)?;
    let vn = critic_graph(tape, c, na, no)?;
    let neg_vp = tape.neg(vp);
    let sp_pos = tape.softplus(neg_vp);
    let sp_neg = tape.softplus(vn);
    let e_pos = tape.mean(sp_pos);
    let e_neg = tape.mean(sp_neg);
    tape.add(e_pos, e_neg)
}

/// NWJ-style MI value on the tape; the exponent is clamped at `exp_clamp`.
pub fn nwj_graph(tape: &mut Tape, c: &CriticVars, pairs: [Var; 4], exp_clamp: f64) -> Result<Var> {
    let [pa, po, na, no] = pairs;
    let vp = critic_graph(tape, c, pa, po)?;
    let vn = critic_graph(tape, c, na, no)?;
    let hits = tape.value(vn).data().iter().filter(|&&v| v >= exp_clamp).count();
    if hits > 0 {
        log::debug!("NWJ exponent clamped at {exp_clamp} for {hits} negative pairs");
    }
    let vn = tape.clamp_max(vn, exp_clamp);
    let e = tape.exp(vn);
    let e_pos = tape.mean(vp);
    let e_neg = tape.mean(e);
    let diff = tape.sub(e_pos, e_neg)?;
    let one = tape.constant(Tensor::scalar(1.0));
    tape.add(diff, one)
}

fn pair_constants(tape: &mut Tape, pairs: &PairBatch) -> [Var; 4] {
    [
        tape.constant(pairs.pos_anchor.clone()),
        tape.constant(pairs.pos_other.clone()),
        tape.constant(pairs.neg_anchor.clone()),
        tape.constant(pairs.neg_other.clone()),
    ]
}

/// `V(x, y)` for a single pair.
pub fn critic_value(x: &Tensor, y: &Tensor, params: &CriticParams) -> Result<f64> {
    let mut tape = Tape::new();
    let c = params.vars(&mut tape)?;
    let xv = tape.constant(x.as_matrix());
    let yv = tape.constant(y.as_matrix());
    let out = critic_graph(&mut tape, &c, xv, yv)?;
    Ok(tape.scalar(out))
}

pub fn js_critic_loss(pairs: &PairBatch, params: &CriticParams) -> Result<f64> {
    let mut tape = Tape::new();
    let c = params.vars(&mut tape)?;
    let p = pair_constants(&mut tape, pairs);
    let out = js_loss_graph(&mut tape, &c, p)?;
    Ok(tape.scalar(out))
}

pub fn nwj_mi_value(pairs: &PairBatch, params: &CriticParams, exp_clamp: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let c = params.vars(&mut tape)?;
    let p = pair_constants(&mut tape, pairs);
    let out = nwj_graph(&mut tape, &c, p, exp_clamp)?;
    Ok(tape.scalar(out))
}

/// Settings for standalone critic fitting.
#[derive(Clone, Debug)]
pub struct CriticFit {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for CriticFit {
    fn default() -> Self {
        CriticFit {
            epochs: 30,
            batch_size: 256,
            lr: 0.05,
            momentum: 0.9,
        }
    }
}

/// Trains only the critic on fixed pairs with minibatch SGD on the JS loss.
/// Returns the final full-batch JS loss.
pub fn fit_critic<R: Rng>(
    pairs: &PairBatch,
    params: &mut CriticParams,
    fit: &CriticFit,
    rng: &mut R,
) -> Result<f64> {
    let mut opt = OptimState::new(fit.lr, fit.momentum)?;
    let mut pos: Vec<usize> = (0..pairs.num_positives()).collect();
    let mut neg: Vec<usize> = (0..pairs.num_negatives()).collect();
    let steps = pos.len().div_ceil(fit.batch_size.max(1));
    let neg_per_step = neg.len().div_ceil(steps).max(1);
    for _ in 0..fit.epochs {
        pos.shuffle(rng);
        neg.shuffle(rng);
        for (s, pchunk) in pos.chunks(fit.batch_size.max(1)).enumerate() {
            let lo = (s * neg_per_step).min(neg.len() - 1);
            let hi = ((s + 1) * neg_per_step).min(neg.len()).max(lo + 1);
            let sub = pairs.select(pchunk, &neg[lo..hi])?;
            let mut tape = Tape::new();
            let c = params.vars(&mut tape)?;
            let p = pair_constants(&mut tape, &sub);
            let loss = js_loss_graph(&mut tape, &c, p)?;
            if !tape.scalar(loss).is_finite() {
                return Err(Error::NonFinite("critic JS loss".into()));
            }
            params.store.zero_grads();
            params.store.accumulate(&tape.backward(loss)?)?;
            sgd_step(&mut params.store, &mut opt)?;
        }
    }
    js_critic_loss(pairs, params)
}
