//! Soft-label disambiguation and the adaptive cross-entropy losses.
//!
//! * `M` — visual predictions, softmax over classes of `τ·cos(v_i, p_j)`.
//! * `U`, `l̃` — an EMA of `M` per instance, renormalized over each
//!   candidate set once per epoch.
//! * `ω` — correction factors, softmax of `cos(GAP(v̂_i), p_j)` (no `τ`).
//! * `𝓛_vis = −Σ (1 + ω)·l̃·ln M`, `𝓛_sem = −Σ l̃·ln M_sem`.

use crate::diff_core::{self, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How per-instance losses are combined over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(Reduction::Sum),
            "mean" => Some(Reduction::Mean),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        }
    }

    fn factor(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n.max(1) as f64,
        }
    }
}

/// EMA accumulator and normalized soft labels over candidate sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabelState {
    pub u: Tensor,
    pub l_tilde: Tensor,
    pub epoch: u64,
    pub alpha: f64,
}

impl SoftLabelState {
    /// Uniform initialization over each candidate set.
    pub fn new(candidates: &Tensor, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        let mut u = candidates.as_matrix();
        for i in 0..u.rows() {
            let row = u.row_mut(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Invalid(format!("candidate row {i} is not binary")));
            }
            let n: f64 = row.iter().sum();
            if n == 0.0 {
                return Err(Error::Degenerate(format!("instance {i} has an empty candidate set")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(SoftLabelState {
            l_tilde: u.clone(),
            u,
            epoch: 0,
            alpha,
        })
    }

    /// `U ← (1 − α)U + αM`, then `l̃_ij = U_ij / Σ_{c∈L_i} U_ic` on candidates
    /// and zero elsewhere.
    pub fn update(&mut self, m: &Tensor, candidates: &Tensor) -> Result<()> {
        for t in [m, candidates] {
            if t.rows() != self.u.rows() || t.cols() != self.u.cols() {
                return Err(Error::Shape {
                    op: "update_soft_labels",
                    left: self.u.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let a = self.alpha;
        for (u, &mv) in self.u.data_mut().iter_mut().zip(m.data()) {
            *u = (1.0 - a) * *u + a * mv;
        }
        for i in 0..self.u.rows() {
            let cand = candidates.row(i);
            let total: f64 = self
                .u
                .row(i)
                .iter()
                .zip(cand)
                .filter(|(_, &c)| c != 0.0)
                .map(|(u, _)| u)
                .sum();
            if !(total > 0.0) {
                return Err(Error::Degenerate(format!(
                    "instance {i}: accumulated mass over candidates is {total}"
                )));
            }
            let urow = self.u.row(i).to_vec();
            for ((l, u), &c) in self.l_tilde.row_mut(i).iter_mut().zip(urow).zip(cand) {
                *l = if c != 0.0 { u / total } else { 0.0 };
            }
        }
        self.epoch += 1;
        Ok(())
    }

    /// Current best guess per instance (ties to the smallest class index).
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.l_tilde.rows()).map(|i| self.l_tilde.argmax_row(i)).collect()
    }
}

/// Functional form of [`SoftLabelState::update`].
pub fn update_soft_labels(state: &SoftLabelState, m: &Tensor, candidates: &Tensor) -> Result<SoftLabelState> {
    let mut next = state.clone();
    next.update(m, candidates)?;
    Ok(next)
}

/// Logits `τ·cos(x_i, p_j)` on the tape.
pub fn cosine_logits(tape: &mut Tape, x: Var, prototypes: Var, tau: f64) -> Result<Var> {
    let cos = tape.cosine_matrix(x, prototypes)?;
    Ok(tape.scale(cos, tau))
}

/// Weighted soft cross-entropy `−Σ w ⊙ l̃ ⊙ log_probs` on the tape, where
/// `weight` (if given) is added to one: `w = 1 + weight`.
pub fn soft_cross_entropy_graph(
    tape: &mut Tape,
    log_probs: Var,
    l_tilde: Var,
    weight: Option<Var>,
    reduction: Reduction,
) -> Result<Var> {
    let n = tape.value(log_probs).rows();
    let target = match weight {
        Some(w) => {
            let wl = tape.mul(w, l_tilde)?;
            tape.add(wl, l_tilde)?
        }
        None => l_tilde,
    };
    let prod = tape.mul(target, log_probs)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -reduction.factor(n)))
}

fn check_cols(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::Shape {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn softmax_of_cosines(x: &Tensor, prototypes: &Tensor, tau: f64, op: &'static str) -> Result<Tensor> {
    check_cols(x, prototypes, op)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.constant(prototypes.clone());
    let logits = cosine_logits(&mut tape, xv, pv, tau)?;
    let out = tape.softmax_rows(logits);
    Ok(tape.value(out).clone())
}

/// Visual prediction matrix `M` (`N × Q`).
pub fn visual_predictions(v: &Tensor, prototypes: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    softmax_of_cosines(v, prototypes, tau, "visual_predictions")
}

/// Correction factors `ω` from pooled refined features.
pub fn correction_factor(v_hat_pooled: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    softmax_of_cosines(v_hat_pooled, prototypes, 1.0, "correction_factor")
}

/// Semantic confidences `M_sem` from K-pooled refined attributes.
pub fn semantic_confidence(a_hat_pooled: &Tensor, class_embed: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    softmax_of_cosines(a_hat_pooled, class_embed, tau, "semantic_confidence")
}

/// Mean over the `K` attribute rows of each instance's `â`.
pub fn pool_attributes(a_hats: &[Tensor]) -> Result<Tensor> {
    let rows = a_hats
        .iter()
        .map(|a| diff_core::gap(a).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

fn weighted_ce(m: &Tensor, l_tilde: &Tensor, omega: Option<&Tensor>) -> Result<f64> {
    m.same_shape(l_tilde, "cross_entropy")?;
    if let Some(w) = omega {
        m.same_shape(w, "cross_entropy")?;
    }
    let mut total = 0.0;
    for (idx, (&mv, &l)) in m.data().iter().zip(l_tilde.data()).enumerate() {
        if l == 0.0 {
            continue;
        }
        let w = 1.0 + omega.map_or(0.0, |o| o.data()[idx]);
        total -= w * l * mv.ln();
    }
    Ok(total)
}

/// `𝓛_vis = −Σ_i Σ_j (1 + ω_ij)·l̃_ij·ln m_ij` (summed).
pub fn visual_loss(m: &Tensor, l_tilde: &Tensor, omega: &Tensor) -> Result<f64> {
    weighted_ce(m, l_tilde, Some(omega))
}

/// `𝓛_sem = −Σ_i Σ_j l̃_ij·ln m'_ij` (summed).
pub fn semantic_loss(m_sem: &Tensor, l_tilde: &Tensor) -> Result<f64> {
    weighted_ce(m_sem, l_tilde, None)
}
