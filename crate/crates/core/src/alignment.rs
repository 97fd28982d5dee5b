//! Bidirectional visual–semantic attention.
//!
//! The visual-to-attribute block (VTA) lets the `K` attribute embeddings
//! attend over the `D` regional features of one image and produces refined,
//! instance-specific attribute representations `â ∈ R^{K×d_v}`. The
//! attribute-to-visual block (ATV) runs the other way: regions attend over
//! `â` and yield refined regional features `v̂ ∈ R^{D×d_v}`. Both blocks are
//! single-head, use temperature `√d`, carry a residual connection in the
//! `d`-dimensional attention space and end with the output projection `W_O`.
//!
//! Class prototypes live in visual space: `p = S · W_p`.

use rand::Rng;

use crate::diff_core::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const W_Q1: &str = "align.w_q1";
pub const W_K1: &str = "align.w_k1";
pub const W_V1: &str = "align.w_v1";
pub const W_Q2: &str = "align.w_q2";
pub const W_K2: &str = "align.w_k2";
pub const W_V2: &str = "align.w_v2";
pub const W_O: &str = "align.w_o";
/// Separate ATV output projection, present only when `W_O` is not shared.
pub const W_O_ATV: &str = "align.w_o_atv";
pub const W_P: &str = "align.w_p";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignmentDims {
    /// Number of attributes `K`.
    pub attributes: usize,
    /// Attribute embedding width `d_w2v`.
    pub embed_dim: usize,
    /// Visual feature width `d_v`.
    pub visual_dim: usize,
    /// Shared attention width `d`.
    pub attn_dim: usize,
    pub share_output_projection: bool,
}

/// Learnable matrices of both attention blocks plus the prototype map.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentParams {
    pub dims: AlignmentDims,
    pub store: ParamStore,
}

impl AlignmentParams {
    pub fn init<R: Rng>(dims: AlignmentDims, rng: &mut R) -> Result<Self> {
        if dims.attn_dim == 0 || dims.visual_dim == 0 || dims.embed_dim == 0 || dims.attributes == 0 {
            return Err(Error::Config(format!("all alignment dimensions must be positive: {dims:?}")));
        }
        let AlignmentDims {
            attributes: k,
            embed_dim: dw,
            visual_dim: dv,
            attn_dim: d,
            ..
        } = dims;
        let mut store = ParamStore::new();
        store.insert_uniform(W_Q1, dw, d, rng)?;
        store.insert_uniform(W_K1, dv, d, rng)?;
        store.insert_uniform(W_V1, dv, d, rng)?;
        store.insert_uniform(W_Q2, dv, d, rng)?;
        store.insert_uniform(W_K2, dv, d, rng)?;
        store.insert_uniform(W_V2, dv, d, rng)?;
        store.insert_uniform(W_O, d, dv, rng)?;
        if !dims.share_output_projection {
            store.insert_uniform(W_O_ATV, d, dv, rng)?;
        }
        store.insert_uniform(W_P, k, dv, rng)?;
        Ok(AlignmentParams { dims, store })
    }

    /// Wraps an existing store, checking that every matrix has the right shape.
    pub fn from_store(dims: AlignmentDims, store: ParamStore) -> Result<Self> {
        let AlignmentDims {
            attributes: k,
            embed_dim: dw,
            visual_dim: dv,
            attn_dim: d,
            ..
        } = dims;
        let mut expected = vec![
            (W_Q1, [dw, d]),
            (W_K1, [dv, d]),
            (W_V1, [dv, d]),
            (W_Q2, [dv, d]),
            (W_K2, [dv, d]),
            (W_V2, [dv, d]),
            (W_O, [d, dv]),
            (W_P, [k, dv]),
        ];
        if !dims.share_output_projection {
            expected.push((W_O_ATV, [d, dv]));
        }
        for (name, shape) in &expected {
            let t = store.get(name)?;
            if t.rows() != shape[0] || t.cols() != shape[1] {
                return Err(Error::Shape {
                    op: "alignment params",
                    left: t.shape().to_vec(),
                    right: shape.to_vec(),
                });
            }
        }
        if store.len() != expected.len() {
            return Err(Error::Invalid(format!(
                "alignment store has {} tensors, expected {}",
                store.len(),
                expected.len()
            )));
        }
        Ok(AlignmentParams { dims, store })
    }

    /// Registers all matrices on `tape`.
    pub fn vars(&self, tape: &mut Tape) -> Result<AlignmentVars> {
        let mut p = |n: &str| -> Result<Var> { Ok(tape.param(n, self.store.get(n)?)) };
        let w_o = p(W_O)?;
        let w_o_atv = if self.dims.share_output_projection {
            w_o
        } else {
            p(W_O_ATV)?
        };
        Ok(AlignmentVars {
            w_q1: p(W_Q1)?,
            w_k1: p(W_K1)?,
            w_v1: p(W_V1)?,
            w_q2: p(W_Q2)?,
            w_k2: p(W_K2)?,
            w_v2: p(W_V2)?,
            w_o,
            w_o_atv,
            w_p: p(W_P)?,
            attn_scale: 1.0 / (self.dims.attn_dim as f64).sqrt(),
        })
    }
}

/// Tape handles for [`AlignmentParams`].
#[derive(Clone, Copy, Debug)]
pub struct AlignmentVars {
    pub w_q1: Var,
    pub w_k1: Var,
    pub w_v1: Var,
    pub w_q2: Var,
    pub w_k2: Var,
    pub w_v2: Var,
    pub w_o: Var,
    pub w_o_atv: Var,
    pub w_p: Var,
    attn_scale: f64,
}

/// Output of one VTA→ATV pass for a single instance.
#[derive(Clone, Debug)]
pub struct AlignedInstance {
    pub a_hat: Tensor,
    pub v_hat: Tensor,
    pub vta_attn: Tensor,
    pub atv_attn: Tensor,
}

/// Scaled dot-product attention with a residual on the query:
/// `softmax(q kᵀ · scale) v + q`. Returns (output, attention map).
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<(Var, Var)> {
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, scale);
    let attn = tape.softmax_rows(logits);
    let mixed = tape.matmul(attn, v)?;
    Ok((tape.add(mixed, q)?, attn))
}

/// VTA block on the tape. `a` is `K × d_w2v`, `f` is `D × d_v`.
pub fn vta_graph(tape: &mut Tape, w: &AlignmentVars, a: Var, f: Var) -> Result<(Var, Var)> {
    let q1 = tape.matmul(a, w.w_q1)?;
    let k1 = tape.matmul(f, w.w_k1)?;
    let v1 = tape.matmul(f, w.w_v1)?;
    let (a_m, attn) = attend(tape, q1, k1, v1, w.attn_scale)?;
    Ok((tape.matmul(a_m, w.w_o)?, attn))
}

/// Attribute representation without visual attention: `â = a W_Q1 W_O`.
/// Used when the VTA block is switched off.
pub fn vta_bypass_graph(tape: &mut Tape, w: &AlignmentVars, a: Var) -> Result<Var> {
    let q1 = tape.matmul(a, w.w_q1)?;
    tape.matmul(q1, w.w_o)
}

/// ATV block on the tape. `f` is `D × d_v`, `a_hat` is `K × d_v`.
pub fn atv_graph(tape: &mut Tape, w: &AlignmentVars, f: Var, a_hat: Var) -> Result<(Var, Var)> {
    let q2 = tape.matmul(f, w.w_q2)?;
    let k2 = tape.matmul(a_hat, w.w_k2)?;
    let v2 = tape.matmul(a_hat, w.w_v2)?;
    let (v_m, attn) = attend(tape, q2, k2, v2, w.attn_scale)?;
    Ok((tape.matmul(v_m, w.w_o_atv)?, attn))
}

/// `p = S · W_p` on the tape.
pub fn prototypes_graph(tape: &mut Tape, w: &AlignmentVars, s: Var) -> Result<Var> {
    tape.matmul(s, w.w_p)
}

fn check_inputs(a: Option<&Tensor>, f: &Tensor, params: &AlignmentParams) -> Result<()> {
    let dims = &params.dims;
    if f.cols() != dims.visual_dim {
        return Err(Error::Shape {
            op: "alignment features",
            left: f.shape().to_vec(),
            right: vec![f.rows(), dims.visual_dim],
        });
    }
    if let Some(a) = a {
        if a.cols() != dims.embed_dim {
            return Err(Error::Shape {
                op: "alignment attributes",
                left: a.shape().to_vec(),
                right: vec![a.rows(), dims.embed_dim],
            });
        }
    }
    Ok(())
}

/// Refined attributes `â` (`K × d_v`) and the `K × D` attention map.
pub fn vta_forward(a: &Tensor, f: &Tensor, params: &AlignmentParams) -> Result<(Tensor, Tensor)> {
    check_inputs(Some(a), f, params)?;
    let mut tape = Tape::new();
    let w = params.vars(&mut tape)?;
    let (av, fv) = (tape.constant(a.clone()), tape.constant(f.clone()));
    let (a_hat, attn) = vta_graph(&mut tape, &w, av, fv)?;
    Ok((tape.value(a_hat).clone(), tape.value(attn).clone()))
}

/// Refined regional features `v̂` (`D × d_v`) and the `D × K` attention map.
pub fn atv_forward(f: &Tensor, a_hat: &Tensor, params: &AlignmentParams) -> Result<(Tensor, Tensor)> {
    check_inputs(None, f, params)?;
    let mut tape = Tape::new();
    let w = params.vars(&mut tape)?;
    let (fv, av) = (tape.constant(f.clone()), tape.constant(a_hat.clone()));
    let (v_hat, attn) = atv_graph(&mut tape, &w, fv, av)?;
    Ok((tape.value(v_hat).clone(), tape.value(attn).clone()))
}

/// One full VTA→ATV pass.
pub fn align_instance(a: &Tensor, f: &Tensor, params: &AlignmentParams) -> Result<AlignedInstance> {
    let (a_hat, vta_attn) = vta_forward(a, f, params)?;
    let (v_hat, atv_attn) = atv_forward(f, &a_hat, params)?;
    Ok(AlignedInstance {
        a_hat,
        v_hat,
        vta_attn,
        atv_attn,
    })
}

/// Class prototypes in visual space, one row per row of `s`.
pub fn class_prototypes(s: &Tensor, params: &AlignmentParams) -> Result<Tensor> {
    crate::diff_core::matmul(s, params.store.get(W_P)?)
}
