//! Joint training: `𝓛 = 𝓛_vis + 𝓛_sem − 𝓛_AMI`, with a JS critic step before
//! each joint step and one soft-label update per epoch.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{TrainConfig, ABLATION_ROWS};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::{self, AlignmentDims, AlignmentParams, AlignmentVars};
use crate::data_io::{ClassSplit, PartialDataset};
use crate::diff_core::{grad_check, sgd_step, GradCheckReport, OptimState, ParamStore, Tape, Tensor, Var};
use crate::disambiguation::{self, cosine_logits, soft_cross_entropy_graph, SoftLabelState};
use crate::error::{Error, Result};
use crate::inference_metrics::{EvalSplit, GzslReport};
use crate::mi_estimation::{self, CriticParams, CriticVars, PairPlan};
use crate::semantic_space::{attribute_entropy, select_attributes, AttributeSelection, SemanticSpace};

/// Offsets added to the run seed for each independent random stream.
pub const ALIGN_INIT_OFFSET: u64 = 1;
pub const CRITIC_INIT_OFFSET: u64 = 2;
pub const LOOP_OFFSET: u64 = 3;

/// Loss components summed over the batches of one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub loss: f64,
    pub l_vis: f64,
    pub l_sem: f64,
    pub l_ami: f64,
    pub l_js: f64,
    /// Fraction of training instances whose soft-label argmax is the true
    /// label, after this epoch's update.
    pub disamb_acc: f64,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,loss,l_vis,l_sem,l_ami,l_js,disamb_acc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.epoch, self.loss, self.l_vis, self.l_sem, self.l_ami, self.l_js, self.disamb_acc
        )
    }
}

pub fn history_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(HISTORY_CSV_HEADER);
    out.push('\n');
    for m in history {
        let _ = writeln!(out, "{}", m.csv_row());
    }
    out
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub align: AlignmentParams,
    pub critic: CriticParams,
    pub align_opt: OptimState,
    pub critic_opt: OptimState,
    pub labels: SoftLabelState,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn epoch(&self) -> u64 {
        self.history.len() as u64
    }
}

/// Graph handles of one joint forward pass.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub vis: Var,
    pub sem: Option<Var>,
    pub ami: Option<Var>,
}

/// Constant inputs of one batch.
pub struct BatchInputs<'a> {
    pub features: Vec<&'a Tensor>,
    /// GAP of each instance, `B × d_v`.
    pub pooled: Tensor,
    /// Current soft labels over seen classes, `B × Q_s`.
    pub l_tilde: Tensor,
}

fn needs_attributes(cfg: &TrainConfig) -> bool {
    cfg.use_sem_loss || cfg.use_atv_omega || cfg.use_mi
}

/// Per-instance refined attributes `â` on the tape.
fn refined_attributes(tape: &mut Tape, cfg: &TrainConfig, w: &AlignmentVars, a: Var, features: &[Var]) -> Result<Vec<Var>> {
    if cfg.use_vta {
        features
            .iter()
            .map(|&f| alignment::vta_graph(tape, w, a, f).map(|(a_hat, _)| a_hat))
            .collect()
    } else {
        let shared = alignment::vta_bypass_graph(tape, w, a)?;
        Ok(vec![shared; features.len()])
    }
}

/// Builds `𝓛 = 𝓛_vis + 𝓛_sem − 𝓛_AMI` for one batch.
///
/// `critic` and `plan` are only used when MI is switched on.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_graph(
    tape: &mut Tape,
    cfg: &TrainConfig,
    w: &AlignmentVars,
    critic: Option<&CriticVars>,
    attr_embed: &Tensor,
    class_attributes: &Tensor,
    batch: &BatchInputs,
    plan: Option<&PairPlan>,
) -> Result<JointLoss> {
    let s = tape.constant(class_attributes.clone());
    let protos = alignment::prototypes_graph(tape, w, s)?;
    let v = tape.constant(batch.pooled.clone());
    let l_tilde = tape.constant(batch.l_tilde.clone());

    let logits = cosine_logits(tape, v, protos, cfg.tau)?;
    let log_m = tape.log_softmax_rows(logits);

    let mut a_hats = Vec::new();
    let mut feats = Vec::new();
    if needs_attributes(cfg) {
        let a = tape.constant(attr_embed.clone());
        feats = batch.features.iter().map(|f| tape.constant((*f).clone())).collect();
        a_hats = refined_attributes(tape, cfg, w, a, &feats)?;
    }

    let omega = if cfg.use_atv_omega {
        let mut pooled = Vec::with_capacity(feats.len());
        for (&f, &a_hat) in feats.iter().zip(&a_hats) {
            let (v_hat, _) = alignment::atv_graph(tape, w, f, a_hat)?;
            pooled.push(tape.mean_rows(v_hat)?);
        }
        let v_hat = tape.vstack(&pooled)?;
        let cos = tape.cosine_matrix(v_hat, protos)?;
        let omega = tape.softmax_rows(cos);
        Some(if cfg.omega_grad { omega } else { tape.detach(omega) })
    } else {
        None
    };
    let vis = soft_cross_entropy_graph(tape, log_m, l_tilde, omega, cfg.loss_reduction)?;
    let mut total = vis;

    let sem = if cfg.use_sem_loss {
        let pooled = a_hats
            .iter()
            .map(|&a_hat| tape.mean_rows(a_hat))
            .collect::<Result<Vec<_>>>()?;
        let a_bar = tape.vstack(&pooled)?;
        let logits = cosine_logits(tape, a_bar, protos, cfg.tau)?;
        let log_sem = tape.log_softmax_rows(logits);
        let sem = soft_cross_entropy_graph(tape, log_sem, l_tilde, None, cfg.loss_reduction)?;
        total = tape.add(total, sem)?;
        Some(sem)
    } else {
        None
    };

    let ami = match (cfg.use_mi, critic, plan) {
        (true, Some(c), Some(plan)) => {
            let stacked = tape.vstack(&a_hats)?;
            let pairs = gather_pairs(tape, stacked, plan)?;
            let ami = mi_estimation::nwj_graph(tape, c, pairs, cfg.mi_exp_clamp)?;
            total = tape.sub(total, ami)?;
            Some(ami)
        }
        _ => None,
    };
    Ok(JointLoss { total, vis, sem, ami })
}

fn gather_pairs(tape: &mut Tape, stacked: Var, plan: &PairPlan) -> Result<[Var; 4]> {
    let [pa, po, na, no] = plan.rows();
    Ok([
        tape.gather_rows(stacked, &pa)?,
        tape.gather_rows(stacked, &po)?,
        tape.gather_rows(stacked, &na)?,
        tape.gather_rows(stacked, &no)?,
    ])
}

/// Static data prepared once per run.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub semantic: &'a SemanticSpace,
    pub data: &'a PartialDataset,
    pub split: ClassSplit,
    pub selection: AttributeSelection,
    seen_attributes: Tensor,
    candidates: Tensor,
    pooled: Tensor,
    pub state: TrainState,
}

fn alignment_dims(cfg: &TrainConfig, semantic: &SemanticSpace, visual_dim: usize) -> AlignmentDims {
    AlignmentDims {
        attributes: semantic.num_attributes(),
        embed_dim: semantic.embed_dim(),
        visual_dim,
        attn_dim: cfg.attn_dim_for(visual_dim),
        share_output_projection: cfg.share_output_projection,
    }
}

impl<'a> Trainer<'a> {
    /// Fresh parameters and uniform soft labels, all seeded from `cfg.seed`.
    pub fn new(cfg: &TrainConfig, semantic: &'a SemanticSpace, data: &'a PartialDataset) -> Result<Self> {
        cfg.validate()?;
        let dims = alignment_dims(cfg, semantic, data.visual_dim());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(ALIGN_INIT_OFFSET));
        let align = AlignmentParams::init(dims, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(CRITIC_INIT_OFFSET));
        let critic = CriticParams::init(data.visual_dim(), cfg.mi_hidden_width, &mut rng)?;
        let split = Self::split_for(cfg, semantic, data)?;
        let candidates = seen_columns(&data.candidates, split.num_seen());
        let state = TrainState {
            align,
            critic,
            align_opt: OptimState::new(cfg.lr, cfg.momentum)?,
            critic_opt: OptimState::new(cfg.lr, cfg.momentum)?,
            labels: SoftLabelState::new(&candidates, cfg.alpha)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(LOOP_OFFSET)),
            history: Vec::new(),
        };
        Self::assemble(cfg, semantic, data, split, state)
    }

    /// Continues from a checkpoint; the data must be the run's training set.
    pub fn resume(ckpt: Checkpoint, semantic: &'a SemanticSpace, data: &'a PartialDataset) -> Result<Self> {
        let cfg = ckpt.config.clone();
        cfg.validate()?;
        let split = Self::split_for(&cfg, semantic, data)?;
        let dims = alignment_dims(&cfg, semantic, data.visual_dim());
        if ckpt.state.align.dims != dims {
            return Err(Error::Invalid(format!(
                "checkpoint dimensions {:?} do not match the data {:?}",
                ckpt.state.align.dims, dims
            )));
        }
        if ckpt.state.labels.u.rows() != data.len() || ckpt.state.labels.u.cols() != split.num_seen() {
            return Err(Error::Invalid("checkpoint soft labels do not match the training data".into()));
        }
        Self::assemble(&cfg, semantic, data, split, ckpt.state)
    }

    fn split_for(cfg: &TrainConfig, semantic: &SemanticSpace, data: &PartialDataset) -> Result<ClassSplit> {
        if data.num_classes() != semantic.num_classes() {
            return Err(Error::Invalid(format!(
                "data has {} classes, semantic space {}",
                data.num_classes(),
                semantic.num_classes()
            )));
        }
        let split = ClassSplit::new(semantic.num_classes(), cfg.num_unseen_for(semantic.num_classes()))?;
        data.check_seen_only(split.num_seen())?;
        Ok(split)
    }

    fn assemble(
        cfg: &TrainConfig,
        semantic: &'a SemanticSpace,
        data: &'a PartialDataset,
        split: ClassSplit,
        state: TrainState,
    ) -> Result<Self> {
        let selection = select_attributes(&attribute_entropy(semantic)?)?;
        Ok(Trainer {
            cfg: cfg.resolved(data.visual_dim(), semantic.num_classes()),
            semantic,
            data,
            seen_attributes: semantic.class_rows(&split.seen),
            candidates: seen_columns(&data.candidates, split.num_seen()),
            pooled: data.pooled_features()?,
            split,
            selection,
            state,
        })
    }

    fn batch_inputs(&self, idx: &[usize]) -> Result<BatchInputs<'a>> {
        let data: &'a PartialDataset = self.data;
        Ok(BatchInputs {
            features: idx.iter().map(|&i| &data.features[i]).collect(),
            pooled: select_rows(&self.pooled, idx),
            l_tilde: select_rows(&self.state.labels.l_tilde, idx),
        })
    }

    fn mi_active(&self, batch_len: usize) -> bool {
        self.cfg.use_mi && batch_len >= 2
    }

    /// JS step on the critic (and, unless detached, the VTA encoder).
    fn critic_step(&mut self, batch: &BatchInputs, plan: &PairPlan) -> Result<f64> {
        let st = &mut self.state;
        let mut tape = Tape::new();
        let w = st.align.vars(&mut tape)?;
        let c = st.critic.vars(&mut tape)?;
        let a = tape.constant(self.semantic.attr_embed.clone());
        let feats: Vec<Var> = batch.features.iter().map(|f| tape.constant((*f).clone())).collect();
        let a_hats = refined_attributes(&mut tape, &self.cfg, &w, a, &feats)?;
        let mut stacked = tape.vstack(&a_hats)?;
        if self.cfg.mi_detach_encoder_on_js {
            stacked = tape.detach(stacked);
        }
        let pairs = gather_pairs(&mut tape, stacked, plan)?;
        let loss = mi_estimation::js_loss_graph(&mut tape, &c, pairs)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("JS critic loss ({value})")));
        }
        let grads = tape.backward(loss)?;
        st.critic.store.accumulate(&grads)?;
        sgd_step(&mut st.critic.store, &mut st.critic_opt)?;
        if !self.cfg.mi_detach_encoder_on_js {
            st.align.store.accumulate(&grads)?;
            sgd_step(&mut st.align.store, &mut st.align_opt)?;
        }
        Ok(value)
    }

    fn joint_step(&mut self, batch: &BatchInputs, plan: Option<&PairPlan>, m: &mut EpochMetrics) -> Result<()> {
        let st = &mut self.state;
        let mut tape = Tape::new();
        let w = st.align.vars(&mut tape)?;
        let c = match plan {
            Some(_) => Some(st.critic.vars(&mut tape)?),
            None => None,
        };
        let out = joint_loss_graph(
            &mut tape,
            &self.cfg,
            &w,
            c.as_ref(),
            &self.semantic.attr_embed,
            &self.seen_attributes,
            batch,
            plan,
        )?;
        let parts = [
            ("l_vis", Some(out.vis)),
            ("l_sem", out.sem),
            ("l_ami", out.ami),
            ("loss", Some(out.total)),
        ];
        for (name, v) in parts {
            if let Some(v) = v {
                let x = tape.scalar(v);
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("{name} at epoch {} ({x})", m.epoch)));
                }
            }
        }
        m.l_vis += tape.scalar(out.vis);
        m.l_sem += out.sem.map_or(0.0, |v| tape.scalar(v));
        m.l_ami += out.ami.map_or(0.0, |v| tape.scalar(v));
        m.loss += tape.scalar(out.total);
        let grads = tape.backward(out.total)?;
        st.align.store.accumulate(&grads)?;
        sgd_step(&mut st.align.store, &mut st.align_opt)?;
        if plan.is_some() {
            st.critic.store.accumulate(&grads)?;
            sgd_step(&mut st.critic.store, &mut st.critic_opt)?;
        }
        Ok(())
    }

    /// One pass over the training data followed by the soft-label update.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let mut m = EpochMetrics {
            epoch: self.state.epoch() + 1,
            ..Default::default()
        };
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.state.rng);
        for idx in order.chunks(self.cfg.batch_size) {
            let batch = self.batch_inputs(idx)?;
            let plan = if self.mi_active(idx.len()) {
                let plan = mi_estimation::sample_pairs(
                    idx.len(),
                    self.semantic.num_attributes(),
                    &self.selection,
                    self.cfg.mi_neg_per_pos,
                    &mut self.state.rng,
                )?;
                m.l_js += self.critic_step(&batch, &plan)?;
                Some(plan)
            } else {
                None
            };
            self.joint_step(&batch, plan.as_ref(), &mut m)?;
        }
        if self.cfg.use_label_update {
            let predictions = self.visual_predictions()?;
            self.state.labels.update(&predictions, &self.candidates)?;
        } else {
            self.state.labels.epoch += 1;
        }
        m.disamb_acc = self.disambiguation_accuracy();
        self.state.history.push(m.clone());
        Ok(m)
    }

    /// Runs the remaining epochs, calling `after_epoch` after each one.
    pub fn run<F>(&mut self, mut after_epoch: F) -> Result<Vec<EpochMetrics>>
    where
        F: FnMut(&Trainer<'a>, &EpochMetrics) -> Result<()>,
    {
        while (self.state.epoch() as usize) < self.cfg.epochs {
            let m = self.train_epoch()?;
            log::info!(
                "epoch {:>3}  loss {:>10.4}  vis {:>9.4}  sem {:>9.4}  ami {:>8.4}  disamb {:.3}",
                m.epoch,
                m.loss,
                m.l_vis,
                m.l_sem,
                m.l_ami,
                m.disamb_acc
            );
            after_epoch(self, &m)?;
        }
        Ok(self.state.history.clone())
    }

    /// `M` over seen classes for every training instance.
    pub fn visual_predictions(&self) -> Result<Tensor> {
        let protos = alignment::class_prototypes(&self.seen_attributes, &self.state.align)?;
        disambiguation::visual_predictions(&self.pooled, &protos, self.cfg.tau)
    }

    pub fn disambiguation_accuracy(&self) -> f64 {
        let hits = self
            .state
            .labels
            .argmax()
            .iter()
            .zip(&self.data.true_labels)
            .filter(|(p, t)| p == t)
            .count();
        hits as f64 / self.data.len() as f64
    }

    /// Prototypes of all classes, seen and unseen.
    pub fn prototypes(&self) -> Result<Tensor> {
        alignment::class_prototypes(&self.semantic.class_attributes, &self.state.align)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            state: self.state.clone(),
        }
    }

    /// VTA and ATV attention maps of training instance `i`.
    pub fn attention_maps(&self, i: usize) -> Result<(Tensor, Tensor)> {
        let aligned = alignment::align_instance(&self.semantic.attr_embed, &self.data.features[i], &self.state.align)?;
        Ok((aligned.vta_attn, aligned.atv_attn))
    }
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * t.cols());
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), t.cols(), data).expect("consistent shape")
}

fn seen_columns(t: &Tensor, num_seen: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.rows() * num_seen);
    for r in 0..t.rows() {
        data.extend_from_slice(&t.row(r)[..num_seen]);
    }
    Tensor::matrix(t.rows(), num_seen, data).expect("consistent shape")
}

/// Convenience wrapper: train from scratch to `cfg.epochs`.
pub fn run_training(cfg: &TrainConfig, semantic: &SemanticSpace, data: &PartialDataset) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg, semantic, data)?;
    t.run(|_, _| Ok(()))?;
    Ok(t.checkpoint())
}

/// Evaluation split from a dataset with pooled features.
pub fn eval_split(data: &PartialDataset, split: &ClassSplit) -> Result<EvalSplit> {
    EvalSplit::new(
        data.pooled_features()?,
        data.true_labels.clone(),
        split.seen.clone(),
        split.unseen.clone(),
    )
}

/// CZSL/GZSL report of a trained state on `data` at `gamma`.
pub fn evaluate(ckpt: &Checkpoint, semantic: &SemanticSpace, data: &PartialDataset, gamma: f64) -> Result<GzslReport> {
    let split = ckpt.split(semantic.num_classes())?;
    let protos = alignment::class_prototypes(&semantic.class_attributes, &ckpt.state.align)?;
    eval_split(data, &split)?.evaluate(&protos, gamma, ckpt.config.inference_score)
}

/// Sizes of the gradient-check micro problem.
#[derive(Clone, Copy, Debug)]
pub struct MicroDims {
    pub instances: usize,
    pub classes: usize,
    pub attributes: usize,
    pub regions: usize,
    pub visual_dim: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl Default for MicroDims {
    fn default() -> Self {
        MicroDims {
            instances: 4,
            classes: 6,
            attributes: 8,
            regions: 4,
            visual_dim: 16,
            attn_dim: 8,
            embed_dim: 5,
            hidden: 6,
        }
    }
}

/// Finite-difference check of the full joint loss over every alignment and
/// critic parameter on a random micro-batch. `ω` is differentiated through
/// so that the loss is an ordinary function of the parameters.
pub fn grad_check_joint(dims: MicroDims, cfg: &TrainConfig, seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |rows: usize, cols: usize, lo: f64, hi: f64| {
        let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::matrix(rows, cols, data).expect("consistent shape")
    };
    let s = uniform(dims.classes, dims.attributes, 0.0, 1.0);
    let attr_embed = uniform(dims.attributes, dims.embed_dim, -1.0, 1.0);
    let features: Vec<Tensor> = (0..dims.instances)
        .map(|_| uniform(dims.regions, dims.visual_dim, -1.0, 1.0))
        .collect();
    let raw = uniform(dims.instances, dims.classes, 0.1, 1.0);
    let mut l_tilde = Tensor::zeros(&[dims.instances, dims.classes]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for i in 0..dims.instances {
        let mut total = 0.0;
        for c in 0..dims.classes {
            if c == i % dims.classes || rng.random_bool(0.5) {
                l_tilde.set(i, c, raw.get(i, c));
                total += raw.get(i, c);
            }
        }
        l_tilde.row_mut(i).iter_mut().for_each(|v| *v /= total);
    }
    let entropies = Tensor::vector((0..dims.attributes).map(|k| k as f64).collect());
    let selection = select_attributes(&entropies)?;
    let plan = mi_estimation::sample_pairs(dims.instances, dims.attributes, &selection, 3, &mut rng)?;

    let cfg = TrainConfig {
        omega_grad: true,
        ..cfg.clone()
    };
    let adims = AlignmentDims {
        attributes: dims.attributes,
        embed_dim: dims.embed_dim,
        visual_dim: dims.visual_dim,
        attn_dim: dims.attn_dim,
        share_output_projection: cfg.share_output_projection,
    };
    let align = AlignmentParams::init(adims, &mut rng)?;
    let critic = CriticParams::init(dims.visual_dim, dims.hidden, &mut rng)?;
    let mut combined = ParamStore::new();
    for store in [&align.store, &critic.store] {
        for (name, t) in store.iter() {
            combined.insert(name, t.clone())?;
        }
    }
    let batch = BatchInputs {
        features: features.iter().collect(),
        pooled: Tensor::from_rows(
            &features
                .iter()
                .map(|f| crate::diff_core::gap(f).map(Tensor::into_data))
                .collect::<Result<Vec<_>>>()?,
        )?,
        l_tilde,
    };
    grad_check(&combined, eps, tol, |store, with_grad| {
        let mut tape = Tape::new();
        let w = AlignmentParams {
            dims: adims,
            store: store.clone(),
        }
        .vars(&mut tape)?;
        let c = CriticParams {
            input_dim: dims.visual_dim,
            hidden: dims.hidden,
            store: store.clone(),
        }
        .vars(&mut tape)?;
        let out = joint_loss_graph(&mut tape, &cfg, &w, Some(&c), &attr_embed, &s, &batch, Some(&plan))?;
        if with_grad {
            store.accumulate(&tape.backward(out.total)?)?;
        }
        Ok(tape.scalar(out.total))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_synthetic, synthesize_candidates, NoiseProtocol, NoiseSpec, SyntheticSpec};

    fn small() -> (SemanticSpace, PartialDataset) {
        let spec = SyntheticSpec {
            classes: 6,
            attributes: 8,
            visual_dim: 8,
            regions: 3,
            embed_dim: 4,
            n_per_class: 4,
            seed: 5,
            ..Default::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        let noise = NoiseSpec {
            protocol: NoiseProtocol::QBernoulli(0.3),
            seed: 1,
        };
        let cand = synthesize_candidates(&d.train.true_labels, 6, &d.split.seen, &noise).unwrap();
        let train = PartialDataset::new(d.train.features.clone(), cand, d.train.true_labels.clone()).unwrap();
        (d.semantic, train)
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 5,
            mi_hidden_width: 8,
            ..Default::default()
        }
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let dims = MicroDims {
            instances: 3,
            classes: 4,
            attributes: 4,
            regions: 2,
            visual_dim: 5,
            attn_dim: 3,
            embed_dim: 3,
            hidden: 4,
        };
        let report = grad_check_joint(dims, &TrainConfig::default(), 3, 1e-6, 1e-5).unwrap();
        assert!(report.passed(), "{:?}", report.offenders.first());
    }

    #[test]
    fn total_is_sum_of_components() {
        let (sem, data) = small();
        let t = Trainer::new(&quick_cfg(), &sem, &data).unwrap();
        let idx: Vec<usize> = (0..5).collect();
        let batch = t.batch_inputs(&idx).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = mi_estimation::sample_pairs(5, 8, &t.selection, 5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let w = t.state.align.vars(&mut tape).unwrap();
        let c = t.state.critic.vars(&mut tape).unwrap();
        let out = joint_loss_graph(
            &mut tape,
            &t.cfg,
            &w,
            Some(&c),
            &sem.attr_embed,
            &t.seen_attributes,
            &batch,
            Some(&plan),
        )
        .unwrap();
        let parts = tape.scalar(out.vis) + tape.scalar(out.sem.unwrap()) - tape.scalar(out.ami.unwrap());
        assert!((tape.scalar(out.total) - parts).abs() < 1e-10);
    }

    #[test]
    fn critic_untouched_without_mi() {
        let (sem, data) = small();
        let cfg = TrainConfig {
            use_mi: false,
            ..quick_cfg()
        };
        let mut t = Trainer::new(&cfg, &sem, &data).unwrap();
        let before = t.state.critic.clone();
        t.run(|_, _| Ok(())).unwrap();
        assert_eq!(t.state.critic, before);
        assert_eq!(t.state.critic_opt.step, 0);
        assert!(t.state.history.iter().all(|m| m.l_ami == 0.0 && m.l_js == 0.0));
    }

    #[test]
    fn soft_labels_stay_on_candidates() {
        let (sem, data) = small();
        let mut t = Trainer::new(&quick_cfg(), &sem, &data).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        let l = &t.state.labels.l_tilde;
        for i in 0..l.rows() {
            let sum: f64 = l.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for (c, &v) in l.row(i).iter().enumerate() {
                if data.candidates.get(i, c) == 0.0 {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(t.state.labels.epoch, 3);
    }

    #[test]
    fn unseen_candidates_rejected() {
        let (sem, mut data) = small();
        data.candidates.set(0, 5, 1.0);
        assert!(Trainer::new(&quick_cfg(), &sem, &data).is_err());
    }
}
