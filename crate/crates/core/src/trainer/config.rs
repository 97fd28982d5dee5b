//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::disambiguation::Reduction;
use crate::error::{Error, Result};
use crate::inference_metrics::ScoreKind;
use crate::mi_estimation::DEFAULT_EXP_CLAMP;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub tau: f64,
    pub alpha: f64,
    /// Attention width `d`; `None` means `min(d_v, 64)`.
    pub attn_dim: Option<usize>,
    pub mi_hidden_width: usize,
    pub mi_neg_per_pos: usize,
    pub mi_exp_clamp: f64,
    pub use_vta: bool,
    pub use_label_update: bool,
    pub use_sem_loss: bool,
    pub use_atv_omega: bool,
    pub use_mi: bool,
    pub loss_reduction: Reduction,
    pub share_output_projection: bool,
    pub omega_grad: bool,
    pub mi_detach_encoder_on_js: bool,
    pub inference_score: ScoreKind,
    pub gamma: f64,
    /// Number of unseen classes (the last ones); `None` means `⌈Q/5⌉`.
    pub num_unseen: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 1e-2,
            momentum: 0.0,
            seed: 7,
            tau: 20.0,
            alpha: 0.5,
            attn_dim: None,
            mi_hidden_width: 64,
            mi_neg_per_pos: 5,
            mi_exp_clamp: DEFAULT_EXP_CLAMP,
            use_vta: true,
            use_label_update: true,
            use_sem_loss: true,
            use_atv_omega: true,
            use_mi: true,
            loss_reduction: Reduction::Sum,
            share_output_projection: true,
            omega_grad: false,
            mi_detach_encoder_on_js: false,
            inference_score: ScoreKind::Cosine,
            gamma: 0.7,
            num_unseen: None,
        }
    }
}

/// The seven component combinations of the ablation table, in order:
/// plain cross-entropy, +VTA, +label updates, +𝓛_sem, +𝓛_AMI, +ω, all.
pub const ABLATION_ROWS: [(&str, [bool; 5]); 7] = [
    ("plain-ce", [false, false, false, false, false]),
    ("vta", [true, false, false, false, false]),
    ("vta+vis", [true, true, false, false, false]),
    ("vta+vis+sem", [true, true, true, false, false]),
    ("vta+vis+sem+ami", [true, true, true, false, true]),
    ("vta+vis+sem+omega", [true, true, true, true, false]),
    ("full", [true, true, true, true, true]),
];

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

fn auto_or<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "auto".to_string(), |x| x.to_string())
}

impl TrainConfig {
    /// Component switches `[VTA, label update, 𝓛_sem, ω, 𝓛_AMI]`.
    pub fn with_components(mut self, c: [bool; 5]) -> Self {
        let [vta, label, sem, omega, mi] = c;
        self.use_vta = vta;
        self.use_label_update = label;
        self.use_sem_loss = sem;
        self.use_atv_omega = omega;
        self.use_mi = mi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.attn_dim == Some(0) {
            return fail("attn_dim must be >= 1".into());
        }
        if self.mi_hidden_width == 0 || self.mi_neg_per_pos == 0 {
            return fail("mi.hidden_width and mi.neg_per_pos must be >= 1".into());
        }
        if !(self.mi_exp_clamp > 0.0 && self.mi_exp_clamp.is_finite()) {
            return fail(format!("mi.exp_clamp must be positive, got {}", self.mi_exp_clamp));
        }
        if !self.gamma.is_finite() {
            return fail(format!("gamma must be finite, got {}", self.gamma));
        }
        if self.num_unseen == Some(0) {
            return fail("num_unseen must be >= 1".into());
        }
        Ok(())
    }

    pub fn attn_dim_for(&self, visual_dim: usize) -> usize {
        self.attn_dim.unwrap_or(visual_dim.min(64))
    }

    pub fn num_unseen_for(&self, num_classes: usize) -> usize {
        self.num_unseen.unwrap_or(num_classes.div_ceil(5))
    }

    /// Copy with every `auto` value resolved against the data.
    pub fn resolved(&self, visual_dim: usize, num_classes: usize) -> TrainConfig {
        TrainConfig {
            attn_dim: Some(self.attn_dim_for(visual_dim)),
            num_unseen: Some(self.num_unseen_for(num_classes)),
            ..self.clone()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let num = |v: &str| v.parse::<f64>().map_err(|_| format!("`{v}` is not a number"));
        let int = |v: &str| v.parse::<usize>().map_err(|_| format!("`{v}` is not a non-negative integer"));
        let flag = |v: &str| parse_bool(v).ok_or_else(|| format!("`{v}` is not a boolean"));
        let auto = |v: &str| -> std::result::Result<Option<usize>, String> {
            if v == "auto" {
                Ok(None)
            } else {
                int(v).map(Some)
            }
        };
        match key {
            "epochs" => self.epochs = int(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "lr" => self.lr = num(value)?,
            "momentum" => self.momentum = num(value)?,
            "seed" => self.seed = value.parse().map_err(|_| format!("`{value}` is not a seed"))?,
            "tau" => self.tau = num(value)?,
            "alpha" => self.alpha = num(value)?,
            "attn_dim" => self.attn_dim = auto(value)?,
            "mi.hidden_width" => self.mi_hidden_width = int(value)?,
            "mi.neg_per_pos" => self.mi_neg_per_pos = int(value)?,
            "mi.exp_clamp" => self.mi_exp_clamp = num(value)?,
            "use_vta" => self.use_vta = flag(value)?,
            "use_label_update" => self.use_label_update = flag(value)?,
            "use_sem_loss" => self.use_sem_loss = flag(value)?,
            "use_atv_omega" => self.use_atv_omega = flag(value)?,
            "use_mi" => self.use_mi = flag(value)?,
            "loss_reduction" => {
                self.loss_reduction =
                    Reduction::parse(value).ok_or_else(|| format!("`{value}` is not sum or mean"))?
            }
            "share_output_projection" => self.share_output_projection = flag(value)?,
            "omega_grad" => self.omega_grad = flag(value)?,
            "mi_detach_encoder_on_js" => self.mi_detach_encoder_on_js = flag(value)?,
            "inference_score" => {
                self.inference_score =
                    ScoreKind::parse(value).ok_or_else(|| format!("`{value}` is not cosine or dot"))?
            }
            "gamma" => self.gamma = num(value)?,
            "num_unseen" => self.num_unseen = auto(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| perr(format!("expected `key = value`, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(perr(format!("duplicate key `{k}`")));
            }
            cfg.set(k, v).map_err(|m| perr(format!("{k}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Every key with its current value, parseable by [`TrainConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("momentum", format!("{:?}", self.momentum));
        kv("seed", self.seed.to_string());
        kv("tau", format!("{:?}", self.tau));
        kv("alpha", format!("{:?}", self.alpha));
        kv("attn_dim", auto_or(self.attn_dim));
        kv("mi.hidden_width", self.mi_hidden_width.to_string());
        kv("mi.neg_per_pos", self.mi_neg_per_pos.to_string());
        kv("mi.exp_clamp", format!("{:?}", self.mi_exp_clamp));
        kv("use_vta", self.use_vta.to_string());
        kv("use_label_update", self.use_label_update.to_string());
        kv("use_sem_loss", self.use_sem_loss.to_string());
        kv("use_atv_omega", self.use_atv_omega.to_string());
        kv("use_mi", self.use_mi.to_string());
        kv("loss_reduction", self.loss_reduction.as_str().to_string());
        kv("share_output_projection", self.share_output_projection.to_string());
        kv("omega_grad", self.omega_grad.to_string());
        kv("mi_detach_encoder_on_js", self.mi_detach_encoder_on_js.to_string());
        kv("inference_score", self.inference_score.as_str().to_string());
        kv("gamma", format!("{:?}", self.gamma));
        kv("num_unseen", auto_or(self.num_unseen));
        out
    }
}
