//! Nearest-prototype inference with calibrated stacking, plus class-wise
//! Top-1 and the GZSL harmonic mean.

use std::fmt::Write as _;

use crate::diff_core::{cosine, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Unseen classes only, no calibration.
    Czsl,
    /// Seen and unseen classes, seen scores shifted down by `γ`.
    Gzsl,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Czsl => "czsl",
            Mode::Gzsl => "gzsl",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScoreKind {
    #[default]
    Cosine,
    Dot,
}

impl ScoreKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cosine" => Some(ScoreKind::Cosine),
            "dot" => Some(ScoreKind::Dot),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Cosine => "cosine",
            ScoreKind::Dot => "dot",
        }
    }

    fn score(self, v: &Tensor, p: &Tensor) -> Result<f64> {
        match self {
            ScoreKind::Cosine => cosine(v, p),
            ScoreKind::Dot => v.dot(p),
        }
    }
}

/// Predicts a class index for one feature vector.
///
/// `score_c = s(v, p_c) − γ·[c seen]`, maximized over unseen classes (CZSL,
/// with `γ` forced to 0) or over all classes (GZSL). Ties go to the smallest
/// class index.
pub fn predict(
    v: &Tensor,
    prototypes: &Tensor,
    seen_mask: &[bool],
    gamma: f64,
    mode: Mode,
    score: ScoreKind,
) -> Result<usize> {
    if seen_mask.len() != prototypes.rows() {
        return Err(Error::Shape {
            op: "predict",
            left: prototypes.shape().to_vec(),
            right: vec![seen_mask.len()],
        });
    }
    let gamma = match mode {
        Mode::Czsl => 0.0,
        Mode::Gzsl => gamma,
    };
    let mut best: Option<(usize, f64)> = None;
    for (c, &seen) in seen_mask.iter().enumerate() {
        if mode == Mode::Czsl && seen {
            continue;
        }
        let p = Tensor::vector(prototypes.row(c).to_vec());
        let s = score.score(v, &p)? - if seen { gamma } else { 0.0 };
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::Degenerate("no candidate classes to predict from".into()))
}

/// Mean over `class_set` of per-class accuracy, in percent. Classes without
/// test instances are left out of the mean.
pub fn per_class_top1(predictions: &[usize], truths: &[usize], class_set: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape {
            op: "per_class_top1",
            left: vec![predictions.len()],
            right: vec![truths.len()],
        });
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for &c in class_set {
        let (mut hit, mut n) = (0usize, 0usize);
        for (&p, &t) in predictions.iter().zip(truths) {
            if t == c {
                n += 1;
                hit += usize::from(p == c);
            }
        }
        if n > 0 {
            total += hit as f64 / n as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Degenerate("no class in the set has test instances".into()));
    }
    Ok(100.0 * total / counted as f64)
}

/// `H = 2SU / (S + U)`, or 0 when both are 0.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

/// Test instances with their pooled features and hidden labels.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    /// `N × d_v`, one inference feature per row.
    pub features: Tensor,
    pub truths: Vec<usize>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl EvalSplit {
    pub fn new(features: Tensor, truths: Vec<usize>, seen: Vec<usize>, unseen: Vec<usize>) -> Result<Self> {
        if features.rows() != truths.len() {
            return Err(Error::Shape {
                op: "eval split",
                left: features.shape().to_vec(),
                right: vec![truths.len()],
            });
        }
        if let Some(c) = seen.iter().find(|c| unseen.contains(c)) {
            return Err(Error::Invalid(format!("class {c} is both seen and unseen")));
        }
        let known = |c: &usize| seen.contains(c) || unseen.contains(c);
        if let Some(t) = truths.iter().find(|t| !known(t)) {
            return Err(Error::Invalid(format!("test label {t} is neither seen nor unseen")));
        }
        Ok(EvalSplit {
            features,
            truths,
            seen,
            unseen,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.seen.len() + self.unseen.len()
    }

    pub fn seen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.num_classes()];
        for &c in &self.seen {
            mask[c] = true;
        }
        mask
    }

    fn predict_all(&self, prototypes: &Tensor, gamma: f64, mode: Mode, score: ScoreKind) -> Result<Vec<usize>> {
        let mask = self.seen_mask();
        (0..self.features.rows())
            .map(|i| {
                let v = Tensor::vector(self.features.row(i).to_vec());
                predict(&v, prototypes, &mask, gamma, mode, score)
            })
            .collect()
    }

    /// Number of GZSL predictions that land on a seen class.
    pub fn seen_prediction_count(&self, prototypes: &Tensor, gamma: f64, score: ScoreKind) -> Result<usize> {
        let mask = self.seen_mask();
        Ok(self
            .predict_all(prototypes, gamma, Mode::Gzsl, score)?
            .into_iter()
            .filter(|&c| mask[c])
            .count())
    }

    /// CZSL Top-1 on unseen-class instances plus GZSL S/U/H at `gamma`.
    pub fn evaluate(&self, prototypes: &Tensor, gamma: f64, score: ScoreKind) -> Result<GzslReport> {
        let unseen_idx: Vec<usize> = (0..self.truths.len())
            .filter(|&i| self.unseen.contains(&self.truths[i]))
            .collect();
        let mask = self.seen_mask();
        let mut czsl_pred = Vec::with_capacity(unseen_idx.len());
        for &i in &unseen_idx {
            let v = Tensor::vector(self.features.row(i).to_vec());
            czsl_pred.push(predict(&v, prototypes, &mask, 0.0, Mode::Czsl, score)?);
        }
        let unseen_truth: Vec<usize> = unseen_idx.iter().map(|&i| self.truths[i]).collect();
        let t1 = per_class_top1(&czsl_pred, &unseen_truth, &self.unseen)?;

        let gzsl = self.predict_all(prototypes, gamma, Mode::Gzsl, score)?;
        let u = per_class_top1(&gzsl, &self.truths, &self.unseen)?;
        let s = per_class_top1(&gzsl, &self.truths, &self.seen)?;
        let seen_predictions = gzsl.iter().filter(|&&c| mask[c]).count();
        Ok(GzslReport {
            t1,
            s,
            u,
            h: harmonic_mean(s, u),
            gamma,
            seen_predictions,
        })
    }

    /// Evaluates every `γ` of `grid` in order.
    pub fn sweep(&self, prototypes: &Tensor, grid: &[f64], score: ScoreKind) -> Result<Vec<GzslReport>> {
        grid.iter().map(|&g| self.evaluate(prototypes, g, score)).collect()
    }
}

/// The `γ` grid `{0, 0.1, …, 1.0}`.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Report with the highest `H`; earlier grid points win ties.
pub fn best_by_h(reports: &[GzslReport]) -> Option<&GzslReport> {
    reports.iter().fold(None, |best: Option<&GzslReport>, r| match best {
        Some(b) if b.h >= r.h => Some(b),
        _ => Some(r),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GzslReport {
    /// CZSL class-wise Top-1 on unseen classes (%).
    pub t1: f64,
    pub s: f64,
    pub u: f64,
    pub h: f64,
    pub gamma: f64,
    pub seen_predictions: usize,
}

pub const METRICS_CSV_HEADER: &str = "T1,U,S,H,gamma,mode,seed";

impl GzslReport {
    pub fn csv_row(&self, seed: u64) -> String {
        format!(
            "{},{},{},{},{},gzsl,{seed}",
            self.t1, self.u, self.s, self.h, self.gamma
        )
    }
}

/// Human-readable table of reports.
pub fn format_table(reports: &[GzslReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>6} {:>7} {:>7} {:>7} {:>7} {:>6}", "gamma", "T1", "U", "S", "H", "#seen");
    for r in reports {
        let _ = writeln!(
            out,
            "{:>6.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>6}",
            r.gamma, r.t1, r.u, r.s, r.h, r.seen_predictions
        );
    }
    out
}
