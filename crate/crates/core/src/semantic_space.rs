//! Class semantics, attribute embeddings and entropy-based attribute
//! selection.
//!
//! Text format for a semantic space:
//!
//! ```text
//! Q K d_w2v
//! <Q lines of K floats>        class–attribute strengths
//! <K lines of d_w2v floats>    attribute embeddings
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::diff_core::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticSpace {
    /// `Q × K` non-negative class–attribute strengths.
    pub class_attributes: Tensor,
    /// `K × d_w2v` attribute embeddings.
    pub attr_embed: Tensor,
    pub class_names: Vec<String>,
}

impl SemanticSpace {
    pub fn new(class_attributes: Tensor, attr_embed: Tensor, class_names: Vec<String>) -> Result<Self> {
        let s = class_attributes.as_matrix();
        let a = attr_embed.as_matrix();
        let (q, k) = (s.rows(), s.cols());
        if q < 2 || k < 2 {
            return Err(Error::Invalid(format!("need Q >= 2 and K >= 2, got Q={q}, K={k}")));
        }
        if a.rows() != k {
            return Err(Error::Shape {
                op: "semantic_space",
                left: s.shape().to_vec(),
                right: a.shape().to_vec(),
            });
        }
        if class_names.len() != q {
            return Err(Error::Invalid(format!(
                "{} class names for {q} classes",
                class_names.len()
            )));
        }
        if !s.is_finite() || !a.is_finite() {
            return Err(Error::Invalid("non-finite semantic values".into()));
        }
        if s.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("attribute strengths must be non-negative".into()));
        }
        column_sums(&s)?;
        for r in 0..k {
            if a.row(r).iter().all(|&v| v == 0.0) {
                return Err(Error::Invalid(format!("attribute embedding {r} is all zero")));
            }
        }
        Ok(SemanticSpace {
            class_attributes: s,
            attr_embed: a,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_attributes.rows()
    }

    pub fn num_attributes(&self) -> usize {
        self.class_attributes.cols()
    }

    pub fn embed_dim(&self) -> usize {
        self.attr_embed.cols()
    }

    /// Rows of the class–attribute matrix for the given classes.
    pub fn class_rows(&self, classes: &[usize]) -> Tensor {
        let k = self.num_attributes();
        let mut data = Vec::with_capacity(classes.len() * k);
        for &c in classes {
            data.extend_from_slice(self.class_attributes.row(c));
        }
        Tensor::matrix(classes.len(), k, data).expect("consistent shape")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());

        let parse_row = |lineno: usize, line: &str, want: usize| -> Result<Vec<f64>> {
            let vals = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| perr(lineno, format!("cannot parse `{t}` as a number")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != want {
                return Err(perr(lineno, format!("expected {want} values, found {}", vals.len())));
            }
            Ok(vals)
        };

        let (hline, header) = lines
            .next()
            .ok_or_else(|| perr(1, "empty file; expected header `Q K d_w2v`".into()))?;
        let dims = header
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| perr(hline, format!("bad header value `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let [q, k, dw] = dims[..] else {
            return Err(perr(hline, format!("header needs 3 values, found {}", dims.len())));
        };

        let mut s = Vec::with_capacity(q * k);
        for c in 0..q {
            let (n, l) = lines
                .next()
                .ok_or_else(|| perr(hline + c + 1, format!("missing class row {c} of {q}")))?;
            s.extend(parse_row(n, l, k)?);
        }
        let mut a = Vec::with_capacity(k * dw);
        for r in 0..k {
            let (n, l) = lines.next().ok_or_else(|| {
                perr(hline + q + r + 1, format!("missing attribute embedding row {r} of {k}"))
            })?;
            a.extend(parse_row(n, l, dw)?);
        }
        if let Some((n, _)) = lines.next() {
            return Err(perr(n, "unexpected trailing data".into()));
        }
        let names = (0..q).map(|c| format!("class_{c}")).collect();
        SemanticSpace::new(Tensor::matrix(q, k, s)?, Tensor::matrix(k, dw, a)?, names)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {}",
            self.num_classes(),
            self.num_attributes(),
            self.embed_dim()
        );
        for t in [&self.class_attributes, &self.attr_embed] {
            for r in 0..t.rows() {
                let line: Vec<String> = t.row(r).iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn column_sums(s: &Tensor) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; s.cols()];
    for r in 0..s.rows() {
        for (acc, v) in sums.iter_mut().zip(s.row(r)) {
            *acc += v;
        }
    }
    if let Some(k) = sums.iter().position(|&v| v <= 0.0) {
        return Err(Error::Degenerate(format!(
            "attribute column {k} has no positive entry"
        )));
    }
    Ok(sums)
}

/// Shannon entropy (nats) of each attribute column after normalizing the
/// column into a distribution over classes.
pub fn attribute_entropy(space: &SemanticSpace) -> Result<Tensor> {
    let s = &space.class_attributes;
    let sums = column_sums(s)?;
    let mut h = vec![0.0; s.cols()];
    for r in 0..s.rows() {
        for (k, &v) in s.row(r).iter().enumerate() {
            let p = v / sums[k];
            if p > 0.0 {
                h[k] -= p * p.ln();
            }
        }
    }
    Ok(Tensor::vector(h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeSelection {
    pub entropies: Tensor,
    pub threshold: f64,
    /// Sorted attribute indices with entropy strictly below the median.
    pub selected: Vec<usize>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Keeps the attributes whose entropy lies strictly below the median. When
/// no entropy does (all equal), the first `⌊K/2⌋` attributes are kept.
pub fn select_attributes(entropies: &Tensor) -> Result<AttributeSelection> {
    let h = entropies.data();
    if h.len() < 2 {
        return Err(Error::Degenerate(format!(
            "attribute selection needs K >= 2, got {}",
            h.len()
        )));
    }
    let mu = median(h);
    let mut selected: Vec<usize> = (0..h.len()).filter(|&k| h[k] < mu).collect();
    if selected.is_empty() {
        selected = (0..h.len() / 2).collect();
    }
    Ok(AttributeSelection {
        entropies: entropies.clone(),
        threshold: mu,
        selected,
    })
}
