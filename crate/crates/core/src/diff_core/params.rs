use std::collections::BTreeMap;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors with a parallel gradient map.
///
/// Iteration order is the lexicographic order of names, which keeps
/// serialization and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter with a zeroed gradient slot. Names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.grads
            .insert(name.to_string(), Tensor::zeros(&[value.rows(), value.cols()]));
        self.params.insert(name.to_string(), value.as_matrix());
        Ok(())
    }

    /// Adds a `rows × cols` matrix drawn uniformly from `[-1/√rows, 1/√rows]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
    }

    /// Drops a gradient slot; the next optimizer step will reject the store.
    pub fn remove_grad(&mut self, name: &str) -> Option<Tensor> {
        self.grads.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Resets every gradient slot to zeros.
    pub fn zero_grads(&mut self) {
        for (name, p) in &self.params {
            self.grads
                .insert(name.clone(), Tensor::zeros(&[p.rows(), p.cols()]));
        }
    }

    /// Registers every parameter on `tape` as a named leaf.
    pub fn register(&self, tape: &mut Tape) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(n, t)))
            .collect()
    }

    /// Adds the gradients of all parameters of this store found in `grads`.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.named() {
            if let Some(slot) = self.grads.get_mut(name) {
                slot.add_assign(g)?;
            }
        }
        Ok(())
    }
}

/// SGD with optional heavy-ball momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(OptimState {
            lr,
            momentum,
            velocity: BTreeMap::new(),
            step: 0,
        })
    }
}

/// One optimizer update over every parameter of `params`; gradients are
/// zeroed afterward.
pub fn sgd_step(params: &mut ParamStore, optim: &mut OptimState) -> Result<()> {
    for name in params.params.keys() {
        if !params.grads.contains_key(name) {
            return Err(Error::MissingGradient(name.clone()));
        }
    }
    for (name, p) in params.params.iter_mut() {
        let g = params.grads.get_mut(name).expect("checked above");
        if optim.momentum > 0.0 {
            let v = optim
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&[p.rows(), p.cols()]));
            for ((vv, gg), pp) in v.data_mut().iter_mut().zip(g.data()).zip(p.data_mut()) {
                *vv = optim.momentum * *vv + gg;
                *pp -= optim.lr * *vv;
            }
        } else {
            for (pp, gg) in p.data_mut().iter_mut().zip(g.data()) {
                *pp -= optim.lr * gg;
            }
        }
        g.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    optim.step += 1;
    Ok(())
}

/// One entry whose analytic and numeric gradients disagree.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    pub offenders: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.offenders.is_empty()
    }

    /// Names of parameters with at least one offending entry.
    pub fn offending_params(&self) -> Vec<&str> {
        let mut names: Vec<&str> = self.offenders.iter().map(|m| m.param.as_str()).collect();
        names.dedup();
        names
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `loss` returns the loss value and, when asked for it, the analytic
/// gradients written into the store it receives. Each entry passes when
/// `|analytic − numeric| / max(1, |numeric|) ≤ tol`.
pub fn grad_check<F>(params: &ParamStore, eps: f64, tol: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    let mut analytic = params.clone();
    analytic.zero_grads();
    loss(&mut analytic, true)?;

    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.len();
        let grad = analytic
            .grad(&name)
            .ok_or_else(|| Error::MissingGradient(name.clone()))?
            .clone();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = loss(&mut probe, false)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = loss(&mut probe, false)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(rel);
            report.checked += 1;
            if !(rel <= tol) {
                report.offenders.push(GradMismatch {
                    param: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.insert(name, worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn half_square(store: &mut ParamStore, with_grad: bool) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = store.register(&mut tape);
        let x = vars["x"];
        let sq = tape.mul(x, x)?;
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        if with_grad {
            store.accumulate(&tape.backward(loss)?)?;
        }
        Ok(tape.scalar(loss))
    }

    #[test]
    fn quadratic_passes_grad_check() {
        let mut store = ParamStore::new();
        store
            .insert("x", Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]))
            .unwrap();
        let report = grad_check(&store, 1e-6, 1e-6, half_square).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let mut store = ParamStore::new();
        store.insert("good", Tensor::vector(vec![1.0, 2.0])).unwrap();
        store.insert("bad", Tensor::vector(vec![0.5, -0.5])).unwrap();
        let report = grad_check(&store, 1e-6, 1e-6, |s, with_grad| {
            let mut tape = Tape::new();
            let v = s.register(&mut tape);
            let all = tape.vstack(&[v["good"], v["bad"]])?;
            let sq = tape.mul(all, all)?;
            let loss = tape.sum(sq);
            if with_grad {
                s.accumulate(&tape.backward(loss)?)?;
                s.grad_mut("bad").unwrap().data_mut()[1] += 0.1;
            }
            Ok(tape.scalar(loss))
        })
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.offending_params(), vec!["bad"]);
        assert_eq!(report.offenders[0].index, 1);
    }

    #[test]
    fn one_plain_sgd_step() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0)).unwrap();
        store.grad_mut("p").unwrap().data_mut()[0] = 1.0;
        let mut opt = OptimState::new(0.1, 0.0).unwrap();
        sgd_step(&mut store, &mut opt).unwrap();
        assert!((store.get("p").unwrap().data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(store.grad("p").unwrap().data(), &[0.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert_uniform("w", 3, 4, &mut rng).unwrap();
        let before = store.clone();
        let mut opt = OptimState::new(0.5, 0.9).unwrap();
        sgd_step(&mut store, &mut opt).unwrap();
        assert_eq!(store.get("w").unwrap(), before.get("w").unwrap());
    }

    #[test]
    fn missing_gradient_names_the_slot() {
        let mut store = ParamStore::new();
        store.insert("alpha", Tensor::scalar(1.0)).unwrap();
        store.remove_grad("alpha");
        let mut opt = OptimState::new(0.1, 0.0).unwrap();
        let err = sgd_step(&mut store, &mut opt).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(ref n) if n == "alpha"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(store.insert("a", Tensor::scalar(2.0)).is_err());
    }

    #[test]
    fn convex_quadratic_descends_monotonically() {
        // f(x) = ½ xᵀ A x − bᵀ x with A = diag(1, 4, 9)
        let diag = [1.0, 4.0, 9.0];
        let b = [1.0, -2.0, 0.5];
        let f = |x: &[f64]| -> f64 {
            x.iter()
                .zip(diag.iter().zip(&b))
                .map(|(xi, (a, bi))| 0.5 * a * xi * xi - bi * xi)
                .sum()
        };
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![3.0, 3.0, 3.0])).unwrap();
        let mut opt = OptimState::new(0.05, 0.0).unwrap();
        let mut prev = f(store.get("x").unwrap().data());
        for _ in 0..200 {
            let x = store.get("x").unwrap().data().to_vec();
            let g: Vec<f64> = x
                .iter()
                .zip(diag.iter().zip(&b))
                .map(|(xi, (a, bi))| a * xi - bi)
                .collect();
            store.grad_mut("x").unwrap().data_mut().copy_from_slice(&g);
            sgd_step(&mut store, &mut opt).unwrap();
            let now = f(store.get("x").unwrap().data());
            assert!(now <= prev, "loss rose from {prev} to {now}");
            prev = now;
        }
        let x = store.get("x").unwrap().data();
        for i in 0..3 {
            assert!((x[i] - b[i] / diag[i]).abs() < 1e-3);
        }
    }
}
