//! Named parameter sets and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter tensors. The order is the canonical
/// persistence order for the weight-file format.
#[derive(Clone)]
pub struct ParamSet<T: Real> {
    entries: Vec<(String, Matrix<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.all_finite())
    }

    /// Register every parameter as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(_, m)| tape.leaf(m.clone()))
            .collect();
        BoundParams { vars }
    }

    /// Overwrite values from `(name, matrix)` pairs; shape and name sets must
    /// match exactly. Reports the first mismatch in canonical order.
    pub fn load_from(&mut self, tensors: &[(String, Matrix<T>)]) -> Result<()> {
        use std::collections::HashMap;
        let by_name: HashMap<&str, &Matrix<T>> =
            tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
        for (name, value) in &mut self.entries {
            let found = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::WeightMissingTensor(name.clone()))?;
            if found.shape() != value.shape() {
                return Err(Error::WeightShapeMismatch {
                    name: name.clone(),
                    expected: vec![value.rows(), value.cols()],
                    found: vec![found.rows(), found.cols()],
                });
            }
            *value = (*found).clone();
        }
        if tensors.len() != self.entries.len() {
            let known: std::collections::HashSet<&str> =
                self.entries.iter().map(|(n, _)| n.as_str()).collect();
            for (n, _) in tensors {
                if !known.contains(n.as_str()) {
                    return Err(Error::WeightUnexpectedTensor(n.clone()));
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape variables for one forward pass, index-aligned with the param set.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Draw an `rows x cols` matrix with i.i.d. normal entries (Box-Muller so the
/// stream depends only on the seeded RNG).
pub fn randn<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let n = rows * cols;
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(T::of(r * theta.cos() * std));
        if data.len() < n {
            data.push(T::of(r * theta.sin() * std));
        }
    }
    Matrix::from_vec(rows, cols, data)
}

/// Adam with bias correction and linear warmup.
pub struct Adam<T: Real> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    warmup_steps: usize,
    step: usize,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, warmup_steps: usize) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            step: 0,
            m,
            v,
        }
    }

    pub fn current_lr(&self) -> f64 {
        if self.warmup_steps > 0 && self.step <= self.warmup_steps {
            self.lr * self.step as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, bound: &BoundParams, grads: &Grads<T>) {
        self.step += 1;
        let lr = self.current_lr();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let Some(grad) = grads.get(bound.var(ParamId(i))) else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = params.get_mut(ParamId(i));
            let b1 = T::of(self.beta1);
            let b2 = T::of(self.beta2);
            let one = T::one();
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (one - b1) * *gv;
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
                let mhat = mv.as_f64() / bc1;
                let vhat = vv.as_f64() / bc2;
                let upd = lr * mhat / (vhat.sqrt() + self.eps);
                *pv = *pv - T::of(upd);
            }
        }
    }
}
