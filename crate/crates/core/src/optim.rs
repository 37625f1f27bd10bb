//! AdamW with decoupled weight decay and the polynomial learning-rate
//! schedule with linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay λ.
    pub weight_decay: f64,
    /// Also add λθ to the gradient before the moment updates, as the
    /// textbook listing does, on top of the decoupled decay.
    #[serde(default)]
    pub strict_algorithm: bool,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            strict_algorithm: false,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T: Scalar = f32> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }
}

/// One update of a single parameter buffer, timestep `t ≥ 1` already applied.
pub fn adamw_update<T: Scalar>(
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    hyper: &AdamWHyper,
    eta: f64,
) {
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let bc1 = T::one() - T::of(hyper.beta1.powi(t as i32));
    let bc2 = T::one() - T::of(hyper.beta2.powi(t as i32));
    let (alpha, eps, lambda, eta) = (T::of(hyper.alpha), T::of(hyper.eps), T::of(hyper.weight_decay), T::of(eta));
    for i in 0..theta.len() {
        let prev = theta[i];
        let mut g = grad[i];
        if hyper.strict_algorithm {
            g += lambda * prev;
        }
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] = prev - eta * (alpha * m_hat / (v_hat.sqrt() + eps) + lambda * prev);
    }
}

/// AdamW step over every parameter of `params` using the gradients
/// populated by the last backward pass. `eta` is the schedule multiplier.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    state: &mut AdamWState<T>,
    hyper: &AdamWHyper,
    eta: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            params.len()
        )));
    }
    // collect and validate every gradient before touching any parameter
    let mut grads = Vec::with_capacity(params.len());
    for id in params.ids() {
        let p = params.get(id);
        let g = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
        if g.len() != p.numel() || state.m[id.index()].len() != p.numel() {
            return Err(Error::dim("adamw_step", format!("gradient/state size mismatch for {}", params.name(id))));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {}", params.name(id))));
        }
        grads.push(g);
    }
    state.t += 1;
    let ids: Vec<_> = params.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let mut theta = params.get(id).to_vec();
        let i = id.index();
        adamw_update(&mut theta, &g, &mut state.m[i], &mut state.v[i], state.t, hyper, eta);
        params.set_data(id, theta)?;
    }
    Ok(())
}

/// `lr0 · (1 − i/T)^power`, scaled during warmup by a linear ramp from
/// `warmup_start_factor` to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolySchedule {
    pub lr0: f64,
    pub power: f64,
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub warmup_start_factor: f64,
}

impl Default for PolySchedule {
    fn default() -> Self {
        Self {
            lr0: 1e-5,
            power: 1.0,
            total_iters: 20_000,
            warmup_iters: 1_500,
            warmup_start_factor: 1e-6,
        }
    }
}

impl PolySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 || self.total_iters <= self.warmup_iters {
            return Err(Error::Config(format!(
                "total_iters {} must exceed warmup_iters {}",
                self.total_iters, self.warmup_iters
            )));
        }
        if !(self.warmup_start_factor > 0.0 && self.warmup_start_factor <= 1.0) {
            return Err(Error::Config("warmup_start_factor must lie in (0, 1]".into()));
        }
        if !(self.lr0 > 0.0) || !(self.power >= 0.0) {
            return Err(Error::Config("lr0 must be positive and power non-negative".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, i: u64) -> f64 {
        if i > self.total_iters {
            log::warn!("iteration {i} is past the schedule end {}; lr clamped to 0", self.total_iters);
            return 0.0;
        }
        let poly = self.lr0 * (1.0 - i as f64 / self.total_iters as f64).powf(self.power);
        if i < self.warmup_iters {
            let k = i as f64 / self.warmup_iters as f64;
            poly * (self.warmup_start_factor + (1.0 - self.warmup_start_factor) * k)
        } else {
            poly
        }
    }

    /// `lr_at(i) / lr0`, the multiplier handed to AdamW.
    pub fn multiplier(&self, i: u64) -> f64 {
        self.lr_at(i) / self.lr0
    }
}
