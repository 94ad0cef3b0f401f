use std::ops::Index;

use rand::Rng;

use super::config::AdamConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Handle to one named parameter block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every block on `g`, as gradient leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone().requires_grad()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// Per-block gradients after `g.backward`; zeros where none was recorded.
    pub fn gradients(&self, g: &Graph, bound: &Bound) -> Vec<Vec<f64>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in registration order of the store they stand for.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Uniform `±sqrt(6 / fan_in)·gain`.
pub(crate) fn uniform_init(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let a = gain * (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| a * (2.0 * rng.random::<f64>() - 1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// First and second moment estimates, one buffer per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    /// Bias-corrected adaptive-moment update with the decay term added to
    /// the gradient.
    /// Rescales `grads` in place so their joint L2 norm is at most `max`;
    /// returns the norm before scaling.
    pub fn clip(grads: &mut [Vec<f64>], max: f64) -> f64 {
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if max > 0.0 && norm > max {
            let s = max / norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
        norm
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension(format!("{} gradient blocks for {} parameters", grads.len(), params.len())));
        }
        self.t += 1;
        let mut clipped;
        let grads = if cfg.clip_norm > 0.0 {
            clipped = grads.to_vec();
            Self::clip(&mut clipped, cfg.clip_norm);
            &clipped[..]
        } else {
            grads
        };
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (k, t) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v, gk) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            if gk.len() != t.numel() {
                return Err(Error::Dimension(format!("gradient block {k} has {} entries for {}", gk.len(), t.numel())));
            }
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let gi = gk[i] + cfg.weight_decay * *w;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                *w -= cfg.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
