use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with its gradient and Adam state.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step: u64,
    pub trainable: bool,
}

/// Non-trainable per-channel statistics (batch-norm running mean/variance).
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// Owns every parameter of a model. Tapes copy values in via
/// [`Tape::param`] and hand gradients back via [`ParamStore::accumulate`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    stats: Vec<RunningStats>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            first_moment: Tensor::zeros(&shape),
            second_moment: Tensor::zeros(&shape),
            value,
            step: 0,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push(RunningStats {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        StatsId(self.stats.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn all_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn all_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients of every parameter recorded on `tape` into `grad`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for (id, var) in tape.param_nodes() {
            if let Some(g) = grads.wrt(var) {
                for (d, s) in self.params[id.0].grad.data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }

    /// Scales every gradient, e.g. to average over accumulated examples.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn max_abs_grad(&self) -> f64 {
        self.params.iter().map(|p| p.grad.max_abs()).fold(0.0, f64::max)
    }

    /// Copies parameter values and statistics from `other`, matching by name.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
            p.first_moment = src.first_moment.clone();
            p.second_moment = src.second_moment.clone();
            p.step = src.step;
        }
        for s in &mut self.stats {
            if let Some(src) = other.stats.iter().find(|q| q.name == s.name) {
                s.mean = src.mean.clone();
                s.var = src.var.clone();
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam {
            lr,
            ..Default::default()
        }
    }

    /// One bias-corrected Adam update of every trainable parameter, in place.
    pub fn step(&self, store: &mut ParamStore) {
        for p in store.params_mut().iter_mut().filter(|p| p.trainable) {
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let g = p.grad.data();
            let m = p.first_moment.data_mut();
            for (m, &g) in m.iter_mut().zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            }
            let v = p.second_moment.data_mut();
            for (v, &g) in v.iter_mut().zip(g) {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            }
            let (m, v) = (p.first_moment.data(), p.second_moment.data());
            let updates: Vec<f64> = m
                .iter()
                .zip(v)
                .map(|(&m, &v)| self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))
                .collect();
            for (w, u) in p.value.data_mut().iter_mut().zip(updates) {
                *w -= u;
            }
        }
    }
}
