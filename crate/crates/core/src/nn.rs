//! Parameter storage, small layers and the Adam update.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which subsystem a parameter belongs to; each has its own learning rate
/// and gradient clipping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Features,
    Renderer,
    Optimizer,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Features, Group::Renderer, Group::Optimizer];

    pub fn name(self) -> &'static str {
        match self {
            Group::Features => "features",
            Group::Renderer => "renderer",
            Group::Optimizer => "optimizer",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Opaque handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: Group, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param { name: name.to_string(), group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self.index.get(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.params[i].value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: stored {:?} vs loaded {:?}",
                self.params[i].value.shape(),
                value.shape()
            )));
        }
        self.params[i].value = value;
        Ok(())
    }

    /// Records every parameter on `tape`; parameters of groups for which
    /// `trainable` is false become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(Group) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable(p.group) { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect();
        Bound { vars }
    }

    pub fn group_sizes(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for p in &self.params {
            s[p.group.index()] += p.value.numel();
        }
        s
    }
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes the tape variable used for one parameter, e.g. to feed
    /// externally perturbed values through a model.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }

    /// Gradients of all parameters, zero for unused ones.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Dense layer `y = x W + b` on `[n, in]` rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Uniform Glorot-style initialisation with zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, group: Group, inputs: usize, outputs: usize) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = store.add(&format!("{name}.w"), group, uniform(rng, &[inputs, outputs], bound));
        let b = store.add(&format!("{name}.b"), group, Tensor::zeros(&[outputs]));
        Self { w, b, inputs, outputs }
    }

    /// Layer with all-zero weights.
    pub fn zeroed(store: &mut ParamStore, name: &str, group: Group, inputs: usize, outputs: usize) -> Self {
        let w = store.add(&format!("{name}.w"), group, Tensor::zeros(&[inputs, outputs]));
        let b = store.add(&format!("{name}.b"), group, Tensor::zeros(&[outputs]));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        tape.add(y, p.var(self.b))
    }
}

/// NHWC convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: Group,
        k: usize,
        ci: usize,
        co: usize,
        stride: usize,
    ) -> Self {
        let bound = (6.0 / (k * k * ci) as f64).sqrt();
        let w = store.add(&format!("{name}.w"), group, uniform(rng, &[k, k, ci, co], bound));
        let b = store.add(&format!("{name}.b"), group, Tensor::zeros(&[co]));
        Self { w, b, stride, pad: k / 2 }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p.var(self.w), self.stride, self.pad)?;
        tape.add(y, p.var(self.b))
    }
}

/// GRU cell parameters.
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, group: Group, inputs: usize, hidden: usize) -> Self {
        let bx = (3.0 / inputs as f64).sqrt();
        let bh = (3.0 / hidden as f64).sqrt();
        let w_x = store.add(&format!("{name}.w_x"), group, uniform(rng, &[inputs, 3 * hidden], bx));
        let w_h = store.add(&format!("{name}.w_h"), group, uniform(rng, &[hidden, 3 * hidden], bh));
        let b = store.add(&format!("{name}.b"), group, Tensor::zeros(&[3 * hidden]));
        Self { w_x, w_h, b, hidden }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, x: Var) -> Result<Var> {
        let w = crate::autodiff::GruWeights { w_x: p.var(self.w_x), w_h: p.var(self.w_h), b: p.var(self.b) };
        tape.gru_cell(h, x, w)
    }
}

/// Per-group Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: [f64; 3],
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold applied to each group separately.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: [1e-3, 5e-4, 2e-4], beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 1.0 }
    }
}

/// What [`Adam::step`] did, per group.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepStats {
    pub grad_norm: [f64; 3],
    pub update_norm: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m = store.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        let v = store.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { config, m, v, t: 0 }
    }

    /// One update. Groups whose learning rate is zero are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<StepStats> {
        if grads.len() != store.params.len() {
            return Err(Error::Shape(format!("adam: {} gradients for {} parameters", grads.len(), store.params.len())));
        }
        let mut stats = StepStats::default();
        let mut sq = [0.0; 3];
        for (p, g) in store.params.iter().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam", index: self.t as usize });
            }
            sq[p.group.index()] += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let mut scale = [1.0; 3];
        for k in 0..3 {
            stats.grad_norm[k] = sq[k].sqrt();
            if stats.grad_norm[k] > self.config.clip {
                scale[k] = self.config.clip / stats.grad_norm[k];
            }
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let mut upd = [0.0; 3];
        for (i, p) in store.params.iter_mut().enumerate() {
            let k = p.group.index();
            let lr = c.lr[k];
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (e, x) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[e] * scale[k];
                m[e] = c.beta1 * m[e] + (1.0 - c.beta1) * g;
                v[e] = c.beta2 * v[e] + (1.0 - c.beta2) * g * g;
                let d = lr * (m[e] / bc1) / ((v[e] / bc2).sqrt() + c.eps);
                *x -= d;
                upd[k] += d * d;
            }
        }
        for k in 0..3 {
            stats.update_norm[k] = upd[k].sqrt();
        }
        Ok(stats)
    }
}
