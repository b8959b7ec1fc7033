//! Named parameters, a few layers, and Adam.
//!
//! Parameters live in a [`ParamStore`] outside any graph. Each training
//! step binds them into a fresh [`Graph`] as variables, runs forward and
//! backward, and hands the gradients to [`Adam`].

use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("parameter {0:?} already exists")]
    Duplicate(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S: Scalar = f64> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.id(&name).is_some() {
            return Err(NnError::Duplicate(name));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Parameters whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|&id| self.name(id).starts_with(prefix)).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a variable of `graph`.
    pub fn bind(&self, graph: &mut Graph<S>) -> Bound {
        Bound(self.values.iter().map(|v| graph.variable(v.clone())).collect())
    }

    /// Registers every parameter as an untracked constant.
    pub fn bind_constants(&self, graph: &mut Graph<S>) -> Bound {
        Bound(self.values.iter().map(|v| graph.constant(v.clone())).collect())
    }

    pub fn ids_vec(&self) -> Vec<ParamId> {
        self.ids().collect()
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (name, value) in self.names.iter().zip(&self.values) {
            ckpt.insert(format!("{prefix}{name}"), value.cast())?;
        }
        Ok(())
    }

    /// Overwrites every parameter from `ckpt`; shapes must match.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            *value = load_tensor(ckpt, &format!("{prefix}{name}"), value.shape())?;
        }
        Ok(())
    }
}

fn load_tensor<S: Scalar>(ckpt: &Checkpoint, key: &str, shape: &[usize]) -> Result<Tensor<S>> {
    let t = ckpt.require(key)?;
    if t.shape() != shape {
        return Err(CheckpointError::ShapeMismatch {
            name: key.to_string(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        }
        .into());
    }
    Ok(t.cast())
}

/// Graph variables for every parameter of a store, by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps variables given in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, used for weights and biases.
pub fn uniform_init<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| S::lit(rng.gen_range(-bound..=bound)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = uniform_init(&[out_ch, in_ch, kernel, kernel], fan_in, rng);
        let b = uniform_init(&[out_ch], fan_in, rng);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), b)?,
            stride,
            pad,
        })
    }

    /// Zero weights and bias.
    pub fn zeroed<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[out_ch, in_ch, kernel, kernel]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?,
            stride,
            pad,
        })
    }

    pub fn forward<S: Scalar>(&self, graph: &mut Graph<S>, params: &Bound, x: Var) -> Result<Var> {
        let w = params.var(self.weight);
        let y = graph.conv2d(x, w, self.stride, self.pad)?;
        let oc = graph.shape(w)[0];
        let b = graph.reshape(params.var(self.bias), &[1, oc, 1, 1])?;
        Ok(graph.add(y, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = uniform_init(&[inputs, outputs], inputs, rng);
        let b = uniform_init(&[outputs], inputs, rng);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), b)?,
        })
    }

    /// `x [N, in] -> [N, out]`.
    pub fn forward<S: Scalar>(&self, graph: &mut Graph<S>, params: &Bound, x: Var) -> Result<Var> {
        let y = graph.matmul(x, params.var(self.weight))?;
        Ok(graph.add(y, params.var(self.bias))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-parameter step counts, so parameter groups updated on
/// different schedules keep independent bias corrections.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S: Scalar = f64> {
    pub config: AdamConfig,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: Vec<u64>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = store.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: vec![0; store.len()],
        }
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.t[id.0]
    }

    /// Updates `ids` from their gradients; parameters without a gradient
    /// are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>, params: &Bound, ids: &[ParamId]) {
        let c = self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        for &id in ids {
            let i = id.0;
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = S::lit(1.0 - c.beta1.powi(t));
            let bc2 = S::lit((1.0 - c.beta2.powi(t)).sqrt());
            let (lr, eps) = (S::lit(c.lr), S::lit(c.eps));
            let g = grads.get(params.var(id));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.values[i].data_mut();
            for k in 0..p.len() {
                let gk = g.map_or(S::zero(), |g| g.data()[k]);
                m[k] = b1 * m[k] + (S::one() - b1) * gk;
                v[k] = b2 * v[k] + (S::one() - b2) * gk * gk;
                p[k] -= lr / bc1 * m[k] / (v[k].sqrt() / bc2 + eps);
            }
        }
    }

    pub fn save_into(&self, store: &ParamStore<S>, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        for (i, name) in store.names.iter().enumerate() {
            ckpt.insert(format!("{prefix}m/{name}"), self.m[i].cast())?;
            ckpt.insert(format!("{prefix}v/{name}"), self.v[i].cast())?;
            ckpt.insert(format!("{prefix}t/{name}"), Tensor::scalar(self.t[i] as f64))?;
        }
        Ok(())
    }

    pub fn load_from(&mut self, store: &ParamStore<S>, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for (i, name) in store.names.iter().enumerate() {
            let shape = store.values[i].shape();
            self.m[i] = load_tensor(ckpt, &format!("{prefix}m/{name}"), shape)?;
            self.v[i] = load_tensor(ckpt, &format!("{prefix}v/{name}"), shape)?;
            self.t[i] = ckpt.require(&format!("{prefix}t/{name}"))?.item() as u64;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(vec![1.0, -1.0, 0.5])).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &store);
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let sq = g.square(b.var(id));
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        adam.step(&mut store, &grads, &b, &[id]);
        // bias-corrected first step is lr * sign(grad) up to eps
        let got = store.value(id).data();
        for (x, x0) in got.iter().zip([1.0, -1.0, 0.5]) {
            assert!((x - (x0 - 0.1 * f64::signum(x0))).abs() < 1e-6);
        }
        assert_eq!(adam.steps(id), 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(vec![3.0, -2.0])).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.05, beta1: 0.9, ..Default::default() }, &store);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let shifted = g.add_scalar(b.var(id), -1.0);
            let sq = g.square(shifted);
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            adam.step(&mut store, &grads, &b, &[id]);
        }
        assert!(store.value(id).data().iter().all(|v| (v - 1.0).abs() < 1e-2));
    }

    #[test]
    fn store_checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, &mut rng).unwrap();
        let lin = Linear::new(&mut store, "l", 4, 2, &mut rng).unwrap();
        assert!(store.add("c.weight", Tensor::zeros(&[1])).is_err());
        let adam = Adam::new(AdamConfig::default(), &store);
        let mut ckpt = Checkpoint::new();
        store.save_into(&mut ckpt, "p/").unwrap();
        adam.save_into(&store, &mut ckpt, "opt/").unwrap();
        let mut other = store.clone();
        *other.value_mut(conv.weight) = Tensor::zeros(&[3, 2, 3, 3]);
        *other.value_mut(lin.bias) = Tensor::ones(&[2]);
        other.load_from(&ckpt, "p/").unwrap();
        assert_eq!(other, store);
        let mut adam2 = Adam::new(AdamConfig::default(), &store);
        adam2.load_from(&store, &ckpt, "opt/").unwrap();
        assert_eq!(adam2, adam);
        assert_eq!(store.ids_with_prefix("c.").len(), 2);
        assert_eq!(store.scalar_count(), 3 * 2 * 9 + 3 + 4 * 2 + 2);
    }
}
