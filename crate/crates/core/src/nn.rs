//! Parameter storage, layers and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.names.iter().enumerate().filter(move |(_, n)| n.starts_with(prefix)).map(|(i, _)| ParamId(i))
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Put every parameter on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect() }
    }

    /// Replace values by name/shape match from another store.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Config("parameter name lists differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::Config(format!("parameter shape {:?} vs {:?}", dst.shape(), src.shape())));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Tape variables for one [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in store order; parameters the loss never touched get zeros.
    pub fn grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Uniform init with bound `gain * sqrt(3 / fan_in)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("init shape")
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// He-style init for ReLU-family activations.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::with_gain(store, rng, name, cin, cout, k, stride, pad, std::f64::consts::SQRT_2)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_gain(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[cout, cin, k, k], cin * k * k, gain));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[cout])));
        Self { weight, bias, stride, pad }
    }

    /// Scalar parameter count for the given shape (with bias).
    pub fn count(cin: usize, cout: usize, k: usize) -> usize {
        cout * cin * k * k + cout
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.pad)
    }
}

/// Channel layer norm with learnable affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    pub fn count(c: usize) -> usize {
        2 * c
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.channel_norm(x, p.var(self.gamma), p.var(self.beta), Self::EPS)
    }
}

/// Adaptive-moment optimizer state for one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1, beta2, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in store.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::full(&[2], 3.0));
        let mut opt = Adam::new(&store, 0.1, 0.9, 0.999);
        for _ in 0..500 {
            let grad: Vec<f64> = store.get(id).data().iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.update(&mut store, &[Tensor::new(vec![2], grad).unwrap()]);
        }
        for &x in store.get(id).data() {
            assert!((x - 1.0).abs() < 1e-2, "{x}");
        }
    }

    #[test]
    fn digest_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = Conv::new(&mut store, &mut rng, "c", 2, 3, 3, 1, 1);
        let before = store.digest();
        assert_eq!(before, store.clone().digest());
        store.get_mut(c.weight).data_mut()[0] += 1e-12;
        assert_ne!(before, store.digest());
        assert_eq!(store.num_scalars(), Conv::count(2, 3, 3));
    }
}
