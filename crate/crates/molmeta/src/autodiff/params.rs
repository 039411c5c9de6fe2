//! Trainable-parameter registry and small layer helpers.
//!
//! Parameters live at the data level in a [`ParamSet`]; each episode mounts
//! them onto a fresh [`Tape`] via [`ParamSet::leaves`], and optimizer steps
//! are plain tensor updates. [`ParamId`]s stay valid for the life of the set,
//! and ordering is insertion order everywhere, which keeps gradient
//! accumulation deterministic.

use super::{AutodiffError, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Stable index of one tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, t: Tensor) -> ParamId {
        self.tensors.push(t.with_grad());
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

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Mounts every parameter onto `tape` in insertion order. The returned
    /// vector is indexed by `ParamId`.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.tensors.iter().map(|t| tape.input(t.clone())).collect()
    }

    /// Reads the gradient of every parameter after a backward sweep, in
    /// insertion order. `leaves` must come from [`ParamSet::leaves`] on the
    /// same tape.
    pub fn read_grads(&self, leaves: &[Var<'_>]) -> Vec<Tensor> {
        leaves.iter().map(|v| v.grad()).collect()
    }

    /// Zero tensors shaped like every parameter, for gradient accumulation.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    /// `p += scale * g` for every parameter. Gradient *descent* with rate
    /// `lr` is `apply_scaled(&grads, -lr)`; a reinforcement ascent step uses
    /// a positive scale.
    pub fn apply_scaled(&mut self, grads: &[Tensor], scale: f64) {
        assert_eq!(grads.len(), self.tensors.len(), "gradient/parameter count");
        for (p, g) in self.tensors.iter_mut().zip(grads) {
            p.add_scaled(g, scale);
        }
    }

    /// A copy whose tensors are `p + scale * g`; the originals are untouched.
    pub fn stepped(&self, grads: &[Tensor], scale: f64) -> ParamSet {
        let mut out = self.clone();
        out.apply_scaled(grads, scale);
        out
    }
}

/// `acc += scale * g` across aligned gradient vectors.
pub fn accumulate(acc: &mut [Tensor], grads: &[Tensor], scale: f64) {
    assert_eq!(acc.len(), grads.len(), "gradient vector length");
    for (a, g) in acc.iter_mut().zip(grads) {
        a.add_scaled(g, scale);
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` init, the usual default for
/// fully connected layers.
pub fn uniform_fan_in<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Fully connected layer `y = Wx + b`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(set: &mut ParamSet, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = set.add(uniform_fan_in(&[out_dim, in_dim], in_dim, rng));
        let bias = set.add(uniform_fan_in(&[out_dim], in_dim, rng));
        Linear { weight, bias }
    }

    pub fn apply<'t>(&self, leaves: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let tape = x.tape();
        let wx = tape.matvec(leaves[self.weight.0], x)?;
        tape.add(wx, leaves[self.bias.0])
    }
}

/// Two fully connected layers with a LeakyReLU between them.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn init<R: Rng>(
        set: &mut ParamSet,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let hidden = Linear::init(set, in_dim, hidden_dim, rng);
        let out = Linear::init(set, hidden_dim, out_dim, rng);
        Mlp { hidden, out }
    }

    pub fn apply<'t>(&self, leaves: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        let h = self.hidden.apply(leaves, x)?.leaky_relu();
        self.out.apply(leaves, h)
    }
}
