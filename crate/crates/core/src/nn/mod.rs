//! Minimal convolutional network building blocks with explicit backward passes.
//!
//! Activations are `(N, C, H, W)` arrays in standard layout. Every layer
//! caches what its backward pass needs during a training-mode forward.
//! Per-sample work is spread over the batch with [`crate::par`]; per-sample
//! parameter gradients are reduced in sample order when [`Exec::deterministic`]
//! is set, so results do not depend on the thread count.

mod adam;
mod conv;
mod layers;

pub use adam::Adam;
pub use conv::Conv2d;
pub use layers::{AvgPool, BasicBlock, BatchNorm2d, GlobalAvgPool, Linear, MaxPool, Relu};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::seed;

/// Execution options shared by all kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Exec {
    /// Reduce per-sample gradients in a fixed order.
    pub deterministic: bool,
}

impl Default for Exec {
    fn default() -> Self {
        Self { deterministic: true }
    }
}

impl Exec {
    /// Sum equally-shaped per-sample gradient buffers.
    pub(crate) fn reduce(&self, parts: Vec<Vec<f32>>) -> Vec<f32> {
        if self.deterministic || !crate::par::is_parallel() {
            let mut it = parts.into_iter();
            let mut acc = it.next().unwrap_or_default();
            for p in it {
                add_assign(&mut acc, &p);
            }
            acc
        } else {
            tree_reduce(parts)
        }
    }
}

#[cfg(feature = "parallel")]
fn tree_reduce(parts: Vec<Vec<f32>>) -> Vec<f32> {
    use rayon::prelude::*;
    parts
        .into_par_iter()
        .reduce_with(|mut a, b| {
            add_assign(&mut a, &b);
            a
        })
        .unwrap_or_default()
}

#[cfg(not(feature = "parallel"))]
fn tree_reduce(parts: Vec<Vec<f32>>) -> Vec<f32> {
    Exec { deterministic: true }.reduce(parts)
}

pub(crate) fn add_assign(acc: &mut [f32], x: &[f32]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += *b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics: checkpointed but never touched by the optimizer.
    Buffer,
}

/// A flat parameter tensor with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub kind: ParamKind,
}

impl Param {
    pub fn zeros(shape: &[usize], kind: ParamKind) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            kind,
        }
    }

    pub fn filled(shape: &[usize], v: f32, kind: ParamKind) -> Self {
        let mut p = Self::zeros(shape, kind);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    /// He-normal init, `std = sqrt(2 / fan_in)`.
    pub fn kaiming(shape: &[usize], fan_in: usize, seed: u64) -> Self {
        let mut p = Self::zeros(shape, ParamKind::Trainable);
        let std = (2.0 / fan_in as f64).sqrt() as f32;
        let mut rng = seed::rng(seed);
        p.value.iter_mut().for_each(|x| {
            let z: f32 = StandardNormal.sample(&mut rng);
            *x = z * std;
        });
        p
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform_fan_in(shape: &[usize], fan_in: usize, seed: u64) -> Self {
        let mut p = Self::zeros(shape, ParamKind::Trainable);
        let bound = 1.0 / (fan_in as f32).sqrt();
        let mut rng = seed::rng(seed);
        p.value
            .iter_mut()
            .for_each(|x| *x = rng.random_range(-bound..=bound));
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns named parameters.
pub trait Module {
    /// Visit every parameter (trainable and buffer) in a fixed order.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, p| p.zero_grad());
    }

    fn num_trainable(&self) -> usize {
        let mut n = 0;
        self.visit_ref("", &mut |_, p| {
            if p.kind == ParamKind::Trainable {
                n += p.len();
            }
        });
        n
    }

    /// SHA-256 over names, shapes and values of every parameter.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        self.visit_ref("", &mut |name, p| {
            h.update(name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &p.value {
                h.update(v.to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
