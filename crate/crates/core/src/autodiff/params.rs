use alloc::string::String;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use super::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named collection of parameter tensors.
///
/// Every set carries a process-unique id, so a [`Tape`] can tell which set a
/// leaf came from. Cloning produces a new id: a target network cloned from an
/// online network never receives the online network's gradients.
#[derive(Debug)]
pub struct ParamSet<T> {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        Self { id: fresh_id(), names: self.names.clone(), tensors: self.tensors.clone() }
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { id: fresh_id(), names: Vec::new(), tensors: Vec::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Adds a trainable tensor.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(flag));
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Pulls gradients for this set's leaves out of a tape after `backward`.
    pub fn accumulate_from(&mut self, tape: &Tape<T>) -> Result<()> {
        for (param, var) in tape.param_leaves(self.id) {
            if let Some(g) = tape.grad(var) {
                self.tensors[param.0].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Copies values from a set with identical layout.
    pub fn copy_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.values_mut().copy_from_slice(src.values());
        }
        Ok(())
    }

    /// Euclidean norm of all accumulated gradients.
    pub fn grad_norm_sq(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter().map(|&x| x.to_f64() * x.to_f64()))
            .sum()
    }

    pub fn scale_grads(&mut self, factor: T) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x = *x * factor);
            }
        }
    }

    /// `self <- (1 - rate) * self + rate * other`, elementwise.
    pub fn lerp_towards(&mut self, other: &ParamSet<T>, rate: T) -> Result<()> {
        self.check_layout(other)?;
        let keep = T::one() - rate;
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            for (d, &s) in dst.values_mut().iter_mut().zip(src.values()) {
                *d = keep * *d + rate * s;
            }
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &ParamSet<T>) -> Result<()> {
        let same = self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(Error::InvalidArgument("parameter sets have different layouts".into()))
        }
    }
}

/// Rescales gradients across `sets` so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(sets: &mut [&mut ParamSet<T>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(sets.iter().map(|s| s.grad_norm_sq()).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let f = T::from_f64(max_norm / norm);
        sets.iter_mut().for_each(|s| s.scale_grads(f));
    }
    norm
}
