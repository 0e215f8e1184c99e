//! Named parameter collection.
//!
//! Parameters live in an insertion-ordered map from dotted names (e.g.
//! `stem.bn.gamma`) to tensors. Insertion order is the canonical enumeration
//! order used by serialization, gradient checking, and the optimizer, so
//! rebuilding a model from the same config always yields the same layout.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, TapeRef};
use crate::tensor::Tensor;

/// Standard deviation used for weight initialization (truncated at two
/// standard deviations).
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Default)]
pub struct Params<S: Scalar> {
    map: IndexMap<String, Tensor<S>>,
}

/// Running statistics are state, not trainable parameters.
pub fn is_trainable_name(name: &str) -> bool {
    !name.ends_with("running_mean") && !name.ends_with("running_var")
}

impl<S: Scalar> Params<S> {
    pub fn new() -> Self {
        Params {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<S>) -> Result<()> {
        let name = name.into();
        if t.is_on_tape() {
            return Err(Error::Tape(format!("parameter `{name}` must be detached")));
        }
        if self.map.insert(name.clone(), t).is_some() {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Replace the value of an existing parameter (shape-checked).
    pub fn set(&mut self, name: &str, t: Tensor<S>) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::InvalidShape {
                op: "params.set",
                msg: format!(
                    "parameter `{name}` has shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                ),
                shape: t.shape().to_vec(),
            });
        }
        *slot = t;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total number of scalar elements across all tensors.
    pub fn total_elems(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Total elements across trainable tensors only.
    pub fn trainable_elems(&self) -> usize {
        self.map
            .iter()
            .filter(|(n, _)| is_trainable_name(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Register every tensor as a tape leaf; running statistics are marked
    /// non-trainable. Returns a new collection of taped tensors.
    pub fn bind_to_tape(&self, tape: &TapeRef<S>) -> Result<Params<S>> {
        let mut out = IndexMap::with_capacity(self.map.len());
        for (name, t) in &self.map {
            let leaf = Tape::leaf(tape, t, is_trainable_name(name))?;
            out.insert(name.clone(), leaf);
        }
        Ok(Params { map: out })
    }

    /// Cast every tensor to another scalar type (used to run the gradient
    /// suite in `f64` on parameters initialized generically).
    pub fn cast<T: Scalar>(&self) -> Params<T> {
        let mut out = IndexMap::with_capacity(self.map.len());
        for (name, t) in &self.map {
            out.insert(name.clone(), t.cast::<T>());
        }
        Params { map: out }
    }

    // -- initializer helpers -------------------------------------------------

    pub fn init_trunc_normal(
        &mut self,
        rng: &mut SeededRng,
        name: impl Into<String>,
        shape: &[usize],
    ) -> Result<()> {
        let t = rng.trunc_normal_tensor::<S>(shape, INIT_STD);
        self.insert(name, t)
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn init_full(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
    ) -> Result<()> {
        self.insert(name, Tensor::full(shape, S::from_lossy(value)))
    }

    /// Linear layer: weight `[in, out]` (forward is `x @ W`), optional bias.
    pub fn init_linear(
        &mut self,
        rng: &mut SeededRng,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Result<()> {
        self.init_trunc_normal(rng, format!("{prefix}.weight"), &[in_features, out_features])?;
        if bias {
            self.init_zeros(format!("{prefix}.bias"), &[out_features])?;
        }
        Ok(())
    }

    /// Layer norm affine pair.
    pub fn init_layer_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.init_full(format!("{prefix}.gamma"), &[dim], 1.0)?;
        self.init_zeros(format!("{prefix}.beta"), &[dim])
    }

    /// Batch norm affine pair plus running statistics.
    pub fn init_batch_norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.init_full(format!("{prefix}.gamma"), &[dim], 1.0)?;
        self.init_zeros(format!("{prefix}.beta"), &[dim])?;
        self.init_zeros(format!("{prefix}.running_mean"), &[dim])?;
        self.init_full(format!("{prefix}.running_var"), &[dim], 1.0)
    }
}

/// Apply `x @ W (+ bias)` using parameters at `prefix`.
pub fn linear<S: Scalar>(params: &Params<S>, prefix: &str, x: &Tensor<S>) -> Result<Tensor<S>> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let y = x.matmul(w)?;
    let bias_name = format!("{prefix}.bias");
    if params.contains(&bias_name) {
        y.add(params.get(&bias_name)?)
    } else {
        Ok(y)
    }
}

/// Layer norm using the affine pair at `prefix`.
pub fn layer_norm_p<S: Scalar>(
    params: &Params<S>,
    prefix: &str,
    x: &Tensor<S>,
    eps: f64,
) -> Result<Tensor<S>> {
    crate::tensor::ops::layer_norm(
        x,
        params.get(&format!("{prefix}.gamma"))?,
        params.get(&format!("{prefix}.beta"))?,
        eps,
    )
}
