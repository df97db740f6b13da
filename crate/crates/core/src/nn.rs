//! Named parameter storage and the small layers every network here shares.

#[allow(unused_imports)] // resolves to inherent methods when std is linked
use num_traits::Float;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Index;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named weight tensors of one network.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<R> {
    names: Vec<String>,
    tensors: Vec<Tensor<R>>,
}

/// Tape handles for every tensor of a [`ParamStore`], in store order.
pub struct Binding {
    vars: Vec<Var>,
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Binding {
    /// Bind tape variables created elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<R>) -> ParamId {
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<R> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<R>> {
        self.id(name).map(|i| &self.tensors[i.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<R>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace the tensor stored under `name`, keeping its shape contract.
    pub fn set(&mut self, name: &str, tensor: Tensor<R>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::invalid(alloc::format!("unknown parameter `{name}`")))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::shape("ParamStore::set", self.tensors[id.0].shape(), tensor.shape()));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Record every tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<R>, trainable: bool) -> Binding {
        Binding {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal entries with standard deviation `gain / sqrt(fan_in)`.
    Scaled(f64),
}

fn init_tensor<R: Real>(shape: &[usize], fan_in: usize, init: Init, rng: &mut Stream) -> Tensor<R> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Scaled(gain) => {
            let std = gain / (fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| R::of(std * rng::normal::<f64>(rng)))
        }
    }
}

/// Affine map `x W + b` over matrix rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut Stream,
    ) -> Self {
        let w = store.add(&alloc::format!("{name}.weight"), init_tensor(&[d_in, d_out], d_in, init, rng));
        let b = bias.then(|| store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[1, d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn apply<R: Real>(&self, tape: &mut Tape<R>, bind: &Binding, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bind[self.w])?;
        match self.b {
            Some(b) => tape.add_tiled(y, bind[b]),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize) -> Self {
        Norm {
            gain: store.add(&alloc::format!("{name}.gain"), Tensor::full(&[d], R::one())),
            bias: store.add(&alloc::format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn apply<R: Real>(&self, tape: &mut Tape<R>, bind: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, bind[self.gain], bind[self.bias], R::of(NORM_EPS))
    }
}

/// Gradients for every tensor of a store after `tape.backward`.
/// Untracked or disconnected tensors yield zeros.
pub fn collect_grads<R: Real>(tape: &Tape<R>, bind: &Binding, store: &ParamStore<R>) -> Vec<Vec<R>> {
    bind.vars()
        .iter()
        .zip(store.tensors.iter())
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| alloc::vec![R::zero(); t.len()])
        })
        .collect()
}
