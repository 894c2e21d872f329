//! Learnable parameter storage and the Adam update.

use crate::error::{LmhrError, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Initializer attached to each learnable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitSpec {
    Zeros,
    Ones,
    XavierUniform,
    Uniform { lo: f64, hi: f64 },
    TruncNormal { std: f64 },
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub init: InitSpec,
}

/// A named group of learnable tensors (one per model component).
#[derive(Debug, Clone)]
pub struct ParamGroup<T> {
    pub name: String,
    pub entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamGroup<T> {
    pub fn new(name: impl Into<String>) -> Self {
        ParamGroup {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    /// Register a tensor; names must be unique within the group.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: InitSpec) {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name} in group {}",
            self.name
        );
        self.entries.push(ParamEntry {
            name,
            tensor: Tensor::zeros(shape),
            init,
        });
    }

    pub fn init_all(&mut self, rng: &mut ChaCha8Rng) {
        for e in self.entries.iter_mut() {
            init_tensor(&mut e.tensor, e.init, rng);
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }
}

fn init_tensor<T: Scalar>(t: &mut Tensor<T>, spec: InitSpec, rng: &mut ChaCha8Rng) {
    match spec {
        InitSpec::Zeros => {}
        InitSpec::Ones => {
            for v in t.data_mut() {
                *v = T::one();
            }
        }
        InitSpec::XavierUniform => {
            let shape = t.shape().to_vec();
            let (fan_out, fan_in) = (shape[0], shape[1..].iter().product::<usize>());
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in t.data_mut() {
                *v = T::of(rng.gen_range(-a..a));
            }
        }
        InitSpec::Uniform { lo, hi } => {
            for v in t.data_mut() {
                *v = T::of(rng.gen_range(lo..hi));
            }
        }
        InitSpec::TruncNormal { std } => {
            for v in t.data_mut() {
                // Box-Muller, resampled beyond two standard deviations
                loop {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    if z.abs() <= 2.0 {
                        *v = T::of(z * std);
                        break;
                    }
                }
            }
        }
    }
}

/// All parameter groups of a model, in a fixed deterministic order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    pub groups: Vec<ParamGroup<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { groups: Vec::new() }
    }

    pub fn push_group(&mut self, group: ParamGroup<T>) {
        assert!(
            self.groups.iter().all(|g| g.name != group.name),
            "duplicate group {}",
            group.name
        );
        self.groups.push(group);
    }

    pub fn numel(&self) -> usize {
        self.groups.iter().map(|g| g.numel()).sum()
    }

    /// Iterate `(full_name, tensor)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.groups.iter().flat_map(|g| {
            g.entries
                .iter()
                .map(move |e| (format!("{}.{}", g.name, e.name), &e.tensor))
        })
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor<T>)> {
        self.groups.iter_mut().flat_map(|g| {
            let gname = g.name.clone();
            g.entries
                .iter_mut()
                .map(move |e| (format!("{}.{}", gname, e.name), &mut e.tensor))
        })
    }

    pub fn get(&self, full_name: &str) -> Option<&Tensor<T>> {
        let (g, e) = full_name.split_once('.')?;
        self.groups
            .iter()
            .find(|gr| gr.name == g)?
            .entries
            .iter()
            .find(|en| en.name == e)
            .map(|en| &en.tensor)
    }

    pub fn has_group(&self, name: &str) -> bool {
        self.groups.iter().any(|g| g.name == name)
    }

    /// Load every parameter onto a tape as a grad-requiring leaf.
    pub fn load_on_tape(&self, tape: &mut Tape<T>) -> Result<ParamVars> {
        let mut map = BTreeMap::new();
        for (name, tensor) in self.iter() {
            let v = tape.leaf(tensor.clone())?;
            map.insert(name, v);
        }
        Ok(ParamVars { map })
    }
}

/// Tape handles for one load of a [`ParamSet`].
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Assemble from explicit handles; used by gradient-check harnesses that
    /// manage leaves themselves.
    pub fn from_map(map: BTreeMap<String, Var>) -> Self {
        ParamVars { map }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| LmhrError::config(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Adam optimizer state (moments aligned with `ParamSet::iter` order).
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamSet<T>, hyper: AdamHyper) -> Result<Self> {
        if hyper.lr <= 0.0 {
            return Err(LmhrError::config("adam: lr must be > 0"));
        }
        for (name, b) in [("beta1", hyper.beta1), ("beta2", hyper.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(LmhrError::config(format!("adam: {name} must be in [0,1)")));
            }
        }
        let m = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let v = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Ok(AdamState {
            m,
            v,
            t: 0,
            lr: hyper.lr,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.eps,
            weight_decay: hyper.weight_decay,
        })
    }
}

/// One Adam step with bias correction. Weight decay is classic L2: added to
/// the gradient before the moment updates.
pub fn adam_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
) -> Result<()> {
    state.t += 1;
    let b1 = T::of(state.beta1);
    let b2 = T::of(state.beta2);
    let lr = T::of(state.lr);
    let eps = T::of(state.eps);
    let wd = T::of(state.weight_decay);
    let bc1 = T::one() - T::of(state.beta1.powi(state.t as i32));
    let bc2 = T::one() - T::of(state.beta2.powi(state.t as i32));

    let mut idx = 0;
    for (name, tensor) in params.iter_mut() {
        let grad = match &grads[idx] {
            Some(g) => g,
            None => {
                idx += 1;
                continue;
            }
        };
        if grad.shape() != tensor.shape() {
            return Err(LmhrError::shape(format!(
                "adam: grad shape {:?} != param {:?} for {name}",
                grad.shape(),
                tensor.shape()
            )));
        }
        if !grad.is_finite() {
            return Err(LmhrError::numeric(format!(
                "adam: non-finite gradient for parameter {name}"
            )));
        }
        let m = state.m[idx].data_mut();
        let v = state.v[idx].data_mut();
        for ((p, &g0), (mi, vi)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data().iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g0 + wd * *p;
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
        idx += 1;
    }
    Ok(())
}
