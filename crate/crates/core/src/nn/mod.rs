//! Layer stacks producing class logits.
//!
//! A [`Network`] owns its parameters as plain [`Tensor`]s. To run a
//! differentiable forward pass the parameters are bound to a [`Tape`] as
//! leaves ([`Network::bind`]); after `backward` the leaf gradients are copied
//! back with [`Network::accumulate_grads`].

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

impl FromStr for Role {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            other => Err(NnError::Format(format!("unknown role {other:?}"))),
        }
    }
}

/// One layer of a network.
///
/// `Conv2d` is stride 1 with no padding and a square kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Relu,
    Flatten,
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense {inputs} {outputs}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                write!(f, "conv2d {in_channels} {out_channels} {kernel}")
            }
        }
    }
}

impl FromStr for LayerSpec {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let nums = |n: usize| -> Result<Vec<usize>, NnError> {
            if parts.len() != n + 1 {
                return Err(NnError::Spec(format!("{s:?}: expected {n} sizes")));
            }
            parts[1..]
                .iter()
                .map(|p| p.parse().map_err(|_| NnError::Spec(format!("{s:?}: bad size {p:?}"))))
                .collect()
        };
        match parts.first().copied() {
            Some("dense") => {
                let v = nums(2)?;
                Ok(LayerSpec::Dense { inputs: v[0], outputs: v[1] })
            }
            Some("relu") if parts.len() == 1 => Ok(LayerSpec::Relu),
            Some("flatten") if parts.len() == 1 => Ok(LayerSpec::Flatten),
            Some("conv2d") => {
                let v = nums(3)?;
                Ok(LayerSpec::Conv2d { in_channels: v[0], out_channels: v[1], kernel: v[2] })
            }
            _ => Err(NnError::Spec(format!("unknown layer {s:?}"))),
        }
    }
}

/// Per-sample input shape plus the layer stack applied to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    input: Vec<usize>,
    layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input: Vec<usize>, layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        let arch = Self { input, layers };
        arch.trace_shapes()?;
        Ok(arch)
    }

    /// A stack of dense layers with ReLU between them, `input → hidden… → classes`.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Result<Self, NnError> {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Dense { inputs: width, outputs: h });
            layers.push(LayerSpec::Relu);
            width = h;
        }
        layers.push(LayerSpec::Dense { inputs: width, outputs: classes });
        Self::new(vec![inputs], layers)
    }

    pub fn input(&self) -> &[usize] {
        &self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Per-sample output shape of the last layer.
    pub fn output(&self) -> Vec<usize> {
        self.trace_shapes().expect("validated at construction").pop().unwrap_or_else(|| self.input.clone())
    }

    /// Per-sample shape after each layer; fails on incompatible neighbours.
    fn trace_shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(NnError::Spec(format!("input shape {:?} is empty", self.input)));
        }
        let mut shape = self.input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if shape != [inputs] || outputs == 0 {
                        return Err(NnError::Spec(format!("layer {i} ({layer}) receives shape {shape:?}")));
                    }
                    vec![outputs]
                }
                LayerSpec::Relu => shape,
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                    let ok = shape.len() == 3
                        && shape[0] == in_channels
                        && out_channels > 0
                        && kernel > 0
                        && kernel <= shape[1]
                        && kernel <= shape[2];
                    if !ok {
                        return Err(NnError::Spec(format!("layer {i} ({layer}) receives shape {shape:?}")));
                    }
                    vec![out_channels, shape[1] - kernel + 1, shape[2] - kernel + 1]
                }
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    /// Scalar parameter count implied by the layer sizes.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| match *layer {
                LayerSpec::Dense { inputs, outputs } => inputs * outputs + outputs,
                LayerSpec::Conv2d { in_channels, out_channels, kernel } => {
                    out_channels * in_channels * kernel * kernel + out_channels
                }
                LayerSpec::Relu | LayerSpec::Flatten => 0,
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: Vec<Param>,
    role: Role,
    capacity_tag: String,
}

/// Parameters of a network registered on a tape for one forward/backward pass.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl Network {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases. The same
    /// architecture and seed always give bit-identical parameters.
    pub fn init(arch: Architecture, role: Role, capacity_tag: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in arch.layers.iter().enumerate() {
            let (wshape, fan_in, bias) = match *layer {
                LayerSpec::Dense { inputs, outputs } => (vec![inputs, outputs], inputs, outputs),
                LayerSpec::Conv2d { in_channels, out_channels, kernel } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels,
                ),
                LayerSpec::Relu | LayerSpec::Flatten => continue,
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let count: usize = wshape.iter().product();
            let data = (0..count).map(|_| normal.sample(&mut rng)).collect();
            params.push(Param {
                name: format!("layer{i}.weight"),
                tensor: Tensor::new(wshape, data).expect("shape matches").with_requires_grad(true),
            });
            params.push(Param {
                name: format!("layer{i}.bias"),
                tensor: Tensor::zeros(vec![bias]).with_requires_grad(true),
            });
        }
        Self { arch, params, role, capacity_tag: capacity_tag.into() }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn capacity_tag(&self) -> &str {
        &self.capacity_tag
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.arch.output().iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// SHA-256 over the little-endian bytes of every parameter, in order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            for v in p.tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams { vars: self.params.iter().map(|p| tape.leaf(&p.tensor)).collect() }
    }

    /// Binds every parameter as a constant; nothing on the resulting graph
    /// requests gradients.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams { vars: self.params.iter().map(|p| tape.constant(&p.tensor)).collect() }
    }

    /// Logits `[batch × C]` for a batch whose trailing dimensions match the
    /// architecture's input shape.
    pub fn forward<'t>(&self, bound: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>, NnError> {
        let shape = x.shape();
        if shape.len() < 2 || shape[1..] != self.arch.input[..] {
            return Err(AutodiffError::Dimension(format!(
                "network expects [batch, {:?}], got {shape:?}",
                self.arch.input
            ))
            .into());
        }
        let batch = shape[0];
        let mut h = x;
        let mut p = bound.vars.iter();
        for layer in &self.arch.layers {
            h = match layer {
                LayerSpec::Dense { .. } => {
                    let (w, b) = (p.next().expect("weight"), p.next().expect("bias"));
                    h.matmul(w)?.add_bias(b)?
                }
                LayerSpec::Relu => h.relu()?,
                LayerSpec::Flatten => {
                    let width = h.shape()[1..].iter().product();
                    h.reshape(vec![batch, width])?
                }
                LayerSpec::Conv2d { .. } => {
                    let (w, b) = (p.next().expect("weight"), p.next().expect("bias"));
                    h.conv2d(w, b)?
                }
            };
        }
        Ok(h)
    }

    /// Logits without recording gradients.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        Ok(self.forward(&bound, tape.constant(x))?.value())
    }

    /// Adds the tape gradients of a bound pass into each parameter's buffer.
    pub fn accumulate_grads(&mut self, bound: &BoundParams<'_>) -> Result<(), NnError> {
        for (param, var) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = var.grad() {
                param.tensor.accumulate_grad(&g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub fn has_grads(&self) -> bool {
        self.params.iter().any(|p| p.tensor.grad().is_some())
    }
}
