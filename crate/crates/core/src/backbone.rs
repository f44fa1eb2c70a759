//! The STGNN forecasting backbone.
//!
//! Pipeline: input projection, additive prompt fusion, graph convolution,
//! temporal convolution, graph convolution, mean pooling over time and a
//! linear head producing all `t_out` steps at once. Every operator is shared
//! across nodes, so the parameter count does not depend on the graph size.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::graph::{normalize_adjacency, scaled_laplacian};
use crate::linalg::{Matrix, SparseMatrix};
use crate::nn::{decode_checkpoint, encode_checkpoint, Parameter, Tape, Tensor, Var};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// Graph operator family used by both graph convolution layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `Â H W` with the self-loop normalized adjacency.
    Spatial,
    /// Chebyshev filter on the scaled Laplacian.
    Spectral,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Spatial => "spatial",
            Variant::Spectral => "spectral",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Variant::Spatial),
            "spectral" => Ok(Variant::Spectral),
            other => Err(Error::invalid("variant", format!("unknown variant tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: Variant,
    /// Input channels per node and step.
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub cheb_order: usize,
    pub t_out: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { variant: Variant::Spatial, channels: 1, hidden: 64, kernel: 3, cheb_order: 2, t_out: 12, dropout: 0.0 }
    }
}

impl BackboneConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.t_out == 0 || self.channels == 0 {
            return Err(Error::invalid("backbone", "channels, hidden width and t_out must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::invalid("kernel", format!("temporal kernel {} must be odd", self.kernel)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn graph_weight_shape(&self) -> Vec<usize> {
        let d = self.hidden;
        match self.variant {
            Variant::Spatial => alloc::vec![d, d],
            Variant::Spectral => alloc::vec![self.cheb_order + 1, d, d],
        }
    }

    /// `(name, shape, fan_in)` of every parameter in canonical order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let (c, d, k, t) = (self.channels, self.hidden, self.kernel, self.t_out);
        let (g1, g2) = match self.variant {
            Variant::Spatial => ("gconv1.weight", "gconv2.weight"),
            Variant::Spectral => ("gconv1.theta", "gconv2.theta"),
        };
        alloc::vec![
            ("input_proj.weight", alloc::vec![c, d], c),
            ("input_proj.bias", alloc::vec![d], c),
            (g1, self.graph_weight_shape(), d),
            ("tconv.weight", alloc::vec![k, d, d], k * d),
            ("tconv.bias", alloc::vec![d], k * d),
            (g2, self.graph_weight_shape(), d),
            ("head.weight", alloc::vec![d, t], d),
            ("head.bias", alloc::vec![t], d),
        ]
    }

    /// Number of scalar parameters; a function of the configuration only.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

/// Propagation operator matching a backbone variant.
#[derive(Clone, Debug)]
pub enum GraphOperator {
    Spatial(Arc<SparseMatrix>),
    Spectral(Arc<SparseMatrix>),
}

impl GraphOperator {
    pub fn from_adjacency(variant: Variant, adjacency: &Matrix) -> Result<Self> {
        Ok(match variant {
            Variant::Spatial => GraphOperator::Spatial(Arc::new(SparseMatrix::from_dense(&normalize_adjacency(adjacency)?))),
            Variant::Spectral => GraphOperator::Spectral(Arc::new(SparseMatrix::from_dense(&scaled_laplacian(adjacency)?))),
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            GraphOperator::Spatial(_) => Variant::Spatial,
            GraphOperator::Spectral(_) => Variant::Spectral,
        }
    }

    pub fn num_nodes(&self) -> usize {
        match self {
            GraphOperator::Spatial(m) | GraphOperator::Spectral(m) => m.rows(),
        }
    }
}

/// Dropout settings for one forward pass.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut StreamRng,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    params: Vec<Parameter>,
}

impl Backbone {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization from the `backbone/init` stream of `seed`.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "backbone/init");
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng::uniform(&mut r, -bound, bound)).collect();
                Ok(Parameter::new(name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone { config, params })
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    /// Registers the parameters on `tape` in canonical order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p)).collect()
    }

    fn check_nodes(&self, op: &GraphOperator, input: &[usize], prompt: Option<&[usize]>) -> Result<()> {
        if op.variant() != self.config.variant {
            return Err(Error::Config(format!("{} operator for a {} backbone", op.variant(), self.config.variant)));
        }
        let n = op.num_nodes();
        if input.len() != 4 || input[2] != n || input[3] != self.config.channels {
            return Err(Error::shape("forward_predict", format!("input {input:?} for {n} nodes")));
        }
        if let Some(p) = prompt {
            if p != [n, self.config.hidden] {
                return Err(Error::shape("forward_predict", format!("prompt {p:?}, expected [{n}, {}]", self.config.hidden)));
            }
        }
        Ok(())
    }

    /// Input projection followed by prompt fusion: `x W + b (+ P)`.
    pub fn fuse(&self, tape: &mut Tape, vars: &[Var], input: Var, prompt: Option<Var>) -> Result<Var> {
        let projected = tape.linear(input, vars[0], Some(vars[1]))?;
        match prompt {
            Some(p) => tape.node_bias(projected, p),
            None => Ok(projected),
        }
    }

    /// Everything after fusion, returning `[B, t_out, N]`.
    pub fn forward_from_fused(&self, tape: &mut Tape, vars: &[Var], op: &GraphOperator, fused: Var, mut dropout: Option<Dropout<'_>>) -> Result<Var> {
        let graph_layer = |tape: &mut Tape, h: Var, w: Var| match op {
            GraphOperator::Spatial(a) => tape.graph_conv_spatial(a, h, w),
            GraphOperator::Spectral(l) => tape.graph_conv_cheb(l, h, w),
        };
        let mut drop = |tape: &mut Tape, h: Var| match dropout.as_mut() {
            Some(d) => tape.dropout(h, d.p, d.rng),
            None => Ok(h),
        };
        let h = graph_layer(tape, fused, vars[2])?;
        let h = tape.relu(h)?;
        let h = drop(tape, h)?;
        let h = tape.temporal_conv(h, vars[3], vars[4])?;
        let h = tape.relu(h)?;
        let h = drop(tape, h)?;
        let h = graph_layer(tape, h, vars[5])?;
        let h = tape.relu(h)?;
        let h = tape.mean_pool_time(h)?;
        let out = tape.linear(h, vars[6], Some(vars[7]))?;
        tape.swap_last_axes(out)
    }

    /// Full forward pass on `input: [B, t_in, N, C]` with an optional `[N, d]` prompt.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], op: &GraphOperator, input: Var, prompt: Option<Var>, dropout: Option<Dropout<'_>>) -> Result<Var> {
        let prompt_shape = prompt.map(|p| tape.value(p).shape().to_vec());
        self.check_nodes(op, tape.value(input).shape(), prompt_shape.as_deref())?;
        let fused = self.fuse(tape, vars, input, prompt)?;
        self.forward_from_fused(tape, vars, op, fused, dropout)
    }

    /// Inference without gradients.
    pub fn predict(&self, op: &GraphOperator, input: &Tensor, prompt: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let x = tape.constant(input.clone());
        let p = prompt.map(|p| tape.constant(p.clone()));
        let y = self.forward(&mut tape, &vars, op, x, p, None)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> String {
        let c = &self.config;
        encode_checkpoint(
            &[
                ("kind", "backbone".to_string()),
                ("variant", c.variant.to_string()),
                ("channels", c.channels.to_string()),
                ("hidden", c.hidden.to_string()),
                ("kernel", c.kernel.to_string()),
                ("cheb_order", c.cheb_order.to_string()),
                ("t_out", c.t_out.to_string()),
            ],
            &self.params,
        )
    }

    pub fn from_checkpoint(text: &str, dropout: f64) -> Result<Self> {
        let ck = decode_checkpoint(text)?;
        let field = |k: &str| -> Result<usize> {
            ck.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse { line: 1, reason: format!("missing or invalid `{k}`") })
        };
        let config = BackboneConfig {
            variant: ck.meta("variant").unwrap_or_default().parse()?,
            channels: field("channels")?,
            hidden: field("hidden")?,
            kernel: field("kernel")?,
            cheb_order: field("cheb_order")?,
            t_out: field("t_out")?,
            dropout,
        };
        config.validate()?;
        let layout = config.layout();
        if layout.len() != ck.tensors.len() {
            return Err(Error::Parse { line: 1, reason: format!("expected {} tensors, found {}", layout.len(), ck.tensors.len()) });
        }
        let params = layout
            .into_iter()
            .zip(ck.tensors)
            .map(|((name, shape, _), (found, t))| {
                if name != found || t.shape() != shape.as_slice() {
                    return Err(Error::Parse { line: 1, reason: format!("tensor `{found}` {:?} where `{name}` {shape:?} expected", t.shape()) });
                }
                Ok(Parameter::new(name, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone { config, params })
    }
}
