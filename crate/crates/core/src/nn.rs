//! Building blocks shared by the detector and the segmenter.
//!
//! Parameters live in a [`ParamStore`] whose initial values are derived from a
//! run seed and the parameter's name, so model construction is reproducible
//! and independent of construction order.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::init::NormalOrUniform;
use candle_nn::{Init, Linear, VarBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Prefix of parameters that are stored and checkpointed but never optimized.
pub const BUFFER_PREFIX: &str = "buffer_";

#[derive(Clone)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("seed", &self.seed)
            .field("params", &self.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            vars: Arc::default(),
            seed,
            dtype,
            device,
        }
    }

    pub fn var_builder(&self) -> VarBuilder<'static> {
        VarBuilder::from_backend(
            Box::new(SeededBackend {
                store: self.clone(),
            }),
            self.dtype,
            self.device.clone(),
        )
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.lock().expect("param lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All parameters in name order.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .expect("param lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.named_vars()
            .into_iter()
            .filter(|(k, _)| !is_buffer(k))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().expect("param lock").get(name).cloned()
    }

    /// Overwrites the value of an existing parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if var.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter {name} has shape {:?}, got {:?}",
                var.shape(),
                value.shape()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    fn init_values(&self, name: &str, shape: &Shape, init: Init) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let n = shape.elem_count();
        let normal = |rng: &mut ChaCha8Rng, std: f64| {
            let d = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| d.sample(rng)).collect::<Vec<_>>()
        };
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| {
            (0..n).map(|_| rng.random_range(lo..=up)).collect::<Vec<_>>()
        };
        match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => normal(&mut rng, stdev).into_iter().map(|v| v + mean).collect(),
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(&mut rng, std),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(&mut rng, -bound, bound)
                    }
                }
            }
        }
    }
}

pub fn is_buffer(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|leaf| leaf.starts_with(BUFFER_PREFIX))
}

// FNV-1a
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

struct SeededBackend {
    store: ParamStore,
}

impl candle_nn::var_builder::SimpleBackend for SeededBackend {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        if let Some(v) = self.store.get(name) {
            if v.shape() != &s {
                candle_core::bail!("parameter {name} exists with shape {:?}, requested {s:?}", v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let values = self.store.init_values(name, &s, h);
        let t = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store
            .vars
            .lock()
            .expect("param lock")
            .insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.store.get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }
}

/// Linear layer with Xavier-uniform weights and zero bias.
pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> candle_core::Result<Linear> {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let w = vb.get_with_hints(
        (out_dim, in_dim),
        "weight",
        Init::Uniform {
            lo: -bound,
            up: bound,
        },
    )?;
    let b = vb.get_with_hints(out_dim, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

pub fn linear_no_bias(in_dim: usize, out_dim: usize, vb: VarBuilder) -> candle_core::Result<Linear> {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let w = vb.get_with_hints(
        (out_dim, in_dim),
        "weight",
        Init::Uniform {
            lo: -bound,
            up: bound,
        },
    )?;
    Ok(Linear::new(w, None))
}

/// Layer normalization over the last dimension, built from differentiable
/// primitives.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        xc.broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::softmax(x, D::Minus1)
}

/// Multi-head attention with an optional reduced internal width.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn new(dim: usize, heads: usize, internal_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        if internal_dim % heads != 0 {
            candle_core::bail!("attention width {internal_dim} not divisible by {heads} heads");
        }
        Ok(Self {
            q: linear(dim, internal_dim, vb.pp("q"))?,
            k: linear(dim, internal_dim, vb.pp("k"))?,
            v: linear(dim, internal_dim, vb.pp("v"))?,
            out: linear(internal_dim, dim, vb.pp("out"))?,
            heads,
            head_dim: internal_dim / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        x.reshape((b, n, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Attention probabilities `(B, heads, Lq, Lk)`. `bias` must broadcast to
    /// that shape (padding masks, relative position bias).
    pub fn probs(&self, q: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let q = self.split_heads(&self.q.forward(q)?)?;
        let k = self.split_heads(&self.k.forward(k)?)?;
        let scores = (q.matmul(&k.t()?)? / (self.head_dim as f64).sqrt())?;
        let scores = match bias {
            Some(b) => scores.broadcast_add(b)?,
            None => scores,
        };
        softmax_last(&scores)
    }

    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> candle_core::Result<Tensor> {
        let probs = self.probs(q, k, bias)?;
        let v = self.split_heads(&self.v.forward(v)?)?;
        let (b, _, lq, _) = probs.dims4()?;
        let ctx = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, lq, self.heads * self.head_dim))?;
        self.out.forward(&ctx)
    }
}

/// Additive attention bias `(B, 1, 1, L)` from a key padding mask `(B, L)`
/// holding 1 at padded positions.
pub fn key_padding_bias(padding: &Tensor, dtype: DType) -> candle_core::Result<Tensor> {
    let (b, l) = padding.dims2()?;
    (padding.to_dtype(dtype)? * -1e9)?.reshape((b, 1, 1, l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Stack of linear layers with an activation between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub fn new(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        depth: usize,
        act: Activation,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let a = if i == 0 { in_dim } else { hidden };
            let b = if i + 1 == depth { out_dim } else { hidden };
            layers.push(linear(a, b, vb.pp(i))?);
        }
        Ok(Self { layers, act })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = self.act.apply(&x)?;
            }
        }
        Ok(x)
    }
}

/// Row-stochastic bilinear resampling matrix `(out, in)` with half-pixel
/// centers.
pub fn bilinear_matrix(out: usize, inp: usize) -> Vec<f32> {
    let mut m = vec![0f32; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let t = src - lo as f64;
        m[o * inp + lo] += (1.0 - t) as f32;
        m[o * inp + hi] += t as f32;
    }
    m
}

/// Bilinearly resizes the last two dims of `(N, H, W)` to `(N, out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> candle_core::Result<Tensor> {
    let (n, h, w) = x.dims3()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ry = Tensor::from_vec(bilinear_matrix(out_h, h), (1, out_h, h), dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_matrix(out_w, w), (1, out_w, w), dev)?.to_dtype(x.dtype())?;
    let ry = ry.broadcast_as((n, out_h, h))?.contiguous()?;
    let rxt = rx.t()?.broadcast_as((n, w, out_w))?.contiguous()?;
    ry.matmul(&x.contiguous()?)?.matmul(&rxt)
}
