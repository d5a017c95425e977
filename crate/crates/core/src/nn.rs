//! Small neural building blocks on top of candle with seed-deterministic
//! parameter initialisation.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{invalid, Result};

/// FNV-1a, used for parameter seeding and text hashing.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Named trainable parameters. Each parameter is initialised from its own
/// RNG stream derived from `(seed, name)`, so construction order never
/// changes values.
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
            .field("params", &self.len())
            .field("seed", &self.seed)
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: Arc::new(Mutex::new(BTreeMap::new())),
            seed,
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.lock().unwrap().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// All parameters in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Flattened f64 copy of one parameter.
    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self
            .get(name)
            .ok_or_else(|| invalid(format!("no parameter `{name}`")))?;
        Ok(var
            .as_tensor()
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    /// Overwrites one parameter from flat f64 values.
    pub fn set_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| invalid(format!("no parameter `{name}`")))?;
        if values.len() != var.elem_count() {
            return Err(invalid(format!(
                "parameter `{name}` has {} elements, got {}",
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(v) = vars.get(&name) {
            if v.dims() != shape {
                return Err(invalid(format!(
                    "parameter `{name}` requested with shape {shape:?} but exists as {:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                let d = Uniform::new_inclusive(-b, b).map_err(|e| invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name, var);
        Ok(out)
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: &str) -> Scope {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Affine map `x W^T + b` on `(rows, in)` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &Scope, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.get("weight", &[fan_out, fan_in], Init::FanIn(fan_in))?,
            bias: Some(scope.get("bias", &[fan_out], Init::Zeros)?),
        })
    }

    pub fn zeros(scope: &Scope, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.get("weight", &[fan_out, fan_in], Init::Zeros)?,
            bias: Some(scope.get("bias", &[fan_out], Init::Zeros)?),
        })
    }

    pub fn no_bias(scope: &Scope, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: scope.get("weight", &[fan_out, fan_in], Init::FanIn(fan_in))?,
            bias: None,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Layer normalisation over the last axis, optionally with a learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    affine: Option<(Tensor, Tensor)>,
    eps: f64,
}

impl LayerNorm {
    pub fn plain() -> Self {
        Self {
            affine: None,
            eps: 1e-6,
        }
    }

    pub fn affine(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            affine: Some((
                scope.get("gamma", &[dim], Init::Const(1.0))?,
                scope.get("beta", &[dim], Init::Zeros)?,
            )),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(match &self.affine {
            Some((g, b)) => normed.broadcast_mul(g)?.broadcast_add(b)?,
            None => normed,
        })
    }
}

/// Multi-head scaled dot-product attention on `(rows, width)` projections.
///
/// `bias`, when given, is added to the `(q_rows, k_rows)` logits of every head.
pub fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let (lq, width) = q.dims2()?;
    let (lk, _) = k.dims2()?;
    if width % heads != 0 {
        return Err(invalid(format!("width {width} not divisible by {heads} heads")));
    }
    let dk = width / heads;
    let split = |x: &Tensor, l: usize| -> Result<Tensor> {
        Ok(x.reshape((l, heads, dk))?.transpose(0, 1)?.contiguous()?)
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let mut logits = (qh.matmul(&kh.transpose(1, 2)?)? * (1.0 / (dk as f64).sqrt()))?;
    if let Some(b) = bias {
        logits = logits.broadcast_add(b)?;
    }
    let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let out = probs.matmul(&vh)?;
    Ok(out.transpose(0, 1)?.reshape((lq, width))?)
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &Scope, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&scope.pp("fc1"), input, hidden)?,
            fc2: Linear::new(&scope.pp("fc2"), hidden, output)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Pre-norm transformer encoder block used by the condition encoders.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    mlp: Mlp,
    heads: usize,
}

impl EncoderBlock {
    pub fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::affine(&scope.pp("norm1"), dim)?,
            qkv: Linear::new(&scope.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&scope.pp("proj"), dim, dim)?,
            norm2: LayerNorm::affine(&scope.pp("norm2"), dim)?,
            mlp: Mlp::new(&scope.pp("mlp"), dim, 2 * dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(1)?;
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let q = qkv.narrow(1, 0, dim)?;
        let k = qkv.narrow(1, dim, dim)?;
        let v = qkv.narrow(1, 2 * dim, dim)?;
        let a = self.proj.forward(&attend(&q, &k, &v, self.heads, None)?)?;
        let x = (x + a)?;
        let m = self.mlp.forward(&self.norm2.forward(&x)?)?;
        Ok((x + m)?)
    }
}

/// Sinusoidal embedding of a scalar position into `dim` channels.
pub fn sinusoid(pos: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (pos * freq).cos();
        out[half + i] = (pos * freq).sin();
    }
    out
}

/// Fixed positional table for a `(t, h, w)` grid, one row per cell. The width
/// is split across the three axes.
pub fn grid_positions(t: usize, h: usize, w: usize, dim: usize) -> Vec<f64> {
    let dt = (dim / 3) & !1;
    let dh = (dim / 3) & !1;
    let dw = dim - dt - dh;
    let mut out = Vec::with_capacity(t * h * w * dim);
    for ti in 0..t {
        let et = sinusoid(ti as f64, dt, 100.0);
        for yi in 0..h {
            let eh = sinusoid(yi as f64, dh, 100.0);
            for xi in 0..w {
                out.extend_from_slice(&et);
                out.extend_from_slice(&eh);
                out.extend(sinusoid(xi as f64, dw, 100.0));
            }
        }
    }
    out
}

pub fn tensor_from_f64(values: &[f64], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, shape, device)?.to_dtype(dtype)?)
}

pub fn tensor_from_f32(values: &[f32], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, shape, device)?.to_dtype(dtype)?)
}

/// Flattened f64 copy of any tensor.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
