//! Parameter storage and the handful of layers the networks are built from.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names whose first
//! segment is the [`ParamGroup`]. Layers hold clones of the store's `Var`s,
//! which share storage, so two layers built from the same `Var` are aliases.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_distr::{Distribution, Normal};

use crate::data::PhotoImage;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::sketch::Sketch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Classifier,
    Sap,
    EncoderA,
    EncoderM,
    SharedResidual,
    SharedDecoder,
    D1,
    D2,
    D3,
    /// Evaluation feature extractor; never part of the synthesis model.
    Extractor,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 10] = [
        ParamGroup::Classifier,
        ParamGroup::Sap,
        ParamGroup::EncoderA,
        ParamGroup::EncoderM,
        ParamGroup::SharedResidual,
        ParamGroup::SharedDecoder,
        ParamGroup::D1,
        ParamGroup::D2,
        ParamGroup::D3,
        ParamGroup::Extractor,
    ];

    pub const DISCRIMINATOR: [ParamGroup; 3] = [ParamGroup::D1, ParamGroup::D2, ParamGroup::D3];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Classifier => "classifier",
            ParamGroup::Sap => "sap",
            ParamGroup::EncoderA => "encoder_a",
            ParamGroup::EncoderM => "encoder_m",
            ParamGroup::SharedResidual => "shared_residual",
            ParamGroup::SharedDecoder => "shared_decoder",
            ParamGroup::D1 => "d1",
            ParamGroup::D2 => "d2",
            ParamGroup::D3 => "d3",
            ParamGroup::Extractor => "extractor",
        }
    }

    fn index(self) -> u64 {
        ParamGroup::ALL.iter().position(|&g| g == self).unwrap() as u64
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with the given mean and standard deviation.
    Normal(f64, f64),
    /// He-normal for a layer with this fan-in.
    Kaiming(usize),
}

#[derive(Debug, Clone)]
struct Param {
    var: Var,
    init: Init,
}

#[derive(Debug)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
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

    pub fn builder(&mut self, group: ParamGroup) -> Builder<'_> {
        Builder {
            store: self,
            prefix: group.as_str().to_string(),
        }
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Var> {
        if self.params.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter {name}")));
        }
        let var = Var::zeros(shape, self.dtype, &self.device)?;
        self.params.insert(name, Param { var: var.clone(), init });
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).map(|p| &p.var)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn group_of(name: &str) -> Result<ParamGroup> {
        name.split('.').next().unwrap_or_default().parse()
    }

    /// `(name, var)` pairs of every parameter in `groups`, in name order.
    pub fn vars_in(&self, groups: &[ParamGroup]) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(name, _)| Self::group_of(name).is_ok_and(|g| groups.contains(&g)))
            .map(|(name, p)| (name.clone(), p.var.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .map(|(name, p)| (name.clone(), p.var.clone()))
            .collect()
    }

    /// Draws fresh values for `group` from a stream derived from `seed`.
    pub fn reinit_group(&self, group: ParamGroup, seed: u64) -> Result<()> {
        let mut rng = rng_for(seed, 0x1_0000 + group.index());
        for (name, p) in &self.params {
            if Self::group_of(name)? != group {
                continue;
            }
            let shape = p.var.dims().to_vec();
            let n: usize = shape.iter().product();
            let values: Vec<f64> = match p.init {
                Init::Zeros => vec![0.0; n],
                Init::Normal(mean, std) => {
                    let dist = Normal::new(mean, std).expect("valid std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Kaiming(fan_in) => {
                    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
            };
            let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
            p.var.set(&t)?;
        }
        Ok(())
    }

    pub fn reinit_all(&self, seed: u64) -> Result<()> {
        for g in ParamGroup::ALL {
            self.reinit_group(g, seed)?;
        }
        Ok(())
    }

    /// Deep copy of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(name, p)| Ok((name.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    /// Names whose current value differs bitwise from `before`.
    pub fn changed_since(&self, before: &BTreeMap<String, Tensor>) -> Result<Vec<String>> {
        let mut changed = Vec::new();
        for (name, p) in &self.params {
            let prev = before
                .get(name)
                .ok_or_else(|| Error::InvalidInput(format!("snapshot lacks {name}")))?;
            if !bitwise_equal(p.var.as_tensor(), prev)? {
                changed.push(name.clone());
            }
        }
        Ok(changed)
    }

    /// Overwrites parameter values from named tensors; every name must exist
    /// with the same shape.
    pub fn load_values(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in &self.params {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.dims() != p.var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} vs expected {:?}",
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub fn bitwise_equal(a: &Tensor, b: &Tensor) -> Result<bool> {
    if a.dims() != b.dims() || a.dtype() != b.dtype() {
        return Ok(false);
    }
    let eq = match a.dtype() {
        DType::F64 => {
            let (x, y) = (a.flatten_all()?.to_vec1::<f64>()?, b.flatten_all()?.to_vec1::<f64>()?);
            x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        _ => {
            let (x, y) = (
                a.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                b.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
            );
            x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
    };
    Ok(eq)
}

pub struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Builder<'_> {
    pub fn pp(&mut self, name: impl fmt::Display) -> Builder<'_> {
        Builder {
            prefix: format!("{}.{name}", self.prefix),
            store: self.store,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.store.create(format!("{}.{name}", self.prefix), shape, init)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// N(0, 0.02), the usual GAN initialisation.
    Gan,
    He,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder<'_>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: WeightInit,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let w_init = match init {
            WeightInit::Gan => Init::Normal(0.0, 0.02),
            WeightInit::He => Init::Kaiming(fan_in),
        };
        let weight = b.param("weight", &[out_c, in_c, kernel, kernel], w_init)?;
        let bias = if bias {
            Some(b.param("bias", &[out_c], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, in_f: usize, out_f: usize) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[out_f, in_f], Init::Kaiming(in_f))?,
            bias: b.param("bias", &[out_f], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-sample, per-channel standardisation over the spatial dims.
pub fn instance_normalize(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&(var + INSTANCE_NORM_EPS)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl InstanceNorm {
    pub fn new(b: &mut Builder<'_>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param("gamma", &[channels], Init::Normal(1.0, 0.02))?,
            beta: b.param("beta", &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.gamma.reshape((1, (), 1, 1))?;
        let b = self.beta.reshape((1, (), 1, 1))?;
        Ok(instance_normalize(x)?.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.relu()?)
}

/// Leaky rectifier with slope 0.2 on the negative side.
pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * 0.2)?)?)
}

/// Softmax over the channel dimension (dim 1).
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Stride-1 max pooling with symmetric zero padding; output keeps the input
/// size. Intended for non-negative inputs that carry no gradient.
pub fn max_pool_same(x: &Tensor, kernel: usize) -> Result<Tensor> {
    if kernel % 2 == 0 {
        return Err(Error::InvalidInput(format!("pool kernel {kernel} must be odd")));
    }
    let pad = kernel / 2;
    let padded = x.detach().pad_with_zeros(2, pad, pad)?.pad_with_zeros(3, pad, pad)?;
    Ok(padded.max_pool2d_with_stride(kernel, 1)?)
}

pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * factor, w * factor)?)
}

/// Batch of sketches as a `(B, 1, H, W)` tensor.
pub fn sketches_to_tensor(sketches: &[&Sketch], dtype: DType) -> Result<Tensor> {
    let first = sketches
        .first()
        .ok_or_else(|| Error::InvalidInput("empty sketch batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(sketches.len() * h * w);
    for s in sketches {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Shape("sketch batch has mixed sizes".into()));
        }
        data.extend(s.to_f32());
    }
    Ok(Tensor::from_vec(data, (sketches.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Batch of photos as a `(B, 3, H, W)` tensor.
pub fn photos_to_tensor(photos: &[&PhotoImage], dtype: DType) -> Result<Tensor> {
    let first = photos
        .first()
        .ok_or_else(|| Error::InvalidInput("empty photo batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(photos.len() * 3 * h * w);
    for p in photos {
        if (p.height(), p.width()) != (h, w) {
            return Err(Error::Shape("photo batch has mixed sizes".into()));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(p.get(y, x, c));
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (photos.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Splits a `(B, 3, H, W)` tensor back into photos.
pub fn tensor_to_photos(t: &Tensor, source_id: &str) -> Result<Vec<PhotoImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    (0..b)
        .map(|i| {
            let mut hwc = vec![0f32; h * w * 3];
            for ch in 0..3 {
                for p in 0..h * w {
                    hwc[p * 3 + ch] = data[((i * 3 + ch) * h * w) + p].clamp(-1.0, 1.0);
                }
            }
            PhotoImage::new(hwc, h, w, source_id)
        })
        .collect()
}

/// Standard-normal tensor drawn from a seeded stream.
pub fn randn_seeded(shape: impl Into<candle_core::Shape>, seed: u64, dtype: DType) -> Result<Tensor> {
    let shape = shape.into();
    let mut rng = rng_for(seed, 0x5EED);
    let dist = Normal::new(0.0, 1.0).expect("valid std");
    let v: Vec<f64> = (0..shape.elem_count()).map(|_| dist.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
