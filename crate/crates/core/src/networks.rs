//! Dual generators with a shared residual stack and decoder, and the
//! three-scale conditional patch discriminator.

use candle_core::{DType, Tensor, TensorId};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, relu, Builder, Conv2d, InstanceNorm, ParamGroup, ParamStore, WeightInit,
};
use crate::sap::{ClassifierConfig, DistortionClassifier, Sap, SapConfig, SapOutput};

pub const ENCODER_STAGES: usize = 4;
pub const DISCRIMINATOR_SCALES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub resolution: usize,
    /// Width of the first encoder stage; each later stage doubles it.
    pub base_channels: usize,
    pub residual_blocks: usize,
    /// Width of the first discriminator layer; doubles per layer.
    pub disc_channels: usize,
    pub classifier: ClassifierConfig,
    pub sap: SapConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            base_channels: 32,
            residual_blocks: 9,
            disc_channels: 32,
            classifier: ClassifierConfig::default(),
            sap: SapConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        // Below 64 px the quarter-scale discriminator normalizes a 1x1 map,
        // which zeroes its output and gradients.
        if self.resolution < 64 || self.resolution % 16 != 0 {
            return Err(Error::InvalidInput(format!(
                "resolution {} must be a multiple of 16 and at least 64",
                self.resolution
            )));
        }
        if self.residual_blocks < 4 {
            return Err(Error::InvalidInput("at least four residual blocks are required".into()));
        }
        if self.base_channels == 0 || self.disc_channels == 0 {
            return Err(Error::InvalidInput("channel widths must be positive".into()));
        }
        self.sap.validate()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base_channels << (ENCODER_STAGES - 1)
    }
}

fn conv_in(b: &mut Builder<'_>, name: &str, in_c: usize, out_c: usize, k: usize, s: usize, p: usize) -> Result<(Conv2d, InstanceNorm)> {
    let mut b = b.pp(name);
    let conv = Conv2d::new(&mut b.pp("conv"), in_c, out_c, k, s, p, false, WeightInit::He)?;
    let norm = InstanceNorm::new(&mut b.pp("norm"), out_c)?;
    Ok((conv, norm))
}

/// Four stride-2 conv / instance-norm / ReLU stages.
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<(Conv2d, InstanceNorm)>,
}

impl Encoder {
    fn new(b: &mut Builder<'_>, in_c: usize, base: usize) -> Result<Self> {
        let mut stages = Vec::with_capacity(ENCODER_STAGES);
        let mut c = in_c;
        for i in 0..ENCODER_STAGES {
            let out = base << i;
            stages.push(conv_in(b, &format!("stage{i}"), c, out, 3, 2, 1)?);
            c = out;
        }
        Ok(Self { stages })
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].0.in_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "encoder expects {} channels, got {c}",
                self.in_channels()
            )));
        }
        let mut x = x.clone();
        for (conv, norm) in &self.stages {
            x = relu(&norm.forward(&conv.forward(&x)?)?)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: (Conv2d, InstanceNorm),
    b: (Conv2d, InstanceNorm),
}

#[derive(Debug, Clone)]
pub struct ResidualStack {
    blocks: Vec<ResBlock>,
}

impl ResidualStack {
    fn new(b: &mut Builder<'_>, channels: usize, n: usize) -> Result<Self> {
        let blocks = (0..n)
            .map(|i| {
                let mut bb = b.pp(format!("block{i}"));
                Ok(ResBlock {
                    a: conv_in(&mut bb, "a", channels, channels, 3, 1, 1)?,
                    b: conv_in(&mut bb, "b", channels, channels, 3, 1, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    /// Returns the final output and every block's output.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut x = x.clone();
        let mut taps = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let h = relu(&blk.a.1.forward(&blk.a.0.forward(&x)?)?)?;
            let h = blk.b.1.forward(&blk.b.0.forward(&h)?)?;
            x = (x + h)?;
            taps.push(x.clone());
        }
        Ok((x, taps))
    }
}

/// Four nearest-upsample / conv / instance-norm / ReLU stages and a tanh
/// output convolution.
#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<(Conv2d, InstanceNorm)>,
    out: Conv2d,
}

impl Decoder {
    fn new(b: &mut Builder<'_>, bottleneck: usize) -> Result<Self> {
        let mut stages = Vec::with_capacity(ENCODER_STAGES);
        let mut c = bottleneck;
        for i in 0..ENCODER_STAGES {
            stages.push(conv_in(b, &format!("stage{i}"), c, c / 2, 3, 1, 1)?);
            c /= 2;
        }
        let out = Conv2d::new(&mut b.pp("out"), c, 3, 3, 1, 1, true, WeightInit::Gan)?;
        Ok(Self { stages, out })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (conv, norm) in &self.stages {
            let (_, _, h, w) = x.dims4()?;
            x = x.upsample_nearest2d(h * 2, w * 2)?;
            x = relu(&norm.forward(&conv.forward(&x)?)?)?;
        }
        Ok(self.out.forward(&x)?.tanh()?)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// `(B, 3, H, W)` in [-1, 1].
    pub image: Tensor,
    /// Output of every residual block, first block first.
    pub taps: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorPath {
    Auxiliary,
    Main,
}

/// `G_a` and `G_m`. Each path has its own encoder; the residual stack and
/// decoder are one set of parameters used by both.
#[derive(Debug, Clone)]
pub struct GeneratorPair {
    pub encoder_a: Encoder,
    pub encoder_m: Encoder,
    pub residual: ResidualStack,
    pub decoder: Decoder,
    resolution: usize,
}

impl GeneratorPair {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let bottleneck = cfg.bottleneck_channels();
        Ok(Self {
            encoder_a: Encoder::new(&mut store.builder(ParamGroup::EncoderA), 1, cfg.base_channels)?,
            encoder_m: Encoder::new(
                &mut store.builder(ParamGroup::EncoderM),
                cfg.sap.out_channels(),
                cfg.base_channels,
            )?,
            residual: ResidualStack::new(
                &mut store.builder(ParamGroup::SharedResidual),
                bottleneck,
                cfg.residual_blocks,
            )?,
            decoder: Decoder::new(&mut store.builder(ParamGroup::SharedDecoder), bottleneck)?,
            resolution: cfg.resolution,
        })
    }

    fn check_resolution(&self, x: &Tensor) -> Result<()> {
        let (_, _, h, w) = x.dims4()?;
        if (h, w) != (self.resolution, self.resolution) {
            return Err(Error::Shape(format!(
                "input is {h}x{w}, model resolution is {}",
                self.resolution
            )));
        }
        Ok(())
    }

    fn decode(&self, code: Tensor) -> Result<GeneratorOutput> {
        let (x, taps) = self.residual.forward(&code)?;
        Ok(GeneratorOutput {
            image: self.decoder.forward(&x)?,
            taps,
        })
    }

    /// `G_a` on a `(B, 1, H, W)` edge-aligned sketch batch.
    pub fn forward_a(&self, sketch: &Tensor) -> Result<GeneratorOutput> {
        self.check_resolution(sketch)?;
        self.decode(self.encoder_a.forward(sketch)?)
    }

    /// `G_m` after SAP: takes the fused SAP tensor.
    pub fn forward_m(&self, fused: &Tensor) -> Result<GeneratorOutput> {
        self.check_resolution(fused)?;
        self.decode(self.encoder_m.forward(fused)?)
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// Patch logits `(B, 1, h, w)`.
    pub logits: Tensor,
    /// Every layer's output, logits last.
    pub features: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct SubDiscriminator {
    first: Conv2d,
    mid: Vec<(Conv2d, InstanceNorm)>,
    last: Conv2d,
}

impl SubDiscriminator {
    fn new(b: &mut Builder<'_>, base: usize) -> Result<Self> {
        let first = Conv2d::new(&mut b.pp("layer0"), 4, base, 4, 2, 1, true, WeightInit::Gan)?;
        let mut mid = Vec::new();
        let mut c = base;
        for i in 1..3 {
            let mut bb = b.pp(format!("layer{i}"));
            let conv = Conv2d::new(&mut bb.pp("conv"), c, c * 2, 4, 2, 1, false, WeightInit::Gan)?;
            let norm = InstanceNorm::new(&mut bb.pp("norm"), c * 2)?;
            mid.push((conv, norm));
            c *= 2;
        }
        let last = Conv2d::new(&mut b.pp("layer3"), c, 1, 3, 1, 1, true, WeightInit::Gan)?;
        Ok(Self { first, mid, last })
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscriminatorOutput> {
        let mut features = Vec::with_capacity(2 + self.mid.len());
        let mut h = leaky_relu(&self.first.forward(x)?)?;
        features.push(h.clone());
        for (conv, norm) in &self.mid {
            h = leaky_relu(&norm.forward(&conv.forward(&h)?)?)?;
            features.push(h.clone());
        }
        let logits = self.last.forward(&h)?;
        features.push(logits.clone());
        Ok(DiscriminatorOutput { logits, features })
    }
}

/// Conditional discriminators on the (sketch, image) pair at full, half and
/// quarter resolution.
#[derive(Debug, Clone)]
pub struct MultiScaleDiscriminator {
    pub scales: Vec<SubDiscriminator>,
}

impl MultiScaleDiscriminator {
    fn new(store: &mut ParamStore, base: usize) -> Result<Self> {
        let scales = ParamGroup::DISCRIMINATOR
            .iter()
            .map(|&g| SubDiscriminator::new(&mut store.builder(g), base))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scales })
    }

    pub fn forward(&self, sketch: &Tensor, image: &Tensor) -> Result<Vec<DiscriminatorOutput>> {
        let (sb, sc, sh, sw) = sketch.dims4()?;
        let (ib, ic, ih, iw) = image.dims4()?;
        if sc != 1 || ic != 3 || (sb, sh, sw) != (ib, ih, iw) {
            return Err(Error::Shape(format!(
                "discriminator pair {:?} / {:?}",
                sketch.dims(),
                image.dims()
            )));
        }
        let mut x = Tensor::cat(&[sketch, image], 1)?;
        let mut out = Vec::with_capacity(self.scales.len());
        for (i, d) in self.scales.iter().enumerate() {
            if i > 0 {
                x = x.avg_pool2d(2)?;
            }
            out.push(d.forward(&x)?);
        }
        Ok(out)
    }
}

/// Every network in the system over one parameter store.
#[derive(Debug)]
pub struct FacePencil {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub classifier: DistortionClassifier,
    pub sap: Sap,
    pub generators: GeneratorPair,
    pub discriminator: MultiScaleDiscriminator,
}

impl FacePencil {
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let classifier = DistortionClassifier::new(&mut store, &cfg.classifier)?;
        let sap = Sap::new(&mut store, &cfg.sap, classifier.feature_channels())?;
        let generators = GeneratorPair::new(&mut store, cfg)?;
        let discriminator = MultiScaleDiscriminator::new(&mut store, cfg.disc_channels)?;
        store.reinit_all(seed)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            classifier,
            sap,
            generators,
            discriminator,
        })
    }

    pub fn sap_forward(&self, sketch: &Tensor) -> Result<SapOutput> {
        self.sap.forward(sketch, &self.classifier)
    }

    /// `G_m` end to end; returns the SAP output alongside.
    pub fn forward_main(&self, sketch: &Tensor) -> Result<(GeneratorOutput, SapOutput)> {
        let sap = self.sap_forward(sketch)?;
        Ok((self.generators.forward_m(&sap.fused)?, sap))
    }

    /// Tensor ids of the parameters each generator path reads. Shared stacks
    /// show up under both paths with the same ids.
    pub fn path_param_ids(&self, path: GeneratorPath) -> Vec<(String, TensorId)> {
        let groups: &[ParamGroup] = match path {
            GeneratorPath::Auxiliary => &[ParamGroup::EncoderA, ParamGroup::SharedResidual, ParamGroup::SharedDecoder],
            GeneratorPath::Main => &[
                ParamGroup::Sap,
                ParamGroup::EncoderM,
                ParamGroup::SharedResidual,
                ParamGroup::SharedDecoder,
            ],
        };
        self.store
            .vars_in(groups)
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().id()))
            .collect()
    }
}
