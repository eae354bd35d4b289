//! Spatial attention pooling.
//!
//! The input sketch is dilated by several max-pool kernels; each dilated copy
//! passes through its own convolution and the results are concatenated into
//! a relaxed representation `R`. A frozen distortion classifier supplies
//! features at three scales which are upsampled, concatenated, and reduced by
//! three convolutions to one attention logit per branch. A channel softmax
//! gives the attention map `A`, and the output is `A` broadcast over each
//! branch's channels times `R`.

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    max_pool_same, relu, scalar, sketches_to_tensor, softmax_channels, upsample_nearest, Conv2d, Linear, ParamGroup, ParamStore, WeightInit,
};
use crate::optim::{Adam, AdamConfig};
use crate::seed::rng_for;
use crate::sketch::Sketch;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub channels: [usize; 3],
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64],
        }
    }
}

/// Three-stage convolutional binary classifier (edge-aligned vs deformed).
#[derive(Debug, Clone)]
pub struct DistortionClassifier {
    convs: [Conv2d; 3],
    head: Linear,
}

/// Feature maps after each convolution stage, at full, half and quarter
/// resolution.
#[derive(Debug, Clone)]
pub struct ClassifierFeatures {
    pub full: Tensor,
    pub half: Tensor,
    pub quarter: Tensor,
}

impl DistortionClassifier {
    pub fn new(store: &mut ParamStore, cfg: &ClassifierConfig) -> Result<Self> {
        let mut b = store.builder(ParamGroup::Classifier);
        let [c1, c2, c3] = cfg.channels;
        let convs = [
            Conv2d::new(&mut b.pp("conv0"), 1, c1, 3, 1, 1, true, WeightInit::He)?,
            Conv2d::new(&mut b.pp("conv1"), c1, c2, 3, 2, 1, true, WeightInit::He)?,
            Conv2d::new(&mut b.pp("conv2"), c2, c3, 3, 2, 1, true, WeightInit::He)?,
        ];
        let head = Linear::new(&mut b.pp("head"), c3, 1)?;
        Ok(Self { convs, head })
    }

    pub fn feature_channels(&self) -> usize {
        self.convs.iter().map(Conv2d::out_channels).sum()
    }

    pub fn features(&self, x: &Tensor) -> Result<ClassifierFeatures> {
        let (_, _, h, w) = x.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!(
                "classifier input {h}x{w} is not divisible by 4"
            )));
        }
        let full = relu(&self.convs[0].forward(x)?)?;
        let half = relu(&self.convs[1].forward(&full)?)?;
        let quarter = relu(&self.convs[2].forward(&half)?)?;
        Ok(ClassifierFeatures { full, half, quarter })
    }

    /// One logit per sample; positive means "deformed".
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.features(x)?;
        let pooled = f.quarter.mean(3)?.mean(2)?;
        Ok(self.head.forward(&pooled)?.squeeze(1)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SapConfig {
    /// Odd, strictly increasing max-pool kernel sizes, one per branch.
    pub kernel_sizes: Vec<usize>,
    /// Feature channels produced per branch.
    pub branch_channels: usize,
    /// Hidden widths of the first two attention convolutions.
    pub attention_channels: [usize; 2],
}

impl Default for SapConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![3, 5, 9],
            branch_channels: 8,
            attention_channels: [16, 8],
        }
    }
}

impl SapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.len() < 2 {
            return Err(Error::InvalidInput("SAP needs at least two branches".into()));
        }
        if self.kernel_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("SAP kernel sizes must increase".into()));
        }
        if self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return Err(Error::InvalidInput("SAP kernel sizes must be odd".into()));
        }
        if self.branch_channels == 0 || self.attention_channels.contains(&0) {
            return Err(Error::InvalidInput("SAP channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn num_branches(&self) -> usize {
        self.kernel_sizes.len()
    }

    pub fn out_channels(&self) -> usize {
        self.num_branches() * self.branch_channels
    }
}

/// Max-pools the sketch batch once per kernel size (stride 1, same size).
pub fn pool_branches(sketch: &Tensor, cfg: &SapConfig) -> Result<Vec<Tensor>> {
    cfg.kernel_sizes
        .iter()
        .map(|&k| max_pool_same(sketch, k))
        .collect()
}

/// Broadcasts per-branch attention over that branch's channels and
/// multiplies with the relaxed representation.
pub fn fuse(attention: &Tensor, relaxed: &Tensor, branch_channels: usize) -> Result<Tensor> {
    let (b, n, h, w) = attention.dims4()?;
    let (rb, rc, rh, rw) = relaxed.dims4()?;
    if (rb, rc, rh, rw) != (b, n * branch_channels, h, w) {
        return Err(Error::Shape(format!(
            "attention {:?} does not match relaxed {:?}",
            attention.dims(),
            relaxed.dims()
        )));
    }
    let expanded = attention
        .unsqueeze(2)?
        .broadcast_as((b, n, branch_channels, h, w))?
        .reshape((b, n * branch_channels, h, w))?;
    Ok((expanded * relaxed)?)
}

#[derive(Debug, Clone)]
pub struct SapOutput {
    /// `(B, N_r·k, H, W)`
    pub relaxed: Tensor,
    /// `(B, N_r, H, W)`, sums to one over dim 1.
    pub attention: Tensor,
    /// `(B, N_r·k, H, W)`
    pub fused: Tensor,
}

#[derive(Debug, Clone)]
pub struct Sap {
    cfg: SapConfig,
    branches: Vec<Conv2d>,
    attention: [Conv2d; 3],
}

impl Sap {
    pub fn new(store: &mut ParamStore, cfg: &SapConfig, classifier_channels: usize) -> Result<Self> {
        cfg.validate()?;
        let mut b = store.builder(ParamGroup::Sap);
        let k = cfg.branch_channels;
        let branches = (0..cfg.num_branches())
            .map(|i| Conv2d::new(&mut b.pp(format!("branch{i}")), 1, k, 3, 1, 1, true, WeightInit::He))
            .collect::<Result<Vec<_>>>()?;
        let [a1, a2] = cfg.attention_channels;
        let attention = [
            Conv2d::new(&mut b.pp("attn0"), classifier_channels, a1, 3, 1, 1, true, WeightInit::He)?,
            Conv2d::new(&mut b.pp("attn1"), a1, a2, 3, 1, 1, true, WeightInit::He)?,
            Conv2d::new(&mut b.pp("attn2"), a2, cfg.num_branches(), 3, 1, 1, true, WeightInit::Gan)?,
        ];
        Ok(Self {
            cfg: cfg.clone(),
            branches,
            attention,
        })
    }

    pub fn config(&self) -> &SapConfig {
        &self.cfg
    }

    pub fn branch_convs(&self) -> &[Conv2d] {
        &self.branches
    }

    /// Concatenation of each branch convolution applied to its pooled map.
    pub fn relaxed_representation(&self, pools: &[Tensor]) -> Result<Tensor> {
        if pools.len() != self.branches.len() {
            return Err(Error::Shape(format!(
                "{} pooled maps for {} branches",
                pools.len(),
                self.branches.len()
            )));
        }
        let feats = pools
            .iter()
            .zip(&self.branches)
            .map(|(p, conv)| conv.forward(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&feats, 1)?)
    }

    /// Pre-softmax attention scores, `(B, N_r, H, W)`.
    pub fn attention_logits(&self, sketch: &Tensor, clf: &DistortionClassifier) -> Result<Tensor> {
        let f = clf.features(sketch)?;
        let stacked = Tensor::cat(
            &[
                f.full.detach(),
                upsample_nearest(&f.half.detach(), 2)?,
                upsample_nearest(&f.quarter.detach(), 4)?,
            ],
            1,
        )?;
        let x = relu(&self.attention[0].forward(&stacked)?)?;
        let x = relu(&self.attention[1].forward(&x)?)?;
        self.attention[2].forward(&x)
    }

    pub fn attention_map(&self, sketch: &Tensor, clf: &DistortionClassifier) -> Result<Tensor> {
        softmax_channels(&self.attention_logits(sketch, clf)?)
    }

    pub fn forward(&self, sketch: &Tensor, clf: &DistortionClassifier) -> Result<SapOutput> {
        let pools = pool_branches(sketch, &self.cfg)?;
        let relaxed = self.relaxed_representation(&pools)?;
        let attention = self.attention_map(sketch, clf)?;
        let fused = fuse(&attention, &relaxed, self.cfg.branch_channels)?;
        Ok(SapOutput {
            relaxed,
            attention,
            fused,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of each class held out for evaluation.
    pub held_out_fraction: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            held_out_fraction: 1.0 / 6.0,
        }
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub store: ParamStore,
    pub classifier: DistortionClassifier,
    pub held_out_accuracy: f64,
    pub train_accuracy: f64,
}

fn accuracy(clf: &DistortionClassifier, samples: &[(&Sketch, f32)]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(64) {
        let sketches: Vec<&Sketch> = chunk.iter().map(|(s, _)| *s).collect();
        let logits = clf
            .logits(&sketches_to_tensor(&sketches, DType::F32)?)?
            .to_vec1::<f32>()?;
        correct += logits
            .iter()
            .zip(chunk)
            .filter(|(z, (_, label))| (**z > 0.0) == (*label > 0.5))
            .count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains the distortion classifier with binary cross-entropy. Deformed
/// sketches are the positive class. The tail `held_out_fraction` of each
/// input set is held out and scored after training.
pub fn pretrain_classifier<'a>(
    edge_aligned: &'a [Sketch],
    deformed: &'a [Sketch],
    model_cfg: &ClassifierConfig,
    cfg: &ClassifierTrainConfig,
) -> Result<PretrainOutcome> {
    if edge_aligned.is_empty() || deformed.is_empty() {
        return Err(Error::Insufficient("classifier needs both sketch classes".into()));
    }
    let held_out = |n: usize| (((n as f64) * cfg.held_out_fraction).round() as usize).min(n - 1);
    let (ea_train, ea_held) = edge_aligned.split_at(edge_aligned.len() - held_out(edge_aligned.len()));
    let (df_train, df_held) = deformed.split_at(deformed.len() - held_out(deformed.len()));
    let labelled = |neg: &'a [Sketch], pos: &'a [Sketch]| -> Vec<(&'a Sketch, f32)> {
        neg.iter().map(|s| (s, 0.0)).chain(pos.iter().map(|s| (s, 1.0))).collect()
    };
    let train = labelled(ea_train, df_train);
    let held = labelled(ea_held, df_held);

    let mut store = ParamStore::new(DType::F32);
    let classifier = DistortionClassifier::new(&mut store, model_cfg)?;
    store.reinit_group(ParamGroup::Classifier, cfg.seed)?;
    let mut opt = Adam::new(
        store.vars_in(&[ParamGroup::Classifier]),
        AdamConfig {
            beta1: 0.9,
            ..Default::default()
        },
    );

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_for(cfg.seed, 0xC1A5_0000 + epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let sketches: Vec<&Sketch> = batch.iter().map(|&i| train[i].0).collect();
            let labels: Vec<f32> = batch.iter().map(|&i| train[i].1).collect();
            let x = sketches_to_tensor(&sketches, DType::F32)?;
            let y = Tensor::from_vec(labels, batch.len(), x.device())?;
            let z = classifier.logits(&x)?;
            // softplus(z) - y·z
            let softplus = (z.relu()? + (z.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
            let loss = (softplus - (&y * &z)?)?.mean_all()?;
            epoch_loss += scalar(&loss)? * batch.len() as f64;
            opt.step(&loss.backward()?, cfg.lr)?;
        }
        log::debug!("classifier epoch {epoch}: loss {:.4}", epoch_loss / train.len() as f64);
    }
    let train_accuracy = accuracy(&classifier, &train)?;
    let held_out_accuracy = accuracy(&classifier, &held)?;
    log::info!("classifier accuracy: train {train_accuracy:.3}, held-out {held_out_accuracy:.3}");
    Ok(PretrainOutcome {
        store,
        classifier,
        held_out_accuracy,
        train_accuracy,
    })
}
