//! Inception Score, Fréchet distance, and the deformation-level sweep.
//!
//! Both metrics go through a [`FeatureExtractor`]. The bundled backend is a
//! small CNN trained on toy faces to predict their coarse attribute class;
//! its pooled penultimate activations are the FID features.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::data::{generate_toy_face, PhotoImage, ToyFaceParams};
use crate::error::{Error, Result};
use crate::networks::{FacePencil, ModelConfig};
use crate::nn::{photos_to_tensor, relu, tensor_to_photos, Conv2d, Linear, ParamGroup, ParamStore, WeightInit};
use crate::optim::{Adam, AdamConfig};
use crate::seed::{derive_seed, derive_seed2, rng_for};
use crate::trainer::TrainItem;

/// Covariance ridge added before the matrix square root.
pub const FID_EPS: f64 = 1e-6;
pub const DEFAULT_IS_SPLITS: usize = 10;

pub trait FeatureExtractor {
    fn num_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Class probabilities, one row per image.
    fn class_probs(&self, images: &[PhotoImage]) -> Result<Vec<Vec<f64>>>;
    /// Pooled feature vectors, one row per image.
    fn features(&self, images: &[PhotoImage]) -> Result<Vec<Vec<f64>>>;
}

/// Inception Score from a probability table: `exp(E_x KL(p(y|x) || p(y)))`
/// per split, then mean and population standard deviation over splits.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    if splits == 0 || probs.len() < splits {
        return Err(Error::Insufficient(format!("{} samples for {splits} splits", probs.len())));
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(splits);
    for k in 0..splits {
        let part = &probs[k * n / splits..(k + 1) * n / splits];
        let c = part[0].len();
        let mut marginal = vec![0.0; c];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let mut kl = 0.0;
        for p in part {
            for (pv, mv) in p.iter().zip(&marginal) {
                if *pv > 0.0 {
                    kl += pv * (pv.ln() - mv.ln());
                }
            }
        }
        scores.push((kl / part.len() as f64).exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

fn moments(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    let dim = x.first().map(Vec::len).unwrap_or(0);
    if n < 2 || dim == 0 {
        return Err(Error::Insufficient(format!("{n} feature vectors")));
    }
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("ragged feature rows".into()));
    }
    let m = DMatrix::from_fn(n, dim, |i, j| x[i][j]);
    let mean = DVector::from_fn(dim, |j, _| m.column(j).mean());
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let biased = centered.transpose() * &centered / n as f64;
    let cov = if n > dim {
        &biased * (n as f64 / (n - 1) as f64)
    } else {
        ledoit_wolf(&centered, &biased)
    };
    Ok((mean, cov))
}

/// Ledoit-Wolf shrinkage towards a scaled identity.
fn ledoit_wolf(centered: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = centered.shape();
    let mu = s.trace() / p as f64;
    let target = DMatrix::<f64>::identity(p, p) * mu;
    let delta2 = (s - &target).norm_squared() / p as f64;
    let mut beta2 = 0.0;
    for row in centered.row_iter() {
        let outer = row.transpose() * row;
        beta2 += (outer - s).norm_squared() / p as f64;
    }
    beta2 /= (n * n) as f64;
    let shrink = if delta2 > 0.0 { (beta2.min(delta2)) / delta2 } else { 1.0 };
    target * shrink + s * (1.0 - shrink)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix square root failed".into()));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, with a small ridge
/// on both covariances and shrinkage when a set has no more samples than
/// dimensions.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(a)?;
    let (mu_b, cov_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Shape("feature dimensions differ".into()));
    }
    let ridge = DMatrix::<f64>::identity(mu_a.len(), mu_a.len()) * FID_EPS;
    let (cov_a, cov_b) = (cov_a + &ridge, cov_b + &ridge);
    let root_a = sqrt_psd(&cov_a)?;
    let cross = sqrt_psd(&(&root_a * &cov_b * &root_a))?;
    let value = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite FID".into()));
    }
    Ok(value.max(0.0))
}

pub fn fid(gen: &[PhotoImage], real: &[PhotoImage], extractor: &dyn FeatureExtractor) -> Result<f64> {
    fid_from_features(&extractor.features(gen)?, &extractor.features(real)?)
}

pub fn inception_score_images(
    images: &[PhotoImage],
    extractor: &dyn FeatureExtractor,
    splits: usize,
) -> Result<(f64, f64)> {
    if images.len() < splits * 10 {
        return Err(Error::Insufficient(format!(
            "{} images for {splits} splits (need {})",
            images.len(),
            splits * 10
        )));
    }
    inception_score(&extractor.class_probs(images)?, splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub n_samples: usize,
    pub d: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub resolution: usize,
    pub channels: [usize; 3],
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: [16, 32, 64],
        }
    }
}

/// Attribute classifier over toy faces (hair length × face aspect).
#[derive(Debug)]
pub struct ToyAttributeExtractor {
    pub store: ParamStore,
    convs: [Conv2d; 3],
    head: Linear,
    resolution: usize,
}

pub const TOY_ATTRIBUTE_CLASSES: usize = 4;

impl ToyAttributeExtractor {
    pub fn new(cfg: ExtractorConfig) -> Result<Self> {
        let mut store = ParamStore::new(DType::F32);
        let mut b = store.builder(ParamGroup::Extractor);
        let [c1, c2, c3] = cfg.channels;
        let convs = [
            Conv2d::new(&mut b.pp("conv0"), 3, c1, 3, 2, 1, true, WeightInit::He)?,
            Conv2d::new(&mut b.pp("conv1"), c1, c2, 3, 2, 1, true, WeightInit::He)?,
            Conv2d::new(&mut b.pp("conv2"), c2, c3, 3, 2, 1, true, WeightInit::He)?,
        ];
        let head = Linear::new(&mut b.pp("head"), c3, TOY_ATTRIBUTE_CLASSES)?;
        Ok(Self {
            store,
            convs,
            head,
            resolution: cfg.resolution,
        })
    }

    fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.convs {
            h = relu(&c.forward(&h)?)?;
        }
        Ok(h.mean(3)?.mean(2)?)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.pooled(x)?)
    }

    fn batch(&self, images: &[PhotoImage]) -> Result<Tensor> {
        if let Some(img) = images.iter().find(|i| i.height() != self.resolution || i.width() != self.resolution) {
            return Err(Error::Shape(format!(
                "extractor expects {}px images, got {}x{}",
                self.resolution,
                img.height(),
                img.width()
            )));
        }
        let refs: Vec<&PhotoImage> = images.iter().collect();
        photos_to_tensor(&refs, DType::F32)
    }

    fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }

    /// Trains on `n` toy faces for `epochs` epochs and returns the extractor
    /// with its accuracy on 200 fresh faces.
    pub fn train(cfg: ExtractorConfig, n: usize, epochs: usize, seed: u64) -> Result<(Self, f64)> {
        let ex = Self::new(cfg)?;
        ex.store.reinit_group(ParamGroup::Extractor, seed)?;
        let sample = |range: std::ops::Range<u64>| -> Result<(Vec<PhotoImage>, Vec<u32>)> {
            let mut imgs = Vec::new();
            let mut labels = Vec::new();
            for i in range {
                let s = derive_seed2(seed, 0xFACE, i);
                imgs.push(generate_toy_face(s, cfg.resolution)?.1);
                labels.push(ToyFaceParams::sample(s).attribute_class() as u32);
            }
            Ok((imgs, labels))
        };
        let (imgs, labels) = sample(0..n as u64)?;
        let mut opt = Adam::new(
            ex.store.vars_in(&[ParamGroup::Extractor]),
            AdamConfig {
                beta1: 0.9,
                ..AdamConfig::default()
            },
        );
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..epochs {
            order.shuffle(&mut rng_for(seed, 0xE0 + epoch as u64));
            for chunk in order.chunks(32) {
                let batch: Vec<PhotoImage> = chunk.iter().map(|&i| imgs[i].clone()).collect();
                let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
                let x = ex.batch(&batch)?;
                let logits = ex.logits(&x)?;
                let y = Tensor::from_vec(y, chunk.len(), x.device())?;
                // Cross-entropy: logsumexp - logit[y].
                let max = logits.max_keepdim(1)?.detach();
                let lse = (logits.broadcast_sub(&max)?.exp()?.sum_keepdim(1)?.log()? + &max)?.squeeze(1)?;
                let picked = logits.gather(&y.unsqueeze(1)?, 1)?.squeeze(1)?;
                let loss = (lse - picked)?.mean_all()?;
                opt.step(&loss.backward()?, 2e-3)?;
            }
        }
        let (test_imgs, test_labels) = sample(n as u64 + 1_000_000..n as u64 + 1_000_200)?;
        let probs = ex.class_probs(&test_imgs)?;
        let correct = probs
            .iter()
            .zip(&test_labels)
            .filter(|(p, &l)| {
                let arg = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i);
                arg == Some(l as usize)
            })
            .count();
        let acc = correct as f64 / test_labels.len() as f64;
        Ok((ex, acc))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut meta = CheckpointMeta::new(ModelConfig {
            resolution: self.resolution,
            ..ModelConfig::default()
        });
        meta.note = Some(format!("extractor channels {:?}", self.channels()));
        Checkpoint::from_store(meta, &self.store, &[ParamGroup::Extractor]).save(path)
    }

    pub fn load(path: &std::path::Path, cfg: ExtractorConfig) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let ex = Self::new(cfg)?;
        let values: BTreeMap<String, Tensor> = ck.params();
        crate::checkpoint::load_groups(&ex.store, &values, &[ParamGroup::Extractor])?;
        Ok(ex)
    }

    fn channels(&self) -> [usize; 3] {
        [
            self.convs[0].out_channels(),
            self.convs[1].out_channels(),
            self.convs[2].out_channels(),
        ]
    }
}

impl FeatureExtractor for ToyAttributeExtractor {
    fn num_classes(&self) -> usize {
        TOY_ATTRIBUTE_CLASSES
    }

    fn feature_dim(&self) -> usize {
        self.convs[2].out_channels()
    }

    fn class_probs(&self, images: &[PhotoImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let logits = self.logits(&self.batch(chunk)?)?.detach();
            let max = logits.max_keepdim(1)?;
            let e = logits.broadcast_sub(&max)?.exp()?;
            out.extend(Self::rows(&e.broadcast_div(&e.sum_keepdim(1)?)?)?);
        }
        Ok(out)
    }

    fn features(&self, images: &[PhotoImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            out.extend(Self::rows(&self.pooled(&self.batch(chunk)?)?.detach())?);
        }
        Ok(out)
    }
}

/// Synthesizes every item's sketch deformed at `d` through `G_m`.
pub fn synthesize_deformed(model: &FacePencil, items: &[TrainItem], d: u32, seed: u64) -> Result<Vec<PhotoImage>> {
    let mut out = Vec::with_capacity(items.len());
    for (c, chunk) in items.chunks(16).enumerate() {
        let sketches: Vec<_> = chunk
            .iter()
            .enumerate()
            .map(|(j, it)| it.deformed(d, derive_seed2(seed, c as u64, j as u64)))
            .collect();
        let refs: Vec<_> = sketches.iter().collect();
        let x = crate::nn::sketches_to_tensor(&refs, model.store.dtype())?;
        let (g, _) = model.forward_main(&x)?;
        out.extend(tensor_to_photos(&g.image.detach(), "generated")?);
    }
    Ok(out)
}

/// Scores the model on `items` once per deformation level.
pub fn deformation_sweep(
    model: &FacePencil,
    items: &[TrainItem],
    d_levels: &[u32],
    extractor: &dyn FeatureExtractor,
    splits: usize,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    let real: Vec<PhotoImage> = items.iter().map(|i| i.photo.clone()).collect();
    let real_features = extractor.features(&real)?;
    d_levels
        .iter()
        .map(|&d| {
            let gen = synthesize_deformed(model, items, d, derive_seed(seed, d as u64))?;
            let (is_mean, is_std) = inception_score_images(&gen, extractor, splits)?;
            let fid = fid_from_features(&extractor.features(&gen)?, &real_features)?;
            log::info!("d={d}: IS {is_mean:.4} ± {is_std:.4}, FID {fid:.4}");
            Ok(EvalReport {
                is_mean,
                is_std,
                fid,
                n_samples: gen.len(),
                d: Some(d),
            })
        })
        .collect()
}

/// Mean reconstruction error of `G_m` on `items` at `d`, a cheap companion
/// to the sweep.
pub fn mean_rec_m(model: &FacePencil, items: &[TrainItem], d: u32, seed: u64) -> Result<f64> {
    let gen = synthesize_deformed(model, items, d, seed)?;
    let mut total = 0.0;
    for (g, it) in gen.iter().zip(items) {
        let n = g.pixels().len() as f64;
        total += g.pixels().iter().zip(it.photo.pixels()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / n;
    }
    Ok(total / items.len() as f64)
}
