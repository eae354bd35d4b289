//! Three-stage training.
//!
//! 1. `G_a` and the discriminator on edge-aligned sketches.
//! 2. SAP, `E_m` and the discriminator on deformed sketches, with `G_a`'s
//!    residual taps as feature-matching targets; everything else frozen.
//! 3. Everything except the distortion classifier, full objective.
//!
//! Each step runs one discriminator update on detached fakes, then one
//! generator update. Batches and deformation seeds are pure functions of
//! `(seed, global step)`, so a resumed run replays the same data.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_groups, Checkpoint, CheckpointMeta};
use crate::data::{load_pair, DatasetManifest, PhotoImage, SemanticMask, Split, CELEBAMASK_NUM_CLASSES};
use crate::error::{Error, Result};
use crate::losses::{
    dfm_loss, discriminator_adversarial_loss, features_of, generator_adversarial_loss, gfm_loss,
    logits_of, reconstruction_loss, total_objective, LossConfig, LossReport, LossTerms,
};
use crate::networks::{FacePencil, ModelConfig};
use crate::nn::{photos_to_tensor, scalar, sketches_to_tensor, ParamGroup};
use crate::optim::{Adam, AdamConfig};
use crate::sap::{ClassifierConfig, SapConfig};
use crate::seed::{derive_seed, derive_seed2, rng_for};
use crate::sketch::{
    deform, extract_boundaries, rasterize, vectorize, DeformConfig, Sketch, StrokeSet, DEFAULT_SIMPLIFY_TOL,
};

/// Flat training configuration; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub resolution: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Deformation bound; defaults to 11 scaled to the resolution.
    pub deform_d: Option<u32>,
    pub lambda: f64,
    pub mu: f64,
    /// Reinitialize the discriminator when stage 2 starts.
    pub reinit_d_stage2: bool,
    /// Write `latest.safetensors` every this many steps (0 disables).
    pub checkpoint_every: usize,
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub disc_channels: usize,
    pub sap_kernel_sizes: Vec<usize>,
    pub sap_branch_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            resolution: model.resolution,
            stage1_steps: 200,
            stage2_steps: 200,
            stage3_steps: 200,
            batch_size: 8,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            deform_d: None,
            lambda: 10.0,
            mu: 10.0,
            reinit_d_stage2: true,
            checkpoint_every: 100,
            base_channels: model.base_channels,
            residual_blocks: model.residual_blocks,
            disc_channels: model.disc_channels,
            sap_kernel_sizes: model.sap.kernel_sizes,
            sap_branch_channels: model.sap.branch_channels,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1_steps == 0 || self.stage2_steps == 0 || self.stage3_steps == 0 {
            return Err(Error::InvalidInput("stage lengths must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidInput("lr must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be positive".into()));
        }
        self.loss_config().validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            resolution: self.resolution,
            base_channels: self.base_channels,
            residual_blocks: self.residual_blocks,
            disc_channels: self.disc_channels,
            classifier: ClassifierConfig::default(),
            sap: SapConfig {
                kernel_sizes: self.sap_kernel_sizes.clone(),
                branch_channels: self.sap_branch_channels,
                ..SapConfig::default()
            },
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            mu: self.mu,
            ..LossConfig::default()
        }
    }

    pub fn deform_d(&self) -> u32 {
        self.deform_d
            .unwrap_or_else(|| DeformConfig::scaled(self.resolution, 0).d)
    }

    pub fn stage_len(&self, stage: u8) -> usize {
        match stage {
            1 => self.stage1_steps,
            2 => self.stage2_steps,
            _ => self.stage3_steps,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps + self.stage3_steps
    }

    /// Constant for the first half of the stage, then linear to zero.
    pub fn lr_at(&self, stage: u8, step: usize) -> f64 {
        let len = self.stage_len(stage);
        let half = len / 2;
        if step < half {
            self.lr
        } else {
            self.lr * (len - step) as f64 / (len - half) as f64
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// Parameter groups updated in each stage.
pub fn trainable_groups(stage: u8) -> Vec<ParamGroup> {
    use ParamGroup::*;
    let g: &[ParamGroup] = match stage {
        1 => &[EncoderA, SharedResidual, SharedDecoder, D1, D2, D3],
        2 => &[Sap, EncoderM, D1, D2, D3],
        _ => &[Sap, EncoderA, EncoderM, SharedResidual, SharedDecoder, D1, D2, D3],
    };
    g.to_vec()
}

fn generator_groups(stage: u8) -> Vec<ParamGroup> {
    trainable_groups(stage)
        .into_iter()
        .filter(|g| !ParamGroup::DISCRIMINATOR.contains(g))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainItem {
    pub edge_aligned: Sketch,
    pub strokes: StrokeSet,
    pub photo: PhotoImage,
}

impl TrainItem {
    pub fn new(mask: &SemanticMask, photo: PhotoImage) -> Result<Self> {
        if (mask.height(), mask.width()) != (photo.height(), photo.width()) {
            return Err(Error::Shape("mask and photo sizes differ".into()));
        }
        let edge_aligned = extract_boundaries(mask);
        let strokes = vectorize(&edge_aligned, DEFAULT_SIMPLIFY_TOL);
        Ok(Self {
            edge_aligned,
            strokes,
            photo,
        })
    }

    pub fn deformed(&self, d: u32, seed: u64) -> Sketch {
        rasterize(&deform(&self.strokes, &DeformConfig { d, seed }))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<TrainItem>,
    pub val: Vec<TrainItem>,
}

impl TrainData {
    pub fn from_pairs(train: Vec<(SemanticMask, PhotoImage)>, val: Vec<(SemanticMask, PhotoImage)>) -> Result<Self> {
        let conv = |v: Vec<(SemanticMask, PhotoImage)>| {
            v.into_iter()
                .map(|(m, p)| TrainItem::new(&m, p))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            train: conv(train)?,
            val: conv(val)?,
        })
    }

    /// Loads the train and val splits at `resolution`.
    pub fn from_manifest(manifest: &DatasetManifest, resolution: usize) -> Result<Self> {
        let load = |split| {
            manifest
                .split(split)
                .map(|e| load_pair(&e.mask_path, &e.image_path, resolution, CELEBAMASK_NUM_CLASSES))
                .collect::<Result<Vec<_>>>()
        };
        Self::from_pairs(load(Split::Train)?, load(Split::Val)?)
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub edge_aligned: Tensor,
    pub deformed: Tensor,
    pub photo: Tensor,
}

impl Batch {
    pub fn from_items(items: &[&TrainItem], deformed: &[Sketch], dtype: DType) -> Result<Self> {
        let edges: Vec<&Sketch> = items.iter().map(|i| &i.edge_aligned).collect();
        let photos: Vec<&PhotoImage> = items.iter().map(|i| &i.photo).collect();
        let deformed: Vec<&Sketch> = deformed.iter().collect();
        Ok(Self {
            edge_aligned: sketches_to_tensor(&edges, dtype)?,
            deformed: sketches_to_tensor(&deformed, dtype)?,
            photo: photos_to_tensor(&photos, dtype)?,
        })
    }
}

/// Mean held-out `rec_m` with deformations fixed by `seed`.
pub fn validation_rec_m(model: &FacePencil, items: &[TrainItem], d: u32, seed: u64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Insufficient("no validation items".into()));
    }
    let mut total = 0.0;
    for (c, chunk) in items.chunks(16).enumerate() {
        let refs: Vec<&TrainItem> = chunk.iter().collect();
        let deformed: Vec<Sketch> = chunk
            .iter()
            .enumerate()
            .map(|(j, it)| it.deformed(d, derive_seed2(seed, c as u64, j as u64)))
            .collect();
        let batch = Batch::from_items(&refs, &deformed, model.store.dtype())?;
        let (out, _) = model.forward_main(&batch.deformed)?;
        total += scalar(&reconstruction_loss(&out.image, &batch.photo)?)? * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub stage: u8,
    /// Step within the stage, 1-based.
    pub step: usize,
    pub global_step: usize,
    pub lr: f64,
    pub report: LossReport,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        let mut line = format!(
            "step={} stage={} stage_step={} lr={:.6e}",
            self.global_step, self.stage, self.step, self.lr
        );
        for (name, v) in LossReport::TERMS.iter().zip(self.report.values()) {
            line.push_str(&format!(" {name}={v:.6}"));
        }
        line
    }
}

#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: FacePencil,
    data: TrainData,
    stage: u8,
    /// Steps completed in the current stage.
    step: usize,
    opt_g: Adam,
    opt_d: Adam,
    loss_cfg: LossConfig,
}

impl Trainer {
    /// Fresh run. `classifier` holds pretrained classifier tensors; without
    /// it the classifier keeps its random initialization.
    pub fn new(cfg: TrainConfig, data: TrainData, classifier: Option<&BTreeMap<String, Tensor>>) -> Result<Self> {
        Self::with_dtype(cfg, data, classifier, DType::F32)
    }

    pub fn with_dtype(
        cfg: TrainConfig,
        data: TrainData,
        classifier: Option<&BTreeMap<String, Tensor>>,
        dtype: DType,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.train.len() < cfg.batch_size {
            return Err(Error::Insufficient(format!(
                "{} training items for batch size {}",
                data.train.len(),
                cfg.batch_size
            )));
        }
        if let Some(item) = data.train.iter().chain(&data.val).find(|i| i.photo.height() != cfg.resolution) {
            return Err(Error::Shape(format!(
                "item {} is {}px, config resolution is {}",
                item.photo.source_id(),
                item.photo.height(),
                cfg.resolution
            )));
        }
        let model = FacePencil::new(&cfg.model_config(), dtype, derive_seed(cfg.seed, 1))?;
        if let Some(values) = classifier {
            load_groups(&model.store, values, &[ParamGroup::Classifier])?;
        }
        let (opt_g, opt_d) = Self::optimizers(&cfg, &model, 1);
        Ok(Self {
            loss_cfg: cfg.loss_config(),
            cfg,
            model,
            data,
            stage: 1,
            step: 0,
            opt_g,
            opt_d,
        })
    }

    fn optimizers(cfg: &TrainConfig, model: &FacePencil, stage: u8) -> (Adam, Adam) {
        (
            Adam::new(model.store.vars_in(&generator_groups(stage)), cfg.adam()),
            Adam::new(model.store.vars_in(&ParamGroup::DISCRIMINATOR), cfg.adam()),
        )
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn step_in_stage(&self) -> usize {
        self.step
    }

    pub fn global_step(&self) -> usize {
        (1..self.stage).map(|s| self.cfg.stage_len(s)).sum::<usize>() + self.step
    }

    pub fn is_finished(&self) -> bool {
        self.stage == 3 && self.step >= self.cfg.stage3_steps
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    /// Batch for a global step; deterministic in `(seed, global_step)`.
    pub fn batch_for(&self, global_step: usize) -> Result<Batch> {
        let n = self.data.train.len();
        let mut rng = rng_for(self.cfg.seed, derive_seed(0xBA7C, global_step as u64));
        let idx = sample(&mut rng, n, self.cfg.batch_size).into_vec();
        let items: Vec<&TrainItem> = idx.iter().map(|&i| &self.data.train[i]).collect();
        let d = self.cfg.deform_d();
        let deformed: Vec<Sketch> = items
            .iter()
            .enumerate()
            .map(|(j, it)| it.deformed(d, derive_seed2(self.cfg.seed, global_step as u64, j as u64)))
            .collect();
        Batch::from_items(&items, &deformed, self.model.store.dtype())
    }

    fn enter_next_stage(&mut self) -> Result<()> {
        self.stage += 1;
        self.step = 0;
        if self.stage == 2 && self.cfg.reinit_d_stage2 {
            for g in ParamGroup::DISCRIMINATOR {
                self.model.store.reinit_group(g, derive_seed(self.cfg.seed, 2))?;
            }
        }
        let (g, d) = Self::optimizers(&self.cfg, &self.model, self.stage);
        self.opt_g = g;
        self.opt_d = d;
        Ok(())
    }

    fn check_stage(&self, expected: u8) -> Result<()> {
        if self.stage != expected || self.is_finished() {
            return Err(Error::WrongStage {
                expected,
                actual: self.stage,
            });
        }
        Ok(())
    }

    pub fn stage1_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        self.check_stage(1)?;
        self.step_on(batch)
    }

    pub fn stage2_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        self.check_stage(2)?;
        self.step_on(batch)
    }

    pub fn stage3_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        self.check_stage(3)?;
        self.step_on(batch)
    }

    /// One step of the current stage on its scheduled batch, advancing to
    /// the next stage first when the current one is complete.
    pub fn step(&mut self) -> Result<StepRecord> {
        if self.is_finished() {
            return Err(Error::InvalidInput("training already finished".into()));
        }
        if self.step >= self.cfg.stage_len(self.stage) {
            self.enter_next_stage()?;
        }
        let batch = self.batch_for(self.global_step())?;
        self.step_on(&batch)
    }

    fn non_finite(&self, term: &str) -> Error {
        Error::NonFinite {
            stage: self.stage,
            step: self.step + 1,
            term: term.to_string(),
        }
    }

    fn step_on(&mut self, batch: &Batch) -> Result<StepRecord> {
        let stage = self.stage;
        let lr = self.cfg.lr_at(stage, self.step);
        let m = &self.model;
        let use_a = stage != 2;
        let use_m = stage != 1;

        // Discriminator update on detached fakes.
        let mut real_logits = Vec::new();
        let mut fake_logits = Vec::new();
        if use_a {
            let fake = m.generators.forward_a(&batch.edge_aligned)?.image.detach();
            real_logits.extend(logits_of(&m.discriminator.forward(&batch.edge_aligned, &batch.photo)?));
            fake_logits.extend(logits_of(&m.discriminator.forward(&batch.edge_aligned, &fake)?));
        }
        let mut d_loss = discriminator_adversarial_loss(&real_logits, &fake_logits).ok();
        if use_m {
            let fake = m.forward_main(&batch.deformed)?.0.image.detach();
            let real = logits_of(&m.discriminator.forward(&batch.deformed, &batch.photo)?);
            let fake = logits_of(&m.discriminator.forward(&batch.deformed, &fake)?);
            let l = discriminator_adversarial_loss(&real, &fake)?;
            d_loss = Some(match d_loss {
                Some(a) => (a + l)?,
                None => l,
            });
        }
        let d_loss = d_loss.expect("at least one path is active");
        let disc = scalar(&d_loss)?;
        if !disc.is_finite() {
            return Err(self.non_finite("disc"));
        }
        self.opt_d.step(&d_loss.backward()?, lr)?;

        // Generator update.
        let mut terms = LossTerms::default();
        let mut taps_a = None;
        if use_a || use_m {
            let out_a = m.generators.forward_a(&batch.edge_aligned)?;
            if use_a {
                let fake = m.discriminator.forward(&batch.edge_aligned, &out_a.image)?;
                let real = m.discriminator.forward(&batch.edge_aligned, &batch.photo)?;
                terms.rec_a = Some(reconstruction_loss(&out_a.image, &batch.photo)?);
                terms.adv_a = Some(generator_adversarial_loss(&logits_of(&fake))?);
                terms.dfm_a = Some(dfm_loss(&features_of(&fake), &features_of(&real), &self.loss_cfg)?);
            }
            taps_a = Some(out_a.taps);
        }
        if use_m {
            let (out_m, _) = m.forward_main(&batch.deformed)?;
            let fake = m.discriminator.forward(&batch.deformed, &out_m.image)?;
            let real = m.discriminator.forward(&batch.deformed, &batch.photo)?;
            terms.rec_m = Some(reconstruction_loss(&out_m.image, &batch.photo)?);
            terms.adv_m = Some(generator_adversarial_loss(&logits_of(&fake))?);
            terms.dfm_m = Some(dfm_loss(&features_of(&fake), &features_of(&real), &self.loss_cfg)?);
            let taps_a = taps_a.as_ref().expect("G_a taps computed");
            terms.gfm = Some(gfm_loss(taps_a, &out_m.taps, &self.loss_cfg)?);
        }
        let (total, mut report) = total_objective(&terms, &self.loss_cfg)?;
        report.disc = disc;
        if let Some(term) = report.first_non_finite() {
            return Err(self.non_finite(term));
        }
        self.opt_g.step(&total.backward()?, lr)?;

        self.step += 1;
        Ok(StepRecord {
            stage,
            step: self.step,
            global_step: self.global_step(),
            lr,
            report,
        })
    }

    pub fn checkpoint(&self, note: Option<String>) -> Result<Checkpoint> {
        let mut meta = CheckpointMeta::new(self.model.cfg.clone());
        meta.stage = self.stage;
        meta.step = self.step;
        meta.g_opt_steps = self.opt_g.steps();
        meta.d_opt_steps = self.opt_d.steps();
        meta.train_config =
            Some(serde_json::to_value(&self.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?);
        meta.note = note;
        let mut ck = Checkpoint::from_store(meta, &self.model.store, &ParamGroup::ALL);
        ck.insert_prefixed("opt_g.", self.opt_g.state());
        ck.insert_prefixed("opt_d.", self.opt_d.state());
        Ok(ck)
    }

    /// Restores a run saved by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, data: TrainData) -> Result<Self> {
        Self::resume_with_dtype(ck, data, DType::F32)
    }

    pub fn resume_with_dtype(ck: &Checkpoint, data: TrainData, dtype: DType) -> Result<Self> {
        let cfg: TrainConfig = ck
            .meta
            .train_config
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training state".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Checkpoint(e.to_string())))?;
        if !(1..=3).contains(&ck.meta.stage) {
            return Err(Error::Checkpoint(format!("invalid stage {}", ck.meta.stage)));
        }
        let mut t = Self::with_dtype(cfg, data, None, dtype)?;
        t.model.store.load_values(&ck.params())?;
        t.stage = ck.meta.stage;
        t.step = ck.meta.step;
        let (mut g, mut d) = Self::optimizers(&t.cfg, &t.model, t.stage);
        g.load_state(ck.meta.g_opt_steps, &ck.prefixed("opt_g."))?;
        d.load_state(ck.meta.d_opt_steps, &ck.prefixed("opt_d."))?;
        t.opt_g = g;
        t.opt_d = d;
        Ok(t)
    }

    pub fn validation_rec_m(&self) -> Result<f64> {
        validation_rec_m(&self.model, &self.data.val, self.cfg.deform_d(), derive_seed(self.cfg.seed, 0xA11D))
    }
}

/// Outcome of [`run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub records: Vec<StepRecord>,
    /// Held-out `rec_m` at the end of stages 2 and 3 (when a val split exists).
    pub val_rec_m_stage2: Option<f64>,
    pub val_rec_m_stage3: Option<f64>,
    pub final_checkpoint: PathBuf,
}

/// Runs (or continues) a trainer to the end, writing `metrics.log`,
/// `stage{1,2,3}.safetensors`, periodic `latest.safetensors`, and on a
/// non-finite loss `diagnostic.safetensors` before returning the error.
pub fn run(trainer: &mut Trainer, out_dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("metrics.log");
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let mut records = Vec::with_capacity(trainer.cfg.total_steps());
    let (mut val2, mut val3) = (None, None);
    while !trainer.is_finished() {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                let ck = trainer.checkpoint(Some(e.to_string()))?;
                ck.save(&out_dir.join("diagnostic.safetensors"))?;
                log::error!("{e}; diagnostic checkpoint written");
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(log, "{}", rec.log_line()).map_err(|e| Error::io(&log_path, e))?;
        if rec.global_step % 10 == 0 {
            log::info!("{}", rec.log_line());
        }
        let every = trainer.cfg.checkpoint_every;
        if every > 0 && rec.global_step % every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer.checkpoint(None)?.save(&out_dir.join("latest.safetensors"))?;
        }
        if rec.step == trainer.cfg.stage_len(rec.stage) {
            trainer
                .checkpoint(None)?
                .save(&out_dir.join(format!("stage{}.safetensors", rec.stage)))?;
            if !trainer.data().val.is_empty() && rec.stage >= 2 {
                let v = trainer.validation_rec_m()?;
                log::info!("stage {} held-out rec_m {v:.5}", rec.stage);
                if rec.stage == 2 {
                    val2 = Some(v);
                } else {
                    val3 = Some(v);
                }
            }
        }
        records.push(rec);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(RunSummary {
        records,
        val_rec_m_stage2: val2,
        val_rec_m_stage3: val3,
        final_checkpoint: out_dir.join("stage3.safetensors"),
    })
}

/// Writes just the classifier parameters.
pub fn save_classifier(store: &crate::nn::ParamStore, model: &ModelConfig, path: &Path) -> Result<()> {
    Checkpoint::from_store(CheckpointMeta::new(model.clone()), store, &[ParamGroup::Classifier]).save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_toy_face;
    use std::collections::BTreeSet;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            resolution: 64,
            stage1_steps: 2,
            stage2_steps: 2,
            stage3_steps: 2,
            batch_size: 2,
            base_channels: 4,
            residual_blocks: 4,
            disc_channels: 4,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    fn toy_data(n_train: u64, n_val: u64, res: usize) -> TrainData {
        let gen = |r: std::ops::Range<u64>| r.map(|s| generate_toy_face(s, res).unwrap()).collect();
        TrainData::from_pairs(gen(0..n_train), gen(1000..1000 + n_val)).unwrap()
    }

    #[test]
    fn config_defaults_and_toml() {
        let cfg = TrainConfig::default();
        assert_eq!((cfg.lr, cfg.beta1, cfg.beta2), (2e-4, 0.5, 0.999));
        assert_eq!((cfg.lambda, cfg.mu), (10.0, 10.0));
        assert_eq!(cfg.deform_d(), 3);
        let parsed = TrainConfig::from_toml("stage1_steps = 5\nbatch_size = 4\nlr = 1e-3\n").unwrap();
        assert_eq!((parsed.stage1_steps, parsed.batch_size, parsed.lr), (5, 4, 1e-3));
        assert!(TrainConfig::from_toml("stage1_steps = 0").is_err());
        assert!(TrainConfig::from_toml("lr = -1.0").is_err());
        assert!(TrainConfig::from_toml("unknown_key = 1").is_err());
    }

    #[test]
    fn lr_schedule_is_constant_then_linear() {
        let cfg = TrainConfig {
            stage1_steps: 10,
            ..Default::default()
        };
        let lrs: Vec<f64> = (0..10).map(|k| cfg.lr_at(1, k)).collect();
        assert!(lrs[..5].iter().all(|&l| l == cfg.lr));
        for w in lrs[5..].windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!((lrs[9] - cfg.lr / 5.0).abs() < 1e-15);
        assert!((cfg.lr_at(1, 10)).abs() < 1e-15);
    }

    #[test]
    fn trainable_sets() {
        use ParamGroup::*;
        assert!(!trainable_groups(1).contains(&Sap));
        assert!(!trainable_groups(2).contains(&SharedDecoder));
        for s in 1..=3 {
            assert!(!trainable_groups(s).contains(&Classifier));
        }
        assert!(!trainable_groups(3).contains(&Extractor));
        assert_eq!(trainable_groups(3).len(), 8);
    }

    #[test]
    fn each_stage_changes_exactly_its_trainable_set() {
        let mut t = Trainer::new(tiny_cfg(), toy_data(4, 0, 64), None).unwrap();
        for stage in 1..=3u8 {
            // Step once so the stage is entered, then check a second step.
            if stage > 1 {
                while t.stage() < stage {
                    t.step().unwrap();
                }
            }
            let batch = t.batch_for(t.global_step()).unwrap();
            let before = t.model.store.snapshot().unwrap();
            match stage {
                1 => t.stage1_step(&batch),
                2 => t.stage2_step(&batch),
                _ => t.stage3_step(&batch),
            }
            .unwrap();
            let changed: BTreeSet<String> = t.model.store.changed_since(&before).unwrap().into_iter().collect();
            let expected: BTreeSet<String> = t
                .model
                .store
                .vars_in(&trainable_groups(stage))
                .into_iter()
                .map(|(n, _)| n)
                .collect();
            assert_eq!(changed, expected, "stage {stage}");
        }
    }

    #[test]
    fn wrong_stage_is_rejected() {
        let mut t = Trainer::new(tiny_cfg(), toy_data(4, 0, 64), None).unwrap();
        let b = t.batch_for(0).unwrap();
        assert!(matches!(t.stage2_step(&b), Err(Error::WrongStage { expected: 2, actual: 1 })));
    }

    #[test]
    fn reports_mask_inactive_terms() {
        let mut t = Trainer::new(tiny_cfg(), toy_data(4, 0, 64), None).unwrap();
        let r1 = t.step().unwrap().report;
        assert_eq!((r1.rec_m, r1.gfm, r1.adv_m), (0.0, 0.0, 0.0));
        assert!(r1.rec_a > 0.0);
        t.step().unwrap();
        let r2 = t.step().unwrap().report;
        assert_eq!((r2.rec_a, r2.adv_a, r2.dfm_a), (0.0, 0.0, 0.0));
        assert!(r2.gfm > 0.0);
        t.step().unwrap();
        let r3 = t.step().unwrap().report;
        assert!(r3.values().iter().all(|v| v.is_finite() && *v != 0.0));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let cfg = TrainConfig {
            stage1_steps: 3,
            stage2_steps: 3,
            stage3_steps: 3,
            ..tiny_cfg()
        };
        let data = toy_data(6, 0, 64);
        let mut full = Trainer::new(cfg.clone(), data.clone(), None).unwrap();
        while !full.is_finished() {
            full.step().unwrap();
        }

        let mut part = Trainer::new(cfg, data.clone(), None).unwrap();
        for _ in 0..4 {
            part.step().unwrap();
        }
        let bytes = part.checkpoint(None).unwrap().to_bytes().unwrap();
        drop(part);
        let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), data).unwrap();
        assert_eq!((resumed.stage(), resumed.step_in_stage()), (2, 1));
        while !resumed.is_finished() {
            resumed.step().unwrap();
        }
        let a = full.model.store.snapshot().unwrap();
        assert!(resumed.model.store.changed_since(&a).unwrap().is_empty());
    }

    #[test]
    fn run_writes_log_lines_and_stage_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_cfg(), toy_data(4, 2, 64), None).unwrap();
        let summary = run(&mut t, dir.path()).unwrap();
        assert_eq!(summary.records.len(), 6);
        let log = std::fs::read_to_string(dir.path().join("metrics.log")).unwrap();
        assert_eq!(log.lines().count(), 6);
        assert!(log.lines().next().unwrap().starts_with("step=1 stage=1 "));
        for s in 1..=3 {
            assert!(dir.path().join(format!("stage{s}.safetensors")).exists());
        }
        assert!(summary.val_rec_m_stage2.is_some() && summary.val_rec_m_stage3.is_some());
        let ck = Checkpoint::load(&summary.final_checkpoint).unwrap();
        assert_eq!((ck.meta.stage, ck.meta.step), (3, 2));
    }

    #[test]
    fn non_finite_loss_leaves_a_diagnostic_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_cfg(), toy_data(4, 0, 64), None).unwrap();
        let (name, var) = t.model.store.vars_in(&[ParamGroup::SharedDecoder]).remove(0);
        var.set(&var.as_tensor().affine(0.0, f64::NAN).unwrap()).unwrap();
        let err = run(&mut t, dir.path()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { stage: 1, step: 1, .. }), "{err} ({name})");
        let ck = Checkpoint::load(&dir.path().join("diagnostic.safetensors")).unwrap();
        assert!(ck.meta.note.unwrap().contains("non-finite"));
    }

    #[test]
    fn batches_are_reproducible() {
        let t = Trainer::new(tiny_cfg(), toy_data(6, 0, 64), None).unwrap();
        let (a, b) = (t.batch_for(7).unwrap(), t.batch_for(7).unwrap());
        assert!(crate::nn::bitwise_equal(&a.deformed, &b.deformed).unwrap());
        let c = t.batch_for(8).unwrap();
        assert!(!crate::nn::bitwise_equal(&a.photo, &c.photo).unwrap()
            || !crate::nn::bitwise_equal(&a.deformed, &c.deformed).unwrap());
    }
}
