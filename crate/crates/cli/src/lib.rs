//! Command-line entry point: data preparation, classifier pretraining,
//! training, evaluation, one-shot inference, and serving.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use facepencil::checkpoint::Checkpoint;
use facepencil::data::{
    build_manifest, load_pair, DatasetManifest, ManifestSource, PhotoImage, SemanticMask, Split, SplitCounts,
    CELEBAMASK_NUM_CLASSES, DEFAULT_RESOLUTION,
};
use facepencil::evaluator::{deformation_sweep, ExtractorConfig, ToyAttributeExtractor, DEFAULT_IS_SPLITS};
use facepencil::networks::{FacePencil, ModelConfig};
use facepencil::sap::{pretrain_classifier, ClassifierConfig, ClassifierTrainConfig};
use facepencil::seed::derive_seed;
use facepencil::sketch::{
    decode_sketch_png, deform, encode_sketch_png, extract_boundaries, rasterize, read_strokes, vectorize,
    write_strokes, DeformConfig, Sketch, SketchKind, DEFAULT_SIMPLIFY_TOL,
};
use facepencil::trainer::{run as run_training, save_classifier, TrainConfig, TrainData, TrainItem, Trainer};
use facepencil::{Error, Result};
use facepencil_service::{encode_gray_png, encode_rgb_png, InferenceModel, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "facepencil", version, about = "Sketch-to-face synthesis with spatial attention pooling")]
pub struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Working resolution (multiple of 16, at least 64).
    #[arg(long, global = true, default_value_t = DEFAULT_RESOLUTION)]
    pub resolution: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a train/val/test manifest, rendering toy faces if asked.
    BuildManifest(BuildManifestArgs),
    /// Render edge-aligned and deformed sketches plus stroke lists.
    PrepareData(PrepareDataArgs),
    /// Train the distortion classifier on edge-aligned vs deformed sketches.
    PretrainClassifier(PretrainArgs),
    /// Run the three-stage schedule.
    Train(TrainArgs),
    /// IS and FID of the main generator over deformation levels.
    Evaluate(EvaluateArgs),
    /// Generate one face from a sketch PNG or stroke list.
    Infer(InferArgs),
    /// Serve /generate, /model and /health over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BuildManifestArgs {
    /// `toy`, or a directory of mask/photo pairs.
    #[arg(long, default_value = "toy")]
    pub source: String,
    /// Where toy faces are rendered (default: `toy/` next to the manifest).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 20)]
    pub val: usize,
    #[arg(long, default_value_t = 20)]
    pub test: usize,
    /// Manifest file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrepareDataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Deformation bound in pixels.
    #[arg(long, default_value_t = 11)]
    pub d: u32,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub d: u32,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    /// Classifier checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat TOML file of training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pretrained classifier checkpoint (random init when absent).
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps_per_stage: Option<usize>,
    /// Run directory for metrics.log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,11,30")]
    pub d_levels: Vec<u32>,
    /// Feature extractor checkpoint; a toy attribute extractor is trained
    /// from the seed when absent.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    /// Save the extractor used, for reuse across runs.
    #[arg(long)]
    pub save_extractor: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_IS_SPLITS)]
    pub splits: usize,
    /// JSON report to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sketch PNG, or a `.txt` stroke list.
    #[arg(long)]
    pub sketch: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one grayscale PNG per attention layer here.
    #[arg(long)]
    pub attention_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8750")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    #[arg(long, default_value_t = 4 << 20)]
    pub max_body_bytes: usize,
}

/// Parses `argv` and runs it. Usage errors exit 2 with clap's message;
/// failures print `error: <kind>: <message>` and return 1.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), single_line(&e.to_string()));
            1
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::BuildManifest(a) => cmd_build_manifest(cli, a),
        Command::PrepareData(a) => cmd_prepare_data(cli, a),
        Command::PretrainClassifier(a) => cmd_pretrain(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Infer(a) => cmd_infer(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_build_manifest(cli: &Cli, a: &BuildManifestArgs) -> Result<()> {
    let source = if a.source == "toy" {
        let dir = a.data_dir.clone().unwrap_or_else(|| {
            a.out.parent().unwrap_or(Path::new(".")).join("toy")
        });
        ManifestSource::Toy { out_dir: dir }
    } else {
        ManifestSource::Directory(PathBuf::from(&a.source))
    };
    let counts = SplitCounts {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    let manifest = build_manifest(&source, counts, cli.resolution, cli.seed)?;
    manifest.write(&a.out)?;
    println!("wrote {} entries to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn load_split(manifest: &DatasetManifest, split: Split, resolution: usize) -> Result<Vec<(SemanticMask, PhotoImage)>> {
    manifest
        .split(split)
        .map(|e| load_pair(&e.mask_path, &e.image_path, resolution, CELEBAMASK_NUM_CLASSES))
        .collect()
}

fn cmd_prepare_data(cli: &Cli, a: &PrepareDataArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    create_dir(&a.out)?;
    let mut n = 0;
    for (i, e) in manifest.entries.iter().enumerate() {
        let (mask, _) = load_pair(&e.mask_path, &e.image_path, cli.resolution, CELEBAMASK_NUM_CLASSES)?;
        let edge = extract_boundaries(&mask);
        let strokes = vectorize(&edge, DEFAULT_SIMPLIFY_TOL);
        let deformed = deform(
            &strokes,
            &DeformConfig {
                d: a.d,
                seed: derive_seed(cli.seed, i as u64),
            },
        );
        let dir = a.out.join(e.split.to_string());
        let id = e.source_id();
        write_file(&dir.join(format!("{id}_syn.png")), &encode_sketch_png(&edge)?)?;
        write_file(&dir.join(format!("{id}_dfm.png")), &encode_sketch_png(&rasterize(&deformed))?)?;
        write_strokes(&strokes, &dir.join(format!("{id}_syn.txt")))?;
        write_strokes(&deformed, &dir.join(format!("{id}_dfm.txt")))?;
        n += 1;
    }
    println!("prepared {n} sketch pairs in {}", a.out.display());
    Ok(())
}

fn cmd_pretrain(cli: &Cli, a: &PretrainArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let pairs = load_split(&manifest, Split::Train, cli.resolution)?;
    // Even-indexed faces give edge-aligned examples, odd ones deformed, so
    // no face appears in both classes.
    let mut edge = Vec::new();
    let mut deformed = Vec::new();
    for (i, (mask, _)) in pairs.iter().enumerate() {
        let sketch = extract_boundaries(mask);
        if i % 2 == 0 {
            edge.push(sketch);
        } else {
            let cfg = DeformConfig {
                d: a.d,
                seed: derive_seed(cli.seed, i as u64),
            };
            deformed.push(rasterize(&deform(&vectorize(&sketch, DEFAULT_SIMPLIFY_TOL), &cfg)));
        }
    }
    let model = ModelConfig {
        resolution: cli.resolution,
        ..ModelConfig::default()
    };
    let train_cfg = ClassifierTrainConfig {
        epochs: a.epochs,
        seed: cli.seed,
        ..ClassifierTrainConfig::default()
    };
    let out = pretrain_classifier(&edge, &deformed, &ClassifierConfig::default(), &train_cfg)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_classifier(&out.store, &model, &a.out)?;
    println!(
        "held-out accuracy {:.4} (train {:.4}); wrote {}",
        out.held_out_accuracy,
        out.train_accuracy,
        a.out.display()
    );
    Ok(())
}

/// Reads `--config` if given and applies flag overrides.
pub fn train_config(cli: &Cli, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    cfg.seed = cli.seed;
    cfg.resolution = cli.resolution;
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(s) = a.steps_per_stage {
        cfg.stage1_steps = s;
        cfg.stage2_steps = s;
        cfg.stage3_steps = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let mut trainer = if let Some(path) = &a.resume {
        let ck = Checkpoint::load(path)?;
        let data = TrainData::from_manifest(&manifest, ck.meta.model.resolution)?;
        Trainer::resume(&ck, data)?
    } else {
        let cfg = train_config(cli, a)?;
        let data = TrainData::from_manifest(&manifest, cfg.resolution)?;
        let classifier = a.classifier.as_deref().map(Checkpoint::load).transpose()?;
        Trainer::new(cfg, data, classifier.as_ref().map(|c| &c.tensors))?
    };
    let summary = run_training(&mut trainer, &a.out)?;
    println!("finished; final checkpoint {}", summary.final_checkpoint.display());
    if let (Some(s2), Some(s3)) = (summary.val_rec_m_stage2, summary.val_rec_m_stage3) {
        println!("held-out rec_m: after stage 2 {s2:.5}, after stage 3 {s3:.5}");
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = FacePencil::new(&ck.meta.model, candle_core::DType::F32, 0)?;
    facepencil::checkpoint::load_groups(&model.store, &ck.params(), &facepencil_service::SERVED_GROUPS)?;
    let resolution = ck.meta.model.resolution;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let items = load_split(&manifest, Split::Test, resolution)?
        .into_iter()
        .map(|(m, p)| TrainItem::new(&m, p))
        .collect::<Result<Vec<_>>>()?;
    let ex_cfg = ExtractorConfig {
        resolution,
        ..ExtractorConfig::default()
    };
    let extractor = match &a.extractor {
        Some(path) => ToyAttributeExtractor::load(path, ex_cfg)?,
        None => {
            let (ex, acc) = ToyAttributeExtractor::train(ex_cfg, 800, 15, cli.seed)?;
            log::info!("trained toy attribute extractor, accuracy {acc:.3}");
            ex
        }
    };
    if let Some(path) = &a.save_extractor {
        extractor.save(path)?;
    }
    let reports = deformation_sweep(&model, &items, &a.d_levels, &extractor, a.splits, cli.seed)?;
    let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::InvalidInput(e.to_string()))?;
    write_file(&a.out, json.as_bytes())?;
    for r in &reports {
        println!(
            "d={}: IS {:.4} ± {:.4}, FID {:.4} (n={})",
            r.d.unwrap_or(0),
            r.is_mean,
            r.is_std,
            r.fid,
            r.n_samples
        );
    }
    Ok(())
}

/// Reads a sketch PNG, or rasterizes a stroke list when the file ends in
/// `.txt`.
pub fn read_sketch(path: &Path, resolution: usize) -> Result<Sketch> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("txt")) {
        let strokes = read_strokes(path, Some((resolution, resolution)))?;
        return Ok(rasterize(&strokes).with_kind(SketchKind::HandDrawn));
    }
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    decode_sketch_png(&bytes, SketchKind::HandDrawn)
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let model = InferenceModel::load(&a.checkpoint)?;
    let sketch = read_sketch(&a.sketch, model.resolution())?;
    let out = model.generate(&sketch, a.attention_dir.is_some())?;
    write_file(&a.out, &encode_rgb_png(&out.image)?)?;
    if let (Some(dir), Some(layers)) = (&a.attention_dir, &out.attention) {
        for (i, layer) in layers.iter().enumerate() {
            write_file(&dir.join(format!("attention_{i}.png")), &encode_gray_png(layer, model.resolution())?)?;
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let model = Arc::new(InferenceModel::load(&a.checkpoint)?);
    let cfg = ServiceConfig {
        max_body_bytes: a.max_body_bytes,
        max_in_flight: a.max_in_flight,
    };
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
        path: PathBuf::from("<runtime>"),
        source: e,
    })?;
    rt.block_on(facepencil_service::serve(model, a.bind, cfg))
        .map_err(|e| Error::Io {
            path: PathBuf::from(a.bind.to_string()),
            source: e,
        })
}
