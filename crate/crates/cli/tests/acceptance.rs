//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed.
//! Positional arguments select criteria by substring, e.g.
//! `cargo test --test acceptance -- metric`.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::sync::Arc;
use std::time::Instant;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use candle_core::{DType, Device, Tensor, Var};
use facepencil::checkpoint::{Checkpoint, CheckpointMeta};
use facepencil::data::generate_toy_face;
use facepencil::evaluator::{fid_from_features, inception_score};
use facepencil::gradcheck::check_gradients;
use facepencil::losses::{
    dfm_loss, discriminator_adversarial_loss, features_of, generator_adversarial_loss, gfm_loss, reconstruction_loss,
    total_objective, LossConfig, LossTerms,
};
use facepencil::networks::{FacePencil, ModelConfig, MultiScaleDiscriminator};
use facepencil::nn::{randn_seeded, scalar, sketches_to_tensor, Conv2d, ParamGroup, ParamStore, WeightInit};
use facepencil::sap::{pretrain_classifier, ClassifierConfig, ClassifierTrainConfig};
use facepencil::seed::{derive_seed, rng_for};
use facepencil::sketch::{deform_traced, encode_sketch_png, extract_boundaries, rasterize, vectorize, DeformConfig, Sketch, SketchKind, DEFAULT_SIMPLIFY_TOL};
use facepencil::trainer::{run, trainable_groups, TrainConfig, TrainData, Trainer};
use facepencil_service::{router, GenerateResponse, InferenceModel, ServiceConfig};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use tower::ServiceExt;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

struct Context {
    /// Final checkpoint of the end-to-end run, when it ran.
    trained_checkpoint: Option<Vec<u8>>,
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn(&mut Context) -> Outcome); 9] = [
        ("sap-normalization", sap_normalization),
        ("deformation-bound-and-monotonicity", deformation),
        ("loss-oracles", loss_oracles),
        ("gradient-checks", gradient_checks),
        ("stage-freeze", stage_freeze),
        ("classifier-pretraining", classifier_pretraining),
        ("toy-end-to-end", toy_end_to_end),
        ("metric-sanity", metric_sanity),
        ("service-contract", service_contract),
    ];
    let mut ctx = Context {
        trained_checkpoint: None,
    };
    let mut failed = Vec::new();
    let mut out = std::io::stdout();
    for (name, f) in criteria {
        if !filters.is_empty() && !filters.iter().any(|flt| name.contains(flt.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match f(&mut ctx) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let _ = writeln!(
            out,
            "{} {name} ({:.1}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        let _ = out.flush();
        if !pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        let _ = writeln!(out, "acceptance: {} failed: {}", failed.len(), failed.join(", "));
        std::process::exit(1);
    }
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        resolution: 64,
        base_channels: 4,
        residual_blocks: 4,
        disc_channels: 4,
        ..Default::default()
    }
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Max |Σ_i A_i - 1| over 1000 sketches: toy-face sketches at several
/// deformation levels plus random stroke noise.
fn sap_normalization(_: &mut Context) -> Outcome {
    let model = FacePencil::new(&ModelConfig::default(), DType::F32, 11)?;
    let mut worst = 0f64;
    let mut rng = rng_for(5, 0);
    for chunk in 0..20 {
        let mut batch = Vec::with_capacity(50);
        for j in 0..50u64 {
            let i = chunk * 50 + j;
            let sketch = if i % 2 == 0 {
                let (mask, _) = generate_toy_face(i, 64)?;
                let edge = extract_boundaries(&mask);
                let d = [0, 3, 11, 30][(i / 2 % 4) as usize];
                let cfg = DeformConfig { d, seed: i };
                rasterize(&deform_traced(&vectorize(&edge, DEFAULT_SIMPLIFY_TOL), &cfg).0)
            } else {
                let density: f64 = rng.gen_range(0.0..0.5);
                let pixels = (0..64 * 64).map(|_| u8::from(rng.gen_bool(density))).collect();
                Sketch::from_pixels(pixels, 64, 64, SketchKind::HandDrawn)?
            };
            batch.push(sketch);
        }
        let refs: Vec<&Sketch> = batch.iter().collect();
        let out = model.sap_forward(&sketches_to_tensor(&refs, DType::F32)?)?;
        let sums = flat(&out.attention.sum(1)?);
        worst = sums.iter().fold(worst, |w, s| w.max((s - 1.0).abs()));
    }
    Ok((worst < 1e-5, format!("max |sum - 1| = {worst:.3e} over 1000 sketches (< 1e-5)")))
}

/// Offsets within [-d, d]² and mean symmetric difference non-decreasing in d.
fn deformation(_: &mut Context) -> Outcome {
    let levels = [0u32, 5, 11, 30];
    let bases: Vec<_> = (0..100u64)
        .map(|s| {
            let (mask, _) = generate_toy_face(1000 + s, 64)?;
            Ok(vectorize(&extract_boundaries(&mask), DEFAULT_SIMPLIFY_TOL))
        })
        .collect::<facepencil::Result<_>>()?;
    let mut means = Vec::new();
    let mut bound_ok = true;
    for &d in &levels {
        let mut total = 0.0;
        for (s, strokes) in bases.iter().enumerate() {
            let (moved, offsets) = deform_traced(strokes, &DeformConfig { d, seed: derive_seed(d as u64, s as u64) });
            bound_ok &= offsets
                .iter()
                .flatten()
                .all(|&(dx, dy)| dx.unsigned_abs() <= d && dy.unsigned_abs() <= d);
            total += rasterize(strokes).symmetric_difference(&rasterize(&moved));
        }
        means.push(total / bases.len() as f64);
    }
    let monotone = means.windows(2).all(|w| w[0] <= w[1]);
    Ok((
        bound_ok && monotone,
        format!("bound held: {bound_ok}; mean symmetric difference over d={levels:?}: {means:.4?}"),
    ))
}

fn log_sigmoid(x: f64) -> f64 {
    (1.0 / (1.0 + (-x).exp())).ln()
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let (a, b) = (flat(a), flat(b));
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Every loss against direct summation, plus the weighted total.
fn loss_oracles(_: &mut Context) -> Outcome {
    let cfg = LossConfig::default();
    let r = |shape: &[usize], seed: u64| randn_seeded(shape, seed, DType::F64);
    let mut worst = 0f64;
    let mut note = |got: f64, want: f64| worst = worst.max((got - want).abs());

    let (g, x) = (r(&[2, 3, 8, 8], 1)?, r(&[2, 3, 8, 8], 2)?);
    note(scalar(&reconstruction_loss(&g, &x)?)?, mean_abs_diff(&g, &x));

    let real: Vec<Tensor> = (0..3).map(|i| r(&[2, 1, 4 >> i, 4 >> i], 10 + i)).collect::<Result<_, _>>()?;
    let fake: Vec<Tensor> = (0..3).map(|i| r(&[2, 1, 4 >> i, 4 >> i], 20 + i)).collect::<Result<_, _>>()?;
    let mut d_oracle = 0.0;
    let mut g_oracle = 0.0;
    for i in 0..3 {
        let (rv, fv) = (flat(&real[i]), flat(&fake[i]));
        d_oracle -= rv.iter().map(|&v| log_sigmoid(v)).sum::<f64>() / rv.len() as f64;
        d_oracle -= fv.iter().map(|&v| log_sigmoid(-v)).sum::<f64>() / fv.len() as f64;
        g_oracle -= fv.iter().map(|&v| log_sigmoid(v)).sum::<f64>() / fv.len() as f64;
    }
    note(scalar(&discriminator_adversarial_loss(&real, &fake)?)?, d_oracle / 3.0);
    note(scalar(&generator_adversarial_loss(&fake)?)?, g_oracle / 3.0);

    let feats = |seed: u64| -> Vec<Vec<Tensor>> {
        (0..3u64)
            .map(|i| (0..4u64).map(|q| r(&[2, 2 + q as usize, 3, 3], seed + 10 * i + q).unwrap()).collect())
            .collect()
    };
    let (fa, fb) = (feats(100), feats(200));
    let mut dfm = 0.0;
    for i in 0..3 {
        for q in 0..4 {
            dfm += mean_abs_diff(&fa[i][q], &fb[i][q]);
        }
    }
    note(scalar(&dfm_loss(&fa, &fb, &cfg)?)?, dfm / 12.0);

    let taps = |seed: u64| -> Vec<Tensor> { (0..9).map(|t| r(&[2, 4, 3, 3], seed + t).unwrap()).collect() };
    let (ta, tm) = (taps(300), taps(400));
    let gfm: f64 = (0..4).map(|t| mean_abs_diff(&ta[t], &tm[t])).sum::<f64>() / 4.0;
    note(scalar(&gfm_loss(&ta, &tm, &cfg)?)?, gfm);

    let vals: Vec<f64> = flat(&r(&[7], 500)?).iter().map(|v| v.abs()).collect();
    let t = |i: usize| Some(Tensor::new(vals[i], &Device::Cpu).unwrap());
    let terms = LossTerms {
        rec_a: t(0),
        rec_m: t(1),
        adv_a: t(2),
        adv_m: t(3),
        dfm_a: t(4),
        dfm_m: t(5),
        gfm: t(6),
    };
    let (total, _) = total_objective(&terms, &cfg)?;
    let composed = vals[0] + vals[1] + vals[2] + vals[3] + 10.0 * (vals[4] + vals[5]) + 10.0 * vals[6];
    let composition_err = (scalar(&total)? - composed).abs();
    Ok((
        worst < 1e-6 && composition_err < 1e-6,
        format!("max term error {worst:.2e}, composition error {composition_err:.2e} (< 1e-6)"),
    ))
}

/// f64 finite differences through small conv networks, plus the two
/// detachment contracts on the full model.
fn gradient_checks(_: &mut Context) -> Outcome {
    let mut store = ParamStore::new(DType::F64);
    let (gen, disc) = {
        let mut b = store.builder(ParamGroup::SharedDecoder);
        let gen = Conv2d::new(&mut b.pp("g"), 1, 3, 3, 1, 1, true, WeightInit::Gan)?;
        let mut b = store.builder(ParamGroup::D1);
        let disc = Conv2d::new(&mut b.pp("d"), 4, 2, 3, 2, 1, true, WeightInit::Gan)?;
        (gen, disc)
    };
    store.reinit_all(3)?;
    let sketch = randn_seeded((1, 1, 6, 6), 1, DType::F64)?;
    let real = randn_seeded((1, 3, 6, 6), 2, DType::F64)?.tanh()?;
    let fake = || -> facepencil::Result<Tensor> { Ok(gen.forward(&sketch)?.tanh()?) };
    let feats = |img: &Tensor| -> facepencil::Result<(Tensor, Tensor)> {
        let f1 = disc.forward(&Tensor::cat(&[&sketch, img], 1)?)?;
        let logit = f1.tanh()?.mean_keepdim(1)?;
        Ok((f1, logit))
    };
    let cfg = LossConfig {
        dfm_layers: vec![0, 1],
        gfm_taps: vec![0],
        ..Default::default()
    };
    let all: Vec<Var> = store.all_vars().into_iter().map(|(_, v)| v).collect();
    let gen_only: Vec<Var> = store.vars_in(&[ParamGroup::SharedDecoder]).into_iter().map(|(_, v)| v).collect();
    // The real-side features are detached, so the DFM gradient is checked
    // against the generator parameters only.
    type Check<'a> = (&'a str, &'a [Var], Box<dyn Fn() -> facepencil::Result<Tensor> + 'a>);
    let checks: Vec<Check> = vec![
        ("rec", &all, Box::new(|| reconstruction_loss(&fake()?, &real))),
        (
            "adv_d",
            &all,
            Box::new(|| {
                let (_, lr) = feats(&real)?;
                let (_, lf) = feats(&fake()?)?;
                discriminator_adversarial_loss(&[lr.clone(), lr.clone(), lr], &[lf.clone(), lf.clone(), lf])
            }),
        ),
        (
            "adv_g",
            &all,
            Box::new(|| {
                let (_, lf) = feats(&fake()?)?;
                generator_adversarial_loss(&[lf.clone(), lf.clone(), lf])
            }),
        ),
        (
            "dfm",
            &gen_only,
            Box::new(|| {
                let (fr, lr) = feats(&real)?;
                let (ff, lf) = feats(&fake()?)?;
                dfm_loss(&vec![vec![ff, lf]; 3], &vec![vec![fr, lr]; 3], &cfg)
            }),
        ),
        (
            "gfm",
            &all,
            Box::new(|| {
                let guide = (&sketch * 0.5)?.tanh()?;
                gfm_loss(&[guide], &[gen.forward(&sketch)?.mean_keepdim(1)?], &cfg)
            }),
        ),
    ];
    let mut worst = 0f64;
    let mut detail = Vec::new();
    for (name, vars, f) in checks {
        let r = check_gradients(vars, f, 1e-6, 1e-8)?;
        worst = worst.max(r.max_rel_error);
        detail.push(format!("{name} {:.1e}", r.max_rel_error));
    }

    // Detachment on the full model in f64.
    let model = FacePencil::new(&toy_model_config(), DType::F64, 4)?;
    let (mask, photo) = generate_toy_face(7, 64)?;
    let edge = extract_boundaries(&mask);
    let dfm_sketch = rasterize(&deform_traced(&vectorize(&edge, DEFAULT_SIMPLIFY_TOL), &DeformConfig { d: 3, seed: 1 }).0);
    let s_syn = sketches_to_tensor(&[&edge], DType::F64)?;
    let s_dfm = sketches_to_tensor(&[&dfm_sketch], DType::F64)?;
    let ga = model.generators.forward_a(&s_syn)?;
    let (gm, _) = model.forward_main(&s_dfm)?;
    let grads = gfm_loss(&ga.taps, &gm.taps, &LossConfig::default())?.backward()?;
    let ga_zero = model.store.vars_in(&[ParamGroup::EncoderA]).iter().all(|(_, v)| match grads.get(v) {
        None => true,
        Some(g) => flat(g).iter().all(|&x| x == 0.0),
    });
    let gm_nonzero = model
        .store
        .vars_in(&[ParamGroup::EncoderM])
        .iter()
        .any(|(_, v)| grads.get(v).is_some_and(|g| flat(g).iter().any(|&x| x != 0.0)));

    let real_img = Var::from_tensor(&facepencil::nn::photos_to_tensor(&[&photo], DType::F64)?)?;
    let disc: &MultiScaleDiscriminator = &model.discriminator;
    let real_out = disc.forward(&s_dfm, real_img.as_tensor())?;
    let fake_out = disc.forward(&s_dfm, &gm.image)?;
    let grads = dfm_loss(&features_of(&fake_out), &features_of(&real_out), &LossConfig::default())?.backward()?;
    let real_zero = grads.get(&real_img).is_none_or(|g| flat(g).iter().all(|&x| x == 0.0));

    Ok((
        worst < 1e-3 && ga_zero && gm_nonzero && real_zero,
        format!(
            "max rel error {worst:.2e} < 1e-3 [{}]; gfm grad on G_a zero: {ga_zero} (G_m nonzero: {gm_nonzero}); dfm grad on real zero: {real_zero}",
            detail.join(", ")
        ),
    ))
}

fn toy_pairs(seeds: std::ops::Range<u64>) -> Vec<(facepencil::data::SemanticMask, facepencil::data::PhotoImage)> {
    seeds.map(|s| generate_toy_face(s, 64).unwrap()).collect()
}

/// One step per stage changes exactly the stage's trainable parameters.
fn stage_freeze(_: &mut Context) -> Outcome {
    let cfg = TrainConfig {
        batch_size: 2,
        stage1_steps: 3,
        stage2_steps: 3,
        stage3_steps: 3,
        base_channels: 4,
        residual_blocks: 4,
        disc_channels: 4,
        checkpoint_every: 0,
        ..Default::default()
    };
    let data = TrainData::from_pairs(toy_pairs(0..6), toy_pairs(100..102))?;
    let mut trainer = Trainer::new(cfg, data, None)?;
    let mut detail = Vec::new();
    let mut pass = true;
    for stage in 1..=3u8 {
        // Entering a stage reinitializes some groups, so the checked step is
        // one taken inside the stage.
        while trainer.stage() < stage {
            trainer.step()?;
        }
        let batch = trainer.batch_for(trainer.global_step())?;
        let before = trainer.model.store.snapshot()?;
        match stage {
            1 => trainer.stage1_step(&batch)?,
            2 => trainer.stage2_step(&batch)?,
            _ => trainer.stage3_step(&batch)?,
        };
        let changed: BTreeSet<String> = trainer.model.store.changed_since(&before)?.into_iter().collect();
        let declared: BTreeSet<String> = trainer
            .model
            .store
            .vars_in(&trainable_groups(stage))
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let ok = changed == declared;
        pass &= ok;
        detail.push(format!(
            "stage {stage}: {} changed / {} declared{}",
            changed.len(),
            declared.len(),
            if ok { "" } else { " MISMATCH" }
        ));
    }
    Ok((pass, detail.join("; ")))
}

/// 200 train / 40 held-out sketches per class at d = 11, 20 epochs.
fn classifier_pretraining(_: &mut Context) -> Outcome {
    let sketches = |seeds: std::ops::Range<u64>, d: Option<u32>| -> facepencil::Result<Vec<Sketch>> {
        seeds
            .map(|s| {
                let (mask, _) = generate_toy_face(s, 64)?;
                let edge = extract_boundaries(&mask);
                Ok(match d {
                    None => edge,
                    Some(d) => {
                        let cfg = DeformConfig { d, seed: derive_seed(77, s) };
                        rasterize(&deform_traced(&vectorize(&edge, DEFAULT_SIMPLIFY_TOL), &cfg).0)
                    }
                })
            })
            .collect()
    };
    let edge = sketches(5000..5240, None)?;
    let deformed = sketches(6000..6240, Some(11))?;
    let cfg = ClassifierTrainConfig {
        epochs: 20,
        held_out_fraction: 40.0 / 240.0,
        seed: 1,
        ..ClassifierTrainConfig::default()
    };
    let out = pretrain_classifier(&edge, &deformed, &ClassifierConfig::default(), &cfg)?;
    Ok((
        out.held_out_accuracy >= 0.9,
        format!(
            "held-out accuracy {:.3} (>= 0.9), train {:.3}, 200+40 per class, 20 epochs",
            out.held_out_accuracy, out.train_accuracy
        ),
    ))
}

/// 200/200/200 steps, batch 4, 64×64, 200 faces.
fn toy_end_to_end(ctx: &mut Context) -> Outcome {
    let data = TrainData::from_pairs(toy_pairs(0..200), toy_pairs(1000..1040))?;
    let cfg = TrainConfig {
        batch_size: 4,
        checkpoint_every: 0,
        ..Default::default()
    };
    // Classifier from the training faces only: even faces edge-aligned, odd
    // faces deformed at the training bound.
    let d = cfg.deform_d();
    let edge: Vec<Sketch> = data.train.iter().step_by(2).map(|i| i.edge_aligned.clone()).collect();
    let deformed: Vec<Sketch> = data
        .train
        .iter()
        .skip(1)
        .step_by(2)
        .enumerate()
        .map(|(j, i)| i.deformed(d, 77 + j as u64))
        .collect();
    let clf = pretrain_classifier(&edge, &deformed, &ClassifierConfig::default(), &ClassifierTrainConfig::default())?;
    let mut trainer = Trainer::new(cfg, data, Some(&clf.store.snapshot()?))?;
    let dir = tempfile::tempdir()?;
    let summary = run(&mut trainer, dir.path())?;

    let window = |stage: u8, term: &str, first: bool| -> f64 {
        let r: Vec<f64> = summary
            .records
            .iter()
            .filter(|r| r.stage == stage)
            .map(|r| r.report.get(term).unwrap())
            .collect();
        let w = if first { &r[..10] } else { &r[r.len() - 10..] };
        w.iter().sum::<f64>() / 10.0
    };
    let finite = summary.records.iter().all(|r| r.report.first_non_finite().is_none());
    let (rec0, rec1) = (window(1, "rec_a", true), window(1, "rec_a", false));
    let (gfm0, gfm1) = (window(2, "gfm", true), window(2, "gfm", false));
    let (v2, v3) = (
        summary.val_rec_m_stage2.ok_or("no held-out rec_m after stage 2")?,
        summary.val_rec_m_stage3.ok_or("no held-out rec_m after stage 3")?,
    );
    let rec_drop = 1.0 - rec1 / rec0;
    let gfm_drop = 1.0 - gfm1 / gfm0;
    ctx.trained_checkpoint = Some(std::fs::read(&summary.final_checkpoint)?);
    let checks = [
        ("no NaN", finite),
        ("rec_a drop >= 50%", rec_drop >= 0.5),
        ("gfm drop >= 30%", gfm_drop >= 0.3),
        ("held-out rec_m stage3 <= stage2", v3 <= v2),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Ok((
        failed.is_empty(),
        format!(
            "{} steps, finite: {finite}; stage-1 rec_a {rec0:.4} -> {rec1:.4} ({:.1}% drop); stage-2 gfm {gfm0:.4} -> {gfm1:.4} ({:.1}% drop); held-out rec_m {v2:.4} -> {v3:.4}{}",
            summary.records.len(),
            100.0 * rec_drop,
            100.0 * gfm_drop,
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    ))
}

fn gaussian(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, 1);
    let dist = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| dist.sample(&mut rng)).collect();
            v[0] += shift;
            v
        })
        .collect()
}

fn metric_sanity(_: &mut Context) -> Outcome {
    let a = gaussian(10_000, 8, 0.0, 1);
    let b = gaussian(10_000, 8, 1.0, 2);
    let self_fid = fid_from_features(&a, &a)?;
    let (ab, ba) = (fid_from_features(&a, &b)?, fid_from_features(&b, &a)?);
    let constant = vec![vec![0.1, 0.6, 0.3]; 100];
    let is_const = inception_score(&constant, 10)?.0;
    let classes = 5;
    let one_hot: Vec<Vec<f64>> = (0..100)
        .map(|i| (0..classes).map(|k| if i % classes == k { 1.0 } else { 0.0 }).collect())
        .collect();
    let is_hot = inception_score(&one_hot, 1)?.0;
    let checks = [
        self_fid < 1e-3,
        (ab - ba).abs() < 1e-6,
        (ab - 1.0).abs() <= 0.05,
        (is_const - 1.0).abs() < 1e-9,
        (is_hot - classes as f64).abs() < 1e-9,
    ];
    Ok((
        checks.iter().all(|&c| c),
        format!(
            "FID(A,A) {self_fid:.2e}; |FID(A,B)-FID(B,A)| {:.2e}; shifted FID {ab:.4}; IS constant {is_const:.6}; IS one-hot {is_hot:.6} (C={classes})",
            (ab - ba).abs()
        ),
    ))
}

fn toy_checkpoint_bytes() -> facepencil::Result<Vec<u8>> {
    let cfg = toy_model_config();
    let model = FacePencil::new(&cfg, DType::F32, 9)?;
    Checkpoint::from_store(CheckpointMeta::new(cfg), &model.store, &ParamGroup::ALL).to_bytes()
}

/// /health, deterministic /generate, attention normalized after 8-bit
/// quantization.
fn service_contract(ctx: &mut Context) -> Outcome {
    let (bytes, which) = match &ctx.trained_checkpoint {
        Some(b) => (b.clone(), "end-to-end checkpoint"),
        None => (toy_checkpoint_bytes()?, "freshly initialized toy checkpoint"),
    };
    let model = Arc::new(InferenceModel::from_bytes(&bytes)?);
    let app = router(model.clone(), ServiceConfig::default());
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(async move {
        let send = |req: Request<Body>| {
            let app = app.clone();
            async move {
                let resp = app.oneshot(req).await.unwrap();
                let status = resp.status();
                (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap())
            }
        };
        let (health, body) = send(Request::get("/health").body(Body::empty())?).await;
        let health_json: serde_json::Value = serde_json::from_slice(&body)?;
        let health_ok = health == StatusCode::OK && health_json["model_id"] == model.model_id();

        let (mask, _) = generate_toy_face(4242, 64)?;
        let png = encode_sketch_png(&extract_boundaries(&mask))?;
        let request = || {
            let body = serde_json::json!({ "sketch": B64.encode(&png), "want_attention": true });
            Request::post("/generate")
                .header("content-type", "application/json")
                .body(Body::from(body.to_string()))
                .unwrap()
        };
        let mut responses = Vec::new();
        for _ in 0..2 {
            let (status, body) = send(request()).await;
            if status != StatusCode::OK {
                return Ok((false, format!("/generate returned {status}")));
            }
            responses.push(serde_json::from_slice::<GenerateResponse>(&body)?);
        }
        let deterministic =
            responses[0].image_b64 == responses[1].image_b64 && responses[0].attention_b64 == responses[1].attention_b64;
        let layers: Vec<Vec<u8>> = responses[0]
            .attention_b64
            .iter()
            .map(|b| Ok(image::load_from_memory(&B64.decode(b)?)?.to_luma8().into_raw()))
            .collect::<Result<_, Box<dyn std::error::Error>>>()?;
        let mut worst = 0f64;
        for p in 0..64 * 64 {
            let s: f64 = layers.iter().map(|l| f64::from(l[p]) / 255.0).sum();
            worst = worst.max((s - 1.0).abs());
        }
        let layers_ok = layers.len() == model.num_branches() && worst < 1e-3;
        Ok((
            health_ok && deterministic && layers_ok,
            format!(
                "{which}; /health ok: {health_ok}; deterministic: {deterministic}; {} attention layers, max |sum - 1| {worst:.2e} (< 1e-3)",
                layers.len()
            ),
        ))
    })
}
