//! Training objectives.
//!
//! * reconstruction: mean absolute error against the photo;
//! * adversarial: sigmoid cross-entropy on patch logits, averaged over the
//!   three discriminator scales; the generator side is non-saturating;
//! * discriminator feature matching: per-layer mean L1 between discriminator
//!   features of the fake and (detached) real pair;
//! * generator feature matching: per-tap mean L1 between `G_m`'s residual
//!   outputs and `G_a`'s (detached) ones.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{DiscriminatorOutput, DISCRIMINATOR_SCALES};
use crate::nn::scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub mu: f64,
    /// Discriminator layer indices used for feature matching.
    pub dfm_layers: Vec<usize>,
    /// Residual-block indices used for generator feature matching.
    pub gfm_taps: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            mu: 10.0,
            dfm_layers: vec![0, 1, 2, 3],
            gfm_taps: vec![0, 1, 2, 3],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.mu > 0.0) {
            return Err(Error::InvalidInput("lambda and mu must be positive".into()));
        }
        if self.dfm_layers.is_empty() || self.gfm_taps.is_empty() {
            return Err(Error::InvalidInput("feature-matching layer lists must be nonempty".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn reconstruction_loss(generated: &Tensor, real: &Tensor) -> Result<Tensor> {
    same_shape(generated, real, "reconstruction")?;
    l1_mean(generated, real)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if !scalar(&t.abs()?.max_all()?)?.is_finite() {
        return Err(Error::Numerical(format!("non-finite {what} logits")));
    }
    Ok(())
}

/// `-(1/3) Σ_i [mean log σ(real_i) + mean log(1 - σ(fake_i))]`.
pub fn discriminator_adversarial_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!("{} real vs {} fake scales", real.len(), fake.len())));
    }
    let mut acc: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        check_finite(r, "real")?;
        check_finite(f, "fake")?;
        // -log σ(r) = softplus(-r), -log(1 - σ(f)) = softplus(f)
        let term = (softplus(&r.neg()?)?.mean_all()? + softplus(f)?.mean_all()?)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok((acc.expect("nonempty") / DISCRIMINATOR_SCALES as f64)?)
}

/// Non-saturating generator loss `-(1/3) Σ_i mean log σ(fake_i)`.
pub fn generator_adversarial_loss(fake: &[Tensor]) -> Result<Tensor> {
    if fake.is_empty() {
        return Err(Error::Shape("no discriminator scales".into()));
    }
    let mut acc: Option<Tensor> = None;
    for f in fake {
        check_finite(f, "fake")?;
        let term = softplus(&f.neg()?)?.mean_all()?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok((acc.expect("nonempty") / DISCRIMINATOR_SCALES as f64)?)
}

pub fn logits_of(outputs: &[DiscriminatorOutput]) -> Vec<Tensor> {
    outputs.iter().map(|o| o.logits.clone()).collect()
}

/// `1/(3 N_Q) Σ_i Σ_q mean |fake_iq - real_iq|`, with the real features
/// detached.
pub fn dfm_loss(fake: &[Vec<Tensor>], real: &[Vec<Tensor>], cfg: &LossConfig) -> Result<Tensor> {
    if fake.len() != real.len() || fake.is_empty() {
        return Err(Error::Shape(format!("{} fake vs {} real scales", fake.len(), real.len())));
    }
    let mut acc: Option<Tensor> = None;
    for (fs, rs) in fake.iter().zip(real) {
        if fs.len() != rs.len() {
            return Err(Error::Shape("feature list lengths differ".into()));
        }
        for &q in &cfg.dfm_layers {
            let (f, r) = fs
                .get(q)
                .zip(rs.get(q))
                .ok_or_else(|| Error::Shape(format!("no discriminator layer {q}")))?;
            same_shape(f, r, "discriminator features")?;
            let term = l1_mean(f, &r.detach())?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
    }
    let n = (DISCRIMINATOR_SCALES * cfg.dfm_layers.len()) as f64;
    Ok((acc.expect("nonempty") / n)?)
}

pub fn features_of(outputs: &[DiscriminatorOutput]) -> Vec<Vec<Tensor>> {
    outputs.iter().map(|o| o.features.clone()).collect()
}

/// `(1/N_T) Σ_t mean |a_t - m_t|` over the configured taps, with `G_a`'s
/// taps detached.
pub fn gfm_loss(taps_a: &[Tensor], taps_m: &[Tensor], cfg: &LossConfig) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for &t in &cfg.gfm_taps {
        let (a, m) = taps_a
            .get(t)
            .zip(taps_m.get(t))
            .ok_or_else(|| Error::Shape(format!("no residual tap {t}")))?;
        same_shape(a, m, "generator taps")?;
        let term = l1_mean(&a.detach(), m)?;
        acc = Some(match acc {
            Some(x) => (x + term)?,
            None => term,
        });
    }
    let acc = acc.ok_or_else(|| Error::InvalidInput("empty tap list".into()))?;
    Ok((acc / cfg.gfm_taps.len() as f64)?)
}

/// Generator-side terms; `None` means masked out for the current stage.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    pub rec_a: Option<Tensor>,
    pub rec_m: Option<Tensor>,
    pub adv_a: Option<Tensor>,
    pub adv_m: Option<Tensor>,
    pub dfm_a: Option<Tensor>,
    pub dfm_m: Option<Tensor>,
    pub gfm: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rec_a: f64,
    pub rec_m: f64,
    pub adv_a: f64,
    pub adv_m: f64,
    pub dfm_a: f64,
    pub dfm_m: f64,
    pub gfm: f64,
    pub total: f64,
    /// Discriminator loss from the same step.
    pub disc: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl LossReport {
    pub const TERMS: [&'static str; 9] =
        ["rec_a", "rec_m", "adv_a", "adv_m", "dfm_a", "dfm_m", "gfm", "total", "disc"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.rec_a, self.rec_m, self.adv_a, self.adv_m, self.dfm_a, self.dfm_m, self.gfm, self.total,
            self.disc,
        ]
    }

    pub fn get(&self, term: &str) -> Option<f64> {
        Self::TERMS.iter().position(|t| *t == term).map(|i| self.values()[i])
    }

    /// First term that is NaN or infinite.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        Self::TERMS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(t, _)| *t)
    }

    /// Weighted sum of the reported components.
    pub fn combined(&self) -> f64 {
        self.rec_a
            + self.rec_m
            + self.adv_a
            + self.adv_m
            + self.lambda * (self.dfm_a + self.dfm_m)
            + self.mu * self.gfm
    }
}

/// `rec_a + rec_m + adv_a + adv_m + λ(dfm_a + dfm_m) + μ·gfm` over the
/// present terms.
pub fn total_objective(terms: &LossTerms, cfg: &LossConfig) -> Result<(Tensor, LossReport)> {
    let weighted = [
        (&terms.rec_a, 1.0),
        (&terms.rec_m, 1.0),
        (&terms.adv_a, 1.0),
        (&terms.adv_m, 1.0),
        (&terms.dfm_a, cfg.lambda),
        (&terms.dfm_m, cfg.lambda),
        (&terms.gfm, cfg.mu),
    ];
    let mut total: Option<Tensor> = None;
    let mut values = [0.0; 7];
    for (i, (t, w)) in weighted.iter().enumerate() {
        let Some(t) = t else { continue };
        values[i] = scalar(t)?;
        let part = (t * *w)?;
        total = Some(match total {
            Some(x) => (x + part)?,
            None => part,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidInput("no active loss terms".into()))?;
    let report = LossReport {
        rec_a: values[0],
        rec_m: values[1],
        adv_a: values[2],
        adv_m: values[3],
        dfm_a: values[4],
        dfm_m: values[5],
        gfm: values[6],
        total: scalar(&total)?,
        disc: 0.0,
        lambda: cfg.lambda,
        mu: cfg.mu,
    };
    Ok((total, report))
}
