use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Point, StrokeSet};

/// Offset bound used at 256×256.
pub const REFERENCE_D: u32 = 11;
pub const REFERENCE_RESOLUTION: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformConfig {
    /// Maximum per-axis offset in pixels.
    pub d: u32,
    pub seed: u64,
}

impl DeformConfig {
    /// `d = round(11 · resolution / 256)`.
    pub fn scaled(resolution: usize, seed: u64) -> Self {
        let d = (REFERENCE_D as f64 * resolution as f64 / REFERENCE_RESOLUTION as f64).round();
        Self { d: d as u32, seed }
    }
}

/// Jitters every control point by an independent integer offset drawn
/// uniformly from `[-d, d]²`, then clamps to the canvas. Also returns the
/// offsets that were drawn.
pub fn deform_traced(strokes: &StrokeSet, cfg: &DeformConfig) -> (StrokeSet, Vec<Vec<(i32, i32)>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d as i32;
    let mut offsets = Vec::with_capacity(strokes.strokes.len());
    let mut out = Vec::with_capacity(strokes.strokes.len());
    for stroke in &strokes.strokes {
        let mut stroke_offsets = Vec::with_capacity(stroke.len());
        let moved = stroke
            .iter()
            .map(|p| {
                let (dx, dy) = if d == 0 {
                    (0, 0)
                } else {
                    (rng.gen_range(-d..=d), rng.gen_range(-d..=d))
                };
                stroke_offsets.push((dx, dy));
                strokes.clamp_point(Point::new(p.x + dx as f32, p.y + dy as f32))
            })
            .collect();
        offsets.push(stroke_offsets);
        out.push(moved);
    }
    (
        StrokeSet {
            strokes: out,
            height: strokes.height,
            width: strokes.width,
        },
        offsets,
    )
}

pub fn deform(strokes: &StrokeSet, cfg: &DeformConfig) -> StrokeSet {
    deform_traced(strokes, cfg).0
}
