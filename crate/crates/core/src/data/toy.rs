//! Procedural toy faces: a six-class label map and a shaded rendering of it.

use rand::Rng;

use super::{PhotoImage, SemanticMask};
use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const BACKGROUND: u8 = 0;
pub const SKIN: u8 = 1;
pub const HAIR: u8 = 2;
pub const EYES: u8 = 3;
pub const NOSE: u8 = 4;
pub const MOUTH: u8 = 5;
pub const TOY_NUM_CLASSES: u32 = 6;

pub const MIN_TOY_RESOLUTION: usize = 32;

/// Largest deviation of any rendered channel from its class base color.
pub const SHADING_BOUND: f32 = 0.15;

pub const TOY_BASE_COLORS: [[f32; 3]; 6] = [
    [-0.55, -0.35, -0.05], // background
    [0.75, 0.35, 0.10],    // skin
    [-0.45, -0.60, -0.70], // hair
    [-0.80, -0.75, -0.55], // eyes
    [0.50, 0.05, -0.15],   // nose
    [0.60, -0.55, -0.45],  // mouth
];

/// Geometry of one toy face, in unit canvas coordinates (x right, y down).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFaceParams {
    pub center: (f32, f32),
    pub radii: (f32, f32),
    pub long_hair: bool,
    pub eye_y: f32,
    pub eye_dx: f32,
    pub eye_radii: (f32, f32),
    pub nose_top: f32,
    pub nose_base: f32,
    pub nose_half_width: f32,
    pub mouth_y: f32,
    pub mouth_radii: (f32, f32),
    pub light: (f32, f32),
    pub shade: f32,
}

impl ToyFaceParams {
    pub fn sample(seed: u64) -> Self {
        let mut rng = rng_for(seed, 0x70F_FACE);
        let cx = 0.5 + rng.gen_range(-0.04..0.04);
        let cy = 0.55 + rng.gen_range(-0.04..0.04);
        let rx = rng.gen_range(0.25..0.33);
        let ry = rng.gen_range(0.32..0.40);
        let long_hair = rng.gen_bool(0.5);
        let eye_y = cy - ry * rng.gen_range(0.15..0.30);
        let eye_dx = rx * rng.gen_range(0.35..0.50);
        let erx = rx * rng.gen_range(0.14..0.22);
        let ery = erx * rng.gen_range(0.45..0.70);
        let nose_top = eye_y + ery + ry * 0.05;
        let nose_base = cy + ry * rng.gen_range(0.10..0.20);
        let nose_half_width = rx * rng.gen_range(0.10..0.16);
        let mouth_y = cy + ry * rng.gen_range(0.45..0.60);
        let mouth_radii = (rx * rng.gen_range(0.30..0.45), ry * rng.gen_range(0.07..0.11));
        let angle = rng.gen_range(0.0..std::f32::consts::TAU);
        let shade = rng.gen_range(0.05..SHADING_BOUND);
        Self {
            center: (cx, cy),
            radii: (rx, ry),
            long_hair,
            eye_y,
            eye_dx,
            eye_radii: (erx, ery),
            nose_top,
            nose_base,
            nose_half_width,
            mouth_y,
            mouth_radii,
            light: (angle.cos(), angle.sin()),
            shade,
        }
    }

    /// Coarse attribute class in `0..4`: hair length × face aspect.
    pub fn attribute_class(&self) -> usize {
        let wide = self.radii.0 / self.radii.1 > 0.8;
        usize::from(self.long_hair) * 2 + usize::from(wide)
    }

    fn label_at(&self, x: f32, y: f32, px: f32) -> u8 {
        let (cx, cy) = self.center;
        let (rx, ry) = self.radii;
        // Radii below 0.75 px could miss every pixel centre.
        let min_r = 0.75 * px;
        let inside = |ex: f32, ey: f32, (ax, ay): (f32, f32)| {
            let (ax, ay) = (ax.max(min_r), ay.max(min_r));
            let (dx, dy) = ((x - ex) / ax, (y - ey) / ay);
            dx * dx + dy * dy <= 1.0
        };

        let eyes = inside(cx - self.eye_dx, self.eye_y, self.eye_radii)
            || inside(cx + self.eye_dx, self.eye_y, self.eye_radii);
        if eyes {
            return EYES;
        }
        if inside(cx, self.mouth_y, self.mouth_radii) {
            return MOUTH;
        }
        if y >= self.nose_top - min_r && y <= self.nose_base + min_r {
            let t = ((y - self.nose_top) / (self.nose_base - self.nose_top)).clamp(0.0, 1.0);
            if (x - cx).abs() <= self.nose_half_width * t + min_r {
                return NOSE;
            }
        }
        if inside(cx, cy, (rx, ry)) {
            return SKIN;
        }
        let hair = if self.long_hair {
            inside(cx, cy - 0.10, (rx * 1.15, ry))
                || ((x - cx).abs() <= rx * 1.2 && y >= cy - 0.10 && y <= cy + ry * 0.9)
        } else {
            inside(cx, cy - 0.12, (rx * 1.12, ry * 0.95))
        };
        if hair {
            HAIR
        } else {
            BACKGROUND
        }
    }

    fn shading(&self, x: f32, y: f32) -> f32 {
        let s = (self.light.0 * (2.0 * x - 1.0) + self.light.1 * (2.0 * y - 1.0))
            / std::f32::consts::SQRT_2;
        self.shade * s.clamp(-1.0, 1.0)
    }
}

/// Renders a deterministic toy face for `seed` at `resolution`².
///
/// Face parts are laid out eyes above nose above mouth, all inside the skin
/// region, and the photo is the per-class base color plus a bounded linear
/// shading term.
pub fn generate_toy_face(seed: u64, resolution: usize) -> Result<(SemanticMask, PhotoImage)> {
    if resolution < MIN_TOY_RESOLUTION {
        return Err(Error::InvalidInput(format!(
            "toy resolution {resolution} below minimum {MIN_TOY_RESOLUTION}"
        )));
    }
    let params = ToyFaceParams::sample(seed);
    let px = 1.0 / resolution as f32;
    let mut labels = Vec::with_capacity(resolution * resolution);
    let mut pixels = Vec::with_capacity(resolution * resolution * 3);
    for row in 0..resolution {
        let y = (row as f32 + 0.5) * px;
        for col in 0..resolution {
            let x = (col as f32 + 0.5) * px;
            let label = params.label_at(x, y, px);
            labels.push(label);
            let s = params.shading(x, y);
            for c in TOY_BASE_COLORS[label as usize] {
                pixels.push((c + s).clamp(-1.0, 1.0));
            }
        }
    }
    let id = format!("toy_{seed}");
    let mask = SemanticMask::new(labels, resolution, resolution, TOY_NUM_CLASSES, id.clone())?;
    let photo = PhotoImage::new(pixels, resolution, resolution, id)?;
    Ok((mask, photo))
}
