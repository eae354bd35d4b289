//! Edge-aligned and deformed sketches.
//!
//! A [`Sketch`] is a binary raster (1 = stroke). Boundary sketches come from
//! semantic masks; deformed sketches are produced by vectorizing a sketch
//! into polylines, jittering their control points, and drawing them back.

mod boundary;
mod deform;
mod io;
mod raster;
mod vectorize;

use crate::data::{PhotoImage, SemanticMask};
use crate::error::{Error, Result};

pub use boundary::extract_boundaries;
pub use deform::{deform, deform_traced, DeformConfig, REFERENCE_D, REFERENCE_RESOLUTION};
pub use raster::{draw_line, rasterize};
pub use vectorize::{douglas_peucker, skeletonize, trace_paths, vectorize, DEFAULT_SIMPLIFY_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchKind {
    EdgeAligned,
    Deformed,
    HandDrawn,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sketch {
    pixels: Vec<u8>,
    height: usize,
    width: usize,
    kind: SketchKind,
}

impl Sketch {
    pub fn blank(height: usize, width: usize, kind: SketchKind) -> Self {
        Self {
            pixels: vec![0; height * width],
            height,
            width,
            kind,
        }
    }

    pub fn from_pixels(
        pixels: Vec<u8>,
        height: usize,
        width: usize,
        kind: SketchKind,
    ) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "sketch: {} pixels for {height}x{width}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&p| p > 1) {
            return Err(Error::InvalidInput("sketch pixels must be 0 or 1".into()));
        }
        Ok(Self {
            pixels,
            height,
            width,
            kind,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn kind(&self) -> SketchKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: SketchKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.pixels[y * self.width + x] = u8::from(on);
    }

    pub fn stroke_count(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    /// Square dilation with a `(2r+1)²` structuring element.
    pub fn dilate(&self, r: usize) -> Sketch {
        let mut out = Sketch::blank(self.height, self.width, self.kind);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                for yy in y.saturating_sub(r)..=(y + r).min(self.height - 1) {
                    for xx in x.saturating_sub(r)..=(x + r).min(self.width - 1) {
                        out.set(yy, xx, true);
                    }
                }
            }
        }
        out
    }

    /// Intersection over union of stroke pixels; 1.0 when both are empty.
    pub fn iou(&self, other: &Sketch) -> f64 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (a, b) in self.pixels.iter().zip(&other.pixels) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Fraction of pixels that differ.
    pub fn symmetric_difference(&self, other: &Sketch) -> f64 {
        let diff = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .filter(|(a, b)| a != b)
            .count();
        diff as f64 / self.pixels.len() as f64
    }

    /// Nearest-neighbour resize.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Sketch {
        let mut out = Sketch::blank(height, width, self.kind);
        for y in 0..height {
            let sy = ((y * 2 + 1) * self.height / (height * 2)).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * 2 + 1) * self.width / (width * 2)).min(self.width - 1);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }

    /// Values as `f32` in {0, 1}, row-major.
    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32).collect()
    }
}

/// Point in pixel coordinates; pixel centres sit on integers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrokeSet {
    pub strokes: Vec<Vec<Point>>,
    pub height: usize,
    pub width: usize,
}

impl StrokeSet {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            strokes: Vec::new(),
            height,
            width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.strokes.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.strokes.iter().map(Vec::len).sum()
    }

    pub fn clamp_point(&self, p: Point) -> Point {
        Point {
            x: p.x.clamp(0.0, (self.width - 1) as f32),
            y: p.y.clamp(0.0, (self.height - 1) as f32),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SketchTriplet {
    pub edge_aligned: Sketch,
    pub deformed: Sketch,
    pub photo: PhotoImage,
}

/// Builds `(S_syn, S_dfm, x)` from a mask and its photo.
pub fn make_triplet(
    mask: &SemanticMask,
    photo: &PhotoImage,
    cfg: &DeformConfig,
) -> Result<SketchTriplet> {
    if mask.source_id() != photo.source_id() {
        return Err(Error::InvalidInput(format!(
            "mask {} and photo {} come from different sources",
            mask.source_id(),
            photo.source_id()
        )));
    }
    if (mask.height(), mask.width()) != (photo.height(), photo.width()) {
        return Err(Error::Shape("mask and photo sizes differ".into()));
    }
    let edge_aligned = extract_boundaries(mask);
    let strokes = vectorize(&edge_aligned, DEFAULT_SIMPLIFY_TOL);
    let deformed = rasterize(&deform(&strokes, cfg));
    Ok(SketchTriplet {
        edge_aligned,
        deformed,
        photo: photo.clone(),
    })
}

pub use io::{decode_sketch_png, encode_sketch_png, parse_strokes, read_strokes, write_strokes, format_strokes};
