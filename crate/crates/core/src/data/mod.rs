//! Semantic masks, photos, and the datasets built from them.

mod manifest;
mod toy;

use std::path::Path;

use image::{imageops::FilterType, DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};

pub use manifest::{build_manifest, DatasetManifest, ManifestEntry, ManifestSource, Split, SplitCounts};
pub use toy::{
    generate_toy_face, ToyFaceParams, BACKGROUND, EYES, HAIR, MIN_TOY_RESOLUTION, MOUTH, NOSE,
    SHADING_BOUND, SKIN, TOY_BASE_COLORS, TOY_NUM_CLASSES,
};

/// Class count of the CelebAMask-HQ label maps.
pub const CELEBAMASK_NUM_CLASSES: u32 = 19;

/// Default working resolution for desk-scale runs.
pub const DEFAULT_RESOLUTION: usize = 64;

/// Integer label grid, row-major, `labels[y * width + x]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    labels: Vec<u8>,
    height: usize,
    width: usize,
    num_classes: u32,
    source_id: String,
}

impl SemanticMask {
    pub fn new(
        labels: Vec<u8>,
        height: usize,
        width: usize,
        num_classes: u32,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let source_id = source_id.into();
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {source_id}: {} labels for {height}x{width}",
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidInput("num_classes must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| u32::from(l) >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label: bad.into(),
                num_classes,
                source_id,
            });
        }
        Ok(Self {
            labels,
            height,
            width,
            num_classes,
            source_id,
        })
    }

    pub fn constant(label: u8, height: usize, width: usize, num_classes: u32) -> Result<Self> {
        Self::new(vec![label; height * width], height, width, num_classes, "constant")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Mean (row, col) of the pixels carrying `label`, or `None` if absent.
    pub fn centroid(&self, label: u8) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == label {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Nearest-neighbour resize; never introduces labels absent from the source.
    pub fn resize_nearest(&self, height: usize, width: usize) -> SemanticMask {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = ((y * 2 + 1) * self.height / (height * 2)).min(self.height - 1);
            for x in 0..width {
                let sx = ((x * 2 + 1) * self.width / (width * 2)).min(self.width - 1);
                labels.push(self.get(sy, sx));
            }
        }
        SemanticMask {
            labels,
            height,
            width,
            num_classes: self.num_classes,
            source_id: self.source_id.clone(),
        }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("buffer size matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray_image().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// RGB photo with values in [-1, 1], stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotoImage {
    pixels: Vec<f32>,
    height: usize,
    width: usize,
    source_id: String,
}

impl PhotoImage {
    pub fn new(
        pixels: Vec<f32>,
        height: usize,
        width: usize,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "photo: {} values for {height}x{width}x3",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidInput(format!("photo value {v} outside [-1, 1]")));
        }
        Ok(Self {
            pixels,
            height,
            width,
            source_id: source_id.into(),
        })
    }

    pub fn from_rgb8(img: &RgbImage, source_id: impl Into<String>) -> Self {
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0).collect();
        Self {
            pixels,
            height: img.height() as usize,
            width: img.width() as usize,
            source_id: source_id.into(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    /// Maps [-1, 1] to 8-bit RGB.
    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .pixels
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size matches dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a (label mask, photo) pair and brings both to `resolution`².
///
/// The mask must be a single-channel image whose values are class ids.
pub fn load_pair(
    mask_path: &Path,
    image_path: &Path,
    resolution: usize,
    num_classes: u32,
) -> Result<(SemanticMask, PhotoImage)> {
    let mask_img = match open_image(mask_path)? {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::InvalidInput(format!(
                "{}: mask must be single-channel 8-bit, got {:?}",
                mask_path.display(),
                other.color()
            )))
        }
    };
    let photo_img = open_image(image_path)?.to_rgb8();
    if mask_img.dimensions() != photo_img.dimensions() {
        return Err(Error::Shape(format!(
            "mask {}x{} vs photo {}x{}",
            mask_img.width(),
            mask_img.height(),
            photo_img.width(),
            photo_img.height()
        )));
    }
    let id = file_stem(mask_path);
    let (w, h) = (mask_img.width() as usize, mask_img.height() as usize);
    let mask = SemanticMask::new(mask_img.into_raw(), h, w, num_classes, id.clone())?;
    let mask = if (h, w) == (resolution, resolution) {
        mask
    } else {
        mask.resize_nearest(resolution, resolution)
    };
    let photo_img = if (h, w) == (resolution, resolution) {
        photo_img
    } else {
        image::imageops::resize(
            &photo_img,
            resolution as u32,
            resolution as u32,
            FilterType::Triangle,
        )
    };
    Ok((mask, PhotoImage::from_rgb8(&photo_img, id)))
}
