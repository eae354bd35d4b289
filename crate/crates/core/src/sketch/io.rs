//! Sketch PNGs and plain-text stroke lists.
//!
//! On disk a sketch is black strokes on white. Stroke lists hold one
//! polyline per line as `x0,y0 x1,y1 ...`, preceded by a `# canvas WxH`
//! comment.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Point, Sketch, SketchKind, StrokeSet};
use crate::error::{Error, Result};

/// Encodes as a 1-bit grayscale PNG.
pub fn encode_sketch_png(sketch: &Sketch) -> Result<Vec<u8>> {
    let (w, h) = (sketch.width(), sketch.height());
    let row_bytes = w.div_ceil(8);
    let mut packed = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            // 1 = white, so blank pixels set the bit.
            if !sketch.get(y, x) {
                packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidInput(format!("png header: {e}")))?;
        writer
            .write_image_data(&packed)
            .map_err(|e| Error::InvalidInput(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Decodes any grayscale or colour PNG; dark opaque pixels are strokes.
pub fn decode_sketch_png(bytes: &[u8], kind: SketchKind) -> Result<Sketch> {
    let img = image::load_from_memory(bytes)?.to_luma_alpha8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels = img
        .pixels()
        .map(|p| u8::from(p.0[1] >= 128 && p.0[0] < 128))
        .collect();
    Sketch::from_pixels(pixels, h, w, kind)
}

pub fn format_strokes(set: &StrokeSet) -> String {
    let mut out = format!("# canvas {}x{}\n", set.width, set.height);
    for stroke in &set.strokes {
        let line: Vec<String> = stroke.iter().map(|p| format!("{},{}", p.x, p.y)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Parses a stroke list. `canvas` (height, width) is used when the text has
/// no canvas header.
pub fn parse_strokes(text: &str, canvas: Option<(usize, usize)>) -> Result<StrokeSet> {
    let mut size = canvas;
    let mut strokes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(dims) = comment.trim().strip_prefix("canvas") {
                let (w, h) = dims
                    .trim()
                    .split_once('x')
                    .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
                    .ok_or_else(|| Error::InvalidInput(format!("bad canvas header {line:?}")))?;
                size = Some((h, w));
            }
            continue;
        }
        let mut stroke = Vec::new();
        for tok in line.split_whitespace() {
            let p = tok
                .split_once(',')
                .and_then(|(x, y)| Some(Point::new(x.parse().ok()?, y.parse().ok()?)))
                .ok_or_else(|| {
                    Error::InvalidInput(format!("stroke line {}: bad point {tok:?}", n + 1))
                })?;
            stroke.push(p);
        }
        if stroke.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "stroke line {}: fewer than 2 points",
                n + 1
            )));
        }
        strokes.push(stroke);
    }
    let (height, width) =
        size.ok_or_else(|| Error::InvalidInput("stroke list has no canvas size".into()))?;
    let mut set = StrokeSet {
        strokes,
        height,
        width,
    };
    for stroke in &mut set.strokes {
        for i in 0..stroke.len() {
            stroke[i] = clamp_to_canvas(height, width, stroke[i]);
        }
    }
    Ok(set)
}

fn clamp_to_canvas(h: usize, w: usize, p: Point) -> Point {
    Point::new(p.x.clamp(0.0, (w - 1) as f32), p.y.clamp(0.0, (h - 1) as f32))
}

pub fn write_strokes(set: &StrokeSet, path: &Path) -> Result<()> {
    fs::write(path, format_strokes(set)).map_err(|e| Error::io(path, e))
}

pub fn read_strokes(path: &Path, canvas: Option<(usize, usize)>) -> Result<StrokeSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_strokes(&text, canvas)
}
