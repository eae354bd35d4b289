use super::{Sketch, SketchKind};
use crate::data::SemanticMask;

/// Marks region boundaries of a label map.
///
/// A pixel is a stroke pixel when one of its 4-neighbours carries a smaller
/// label. Each boundary is therefore drawn once, on the side of the larger
/// label, which keeps strokes 1 px wide along straight runs (2 px at some
/// corners). Pixels outside the canvas are not neighbours.
pub fn extract_boundaries(mask: &SemanticMask) -> Sketch {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Sketch::blank(h, w, SketchKind::EdgeAligned);
    for y in 0..h {
        for x in 0..w {
            let l = mask.get(y, x);
            let smaller = (y > 0 && mask.get(y - 1, x) < l)
                || (y + 1 < h && mask.get(y + 1, x) < l)
                || (x > 0 && mask.get(y, x - 1) < l)
                || (x + 1 < w && mask.get(y, x + 1) < l);
            if smaller {
                out.set(y, x, true);
            }
        }
    }
    out
}
