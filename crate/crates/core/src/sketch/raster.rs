use super::{Sketch, SketchKind, StrokeSet};

/// Bresenham line between two pixel positions, clipped to the canvas.
pub fn draw_line(s: &mut Sketch, (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as usize) < s.width() && (y as usize) < s.height() {
            s.set(y as usize, x as usize, true);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws every polyline segment as a 1-px line.
pub fn rasterize(strokes: &StrokeSet) -> Sketch {
    let mut out = Sketch::blank(strokes.height, strokes.width, SketchKind::Deformed);
    for stroke in &strokes.strokes {
        let pix: Vec<(i64, i64)> = stroke
            .iter()
            .map(|p| (p.x.round() as i64, p.y.round() as i64))
            .collect();
        if let [only] = pix.as_slice() {
            draw_line(&mut out, *only, *only);
        }
        for seg in pix.windows(2) {
            draw_line(&mut out, seg[0], seg[1]);
        }
    }
    out
}
