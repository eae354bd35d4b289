//! Raster-to-polyline conversion: thinning, path tracing, simplification.

use std::collections::HashSet;

use super::{Point, Sketch, StrokeSet};

pub const DEFAULT_SIMPLIFY_TOL: f32 = 0.75;

/// Zhang-Suen thinning to a 1-px, 8-connected skeleton.
pub fn skeletonize(sketch: &Sketch) -> Sketch {
    let (h, w) = (sketch.height(), sketch.width());
    let mut img = sketch.clone();
    let at = |img: &Sketch, y: i64, x: i64| -> u8 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0
        } else {
            u8::from(img.get(y as usize, x as usize))
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !img.get(y, x) {
                        continue;
                    }
                    let (yi, xi) = (y as i64, x as i64);
                    // P2..P9, clockwise from north.
                    let n = [
                        at(&img, yi - 1, xi),
                        at(&img, yi - 1, xi + 1),
                        at(&img, yi, xi + 1),
                        at(&img, yi + 1, xi + 1),
                        at(&img, yi + 1, xi),
                        at(&img, yi + 1, xi - 1),
                        at(&img, yi, xi - 1),
                        at(&img, yi - 1, xi - 1),
                    ];
                    let b: u8 = n.iter().sum();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| n[i] == 0 && n[(i + 1) % 8] == 1).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let ok = if pass == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if ok {
                        remove.push((y, x));
                    }
                }
            }
            changed |= !remove.is_empty();
            for (y, x) in remove {
                img.set(y, x, false);
            }
        }
        if !changed {
            return img;
        }
    }
}

struct PixelGraph {
    w: usize,
    neighbors: Vec<Vec<usize>>,
    on: Vec<bool>,
}

impl PixelGraph {
    /// 8-connected adjacency, dropping a diagonal link when the two pixels
    /// already share a 4-connected neighbour (removes corner triangles).
    fn new(s: &Sketch) -> Self {
        let (h, w) = (s.height(), s.width());
        let on: Vec<bool> = s.pixels().iter().map(|&p| p != 0).collect();
        let lit = |y: i64, x: i64| y >= 0 && x >= 0 && y < h as i64 && x < w as i64 && on[y as usize * w + x as usize];
        let mut neighbors = vec![Vec::new(); h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if !lit(y, x) {
                    continue;
                }
                let list = &mut neighbors[y as usize * w + x as usize];
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if (dy, dx) == (0, 0) || !lit(y + dy, x + dx) {
                            continue;
                        }
                        if dy != 0 && dx != 0 && (lit(y + dy, x) || lit(y, x + dx)) {
                            continue;
                        }
                        list.push((y + dy) as usize * w + (x + dx) as usize);
                    }
                }
            }
        }
        Self { w, neighbors, on }
    }

    fn point(&self, idx: usize) -> Point {
        Point::new((idx % self.w) as f32, (idx / self.w) as f32)
    }
}

fn edge(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Splits a skeleton into pixel paths running between endpoints and
/// junctions; cycles without such nodes become closed paths whose last point
/// repeats the first. Isolated pixels become two-point paths.
pub fn trace_paths(skeleton: &Sketch) -> Vec<Vec<Point>> {
    let g = PixelGraph::new(skeleton);
    let mut visited: HashSet<(usize, usize)> = HashSet::new();
    let mut paths = Vec::new();

    let walk = |start: usize, first: usize, visited: &mut HashSet<(usize, usize)>| {
        let mut path = vec![start, first];
        visited.insert(edge(start, first));
        let (mut prev, mut cur) = (start, first);
        while g.neighbors[cur].len() == 2 {
            let next = g.neighbors[cur][0] + g.neighbors[cur][1] - prev;
            if !visited.insert(edge(cur, next)) {
                break;
            }
            path.push(next);
            prev = cur;
            cur = next;
        }
        path
    };

    for idx in 0..g.on.len() {
        if !g.on[idx] || g.neighbors[idx].len() == 2 {
            continue;
        }
        if g.neighbors[idx].is_empty() {
            paths.push(vec![idx, idx]);
            continue;
        }
        for &n in &g.neighbors[idx] {
            if !visited.contains(&edge(idx, n)) {
                paths.push(walk(idx, n, &mut visited));
            }
        }
    }
    // Remaining edges lie on pure cycles.
    for idx in 0..g.on.len() {
        if !g.on[idx] {
            continue;
        }
        for &n in &g.neighbors[idx] {
            if !visited.contains(&edge(idx, n)) {
                paths.push(walk(idx, n, &mut visited));
            }
        }
    }
    paths
        .into_iter()
        .map(|p| p.into_iter().map(|i| g.point(i)).collect())
        .collect()
}

fn segment_distance(p: Point, a: Point, b: Point) -> f32 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return ((p.x - a.x).powi(2) + (p.y - a.y).powi(2)).sqrt();
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    let (qx, qy) = (a.x + t * dx, a.y + t * dy);
    ((p.x - qx).powi(2) + (p.y - qy).powi(2)).sqrt()
}

/// Douglas-Peucker simplification; the endpoints are always kept.
pub fn douglas_peucker(points: &[Point], tol: f32) -> Vec<Point> {
    if points.len() <= 2 {
        return points.to_vec();
    }
    let mut keep = vec![false; points.len()];
    keep[0] = true;
    keep[points.len() - 1] = true;
    let mut stack = vec![(0, points.len() - 1)];
    while let Some((s, e)) = stack.pop() {
        if e <= s + 1 {
            continue;
        }
        let (mut best, mut best_d) = (s, -1.0f32);
        for i in s + 1..e {
            let d = segment_distance(points[i], points[s], points[e]);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        if best_d > tol {
            keep[best] = true;
            stack.push((s, best));
            stack.push((best, e));
        }
    }
    points
        .iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(*p))
        .collect()
}

/// Vectorizes a binary sketch into simplified polylines.
pub fn vectorize(sketch: &Sketch, simplify_tol: f32) -> StrokeSet {
    let skeleton = skeletonize(sketch);
    let strokes = trace_paths(&skeleton)
        .iter()
        .map(|p| douglas_peucker(p, simplify_tol))
        .collect();
    StrokeSet {
        strokes,
        height: sketch.height(),
        width: sketch.width(),
    }
}
