//! Static worlds made of bounded rectangles, and ray casting against them.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::trajectory::TrajectorySpec;

/// Rectangle `center + a·half_u + b·half_v` for `a, b ∈ [-1, 1]`; the two
/// half-axes must be orthogonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub center: [f64; 3],
    pub half_u: [f64; 3],
    pub half_v: [f64; 3],
}

impl Rect {
    pub fn new(center: Vector3<f64>, half_u: Vector3<f64>, half_v: Vector3<f64>) -> Self {
        Rect { center: center.into(), half_u: half_u.into(), half_v: half_v.into() }
    }

    /// Vertical wall from `a` to `b` (xy), spanning `z0..z1`.
    pub fn wall(a: [f64; 2], b: [f64; 2], z0: f64, z1: f64) -> Self {
        let c = Vector3::new(0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.5 * (z0 + z1));
        let u = Vector3::new(0.5 * (b[0] - a[0]), 0.5 * (b[1] - a[1]), 0.0);
        Rect::new(c, u, Vector3::new(0.0, 0.0, 0.5 * (z1 - z0)))
    }

    /// Horizontal slab at height `z` over `[x0,x1]×[y0,y1]`.
    pub fn level(x0: f64, x1: f64, y0: f64, y1: f64, z: f64) -> Self {
        Rect::new(
            Vector3::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), z),
            Vector3::new(0.5 * (x1 - x0), 0.0, 0.0),
            Vector3::new(0.0, 0.5 * (y1 - y0), 0.0),
        )
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from(self.half_u).cross(&Vector3::from(self.half_v)).normalize()
    }

    /// Distance along the unit ray to the hit, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let c = Vector3::from(self.center);
        let t = n.dot(&(c - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let rel = origin + dir * t - c;
        let inside = |h: [f64; 3]| {
            let h = Vector3::from(h);
            rel.dot(&h).abs() <= h.norm_squared() * (1.0 + 1e-12)
        };
        (inside(self.half_u) && inside(self.half_v)).then_some(t)
    }

    /// Signed distance of `p` from the rectangle's plane.
    pub fn plane_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal().dot(&(p - Vector3::from(self.center)))
    }
}

/// Nearest hit over all rectangles, within `max_range`.
pub fn cast(world: &[Rect], origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<(f64, usize)> {
    world
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.intersect(origin, dir).map(|t| (t, i)))
        .filter(|(t, _)| *t <= max_range)
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Four vertical faces of an axis-aligned pillar.
pub fn pillar(cx: f64, cy: f64, half: f64, z0: f64, z1: f64) -> Vec<Rect> {
    let (x0, x1, y0, y1) = (cx - half, cx + half, cy - half, cy + half);
    vec![
        Rect::wall([x0, y0], [x1, y0], z0, z1),
        Rect::wall([x1, y0], [x1, y1], z0, z1),
        Rect::wall([x1, y1], [x0, y1], z0, z1),
        Rect::wall([x0, y1], [x0, y0], z0, z1),
    ]
}

/// Box with a lid: four faces plus the top.
pub fn crate_box(cx: f64, cy: f64, hx: f64, hy: f64, height: f64) -> Vec<Rect> {
    let (x0, x1, y0, y1) = (cx - hx, cx + hx, cy - hy, cy + hy);
    vec![
        Rect::wall([x0, y0], [x1, y0], 0.0, height),
        Rect::wall([x1, y0], [x1, y1], 0.0, height),
        Rect::wall([x1, y1], [x0, y1], 0.0, height),
        Rect::wall([x0, y1], [x0, y0], 0.0, height),
        Rect::level(x0, x1, y0, y1, height),
    ]
}

/// Walls following the path of `trajectory` at `±half_width`, with pillars
/// on alternating sides, floor, ceiling and end caps.
pub fn corridor_world(trajectory: &TrajectorySpec, duration: f64, half_width: f64, height: f64) -> Vec<Rect> {
    let samples: Vec<Vector3<f64>> = (0..=400).map(|i| trajectory.at(duration * i as f64 / 400.0).pose.trans).collect();
    let x_min = samples.iter().map(|p| p.x).fold(f64::INFINITY, f64::min) - 4.0;
    let x_max = samples.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max) + 4.0;
    let y_min = samples.iter().map(|p| p.y).fold(f64::INFINITY, f64::min) - half_width - 1.0;
    let y_max = samples.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max) + half_width + 1.0;

    let lateral = |x: f64| {
        // centreline y at x, from the densest sample
        samples
            .iter()
            .min_by(|a, b| (a.x - x).abs().total_cmp(&(b.x - x).abs()))
            .map_or(0.0, |p| p.y)
    };
    let mut out = vec![
        Rect::level(x_min, x_max, y_min, y_max, 0.0),
        Rect::level(x_min, x_max, y_min, y_max, height),
        Rect::wall([x_min, y_min], [x_min, y_max], 0.0, height),
        Rect::wall([x_max, y_max], [x_max, y_min], 0.0, height),
    ];
    let step = 0.5;
    let mut x = x_min;
    while x < x_max - 1e-9 {
        let x1 = (x + step).min(x_max);
        let (ya, yb) = (lateral(x), lateral(x1));
        for side in [-1.0, 1.0] {
            let off = side * half_width;
            out.push(Rect::wall([x, ya + off], [x1, yb + off], 0.0, height));
        }
        x = x1;
    }
    let mut k = 0;
    let mut px = x_min + 2.5;
    while px < x_max - 2.0 {
        let side = if k % 2 == 0 { 1.0 } else { -1.0 };
        out.extend(pillar(px, lateral(px) + side * (half_width - 0.6), 0.3, 0.0, height));
        px += 3.0;
        k += 1;
    }
    out
}

/// Boxes of varying size on alternating sides of the line `y = 0`, every
/// 3.5 m from `x0` to `x1`.
fn boxes(x0: f64, x1: f64) -> Vec<Rect> {
    let mut out = Vec::new();
    let mut x = x0;
    let mut k = 0;
    while x <= x1 {
        let side = if k % 2 == 0 { 1.0 } else { -1.0 };
        let (hx, hy, h) = (0.6 + 0.2 * (k % 3) as f64, 0.5 + 0.25 * (k % 2) as f64, 1.2 + 0.4 * (k % 4) as f64);
        out.extend(crate_box(x, side * (3.0 + 0.5 * (k % 3) as f64), hx, hy, h));
        x += 3.5;
        k += 1;
    }
    out
}

/// Open yard: floor, two distant end walls and scattered boxes around the
/// line `y = 0` between `x0` and `x1`.
pub fn yard(x0: f64, x1: f64) -> Vec<Rect> {
    let mut out = vec![
        Rect::level(x0 - 15.0, x1 + 15.0, -15.0, 15.0, 0.0),
        Rect::wall([x0 - 12.0, -12.0], [x0 - 12.0, 12.0], 0.0, 6.0),
        Rect::wall([x1 + 12.0, 12.0], [x1 + 12.0, -12.0], 0.0, 6.0),
    ];
    out.extend(boxes(x0, x1));
    out
}

/// Featureless straight tunnel over `x0..x1` with a yard of boxes at each
/// end.
pub fn tunnel_world(x0: f64, x1: f64, half_width: f64, height: f64) -> Vec<Rect> {
    let mut out = vec![
        Rect::level(x0 - 25.0, x1 + 25.0, -15.0, 15.0, 0.0),
        Rect::wall([x0 - 22.0, -12.0], [x0 - 22.0, 12.0], 0.0, 6.0),
        Rect::wall([x1 + 22.0, 12.0], [x1 + 22.0, -12.0], 0.0, 6.0),
    ];
    out.extend(boxes(x0 - 10.0, x0 - 1.0));
    out.extend(boxes(x1 + 1.0, x1 + 10.0));
    out.push(Rect::wall([x0, half_width], [x1, half_width], 0.0, height));
    out.push(Rect::wall([x1, -half_width], [x0, -half_width], 0.0, height));
    out.push(Rect::level(x0, x1, -half_width, half_width, height));
    // portal faces around the openings
    for x in [x0, x1] {
        out.push(Rect::wall([x, half_width], [x, half_width + 6.0], 0.0, height + 2.0));
        out.push(Rect::wall([x, -half_width - 6.0], [x, -half_width], 0.0, height + 2.0));
        out.push(Rect::wall([x, -half_width], [x, half_width], height, height + 2.0));
    }
    out
}
