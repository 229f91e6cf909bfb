//! Polyline helpers for lane centerlines.

/// Projection of a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the foot point from the polyline start.
    pub s: f64,
    /// Signed lateral offset, positive to the left of the travel direction.
    pub lateral: f64,
    /// Travel direction at the foot point, radians.
    pub heading: f64,
    pub distance: f64,
}

pub fn length(line: &[[f64; 2]]) -> f64 {
    line.windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}

pub fn project(line: &[[f64; 2]], x: f64, y: f64) -> Projection {
    let mut best = Projection {
        s: 0.0,
        lateral: 0.0,
        heading: 0.0,
        distance: f64::INFINITY,
    };
    let mut s0 = 0.0;
    let last = line.len().saturating_sub(2);
    for (k, w) in line.windows(2).enumerate() {
        let (ax, ay) = (w[0][0], w[0][1]);
        let (dx, dy) = (w[1][0] - ax, w[1][1] - ay);
        let seg = dx.hypot(dy);
        if seg == 0.0 {
            continue;
        }
        let (ux, uy) = (dx / seg, dy / seg);
        let mut along = (x - ax) * ux + (y - ay) * uy;
        // the first and last segments extend to infinity
        if k > 0 {
            along = along.max(0.0);
        }
        if k < last {
            along = along.min(seg);
        }
        let (fx, fy) = (ax + along * ux, ay + along * uy);
        let dist = (x - fx).hypot(y - fy);
        if dist < best.distance {
            best = Projection {
                s: s0 + along,
                lateral: ux * (y - fy) - uy * (x - fx),
                heading: uy.atan2(ux),
                distance: dist,
            };
        }
        s0 += seg;
    }
    best
}

/// Point and travel direction at arc length `s`; extrapolates linearly past
/// either end.
pub fn point_at(line: &[[f64; 2]], s: f64) -> ([f64; 2], f64) {
    let mut s0 = 0.0;
    let n = line.len();
    for (k, w) in line.windows(2).enumerate() {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        let seg = dx.hypot(dy);
        if seg == 0.0 {
            continue;
        }
        if s <= s0 + seg || k == n - 2 {
            let t = s - s0;
            let (ux, uy) = (dx / seg, dy / seg);
            return ([w[0][0] + t * ux, w[0][1] + t * uy], uy.atan2(ux));
        }
        s0 += seg;
    }
    (line[0], 0.0)
}

/// Quadratic Bezier from `a` through control `c` to `b`, `steps` segments.
pub fn bezier(a: [f64; 2], c: [f64; 2], b: [f64; 2], steps: usize) -> Vec<[f64; 2]> {
    (0..=steps)
        .map(|k| {
            let t = k as f64 / steps as f64;
            let u = 1.0 - t;
            [
                u * u * a[0] + 2.0 * u * t * c[0] + t * t * b[0],
                u * u * a[1] + 2.0 * u * t * c[1] + t * t * b[1],
            ]
        })
        .collect()
}
