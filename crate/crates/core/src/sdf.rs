//! Signed distance to the drivable-area boundary, sampled at cell centers and
//! bilinearly interpolated. Positive inside the drivable area.

use serde::{Deserialize, Serialize};

use crate::scenario::OccupancyGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedDistanceField {
    origin: [f64; 2],
    resolution: f64,
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SignedDistanceField {
    /// Exact Euclidean transform over cell centers.
    ///
    /// A drivable cell stores `dist(nearest non-drivable center) - res/2`; a
    /// non-drivable one stores `-(dist(nearest drivable center) - res/2)`, so
    /// the zero level set sits on the shared cell edges. A grid with no
    /// boundary at all is treated as if surrounded by non-drivable cells.
    pub fn from_grid(grid: &OccupancyGrid) -> Self {
        let (w, h) = (grid.width, grid.height);
        let res = grid.resolution;
        let inside = squared_edt(w, h, |r, c| !grid.get(r, c), true);
        let outside = squared_edt(w, h, |r, c| grid.get(r, c), false);
        let values = (0..w * h)
            .map(|k| {
                let (r, c) = (k / w, k % w);
                if grid.get(r, c) {
                    inside[k].sqrt() * res - 0.5 * res
                } else {
                    -(outside[k].sqrt() * res - 0.5 * res)
                }
            })
            .collect();
        Self {
            origin: grid.origin,
            resolution: res,
            width: w,
            height: h,
            values,
        }
    }

    pub fn at_cell(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Interpolated value and spatial gradient at `(x, y)`.
    ///
    /// Outside the grid the value continues as `min(0, sdf(clamped)) - d_out`
    /// where `d_out` is the distance to the grid rectangle, so any point off
    /// the grid is off-road.
    pub fn sample(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let (min_x, min_y) = (self.origin[0], self.origin[1]);
        let max_x = min_x + self.width as f64 * self.resolution;
        let max_y = min_y + self.height as f64 * self.resolution;
        let cx = x.clamp(min_x, max_x);
        let cy = y.clamp(min_y, max_y);
        let (dx, dy) = (x - cx, y - cy);
        let d_out = dx.hypot(dy);
        let (v, g) = self.bilinear(cx, cy);
        if d_out == 0.0 {
            return (v, g);
        }
        // clamped coordinates do not move with the query point
        let mut grad = [
            if dx == 0.0 { g[0] } else { 0.0 },
            if dy == 0.0 { g[1] } else { 0.0 },
        ];
        let value = if v < 0.0 {
            v
        } else {
            grad = [0.0, 0.0];
            0.0
        };
        grad[0] -= dx / d_out;
        grad[1] -= dy / d_out;
        (value - d_out, grad)
    }

    fn bilinear(&self, x: f64, y: f64) -> (f64, [f64; 2]) {
        let res = self.resolution;
        // continuous coordinates in cell-center units
        let u = (x - self.origin[0]) / res - 0.5;
        let v = (y - self.origin[1]) / res - 0.5;
        let max_c = (self.width - 1) as f64;
        let max_r = (self.height - 1) as f64;
        let (u, du_ok) = clamp_flag(u, max_c);
        let (v, dv_ok) = clamp_flag(v, max_r);
        let c0 = (u.floor() as usize).min(self.width.saturating_sub(2));
        let r0 = (v.floor() as usize).min(self.height.saturating_sub(2));
        let c1 = (c0 + 1).min(self.width - 1);
        let r1 = (r0 + 1).min(self.height - 1);
        let fu = u - c0 as f64;
        let fv = v - r0 as f64;
        let f00 = self.at_cell(r0, c0);
        let f01 = self.at_cell(r0, c1);
        let f10 = self.at_cell(r1, c0);
        let f11 = self.at_cell(r1, c1);
        let value = f00 * (1.0 - fu) * (1.0 - fv)
            + f01 * fu * (1.0 - fv)
            + f10 * (1.0 - fu) * fv
            + f11 * fu * fv;
        let dfu = (f01 - f00) * (1.0 - fv) + (f11 - f10) * fv;
        let dfv = (f10 - f00) * (1.0 - fu) + (f11 - f01) * fu;
        let gx = if du_ok { dfu / res } else { 0.0 };
        let gy = if dv_ok { dfv / res } else { 0.0 };
        (value, [gx, gy])
    }
}

fn clamp_flag(u: f64, max: f64) -> (f64, bool) {
    if u < 0.0 {
        (0.0, false)
    } else if u > max {
        (max, false)
    } else {
        (u, true)
    }
}

/// Squared distance (in cells) from every cell to the nearest cell where
/// `is_target` holds. With no target anywhere, distances are measured to a
/// virtual ring just outside the grid when `border_is_target`, else infinite.
fn squared_edt(
    w: usize,
    h: usize,
    is_target: impl Fn(usize, usize) -> bool,
    border_is_target: bool,
) -> Vec<f64> {
    const INF: f64 = 1e20;
    // pad by one cell so the border ring can act as target
    let (pw, ph) = (w + 2, h + 2);
    let mut f = vec![INF; pw * ph];
    for r in 0..ph {
        for c in 0..pw {
            let border = r == 0 || c == 0 || r == ph - 1 || c == pw - 1;
            let target = if border {
                border_is_target
            } else {
                is_target(r - 1, c - 1)
            };
            if target {
                f[r * pw + c] = 0.0;
            }
        }
    }
    let mut buf = vec![0.0; pw.max(ph)];
    for r in 0..ph {
        let row: Vec<f64> = (0..pw).map(|c| f[r * pw + c]).collect();
        dt_1d(&row, &mut buf[..pw]);
        for c in 0..pw {
            f[r * pw + c] = buf[c];
        }
    }
    for c in 0..pw {
        let col: Vec<f64> = (0..ph).map(|r| f[r * pw + c]).collect();
        dt_1d(&col, &mut buf[..ph]);
        for r in 0..ph {
            f[r * pw + c] = buf[r];
        }
    }
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            out.push(f[(r + 1) * pw + (c + 1)]);
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], d: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let diff = q as f64 - v[k] as f64;
        *out = diff * diff + f[v[k]];
    }
}
