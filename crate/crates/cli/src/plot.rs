//! SVG rendering of a scene and an optional generated rollout. The first
//! contact of each colliding pair is circled.

use std::fmt::Write as _;

use scenegen::scenario::{Scene, Trajectory};

/// Pixels per meter.
pub const PX_PER_M: f64 = 5.0;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#e377c2", "#8c564b"];

struct Frame {
    min_x: f64,
    max_y: f64,
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.min_x) * PX_PER_M, (self.max_y - y) * PX_PER_M)
    }
}

fn polyline(out: &mut String, f: &Frame, pts: impl Iterator<Item = (f64, f64)>, style: &str) {
    let coords: Vec<String> = pts
        .map(|(x, y)| {
            let (u, v) = f.px(x, y);
            format!("{u:.1},{v:.1}")
        })
        .collect();
    if coords.len() >= 2 {
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" {style}/>"#, coords.join(" "));
    }
}

/// Pixel `(u, v)` maps to world `(min_x + u / 5, max_y - v / 5)`: the image
/// origin is the top-left corner of the drivable grid and north points up.
pub fn render_svg(scene: &Scene, traj: Option<&Trajectory>) -> String {
    let g = &scene.map.drivable;
    let (min_x, min_y, max_x, max_y) = g.bounds();
    let f = Frame { min_x, max_y };
    let (w, h) = ((max_x - min_x) * PX_PER_M, (max_y - min_y) * PX_PER_M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    let _ = writeln!(
        s,
        "<!-- {PX_PER_M} px per meter; pixel (0,0) is world ({min_x}, {max_y}); y grows downward as world y decreases -->"
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#f4f1ea"/>"##);
    let cell = g.resolution * PX_PER_M;
    let _ = writeln!(s, r##"<g fill="#c8c8c8">"##);
    for row in 0..g.height {
        let mut col = 0;
        while col < g.width {
            if !g.get(row, col) {
                col += 1;
                continue;
            }
            let start = col;
            while col < g.width && g.get(row, col) {
                col += 1;
            }
            let (u, _) = f.px(g.origin[0] + start as f64 * g.resolution, 0.0);
            let (_, v) = f.px(0.0, g.origin[1] + (row + 1) as f64 * g.resolution);
            let _ = writeln!(
                s,
                r#"<rect x="{u:.1}" y="{v:.1}" width="{:.1}" height="{cell:.1}"/>"#,
                (col - start) as f64 * cell
            );
        }
    }
    s.push_str("</g>\n");
    for lane in &scene.map.lanes {
        polyline(&mut s, &f, lane.iter().map(|p| (p[0], p[1])), r##"stroke="#ffffff" stroke-width="1" stroke-dasharray="6 4""##);
    }
    for a in &scene.agents {
        polyline(&mut s, &f, a.history.iter().map(|st| (st.x, st.y)), r##"stroke="#808080" stroke-width="2""##);
    }
    let current = scene.current_states();
    if let Some(t) = traj {
        for i in 0..t.num_agents() {
            let color = PALETTE[i % PALETTE.len()];
            polyline(&mut s, &f, t.positions(i).into_iter(), &format!(r#"stroke="{color}" stroke-width="2""#));
        }
        let mut hit = std::collections::BTreeSet::new();
        for row in t.states.iter().skip(1) {
            for i in 0..row.len() {
                for j in (i + 1)..row.len() {
                    let d = (row[i].x - row[j].x).hypot(row[i].y - row[j].y);
                    if d < row[i].radius() + row[j].radius() && hit.insert((i, j)) {
                        let (u, v) = f.px((row[i].x + row[j].x) / 2.0, (row[i].y + row[j].y) / 2.0);
                        let _ = writeln!(s, r##"<circle cx="{u:.1}" cy="{v:.1}" r="6" fill="none" stroke="#000000" stroke-width="2"/>"##);
                    }
                }
            }
        }
    }
    for (i, st) in current.iter().enumerate() {
        let (u, v) = f.px(st.x, st.y);
        let color = if traj.is_some() { PALETTE[i % PALETTE.len()] } else { "#404040" };
        let _ = writeln!(
            s,
            r#"<circle cx="{u:.1}" cy="{v:.1}" r="{:.1}" fill="{color}" fill-opacity="0.6"/>"#,
            st.radius() * PX_PER_M
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-size="10" font-family="sans-serif">{i}</text>"#, u + 6.0, v - 6.0);
    }
    s.push_str("</svg>\n");
    s
}
