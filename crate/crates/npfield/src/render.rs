//! SVG 1.1 rendering of maps, global plans, and trajectories.
//!
//! World coordinates in meters, y up (the drawing is flipped once at the top
//! group). Map cells are merged into per-row run rectangles, the global plan
//! is a dashed polyline, the optimized trajectory a solid one, and footprint
//! outlines are drawn at every k-th pose.

use crate::gridmap::{Footprint, OccupancyGrid, Pose};
use crate::mpc::State;
use crate::planner::GlobalPlan;

fn fmt(v: f64) -> String {
    // fixed precision keeps output deterministic and compact
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn polyline(points: &[(f64, f64)], style: &str) -> String {
    let coords: Vec<String> = points.iter().map(|&(x, y)| format!("{},{}", fmt(x), fmt(y))).collect();
    format!("  <polyline fill=\"none\" {} points=\"{}\"/>\n", style, coords.join(" "))
}

/// Outline segments of the occupied mask region in the footprint frame:
/// every cell edge not shared with another occupied cell, in meters relative
/// to the anchor.
fn footprint_outline(fp: &Footprint) -> Vec<((f64, f64), (f64, f64))> {
    let res = fp.resolution();
    let (ar, ac) = fp.anchor();
    let mut segs = Vec::new();
    let occupied = |r: i64, c: i64| {
        r >= 0
            && c >= 0
            && (r as usize) < fp.mask_height()
            && (c as usize) < fp.mask_width()
            && fp.is_set(r as usize, c as usize)
    };
    for r in 0..fp.mask_height() as i64 {
        for c in 0..fp.mask_width() as i64 {
            if !occupied(r, c) {
                continue;
            }
            let x0 = (c as f64 - ac) * res;
            let x1 = (c as f64 + 1.0 - ac) * res;
            let y0 = (r as f64 - ar) * res;
            let y1 = (r as f64 + 1.0 - ar) * res;
            if !occupied(r - 1, c) {
                segs.push(((x0, y0), (x1, y0)));
            }
            if !occupied(r + 1, c) {
                segs.push(((x0, y1), (x1, y1)));
            }
            if !occupied(r, c - 1) {
                segs.push(((x0, y0), (x0, y1)));
            }
            if !occupied(r, c + 1) {
                segs.push(((x1, y0), (x1, y1)));
            }
        }
    }
    segs
}

/// Render a scenario view. Any of plan/trajectory/footprint may be omitted;
/// footprint outlines appear at every `every_k`-th trajectory pose.
pub fn render_svg(
    map: &OccupancyGrid,
    plan: Option<&GlobalPlan>,
    trajectory: Option<&[State]>,
    footprint: Option<&Footprint>,
    every_k: usize,
) -> String {
    let (w_m, h_m) = map.extent();
    let (ox, oy) = map.origin();
    let res = map.resolution();
    let px_per_m = 120.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{}\" height=\"{}\" viewBox=\"{} {} {} {}\">\n",
        fmt(w_m * px_per_m),
        fmt(h_m * px_per_m),
        fmt(ox),
        fmt(-oy - h_m),
        fmt(w_m),
        fmt(h_m)
    );
    // flip y so world y points up
    svg.push_str("<g transform=\"scale(1,-1)\">\n");
    svg.push_str(&format!(
        "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#f8f8f5\"/>\n",
        fmt(ox),
        fmt(oy),
        fmt(w_m),
        fmt(h_m)
    ));

    // occupied cells as merged horizontal runs
    for r in 0..map.height() {
        let mut c = 0;
        while c < map.width() {
            if !map.is_occupied(r, c) {
                c += 1;
                continue;
            }
            let start = c;
            while c < map.width() && map.is_occupied(r, c) {
                c += 1;
            }
            svg.push_str(&format!(
                "  <rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#5a5a62\"/>\n",
                fmt(ox + start as f64 * res),
                fmt(oy + r as f64 * res),
                fmt((c - start) as f64 * res),
                fmt(res)
            ));
        }
    }

    if let Some(plan) = plan {
        if plan.waypoints.len() >= 2 {
            svg.push_str(&polyline(
                &plan.waypoints,
                "stroke=\"#2f6fd0\" stroke-width=\"0.03\" stroke-dasharray=\"0.12,0.08\"",
            ));
        }
    }

    if let Some(states) = trajectory {
        let xy: Vec<(f64, f64)> = states.iter().map(|s| (s.x, s.y)).collect();
        if xy.len() >= 2 {
            svg.push_str(&polyline(&xy, "stroke=\"#d04f2f\" stroke-width=\"0.035\""));
        }
        if let Some(fp) = footprint {
            let outline = footprint_outline(fp);
            for (i, s) in states.iter().enumerate() {
                if every_k == 0 || i % every_k != 0 {
                    continue;
                }
                let pose = Pose::new(s.x, s.y, s.theta);
                let (sin, cos) = pose.theta.sin_cos();
                let mut path = String::new();
                for &((x0, y0), (x1, y1)) in &outline {
                    let a = (pose.x + x0 * cos - y0 * sin, pose.y + x0 * sin + y0 * cos);
                    let b = (pose.x + x1 * cos - y1 * sin, pose.y + x1 * sin + y1 * cos);
                    path.push_str(&format!(
                        "M {} {} L {} {} ",
                        fmt(a.0),
                        fmt(a.1),
                        fmt(b.0),
                        fmt(b.1)
                    ));
                }
                svg.push_str(&format!(
                    "  <path fill=\"none\" stroke=\"#3c9d4e\" stroke-width=\"0.015\" d=\"{}\"/>\n",
                    path.trim_end()
                ));
            }
        }
    }

    svg.push_str("</g>\n</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_structure_and_determinism() {
        let mut cells = vec![false; 64];
        cells[9] = true;
        cells[10] = true;
        let map = OccupancyGrid::new(8, 8, 0.1, (0.0, 0.0), cells).unwrap();
        let plan = GlobalPlan::from_waypoints(vec![(0.1, 0.1), (0.7, 0.6)]);
        let states: Vec<State> = (0..8).map(|i| State::new(0.1 + 0.08 * i as f64, 0.1, 0.4, 0.0)).collect();
        let fp = Footprint::new(2, 1, vec![true, true], 0.1, (0.5, 1.0), "bar").unwrap();

        let a = render_svg(&map, Some(&plan), Some(&states), Some(&fp), 3);
        let b = render_svg(&map, Some(&plan), Some(&states), Some(&fp), 3);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\""));
        assert!(a.ends_with("</svg>\n"));
        assert!(a.contains("stroke-dasharray"));
        assert!(a.contains("<path"));
        // the two adjacent obstacle cells merge into one run rectangle
        assert_eq!(a.matches("fill=\"#5a5a62\"").count(), 1);
    }
}
