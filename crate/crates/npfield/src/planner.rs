//! Theta* any-angle global planning over the inflated occupancy grid.
//!
//! Line of sight uses a supercover traversal that touches every cell the
//! segment passes through, including both side cells on exact corner
//! crossings, so diagonal shortcuts can never cut corners.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::field::squared_obstacle_distance_cells;
use crate::gridmap::{OccupancyGrid, Pose};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("start pose is outside the map")]
    StartOutOfBounds,
    #[error("goal pose is outside the map")]
    GoalOutOfBounds,
    #[error("start cell is occupied on the planning grid")]
    StartOccupied,
    #[error("goal cell is occupied on the planning grid")]
    GoalOccupied,
    #[error("no path from start to goal")]
    NoPath,
}

/// Any-angle plan as a polyline of world waypoints. Consecutive waypoints are
/// line-of-sight free on the grid the plan was computed on; the first and last
/// waypoints equal the query start and goal.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPlan {
    pub waypoints: Vec<(f64, f64)>,
    pub total_length: f64,
}

impl GlobalPlan {
    pub fn from_waypoints(waypoints: Vec<(f64, f64)>) -> Self {
        let total_length = waypoints
            .windows(2)
            .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
            .sum();
        Self { waypoints, total_length }
    }

    /// Text export: one `x y` line per waypoint, meters.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &(x, y) in &self.waypoints {
            out.push_str(&format!("{x} {y}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Option<Self> {
        let mut waypoints = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let x = parts.next()?.parse().ok()?;
            let y = parts.next()?.parse().ok()?;
            waypoints.push((x, y));
        }
        if waypoints.is_empty() {
            None
        } else {
            Some(Self::from_waypoints(waypoints))
        }
    }
}

/// Grow obstacles by a metric radius: every free cell whose center lies within
/// `radius` of an obstacle cell center becomes occupied. Computed from the
/// squared distance transform, so the disc is exact.
pub fn inflate(map: &OccupancyGrid, radius: f64) -> OccupancyGrid {
    assert!(radius >= 0.0, "inflation radius must be >= 0");
    let occupied = map.occupied_count();
    if radius == 0.0 || occupied == 0 || occupied == map.width() * map.height() {
        return map.clone();
    }
    let sq = squared_obstacle_distance_cells(map);
    let r_cells_sq = (radius / map.resolution()).powi(2);
    let cells: Vec<bool> = map
        .cells()
        .iter()
        .enumerate()
        .map(|(i, &occ)| occ || (sq[i] as f64) <= r_cells_sq + 1e-9)
        .collect();
    OccupancyGrid::new(map.width(), map.height(), map.resolution(), map.origin(), cells).unwrap()
}

/// Supercover traversal of the segment from `a` to `b` (world coordinates):
/// calls `visit(row, col)` for every in-bounds cell the segment passes through
/// and returns false early when `visit` does. Cells outside the map are
/// reported through the return value of the traversal itself: the function
/// returns `None` if the segment leaves the map.
fn traverse_segment(
    map: &OccupancyGrid,
    a: (f64, f64),
    b: (f64, f64),
    mut visit: impl FnMut(usize, usize) -> bool,
) -> Option<bool> {
    let res = map.resolution();
    let (ox, oy) = map.origin();
    // positions in cell units
    let ax = (a.0 - ox) / res;
    let ay = (a.1 - oy) / res;
    let bx = (b.0 - ox) / res;
    let by = (b.1 - oy) / res;

    let mut cx = ax.floor() as i64;
    let mut cy = ay.floor() as i64;
    let ex = bx.floor() as i64;
    let ey = by.floor() as i64;

    let check = |row: i64, col: i64, visit: &mut dyn FnMut(usize, usize) -> bool| -> Option<bool> {
        if !map.in_bounds(row, col) {
            return None;
        }
        Some(visit(row as usize, col as usize))
    };

    if !check(cy, cx, &mut visit)? {
        return Some(false);
    }

    let dx = bx - ax;
    let dy = by - ay;
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };

    // parameter t to the next vertical / horizontal grid line
    let mut t_max_x = if dx != 0.0 {
        let next = if dx > 0.0 { cx as f64 + 1.0 } else { cx as f64 };
        (next - ax) / dx
    } else {
        f64::INFINITY
    };
    let mut t_max_y = if dy != 0.0 {
        let next = if dy > 0.0 { cy as f64 + 1.0 } else { cy as f64 };
        (next - ay) / dy
    } else {
        f64::INFINITY
    };
    let t_delta_x = if dx != 0.0 { (1.0 / dx).abs() } else { f64::INFINITY };
    let t_delta_y = if dy != 0.0 { (1.0 / dy).abs() } else { f64::INFINITY };

    const CORNER_EPS: f64 = 1e-12;
    while cx != ex || cy != ey {
        if (t_max_x - t_max_y).abs() < CORNER_EPS {
            // exact corner crossing: conservatively touch both side cells
            if !check(cy, cx + step_x, &mut visit)? {
                return Some(false);
            }
            if !check(cy + step_y, cx, &mut visit)? {
                return Some(false);
            }
            cx += step_x;
            cy += step_y;
            t_max_x += t_delta_x;
            t_max_y += t_delta_y;
        } else if t_max_x < t_max_y {
            cx += step_x;
            t_max_x += t_delta_x;
        } else {
            cy += step_y;
            t_max_y += t_delta_y;
        }
        if t_max_x > 1.0 + CORNER_EPS && t_max_y > 1.0 + CORNER_EPS && (cx != ex || cy != ey) {
            // numeric safety: past the segment end without reaching the end
            // cell (can only happen by accumulated rounding on near-axis
            // segments); jump to the end cell.
            cx = ex;
            cy = ey;
        }
        if !check(cy, cx, &mut visit)? {
            return Some(false);
        }
    }
    Some(true)
}

/// True when the segment between two world points stays inside the map and
/// only passes through free cells.
pub fn line_of_sight(map: &OccupancyGrid, a: (f64, f64), b: (f64, f64)) -> bool {
    traverse_segment(map, a, b, |r, c| !map.is_occupied(r, c)).unwrap_or(false)
}

const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq)]
struct OpenNode {
    f: f64,
    h: f64,
    seq: usize,
    cell: (usize, usize),
}

impl Eq for OpenNode {}

impl Ord for OpenNode {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap: order reversed on (f, h, seq) so the pop
        // order is lowest f, then lowest h, then insertion order.
        other
            .f
            .partial_cmp(&self.f)
            .unwrap_or(Ordering::Equal)
            .then(other.h.partial_cmp(&self.h).unwrap_or(Ordering::Equal))
            .then(other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for OpenNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn validate_endpoints(
    map: &OccupancyGrid,
    start: Pose,
    goal: Pose,
) -> Result<((usize, usize), (usize, usize)), PlanError> {
    let s = map.world_to_cell(start.x, start.y).ok_or(PlanError::StartOutOfBounds)?;
    let g = map.world_to_cell(goal.x, goal.y).ok_or(PlanError::GoalOutOfBounds)?;
    if map.is_occupied(s.0, s.1) {
        return Err(PlanError::StartOccupied);
    }
    if map.is_occupied(g.0, g.1) {
        return Err(PlanError::GoalOccupied);
    }
    Ok((s, g))
}

const NEIGHBORS: [(i64, i64, f64); 8] = [
    (-1, 0, 1.0),
    (1, 0, 1.0),
    (0, -1, 1.0),
    (0, 1, 1.0),
    (-1, -1, SQRT2),
    (-1, 1, SQRT2),
    (1, -1, SQRT2),
    (1, 1, SQRT2),
];

/// Theta*: A* over the 8-connected grid where a node's parent may be any
/// ancestor with line of sight, which straightens paths to any angle.
///
/// Expects the already-inflated grid. The returned waypoints start at the
/// query start, pass through cell centers, and end at the query goal.
pub fn theta_star(map: &OccupancyGrid, start: Pose, goal: Pose) -> Result<GlobalPlan, PlanError> {
    let (start_cell, goal_cell) = validate_endpoints(map, start, goal)?;
    let start_xy = (start.x, start.y);
    let goal_xy = (goal.x, goal.y);
    if start_cell == goal_cell {
        let mut waypoints = vec![start_xy];
        if goal_xy != start_xy {
            waypoints.push(goal_xy);
        }
        return Ok(GlobalPlan::from_waypoints(waypoints));
    }

    let (w, h) = (map.width(), map.height());
    let idx = |cell: (usize, usize)| cell.0 * w + cell.1;
    let center = |cell: (usize, usize)| map.cell_center(cell.0, cell.1);
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    // Anchor the metric at the actual query points rather than cell centers.
    let point_of = |cell: (usize, usize)| {
        if cell == start_cell {
            start_xy
        } else if cell == goal_cell {
            goal_xy
        } else {
            center(cell)
        }
    };

    let mut g = vec![f64::INFINITY; w * h];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; w * h];
    let mut closed = vec![false; w * h];
    let mut open = BinaryHeap::new();
    let mut seq = 0usize;

    g[idx(start_cell)] = 0.0;
    parent[idx(start_cell)] = Some(start_cell);
    let h0 = dist(start_xy, goal_xy);
    open.push(OpenNode { f: h0, h: h0, seq, cell: start_cell });

    while let Some(node) = open.pop() {
        let cur = node.cell;
        if closed[idx(cur)] {
            continue;
        }
        closed[idx(cur)] = true;
        if cur == goal_cell {
            break;
        }
        let par = parent[idx(cur)].unwrap_or(cur);
        for &(dr, dc, _) in &NEIGHBORS {
            let nr = cur.0 as i64 + dr;
            let nc = cur.1 as i64 + dc;
            if !map.in_bounds(nr, nc) {
                continue;
            }
            let nb = (nr as usize, nc as usize);
            if map.is_occupied(nb.0, nb.1) || closed[idx(nb)] {
                continue;
            }
            // neighbor steps use the same line-of-sight rule as shortcuts, so
            // diagonal moves through blocked corners are rejected
            let (cand_parent, cand_g) = if line_of_sight(map, point_of(par), point_of(nb)) {
                (par, g[idx(par)] + dist(point_of(par), point_of(nb)))
            } else if line_of_sight(map, point_of(cur), point_of(nb)) {
                (cur, g[idx(cur)] + dist(point_of(cur), point_of(nb)))
            } else {
                continue;
            };
            if cand_g < g[idx(nb)] {
                g[idx(nb)] = cand_g;
                parent[idx(nb)] = Some(cand_parent);
                let hh = dist(point_of(nb), goal_xy);
                seq += 1;
                open.push(OpenNode { f: cand_g + hh, h: hh, seq, cell: nb });
            }
        }
    }

    if !closed[idx(goal_cell)] {
        return Err(PlanError::NoPath);
    }

    let mut cells = vec![goal_cell];
    let mut cur = goal_cell;
    while cur != start_cell {
        cur = parent[idx(cur)].expect("closed node has a parent");
        cells.push(cur);
    }
    cells.reverse();
    let waypoints: Vec<(f64, f64)> = cells.into_iter().map(point_of).collect();
    Ok(GlobalPlan::from_waypoints(waypoints))
}

/// Plain 8-connected A* with the same line-of-sight neighbor rule; used as the
/// length reference that Theta* must not exceed.
pub fn a_star_8(map: &OccupancyGrid, start: Pose, goal: Pose) -> Result<GlobalPlan, PlanError> {
    let (start_cell, goal_cell) = validate_endpoints(map, start, goal)?;
    let start_xy = (start.x, start.y);
    let goal_xy = (goal.x, goal.y);
    if start_cell == goal_cell {
        let mut waypoints = vec![start_xy];
        if goal_xy != start_xy {
            waypoints.push(goal_xy);
        }
        return Ok(GlobalPlan::from_waypoints(waypoints));
    }

    let (w, h) = (map.width(), map.height());
    let idx = |cell: (usize, usize)| cell.0 * w + cell.1;
    let center = |cell: (usize, usize)| map.cell_center(cell.0, cell.1);
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let point_of = |cell: (usize, usize)| {
        if cell == start_cell {
            start_xy
        } else if cell == goal_cell {
            goal_xy
        } else {
            center(cell)
        }
    };

    let mut g = vec![f64::INFINITY; w * h];
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; w * h];
    let mut closed = vec![false; w * h];
    let mut open = BinaryHeap::new();
    let mut seq = 0usize;

    g[idx(start_cell)] = 0.0;
    let h0 = dist(start_xy, goal_xy);
    open.push(OpenNode { f: h0, h: h0, seq, cell: start_cell });

    while let Some(node) = open.pop() {
        let cur = node.cell;
        if closed[idx(cur)] {
            continue;
        }
        closed[idx(cur)] = true;
        if cur == goal_cell {
            break;
        }
        for &(dr, dc, _) in &NEIGHBORS {
            let nr = cur.0 as i64 + dr;
            let nc = cur.1 as i64 + dc;
            if !map.in_bounds(nr, nc) {
                continue;
            }
            let nb = (nr as usize, nc as usize);
            if map.is_occupied(nb.0, nb.1) || closed[idx(nb)] {
                continue;
            }
            if !line_of_sight(map, point_of(cur), point_of(nb)) {
                continue;
            }
            let cand = g[idx(cur)] + dist(point_of(cur), point_of(nb));
            if cand < g[idx(nb)] {
                g[idx(nb)] = cand;
                parent[idx(nb)] = Some(cur);
                let hh = dist(point_of(nb), goal_xy);
                seq += 1;
                open.push(OpenNode { f: cand + hh, h: hh, seq, cell: nb });
            }
        }
    }

    if !closed[idx(goal_cell)] {
        return Err(PlanError::NoPath);
    }

    let mut cells = vec![goal_cell];
    let mut cur = goal_cell;
    while cur != start_cell {
        cur = parent[idx(cur)].expect("closed node has a parent");
        cells.push(cur);
    }
    cells.reverse();
    Ok(GlobalPlan::from_waypoints(cells.into_iter().map(point_of).collect()))
}
