//! Scenario runner and the metric suite: time, length, smoothness,
//! angle-over-length, and the SDF-based safety distance.
//!
//! Safety is always scored against the algorithmic signed distance field, not
//! the learned potential, so the planner cannot grade itself.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::field::{signed_distance, FieldError, SdfGrid};
use crate::gridmap::{parse_footprint, parse_movingai, project_footprint, Footprint, OccupancyGrid, Pose};
use crate::mpc::{receding_horizon_run, resample_reference, Scenario, State};
use crate::npnet::load_model;
use crate::planner::{inflate, theta_star, GlobalPlan};
use crate::render::render_svg;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("trajectory needs at least {need} states, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("zero-length path")]
    ZeroLength,
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Metrics of one (planner, scenario) run. `safety_distance_m` may be negative
/// (collision) or -inf (left the map); `success` is false in either case.
#[derive(Debug, Clone)]
pub struct MetricsRecord {
    pub planner_id: String,
    pub scenario_id: String,
    pub success: bool,
    pub time_s: f64,
    pub encode_s: f64,
    pub solve_s: f64,
    pub length_m: f64,
    pub smoothness: f64,
    pub aol: f64,
    pub safety_distance_m: f64,
}

pub fn states_xy(states: &[State]) -> Vec<(f64, f64)> {
    states.iter().map(|s| (s.x, s.y)).collect()
}

/// Sum of Euclidean segment lengths.
pub fn path_length(states: &[State]) -> Result<f64, BenchError> {
    if states.len() < 2 {
        return Err(BenchError::TooShort { need: 2, got: states.len() });
    }
    Ok(path_length_xy(&states_xy(states)))
}

pub fn path_length_xy(xy: &[(f64, f64)]) -> f64 {
    xy.windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .sum()
}

/// Heading of every non-degenerate segment.
fn segment_headings(xy: &[(f64, f64)]) -> Vec<f64> {
    xy.windows(2)
        .filter(|w| w[1] != w[0])
        .map(|w| (w[1].1 - w[0].1).atan2(w[1].0 - w[0].0))
        .collect()
}

/// Heading changes between consecutive segments, wrapped to (-pi, pi].
fn heading_changes(xy: &[(f64, f64)]) -> Vec<f64> {
    segment_headings(xy)
        .windows(2)
        .map(|w| crate::gridmap::normalize_angle(w[1] - w[0]))
        .collect()
}

/// Total absolute heading change divided by path length (rad/m).
pub fn angle_over_length(states: &[State]) -> Result<f64, BenchError> {
    if states.len() < 3 {
        return Err(BenchError::TooShort { need: 3, got: states.len() });
    }
    let xy = states_xy(states);
    let length = path_length_xy(&xy);
    if length == 0.0 {
        return Err(BenchError::ZeroLength);
    }
    Ok(heading_changes(&xy).iter().map(|d| d.abs()).sum::<f64>() / length)
}

/// Normalized sum of squared differences of consecutive heading changes:
/// zero for straight lines and constant-curvature arcs, positive for kinks.
pub fn smoothness(states: &[State]) -> Result<f64, BenchError> {
    if states.len() < 3 {
        return Err(BenchError::TooShort { need: 3, got: states.len() });
    }
    let xy = states_xy(states);
    if path_length_xy(&xy) == 0.0 {
        return Err(BenchError::ZeroLength);
    }
    Ok(smoothness_xy(&xy))
}

fn smoothness_xy(xy: &[(f64, f64)]) -> f64 {
    let changes = heading_changes(xy);
    let segments = segment_headings(xy).len().max(1);
    changes.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / segments as f64
}

/// Minimum ground-truth SDF over the projected footprint along the poses.
/// A pose whose coverage leaves the map scores -inf.
pub fn safety_distance(
    poses: &[Pose],
    map: &OccupancyGrid,
    fp: &Footprint,
    sdf: &SdfGrid,
) -> Result<f64, BenchError> {
    let mut min_sdf = f64::INFINITY;
    for &pose in poses {
        let coverage = project_footprint(map, fp, pose).map_err(FieldError::from)?;
        if coverage.out_of_bounds > 0 || coverage.cells.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        for &(r, c) in &coverage.cells {
            min_sdf = min_sdf.min(sdf.value(r, c));
        }
    }
    Ok(min_sdf)
}

/// Which pipeline produces the scored trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerKind {
    /// The raw Theta* polyline resampled and followed open-loop.
    ThetaStar,
    /// Theta* reference followed by the receding-horizon optimizer with the
    /// neural potential.
    NpfieldMpc,
}

impl PlannerKind {
    pub fn id(&self) -> &'static str {
        match self {
            PlannerKind::ThetaStar => "theta_star",
            PlannerKind::NpfieldMpc => "npfield",
        }
    }

    pub fn from_id(id: &str) -> Option<Self> {
        match id {
            "theta_star" => Some(PlannerKind::ThetaStar),
            "npfield" => Some(PlannerKind::NpfieldMpc),
            _ => None,
        }
    }
}

fn failure_record(planner: PlannerKind, scenario_id: &str, time_s: f64) -> MetricsRecord {
    MetricsRecord {
        planner_id: planner.id().to_string(),
        scenario_id: scenario_id.to_string(),
        success: false,
        time_s,
        encode_s: 0.0,
        solve_s: 0.0,
        length_m: f64::NAN,
        smoothness: f64::NAN,
        aol: f64::NAN,
        safety_distance_m: f64::NAN,
    }
}

/// Everything produced by one scenario run, for reports and rendering.
pub struct ScenarioOutcome {
    pub record: MetricsRecord,
    pub map: OccupancyGrid,
    pub footprint: Footprint,
    pub plan: Option<GlobalPlan>,
    pub states: Option<Vec<State>>,
}

/// Execute one scenario under one planner.
pub fn run_scenario(scenario: &Scenario, planner: PlannerKind) -> Result<ScenarioOutcome, BenchError> {
    let start_wall = Instant::now();
    let map_text = std::fs::read_to_string(&scenario.map_path)?;
    let map = parse_movingai(&map_text, scenario.resolution)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let fp_text = std::fs::read_to_string(&scenario.footprint_path)?;
    let fp_id = scenario
        .footprint_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let footprint = parse_footprint(&fp_text, fp_id)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let sdf = signed_distance(&map)?;

    let inflated = inflate(&map, scenario.inflate_radius);
    let goal_pose = Pose::new(scenario.goal.0, scenario.goal.1, 0.0);
    let plan = match theta_star(&inflated, scenario.start, goal_pose) {
        Ok(p) => p,
        Err(_) => {
            return Ok(ScenarioOutcome {
                record: failure_record(planner, &scenario.id, start_wall.elapsed().as_secs_f64()),
                map,
                footprint,
                plan: None,
                states: None,
            })
        }
    };

    let (states, encode_s, solve_s, completed) = match planner {
        PlannerKind::ThetaStar => {
            let refs = resample_reference(&plan.waypoints, scenario.receding.v_ref, scenario.receding.problem.dt);
            (refs, 0.0, start_wall.elapsed().as_secs_f64(), true)
        }
        PlannerKind::NpfieldMpc => {
            let net = load_model(&scenario.model_path)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
            match receding_horizon_run(&map, &footprint, &net, &plan, scenario.start, &scenario.receding) {
                Ok(run) => (run.states, run.encode_seconds, run.solve_seconds, run.reached_goal),
                Err(_) => {
                    return Ok(ScenarioOutcome {
                        record: failure_record(planner, &scenario.id, start_wall.elapsed().as_secs_f64()),
                        map,
                        footprint,
                        plan: Some(plan),
                        states: None,
                    })
                }
            }
        }
    };

    let poses: Vec<Pose> = states.iter().map(|s| s.pose()).collect();
    let safety = safety_distance(&poses, &map, &footprint, &sdf)?;
    let record = MetricsRecord {
        planner_id: planner.id().to_string(),
        scenario_id: scenario.id.clone(),
        success: completed && safety > 0.0,
        time_s: start_wall.elapsed().as_secs_f64(),
        encode_s,
        solve_s,
        length_m: path_length(&states).unwrap_or(f64::NAN),
        smoothness: smoothness(&states).unwrap_or(f64::NAN),
        aol: angle_over_length(&states).unwrap_or(f64::NAN),
        safety_distance_m: safety,
    };
    Ok(ScenarioOutcome { record, map, footprint, plan: Some(plan), states: Some(states) })
}

pub const SUITE_CSV_HEADER: &str =
    "planner_id,scenario_id,success,time_s,encode_s,solve_s,length_m,smoothness,aol,safety_distance_m";

pub fn records_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(SUITE_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{},{},{},{}\n",
            r.planner_id,
            r.scenario_id,
            r.success,
            r.time_s,
            r.encode_s,
            r.solve_s,
            r.length_m,
            r.smoothness,
            r.aol,
            r.safety_distance_m
        ));
    }
    out
}

/// Parse a suite manifest: one scenario path per line (relative to the
/// manifest directory), `#` comments allowed.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>, std::io::Error> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect())
}

/// Run every scenario under every planner. Scenarios run in parallel; the
/// record order is (scenario, planner) in input order regardless of the worker
/// count. When `out_dir` is given, writes `suite.csv` and one SVG per run.
pub fn run_suite(
    scenario_paths: &[PathBuf],
    planners: &[PlannerKind],
    out_dir: Option<&Path>,
) -> Result<Vec<MetricsRecord>, BenchError> {
    let jobs: Vec<(&PathBuf, PlannerKind)> = scenario_paths
        .iter()
        .flat_map(|p| planners.iter().map(move |&k| (p, k)))
        .collect();

    let outcomes: Vec<(MetricsRecord, Option<(String, String)>)> = jobs
        .par_iter()
        .map(|&(path, planner)| {
            let scenario = match Scenario::load(path) {
                Ok(s) => s,
                Err(_) => {
                    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    return (failure_record(planner, &id, 0.0), None);
                }
            };
            match run_scenario(&scenario, planner) {
                Ok(outcome) => {
                    let svg = outcome.states.as_ref().map(|states| {
                        (
                            format!("{}_{}.svg", scenario.id, planner.id()),
                            render_svg(
                                &outcome.map,
                                outcome.plan.as_ref(),
                                Some(states),
                                Some(&outcome.footprint),
                                10,
                            ),
                        )
                    });
                    (outcome.record, svg)
                }
                Err(_) => (failure_record(planner, &scenario.id, 0.0), None),
            }
        })
        .collect();

    let records: Vec<MetricsRecord> = outcomes.iter().map(|(r, _)| r.clone()).collect();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("suite.csv"), records_to_csv(&records))?;
        for (_, svg) in &outcomes {
            if let Some((name, content)) = svg {
                std::fs::write(dir.join(name), content)?;
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states_of(xy: &[(f64, f64)]) -> Vec<State> {
        xy.iter().map(|&(x, y)| State::new(x, y, 0.0, 0.0)).collect()
    }

    #[test]
    fn path_length_basics() {
        let two = states_of(&[(0.0, 0.0), (1.0, 0.0)]);
        assert_eq!(path_length(&two).unwrap(), 1.0);
        let square = states_of(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.0, 0.0)]);
        assert_eq!(path_length(&square).unwrap(), 4.0);
        assert!(matches!(path_length(&states_of(&[(0.0, 0.0)])), Err(BenchError::TooShort { .. })));
    }

    #[test]
    fn path_length_matches_duplicate_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let xy: Vec<(f64, f64)> = (0..40).map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))).collect();
        let mut want = 0.0;
        for i in 1..xy.len() {
            want += ((xy[i].0 - xy[i - 1].0).powi(2) + (xy[i].1 - xy[i - 1].1).powi(2)).sqrt();
        }
        let got = path_length(&states_of(&xy)).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn aol_straight_and_arc() {
        let straight = states_of(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]);
        assert_eq!(angle_over_length(&straight).unwrap(), 0.0);

        // quarter-circle arc of radius 1 sampled finely: total polyline turn is
        // (n-1)/n of pi/2
        let n = 200;
        let arc: Vec<(f64, f64)> = (0..=n)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 / n as f64;
                (a.sin(), 1.0 - a.cos())
            })
            .collect();
        let arc_states = states_of(&arc);
        let aol = angle_over_length(&arc_states).unwrap();
        let arclen = path_length(&arc_states).unwrap();
        let want = (std::f64::consts::FRAC_PI_2 - std::f64::consts::FRAC_PI_2 / n as f64) / arclen;
        assert!((aol - want).abs() < 1e-9, "aol {aol} vs {want}");
    }

    #[test]
    fn aol_matches_duplicate_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let xy: Vec<(f64, f64)> = (0..30).map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect();
        let mut headings = Vec::new();
        for i in 1..xy.len() {
            headings.push((xy[i].1 - xy[i - 1].1).atan2(xy[i].0 - xy[i - 1].0));
        }
        let mut turn = 0.0;
        for i in 1..headings.len() {
            let mut d = headings[i] - headings[i - 1];
            while d > std::f64::consts::PI {
                d -= 2.0 * std::f64::consts::PI;
            }
            while d <= -std::f64::consts::PI {
                d += 2.0 * std::f64::consts::PI;
            }
            turn += d.abs();
        }
        let mut len = 0.0;
        for i in 1..xy.len() {
            len += ((xy[i].0 - xy[i - 1].0).powi(2) + (xy[i].1 - xy[i - 1].1).powi(2)).sqrt();
        }
        let got = angle_over_length(&states_of(&xy)).unwrap();
        assert!((got - turn / len).abs() < 1e-12);
    }

    #[test]
    fn smoothness_zero_for_lines_and_arcs() {
        let straight = states_of(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]);
        assert_eq!(smoothness(&straight).unwrap(), 0.0);

        let n = 64;
        let arc: Vec<(f64, f64)> = (0..=n)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64 / n as f64;
                (a.sin(), 1.0 - a.cos())
            })
            .collect();
        let s = smoothness(&states_of(&arc)).unwrap();
        assert!(s < 1e-20, "constant-curvature smoothness {s}");

        let kinked = states_of(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (2.0, 1.0), (2.0, 2.0)]);
        assert!(smoothness(&kinked).unwrap() > 0.0);
    }

    #[test]
    fn metrics_invariant_under_rigid_motion() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xy: Vec<(f64, f64)> = (0..20).map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect();
        let (dx, dy, rot) = (1.7, -0.9, 0.83f64);
        let (sin, cos) = rot.sin_cos();
        let moved: Vec<(f64, f64)> = xy.iter().map(|&(x, y)| (x * cos - y * sin + dx, x * sin + y * cos + dy)).collect();
        let a = states_of(&xy);
        let b = states_of(&moved);
        assert!((smoothness(&a).unwrap() - smoothness(&b).unwrap()).abs() < 1e-9);
        assert!((angle_over_length(&a).unwrap() - angle_over_length(&b).unwrap()).abs() < 1e-9);
        assert!((path_length(&a).unwrap() - path_length(&b).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn path_length_at_least_straight_line() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let xy: Vec<(f64, f64)> = (0..10).map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect();
            let direct = ((xy[9].0 - xy[0].0).powi(2) + (xy[9].1 - xy[0].1).powi(2)).sqrt();
            assert!(path_length(&states_of(&xy)).unwrap() >= direct - 1e-12);
        }
    }

    #[test]
    fn safety_distance_point_footprint_reduction() {
        let map = OccupancyGrid::new(8, 8, 0.1, (0.0, 0.0), {
            let mut c = vec![false; 64];
            c[8 + 1] = true; // obstacle at row 1, col 1
            c
        })
        .unwrap();
        let sdf = signed_distance(&map).unwrap();
        let fp = Footprint::new(1, 1, vec![true], 0.1, (0.5, 0.5), "pt").unwrap();
        let poses = vec![Pose::new(0.55, 0.55, 0.0), Pose::new(0.35, 0.15, 0.0)];
        let want = poses
            .iter()
            .map(|p| {
                let (r, c) = map.world_to_cell(p.x, p.y).unwrap();
                sdf.value(r, c)
            })
            .fold(f64::INFINITY, f64::min);
        let got = safety_distance(&poses, &map, &fp, &sdf).unwrap();
        assert_eq!(got, want);

        // overlapping the obstacle is negative
        let hit = safety_distance(&[Pose::new(0.15, 0.15, 0.0)], &map, &fp, &sdf).unwrap();
        assert!(hit < 0.0);

        // leaving the map is -inf
        let out = safety_distance(&[Pose::new(5.0, 5.0, 0.0)], &map, &fp, &sdf).unwrap();
        assert_eq!(out, f64::NEG_INFINITY);
    }

    #[test]
    fn empty_suite_produces_empty_report() {
        let records = run_suite(&[], &[PlannerKind::NpfieldMpc], None).unwrap();
        assert!(records.is_empty());
        assert_eq!(records_to_csv(&records), format!("{SUITE_CSV_HEADER}\n"));
    }
}
