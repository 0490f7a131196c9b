//! Scenario files (key=value text) and the trajectory CSV export.
//!
//! A scenario names the map, footprint, and model files (relative paths are
//! resolved against the scenario file's directory), the start and goal poses,
//! and any config overrides. Unknown keys are rejected so typos cannot
//! silently fall back to defaults.

use std::path::{Path, PathBuf};

use crate::gridmap::Pose;

use super::{DynamicsModel, ExecutedRun, RecedingConfig};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: expected key=value, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("line {line}: bad value for {key}: {value:?}")]
    BadValue { line: usize, key: String, value: String },
    #[error("unknown key {key:?} on line {line}")]
    UnknownKey { line: usize, key: String },
    #[error("missing required key {0:?}")]
    MissingKey(&'static str),
}

/// Parsed scenario: asset paths plus the receding-horizon configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: String,
    pub map_path: PathBuf,
    pub resolution: f64,
    pub footprint_path: PathBuf,
    pub model_path: PathBuf,
    pub start: Pose,
    pub goal: (f64, f64),
    pub inflate_radius: f64,
    pub receding: RecedingConfig,
}

fn parse_floats(value: &str) -> Option<Vec<f64>> {
    let parts: Vec<f64> = value
        .split(|c| c == ',' || c == ' ')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .ok()?;
    Some(parts)
}

impl Scenario {
    /// Parse scenario text. `base` is the directory relative paths resolve
    /// against; `id` labels the scenario in reports.
    pub fn parse(text: &str, base: &Path, id: impl Into<String>) -> Result<Self, ScenarioError> {
        let mut map_path = None;
        let mut resolution = 0.02;
        let mut footprint_path = None;
        let mut model_path = None;
        let mut start = None;
        let mut goal = None;
        let mut inflate_radius = 0.0;
        let mut receding = RecedingConfig::default();
        let mut wheelbase = 0.5;
        let mut bicycle = false;

        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ScenarioError::BadLine { line: ln + 1, text: line.to_string() })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || ScenarioError::BadValue { line: ln + 1, key: key.to_string(), value: value.to_string() };
            let f = |v: &str| v.parse::<f64>().map_err(|_| bad());
            match key {
                "map" => map_path = Some(base.join(value)),
                "resolution" => resolution = f(value)?,
                "footprint" => footprint_path = Some(base.join(value)),
                "model" => model_path = Some(base.join(value)),
                "start" => {
                    let v = parse_floats(value).filter(|v| v.len() == 3).ok_or_else(bad)?;
                    start = Some(Pose::new(v[0], v[1], v[2]));
                }
                "goal" => {
                    let v = parse_floats(value).filter(|v| v.len() >= 2).ok_or_else(bad)?;
                    goal = Some((v[0], v[1]));
                }
                "inflate_radius" => inflate_radius = f(value)?,
                "v_ref" => receding.v_ref = f(value)?,
                "goal_tolerance" => receding.goal_tolerance = f(value)?,
                "max_windows" => {
                    receding.max_windows = value.parse().map_err(|_| bad())?;
                }
                "dynamics" => match value {
                    "diff_drive" => bicycle = false,
                    "bicycle" => bicycle = true,
                    _ => return Err(bad()),
                },
                "wheelbase" => wheelbase = f(value)?,
                "p" => receding.problem.p = value.parse().map_err(|_| bad())?,
                "m" => receding.problem.m = value.parse().map_err(|_| bad())?,
                "dt" => receding.problem.dt = f(value)?,
                "w_x" => {
                    let v = parse_floats(value).filter(|v| v.len() == 4).ok_or_else(bad)?;
                    receding.problem.w_x = [v[0], v[1], v[2], v[3]];
                }
                "w_u" => {
                    let v = parse_floats(value).filter(|v| v.len() == 2).ok_or_else(bad)?;
                    receding.problem.w_u = [v[0], v[1]];
                }
                "v_bounds" => {
                    let v = parse_floats(value).filter(|v| v.len() == 2).ok_or_else(bad)?;
                    receding.problem.v_bounds = (v[0], v[1]);
                }
                "a_bounds" => {
                    let v = parse_floats(value).filter(|v| v.len() == 2).ok_or_else(bad)?;
                    receding.problem.a_bounds = (v[0], v[1]);
                }
                "u2_bounds" => {
                    let v = parse_floats(value).filter(|v| v.len() == 2).ok_or_else(bad)?;
                    receding.problem.u2_bounds = (v[0], v[1]);
                }
                "w_obstacle" => receding.problem.w_obstacle = f(value)?,
                "w_vpen" => receding.problem.w_vpen = f(value)?,
                "max_iters" => receding.problem.sqp.max_iters = value.parse().map_err(|_| bad())?,
                "tol" => receding.problem.sqp.tol = f(value)?,
                "initial_step" => receding.problem.sqp.initial_step = f(value)?,
                other => return Err(ScenarioError::UnknownKey { line: ln + 1, key: other.to_string() }),
            }
        }

        receding.model = if bicycle { DynamicsModel::Bicycle { wheelbase } } else { DynamicsModel::DiffDrive };
        Ok(Scenario {
            id: id.into(),
            map_path: map_path.ok_or(ScenarioError::MissingKey("map"))?,
            resolution,
            footprint_path: footprint_path.ok_or(ScenarioError::MissingKey("footprint"))?,
            model_path: model_path.ok_or(ScenarioError::MissingKey("model"))?,
            start: start.ok_or(ScenarioError::MissingKey("start"))?,
            goal: goal.ok_or(ScenarioError::MissingKey("goal"))?,
            inflate_radius,
            receding,
        })
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::parse(&text, base, id)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
    }
}

/// Executed-trajectory CSV: `t,x,y,v,theta,a,u2,J_s,J_o`, one row per state.
/// Controls and stage costs sit on the row of the state they were applied at;
/// the final state row carries zeros.
pub fn trajectory_csv(run: &ExecutedRun) -> String {
    let mut out = String::from("t,x,y,v,theta,a,u2,J_s,J_o\n");
    for (i, s) in run.states.iter().enumerate() {
        let (a, u2, js, jo) = if i < run.controls.len() {
            let c = run.controls[i];
            let sc = run.stage_costs[i];
            (c[0], c[1], sc.tracking + sc.effort, sc.obstacle)
        } else {
            (0.0, 0.0, 0.0, 0.0)
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i as f64 * run.dt,
            s.x,
            s.y,
            s.v,
            s.theta,
            a,
            u2,
            js,
            jo
        ));
    }
    out
}
