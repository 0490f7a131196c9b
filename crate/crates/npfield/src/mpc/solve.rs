//! Projected-gradient solver with Armijo backtracking, and the outer
//! receding-horizon control loop.

use std::time::Instant;

use crate::gridmap::{Footprint, OccupancyGrid, Pose};
use crate::npnet::PotentialModel;
use crate::planner::GlobalPlan;

use super::{
    cost_gradient, resample_reference, rk4_step, total_cost, Control, DynamicsModel, MpcError,
    ProblemConfig, State, Trajectory, TrajectoryProblem,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIters,
    CostDecrease,
    ProjectedGradient,
    LineSearchStalled,
}

/// Solve diagnostics. `cost_history` holds the accepted cost after every
/// iteration, starting with the initial guess.
#[derive(Debug, Clone)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub termination: Termination,
    pub cost_history: Vec<f64>,
    pub max_velocity_violation: f64,
}

/// Projected-gradient descent on the control sequence: steepest descent with
/// Armijo backtracking, controls clamped to their boxes after every step. The
/// velocity bound is enforced by the smooth hinge inside the cost.
pub fn optimize(
    problem: &TrajectoryProblem,
    initial_guess: &[Control],
) -> Result<(Trajectory, OptimizeReport), MpcError> {
    problem.validate()?;
    let cfg = &problem.config;
    let sqp = cfg.sqp;
    let mut u: Vec<Control> = initial_guess.iter().map(|&c| cfg.clamp_control(c)).collect();
    if u.len() != cfg.p {
        return Err(MpcError::ControlLength { got: u.len(), want: cfg.p });
    }

    let (mut cost, mut traj) = total_cost(problem, &u).map_err(|e| match e {
        MpcError::NonFiniteRollout { .. } => MpcError::NonFiniteInitialCost,
        other => other,
    })?;
    if !cost.is_finite() {
        return Err(MpcError::NonFiniteInitialCost);
    }

    let mut history = vec![cost];
    let mut alpha = sqp.initial_step;
    let mut last_decrease = f64::MAX;
    let mut iterations = 0;
    let mut termination = Termination::MaxIters;

    for _ in 0..sqp.max_iters {
        if last_decrease < sqp.tol {
            termination = Termination::CostDecrease;
            break;
        }
        let grad = cost_gradient(problem, &u)?;

        // projected-gradient stationarity measure at unit step
        let mut pg_norm_sq = 0.0;
        for (ui, gi) in u.iter().zip(&grad) {
            let proj = cfg.clamp_control([ui[0] - gi[0], ui[1] - gi[1]]);
            pg_norm_sq += (proj[0] - ui[0]).powi(2) + (proj[1] - ui[1]).powi(2);
        }
        if pg_norm_sq.sqrt() < sqp.tol {
            termination = Termination::ProjectedGradient;
            break;
        }

        let mut accepted = false;
        for _ in 0..sqp.max_backtracks {
            let candidate: Vec<Control> = u
                .iter()
                .zip(&grad)
                .map(|(ui, gi)| cfg.clamp_control([ui[0] - alpha * gi[0], ui[1] - alpha * gi[1]]))
                .collect();
            // predicted decrease of the projected step (non-negative)
            let mut pred = 0.0;
            for ((ui, ci), gi) in u.iter().zip(&candidate).zip(&grad) {
                pred += gi[0] * (ui[0] - ci[0]) + gi[1] * (ui[1] - ci[1]);
            }
            if pred <= 0.0 {
                // the projection absorbed the whole step
                break;
            }
            match total_cost(problem, &candidate) {
                Ok((c_new, t_new)) if c_new.is_finite() && c_new <= cost - sqp.c1 * pred => {
                    last_decrease = (cost - c_new) / cost.abs().max(1e-12);
                    u = candidate;
                    cost = c_new;
                    traj = t_new;
                    accepted = true;
                    break;
                }
                _ => alpha *= sqp.backtrack,
            }
        }
        if !accepted {
            termination = Termination::LineSearchStalled;
            break;
        }
        iterations += 1;
        history.push(cost);
        alpha = (alpha * sqp.step_growth).min(sqp.max_step);
    }

    let max_violation = traj
        .states
        .iter()
        .map(|s| (s.v - cfg.v_bounds.1).max(cfg.v_bounds.0 - s.v).max(0.0))
        .fold(0.0f64, f64::max);

    Ok((traj, OptimizeReport { iterations, termination, cost_history: history, max_velocity_violation: max_violation }))
}

/// Settings of the outer control loop.
#[derive(Debug, Clone)]
pub struct RecedingConfig {
    pub problem: ProblemConfig,
    pub model: DynamicsModel,
    /// Reference speed used to resample the global plan.
    pub v_ref: f64,
    /// Stop when within this distance of the goal (m).
    pub goal_tolerance: f64,
    /// Outer-loop budget (number of solves).
    pub max_windows: usize,
}

impl Default for RecedingConfig {
    fn default() -> Self {
        Self {
            problem: ProblemConfig::default(),
            model: DynamicsModel::DiffDrive,
            v_ref: 0.5,
            goal_tolerance: 0.1,
            max_windows: 400,
        }
    }
}

/// Per-window diagnostics, enough to reproduce the solve.
#[derive(Debug, Clone)]
pub struct WindowReport {
    pub window: usize,
    pub ref_start: usize,
    pub x0: State,
    pub reference: Vec<State>,
    pub warm_start: Vec<Control>,
    pub controls: Vec<Control>,
    pub iterations: usize,
    pub cost: f64,
    /// Corner of the local map crop used for this window (row, col), in cells
    /// of the full map.
    pub crop_corner: (i64, i64),
}

/// Closed-loop execution result. `states` has one entry per applied control
/// plus the start state; stage costs are the executed tracking/effort/obstacle
/// terms.
#[derive(Debug, Clone)]
pub struct ExecutedRun {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    pub stage_costs: Vec<super::StageCost>,
    pub windows: Vec<WindowReport>,
    pub reached_goal: bool,
    pub dt: f64,
    /// Wall-clock split mirroring the parameter-definition vs solver phases.
    pub encode_seconds: f64,
    pub solve_seconds: f64,
}

/// Run the receding-horizon loop along a global plan: window the reference,
/// encode the sliding local map once per iteration, optimize, apply the first
/// `m` controls through the same integrator, and warm-start the next solve by
/// shifting the previous solution.
pub fn receding_horizon_run(
    map: &OccupancyGrid,
    fp: &Footprint,
    net: &PotentialModel,
    plan: &GlobalPlan,
    start: Pose,
    cfg: &RecedingConfig,
) -> Result<ExecutedRun, MpcError> {
    cfg.problem.validate()?;
    let side = net.config().map_side;
    let goal = *plan.waypoints.last().expect("plan has waypoints");
    let full_ref = resample_reference(&plan.waypoints, cfg.v_ref, cfg.problem.dt);

    let mut encode_seconds = 0.0;
    let mut solve_seconds = 0.0;

    let t_enc = Instant::now();
    let e_fp = net.encode_footprint(fp)?;
    encode_seconds += t_enc.elapsed().as_secs_f64();

    let mut state = State::new(start.x, start.y, 0.0, start.theta);
    let mut states = vec![state];
    let mut controls: Vec<Control> = Vec::new();
    let mut stage_costs = Vec::new();
    let mut windows = Vec::new();
    let mut reached_goal = false;
    let mut ref_start = 0usize;
    let mut warm: Vec<Control> = vec![[0.0, 0.0]; cfg.problem.p];

    'outer: for window in 0..cfg.max_windows {
        // monotone nearest-reference progress
        let search_end = (ref_start + 3 * cfg.problem.m).min(full_ref.len() - 1);
        let mut best = ref_start;
        let mut best_d = f64::INFINITY;
        for (k, r) in full_ref.iter().enumerate().take(search_end + 1).skip(ref_start) {
            let d = (r.x - state.x).powi(2) + (r.y - state.y).powi(2);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        ref_start = best;

        let mut reference = Vec::with_capacity(cfg.problem.p);
        for i in 1..=cfg.problem.p {
            let idx = (ref_start + i).min(full_ref.len() - 1);
            reference.push(full_ref[idx]);
        }
        // keep the reference heading near the current state's accumulated one
        let two_pi = 2.0 * std::f64::consts::PI;
        for r in &mut reference {
            while r.theta - state.theta > std::f64::consts::PI {
                r.theta -= two_pi;
            }
            while r.theta - state.theta < -std::f64::consts::PI {
                r.theta += two_pi;
            }
        }

        // sliding local map centered on the robot, padded as occupied outside;
        // when the full map already fits the window, clamp to its bounds so
        // the encoder sees the same raster the model was trained on
        let t_enc = Instant::now();
        let res = map.resolution();
        let center = (
            ((state.y - map.origin().1) / res).floor() as i64,
            ((state.x - map.origin().0) / res).floor() as i64,
        );
        let clamp_corner = |c: i64, dim: usize| {
            if dim >= side {
                c.clamp(0, (dim - side) as i64)
            } else {
                c
            }
        };
        let crop_corner = (
            clamp_corner(center.0 - side as i64 / 2, map.height()),
            clamp_corner(center.1 - side as i64 / 2, map.width()),
        );
        let local = map.crop(crop_corner.0, crop_corner.1, side);
        let e_map = net.encode_map(&local)?;
        encode_seconds += t_enc.elapsed().as_secs_f64();

        let problem = TrajectoryProblem {
            config: cfg.problem.clone(),
            model: cfg.model,
            x0: state,
            reference: reference.clone(),
            net,
            e_map: &e_map,
            e_fp: &e_fp,
        };

        let t_solve = Instant::now();
        let (traj, report) = optimize(&problem, &warm)
            .map_err(|e| MpcError::WindowFailed { window, source: Box::new(e) })?;
        solve_seconds += t_solve.elapsed().as_secs_f64();

        windows.push(WindowReport {
            window,
            ref_start,
            x0: state,
            reference,
            warm_start: warm.clone(),
            controls: traj.controls.clone(),
            iterations: report.iterations,
            cost: *report.cost_history.last().unwrap(),
            crop_corner,
        });

        // apply the control horizon through the same integrator
        for i in 0..cfg.problem.m {
            let u = traj.controls[i];
            state = rk4_step(problem.model, &state, u, cfg.problem.dt);
            states.push(state);
            controls.push(u);
            stage_costs.push(traj.stage_costs[i]);
            if ((state.x - goal.0).powi(2) + (state.y - goal.1).powi(2)).sqrt() < cfg.goal_tolerance {
                reached_goal = true;
                break 'outer;
            }
        }

        // shift warm start
        warm.clear();
        warm.extend_from_slice(&traj.controls[cfg.problem.m.min(traj.controls.len() - 1)..]);
        let pad = *warm.last().unwrap_or(&[0.0, 0.0]);
        while warm.len() < cfg.problem.p {
            warm.push(pad);
        }
    }

    Ok(ExecutedRun {
        states,
        controls,
        stage_costs,
        windows,
        reached_goal,
        dt: cfg.problem.dt,
        encode_seconds,
        solve_seconds,
    })
}
