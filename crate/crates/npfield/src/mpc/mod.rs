//! Receding-horizon trajectory optimization with the learned potential as the
//! collision cost term.
//!
//! Single shooting: the decision variables are the control sequence, states
//! come from RK4 integration of the chosen dynamics. The stage cost sums
//! quadratic tracking and control-effort terms with the neural potential, and
//! the gradient is exact reverse-mode through the rollout, the cost terms, and
//! the potential's pose gradient (embeddings fixed per optimization).

mod scenario;
mod solve;

pub use scenario::{trajectory_csv, Scenario, ScenarioError};
pub use solve::{
    optimize, receding_horizon_run, ExecutedRun, OptimizeReport, RecedingConfig, Termination,
    WindowReport,
};

use crate::gridmap::Pose;
use crate::npnet::{Embedding, NetError, PotentialModel};

#[derive(Debug, thiserror::Error)]
pub enum MpcError {
    #[error("bad problem config: {0}")]
    BadConfig(String),
    #[error("non-finite state during rollout at step {step}")]
    NonFiniteRollout { step: usize },
    #[error("non-finite cost at the initial guess; re-seed the guess")]
    NonFiniteInitialCost,
    #[error("controls length {got} does not match horizon {want}")]
    ControlLength { got: usize, want: usize },
    #[error("reference length {got} does not match horizon {want}")]
    ReferenceLength { got: usize, want: usize },
    #[error("optimizer failed in control-loop iteration {window}: {source}")]
    WindowFailed {
        window: usize,
        #[source]
        source: Box<MpcError>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Process dynamics selector. Both models share the state
/// (x, y, v, theta); the second control channel is the angular rate for the
/// differential drive and the steering angle for the bicycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DynamicsModel {
    DiffDrive,
    /// `wheelbase` is the bicycle length L in meters.
    Bicycle { wheelbase: f64 },
}

impl DynamicsModel {
    pub fn validate(&self) -> Result<(), MpcError> {
        if let DynamicsModel::Bicycle { wheelbase } = self {
            if !(*wheelbase > 0.0) {
                return Err(MpcError::BadConfig(format!("wheelbase must be > 0, got {wheelbase}")));
            }
        }
        Ok(())
    }
}

/// Robot state: position (m), linear velocity (m/s), heading (rad,
/// accumulated — not wrapped, so tracking errors stay smooth).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub theta: f64,
}

impl State {
    pub fn new(x: f64, y: f64, v: f64, theta: f64) -> Self {
        Self { x, y, v, theta }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.x, self.y, self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.v.is_finite() && self.theta.is_finite()
    }

    fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.v, self.theta]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self { x: a[0], y: a[1], v: a[2], theta: a[3] }
    }
}

/// Control sample: `[a, u2]` where `a` is linear acceleration and `u2` is the
/// angular rate (differential drive) or steering angle (bicycle).
pub type Control = [f64; 2];

/// Line-search and termination settings of the projected-gradient solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Relative cost decrease and projected-gradient norm threshold.
    pub tol: f64,
    /// Armijo sufficient-decrease coefficient.
    pub c1: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    pub initial_step: f64,
    pub step_growth: f64,
    pub max_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 60,
            tol: 1e-4,
            c1: 1e-4,
            backtrack: 0.5,
            max_backtracks: 25,
            initial_step: 0.05,
            step_growth: 1.8,
            max_step: 2.0,
        }
    }
}

/// Horizon, weights, and box bounds of one trajectory problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    /// Prediction horizon (steps).
    pub p: usize,
    /// Control horizon: how many optimized controls are applied per solve.
    pub m: usize,
    pub dt: f64,
    /// State tracking weights (x, y, v, theta).
    pub w_x: [f64; 4],
    /// Control effort weights (a, u2).
    pub w_u: [f64; 2],
    pub v_bounds: (f64, f64),
    pub a_bounds: (f64, f64),
    pub u2_bounds: (f64, f64),
    /// Weight on the neural potential term (the net output already carries
    /// the w1 scale).
    pub w_obstacle: f64,
    /// Weight of the smooth quadratic hinge that enforces the velocity box.
    pub w_vpen: f64,
    pub sqp: SolverConfig,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            p: 30,
            m: 5,
            dt: 0.1,
            w_x: [1.0, 1.0, 0.1, 0.1],
            w_u: [0.05, 0.05],
            v_bounds: (-0.2, 1.0),
            a_bounds: (-1.0, 1.0),
            u2_bounds: (-1.5, 1.5),
            w_obstacle: 1.0,
            w_vpen: 50.0,
            sqp: SolverConfig::default(),
        }
    }
}

impl ProblemConfig {
    pub fn validate(&self) -> Result<(), MpcError> {
        if self.p < 1 || self.m < 1 || self.m > self.p {
            return Err(MpcError::BadConfig(format!("need p >= m >= 1, got p={} m={}", self.p, self.m)));
        }
        if !(self.dt > 0.0) {
            return Err(MpcError::BadConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.w_x.iter().chain(&self.w_u).any(|&w| w < 0.0) || self.w_obstacle < 0.0 || self.w_vpen < 0.0 {
            return Err(MpcError::BadConfig("weights must be >= 0".into()));
        }
        for (name, (lo, hi)) in [
            ("v_bounds", self.v_bounds),
            ("a_bounds", self.a_bounds),
            ("u2_bounds", self.u2_bounds),
        ] {
            if !(lo < hi) {
                return Err(MpcError::BadConfig(format!("{name}: lower bound must be below upper")));
            }
        }
        Ok(())
    }

    pub fn clamp_control(&self, u: Control) -> Control {
        [
            u[0].clamp(self.a_bounds.0, self.a_bounds.1),
            u[1].clamp(self.u2_bounds.0, self.u2_bounds.1),
        ]
    }
}

/// One MPC instance: initial state, per-step reference, dynamics, and the
/// obstacle parameters (net + embeddings) held constant over the solve.
pub struct TrajectoryProblem<'a> {
    pub config: ProblemConfig,
    pub model: DynamicsModel,
    pub x0: State,
    pub reference: Vec<State>,
    pub net: &'a PotentialModel,
    pub e_map: &'a Embedding,
    pub e_fp: &'a Embedding,
}

impl TrajectoryProblem<'_> {
    pub fn validate(&self) -> Result<(), MpcError> {
        self.config.validate()?;
        self.model.validate()?;
        if self.reference.len() != self.config.p {
            return Err(MpcError::ReferenceLength { got: self.reference.len(), want: self.config.p });
        }
        Ok(())
    }
}

/// Per-step cost pieces: quadratic tracking (including the velocity hinge),
/// control effort, and the obstacle potential.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageCost {
    pub tracking: f64,
    pub effort: f64,
    pub obstacle: f64,
}

impl StageCost {
    pub fn total(&self) -> f64 {
        self.tracking + self.effort + self.obstacle
    }
}

/// A rolled-out solution: `states.len() == controls.len() + 1` and the states
/// are exactly the RK4 rollout of the controls from `states[0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub controls: Vec<Control>,
    pub stage_costs: Vec<StageCost>,
}

impl Trajectory {
    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().map(StageCost::total).sum()
    }
}

/// Continuous dynamics of both models.
fn f_dynamics(model: DynamicsModel, s: &State, u: Control) -> [f64; 4] {
    let dtheta = match model {
        DynamicsModel::DiffDrive => u[1],
        DynamicsModel::Bicycle { wheelbase } => s.v / wheelbase * u[1].tan(),
    };
    [s.v * s.theta.cos(), s.v * s.theta.sin(), u[0], dtheta]
}

/// Vector-Jacobian products of the dynamics: given the adjoint of f's output,
/// accumulate adjoints of the state and control inputs.
fn f_vjp(model: DynamicsModel, s: &State, u: Control, g_f: [f64; 4], g_s: &mut [f64; 4], g_u: &mut [f64; 2]) {
    let (sin, cos) = s.theta.sin_cos();
    // d(v cos)/dv, d(v cos)/dtheta; d(v sin)/dv, d(v sin)/dtheta
    g_s[2] += g_f[0] * cos + g_f[1] * sin;
    g_s[3] += g_f[0] * (-s.v * sin) + g_f[1] * (s.v * cos);
    g_u[0] += g_f[2];
    match model {
        DynamicsModel::DiffDrive => {
            g_u[1] += g_f[3];
        }
        DynamicsModel::Bicycle { wheelbase } => {
            let tan = u[1].tan();
            g_s[2] += g_f[3] * tan / wheelbase;
            let sec2 = 1.0 + tan * tan;
            g_u[1] += g_f[3] * s.v / wheelbase * sec2;
        }
    }
}

/// Classical 4-stage Runge-Kutta step of the selected dynamics.
pub fn rk4_step(model: DynamicsModel, s: &State, u: Control, dt: f64) -> State {
    let (next, _) = rk4_step_cached(model, s, u, dt);
    next
}

/// Stage slopes kept for the adjoint pass.
struct Rk4Cache {
    k1: [f64; 4],
    k2: [f64; 4],
    k3: [f64; 4],
}

fn add_scaled(s: &State, k: &[f64; 4], c: f64) -> State {
    State { x: s.x + c * k[0], y: s.y + c * k[1], v: s.v + c * k[2], theta: s.theta + c * k[3] }
}

fn rk4_step_cached(model: DynamicsModel, s: &State, u: Control, dt: f64) -> (State, Rk4Cache) {
    let k1 = f_dynamics(model, s, u);
    let k2 = f_dynamics(model, &add_scaled(s, &k1, dt / 2.0), u);
    let k3 = f_dynamics(model, &add_scaled(s, &k2, dt / 2.0), u);
    let k4 = f_dynamics(model, &add_scaled(s, &k3, dt), u);
    let mut a = s.as_array();
    for i in 0..4 {
        a[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    (State::from_array(a), Rk4Cache { k1, k2, k3 })
}

/// Adjoint of one RK4 step: from the next-state adjoint, accumulate the
/// current-state and control adjoints.
fn rk4_vjp(
    model: DynamicsModel,
    s: &State,
    u: Control,
    dt: f64,
    cache: &Rk4Cache,
    g_next: [f64; 4],
    g_s: &mut [f64; 4],
    g_u: &mut [f64; 2],
) {
    let s2 = add_scaled(s, &cache.k1, dt / 2.0);
    let s3 = add_scaled(s, &cache.k2, dt / 2.0);
    let s4 = add_scaled(s, &cache.k3, dt);

    let scale = |g: [f64; 4], c: f64| [g[0] * c, g[1] * c, g[2] * c, g[3] * c];
    let add = |a: [f64; 4], b: [f64; 4]| [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]];

    let g_k4 = scale(g_next, dt / 6.0);
    let mut g_s4 = [0.0; 4];
    f_vjp(model, &s4, u, g_k4, &mut g_s4, g_u);

    let g_k3 = add(scale(g_next, dt / 3.0), scale(g_s4, dt));
    let mut g_s3 = [0.0; 4];
    f_vjp(model, &s3, u, g_k3, &mut g_s3, g_u);

    let g_k2 = add(scale(g_next, dt / 3.0), scale(g_s3, dt / 2.0));
    let mut g_s2 = [0.0; 4];
    f_vjp(model, &s2, u, g_k2, &mut g_s2, g_u);

    let g_k1 = add(scale(g_next, dt / 6.0), scale(g_s2, dt / 2.0));
    let mut g_s1 = [0.0; 4];
    f_vjp(model, s, u, g_k1, &mut g_s1, g_u);

    for i in 0..4 {
        g_s[i] += g_next[i] + g_s2[i] + g_s3[i] + g_s4[i] + g_s1[i];
    }
}

/// Quadratic hinge keeping v inside its box; C1 and zero inside the bounds.
fn velocity_penalty(v: f64, bounds: (f64, f64), w: f64) -> f64 {
    let over = (v - bounds.1).max(0.0);
    let under = (bounds.0 - v).max(0.0);
    w * (over * over + under * under)
}

fn velocity_penalty_grad(v: f64, bounds: (f64, f64), w: f64) -> f64 {
    let over = (v - bounds.1).max(0.0);
    let under = (bounds.0 - v).max(0.0);
    w * (2.0 * over - 2.0 * under)
}

/// Roll out the controls and sum stage costs over steps 1..=p. Step 0 is the
/// fixed initial state and carries no cost.
pub fn total_cost(problem: &TrajectoryProblem, controls: &[Control]) -> Result<(f64, Trajectory), MpcError> {
    problem.validate()?;
    let cfg = &problem.config;
    if controls.len() != cfg.p {
        return Err(MpcError::ControlLength { got: controls.len(), want: cfg.p });
    }
    let mut states = Vec::with_capacity(cfg.p + 1);
    states.push(problem.x0);
    let mut stage_costs = Vec::with_capacity(cfg.p);
    for i in 1..=cfg.p {
        let u = controls[i - 1];
        let next = rk4_step(problem.model, &states[i - 1], u, cfg.dt);
        if !next.is_finite() {
            return Err(MpcError::NonFiniteRollout { step: i });
        }
        let r = &problem.reference[i - 1];
        let e = [next.x - r.x, next.y - r.y, next.v - r.v, next.theta - r.theta];
        let mut tracking = 0.0;
        for j in 0..4 {
            tracking += cfg.w_x[j] * e[j] * e[j];
        }
        tracking += velocity_penalty(next.v, cfg.v_bounds, cfg.w_vpen);
        let effort = cfg.w_u[0] * u[0] * u[0] + cfg.w_u[1] * u[1] * u[1];
        let obstacle = if cfg.w_obstacle > 0.0 {
            cfg.w_obstacle * problem.net.np_function(problem.e_map, problem.e_fp, next.pose())?
        } else {
            0.0
        };
        stage_costs.push(StageCost { tracking, effort, obstacle });
        states.push(next);
    }
    let traj = Trajectory { states, controls: controls.to_vec(), stage_costs };
    Ok((traj.total_cost(), traj))
}

/// Exact gradient of [`total_cost`] with respect to every control, by the
/// adjoint (reverse) pass through the RK4 rollout and the stage terms.
pub fn cost_gradient(problem: &TrajectoryProblem, controls: &[Control]) -> Result<Vec<Control>, MpcError> {
    problem.validate()?;
    let cfg = &problem.config;
    if controls.len() != cfg.p {
        return Err(MpcError::ControlLength { got: controls.len(), want: cfg.p });
    }

    // forward rollout with caches
    let mut states = Vec::with_capacity(cfg.p + 1);
    states.push(problem.x0);
    let mut caches = Vec::with_capacity(cfg.p);
    for i in 1..=cfg.p {
        let (next, cache) = rk4_step_cached(problem.model, &states[i - 1], controls[i - 1], cfg.dt);
        if !next.is_finite() {
            return Err(MpcError::NonFiniteRollout { step: i });
        }
        states.push(next);
        caches.push(cache);
    }

    let mut grad = vec![[0.0f64; 2]; cfg.p];
    let mut lambda = [0.0f64; 4];
    for i in (1..=cfg.p).rev() {
        let s = &states[i];
        let r = &problem.reference[i - 1];
        // stage cost gradient at state i
        lambda[0] += 2.0 * cfg.w_x[0] * (s.x - r.x);
        lambda[1] += 2.0 * cfg.w_x[1] * (s.y - r.y);
        lambda[2] += 2.0 * cfg.w_x[2] * (s.v - r.v) + velocity_penalty_grad(s.v, cfg.v_bounds, cfg.w_vpen);
        lambda[3] += 2.0 * cfg.w_x[3] * (s.theta - r.theta);
        if cfg.w_obstacle > 0.0 {
            let g = problem.net.np_function_grad(problem.e_map, problem.e_fp, s.pose())?;
            lambda[0] += cfg.w_obstacle * g[0];
            lambda[1] += cfg.w_obstacle * g[1];
            lambda[3] += cfg.w_obstacle * g[2];
        }
        // control effort at u[i-1]
        let u = controls[i - 1];
        grad[i - 1][0] += 2.0 * cfg.w_u[0] * u[0];
        grad[i - 1][1] += 2.0 * cfg.w_u[1] * u[1];
        // through the integration step
        let mut g_s = [0.0; 4];
        let mut g_u = [0.0; 2];
        rk4_vjp(problem.model, &states[i - 1], u, cfg.dt, &caches[i - 1], lambda, &mut g_s, &mut g_u);
        grad[i - 1][0] += g_u[0];
        grad[i - 1][1] += g_u[1];
        lambda = g_s;
    }
    Ok(grad)
}

/// Arc-length resample of a polyline into per-step reference states spaced
/// `v_ref * dt` apart, heading along the segments (unwrapped), `v = v_ref`.
/// The final state is the last waypoint with `v = 0`.
pub fn resample_reference(waypoints: &[(f64, f64)], v_ref: f64, dt: f64) -> Vec<State> {
    assert!(v_ref > 0.0 && dt > 0.0);
    assert!(!waypoints.is_empty());
    if waypoints.len() == 1 {
        return vec![State::new(waypoints[0].0, waypoints[0].1, 0.0, 0.0)];
    }
    let spacing = v_ref * dt;
    let seg_len: Vec<f64> = waypoints
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt())
        .collect();
    let total: f64 = seg_len.iter().sum();
    let n = (total / spacing).ceil() as usize;

    let mut out = Vec::with_capacity(n + 1);
    let mut prev_theta: Option<f64> = None;
    let mut unwrap = |theta: f64| -> f64 {
        let t = match prev_theta {
            None => theta,
            Some(prev) => {
                let mut t = theta;
                while t - prev > std::f64::consts::PI {
                    t -= 2.0 * std::f64::consts::PI;
                }
                while t - prev < -std::f64::consts::PI {
                    t += 2.0 * std::f64::consts::PI;
                }
                t
            }
        };
        prev_theta = Some(t);
        t
    };

    for k in 0..n {
        let target = k as f64 * spacing;
        // locate the segment containing this arc length
        let mut acc = 0.0;
        let mut seg = 0;
        while seg < seg_len.len() - 1 && acc + seg_len[seg] < target {
            acc += seg_len[seg];
            seg += 1;
        }
        let local = if seg_len[seg] > 0.0 { ((target - acc) / seg_len[seg]).min(1.0) } else { 0.0 };
        let (x0, y0) = waypoints[seg];
        let (x1, y1) = waypoints[seg + 1];
        let theta = unwrap((y1 - y0).atan2(x1 - x0));
        out.push(State::new(x0 + local * (x1 - x0), y0 + local * (y1 - y0), v_ref, theta));
    }
    let last = *waypoints.last().unwrap();
    let theta = out.last().map_or(0.0, |s| s.theta);
    out.push(State::new(last.0, last.1, 0.0, theta));
    out
}
