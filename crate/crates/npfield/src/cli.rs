//! Command-line pipeline: dataset generation, training, planning,
//! benchmarking, and rendering.
//!
//! Every subcommand accepts a key=value config file whose entries fill in
//! unset flags (explicit flags win). Unknown config keys are rejected, and
//! every run writes an effective-config snapshot next to its outputs so any
//! result can be reproduced from the snapshot alone.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::bench::{read_manifest, run_suite, PlannerKind};
use crate::field::{
    read_dataset, sample_dataset, stratum_fractions, write_dataset, PotentialGrid, PotentialParams,
};
use crate::gridmap::{parse_footprint, parse_movingai, Footprint, OccupancyGrid, Pose};
use crate::mpc::{receding_horizon_run, trajectory_csv, Scenario, State};
use crate::npnet::{self, load_model, save_model, HyperParams, ModelConfig, PotentialModel};
use crate::planner::{inflate, theta_star, GlobalPlan, PlanError};
use crate::render::render_svg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NO_PATH: i32 = 2;
pub const EXIT_OPTIMIZER: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "npfield", about = "Neural potential field local planning pipeline", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a stratified training set from a map and footprint.
    GenDataset(GenDatasetArgs),
    /// Train the potential model on one or more datasets.
    Train(TrainArgs),
    /// Plan a scenario: Theta* global plan, then the receding-horizon run.
    Plan(PlanArgs),
    /// Run a scenario suite and write the metrics report.
    Bench(BenchArgs),
    /// Re-render an exported trajectory as SVG.
    Render(RenderArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file or directory, subcommand-specific.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// key=value config file supplying defaults for unset flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// MovingAI map file.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Footprint mask file.
    #[arg(long)]
    pub footprint: Option<PathBuf>,
    #[arg(long)]
    pub map_id: Option<u32>,
    #[arg(long)]
    pub footprint_id: Option<u32>,
    /// Map resolution in meters per cell.
    #[arg(long)]
    pub resolution: Option<f64>,
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub w1: Option<f64>,
    #[arg(long)]
    pub w2: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset file(s); repeat for several.
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    /// Map as `id=path` (bare path means id 0); repeat for several.
    #[arg(long = "map")]
    pub maps: Vec<String>,
    /// Footprint as `id=path` (bare path means id 0); repeat for several.
    #[arg(long = "footprint")]
    pub footprints: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lambda_recon: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Learning-rate warmup epochs before the cosine decay.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Hold out roughly one in k samples for validation (0 disables).
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Resume from a saved model instead of initializing fresh.
    #[arg(long)]
    pub init_model: Option<PathBuf>,
    #[arg(long)]
    pub map_side: Option<usize>,
    /// Map resolution in meters per cell.
    #[arg(long)]
    pub resolution: Option<f64>,
    /// Where to write the per-epoch loss CSV.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Scenario file.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Export only the Theta* polyline, skipping the optimizer.
    #[arg(long)]
    pub skip_mpc: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Suite manifest: one scenario path per line.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Comma-separated planner ids: npfield, theta_star.
    #[arg(long)]
    pub planners: Option<String>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[arg(long)]
    pub resolution: Option<f64>,
    /// Trajectory CSV produced by `plan`.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Plan polyline text file.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub footprint: Option<PathBuf>,
    /// Draw the footprint outline at every k-th pose.
    #[arg(long)]
    pub every_k: Option<usize>,
}

/// key=value config file with used-key tracking, so leftovers are rejected.
struct ConfigFile {
    values: BTreeMap<String, String>,
    used: std::cell::RefCell<Vec<String>>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).with_context(|| format!("config file {}", path.display()))?;
            for (ln, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), ln + 1))?;
                values.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Self { values, used: Default::default() })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => {
                self.used.borrow_mut().push(key.to_string());
                v.parse::<T>()
                    .map(Some)
                    .map_err(|_| anyhow!("config key {key}: cannot parse {v:?}"))
            }
        }
    }

    fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        for key in self.values.keys() {
            if !used.iter().any(|u| u == key) {
                bail!("unknown config key {key:?}");
            }
        }
        Ok(())
    }
}

/// Snapshot of the resolved settings, written next to the outputs.
struct Effective {
    entries: BTreeMap<String, String>,
}

impl Effective {
    fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}={v}\n"));
        }
        fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn init_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        // a second build_global in the same process is a no-op
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn load_map(path: &Path, resolution: f64) -> Result<OccupancyGrid> {
    let text = fs::read_to_string(path).with_context(|| format!("map file {}", path.display()))?;
    parse_movingai(&text, resolution).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn load_footprint(path: &Path) -> Result<Footprint> {
    let text = fs::read_to_string(path).with_context(|| format!("footprint file {}", path.display()))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_footprint(&text, id).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn parse_id_path(spec: &str) -> (u32, PathBuf) {
    match spec.split_once('=') {
        Some((id, path)) => match id.parse::<u32>() {
            Ok(id) => (id, PathBuf::from(path)),
            Err(_) => (0, PathBuf::from(spec)),
        },
        None => (0, PathBuf::from(spec)),
    }
}

pub fn cmd_gen_dataset(args: &GenDatasetArgs) -> Result<i32> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    init_threads(args.common.threads.or(cfg.get("threads")?));

    let map_path: PathBuf = args
        .map
        .clone()
        .or(cfg.get::<PathBuf>("map")?)
        .ok_or_else(|| anyhow!("--map is required"))?;
    let fp_path: PathBuf = args
        .footprint
        .clone()
        .or(cfg.get::<PathBuf>("footprint")?)
        .ok_or_else(|| anyhow!("--footprint is required"))?;
    let map_id = args.map_id.or(cfg.get("map_id")?).unwrap_or(0);
    let footprint_id = args.footprint_id.or(cfg.get("footprint_id")?).unwrap_or(0);
    let resolution = args.resolution.or(cfg.get("resolution")?).unwrap_or(0.02);
    let n = args.n.or(cfg.get("n")?).unwrap_or(10_000);
    let seed = args.common.seed.or(cfg.get("seed")?).unwrap_or(0);
    let w1 = args.w1.or(cfg.get("w1")?).unwrap_or(15.0);
    let w2 = args.w2.or(cfg.get("w2")?).unwrap_or(10.0);
    let out = args
        .common
        .out
        .clone()
        .or(cfg.get::<PathBuf>("out")?)
        .unwrap_or_else(|| PathBuf::from("dataset.npds"));
    cfg.reject_unknown()?;

    let map = load_map(&map_path, resolution)?;
    let fp = load_footprint(&fp_path)?;
    let params = PotentialParams::new(w1, w2);
    let pg = PotentialGrid::from_map(&map, params)?;
    let samples = sample_dataset(&map, &fp, &pg, map_id, footprint_id, n, seed)?;

    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut w = BufWriter::new(fs::File::create(&out)?);
    write_dataset(&mut w, &samples, params)?;
    drop(w);

    let (low, mid, high) = stratum_fractions(&samples, params);
    let mut stats = format!(
        "samples={}\nstratum_low={low:.4}\nstratum_mid={mid:.4}\nstratum_high={high:.4}\nhistogram (20 bins over (0, w1*pi]):\n",
        samples.len()
    );
    let mut bins = [0usize; 20];
    for s in &samples {
        let b = ((s.target / params.max_potential()) * 20.0).floor().min(19.0).max(0.0) as usize;
        bins[b] += 1;
    }
    for (i, count) in bins.iter().enumerate() {
        stats.push_str(&format!(
            "  [{:5.2},{:5.2}) {}\n",
            i as f64 / 20.0 * params.max_potential(),
            (i + 1) as f64 / 20.0 * params.max_potential(),
            count
        ));
    }
    print!("{stats}");
    fs::write(out.with_extension("stats.txt"), &stats)?;

    let mut eff = Effective::new();
    eff.set("command", "gen-dataset");
    eff.set("map", map_path.display());
    eff.set("footprint", fp_path.display());
    eff.set("map_id", map_id);
    eff.set("footprint_id", footprint_id);
    eff.set("resolution", resolution);
    eff.set("n", n);
    eff.set("seed", seed);
    eff.set("w1", w1);
    eff.set("w2", w2);
    eff.set("out", out.display());
    eff.write(&out.with_extension("effective-config.txt"))?;
    Ok(EXIT_OK)
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    init_threads(args.common.threads.or(cfg.get("threads")?));

    let mut dataset_paths = args.datasets.clone();
    if dataset_paths.is_empty() {
        if let Some(d) = cfg.get::<PathBuf>("dataset")? {
            dataset_paths.push(d);
        }
    }
    if dataset_paths.is_empty() {
        bail!("--dataset is required");
    }
    let mut map_specs = args.maps.clone();
    if map_specs.is_empty() {
        if let Some(m) = cfg.get::<String>("map")? {
            map_specs.push(m);
        }
    }
    let mut fp_specs = args.footprints.clone();
    if fp_specs.is_empty() {
        if let Some(f) = cfg.get::<String>("footprint")? {
            fp_specs.push(f);
        }
    }
    if map_specs.is_empty() || fp_specs.is_empty() {
        bail!("--map and --footprint are required (id=path)");
    }

    let seed = args.common.seed.or(cfg.get("seed")?).unwrap_or(0);
    let hyper = HyperParams {
        lr: args.lr.or(cfg.get("lr")?).unwrap_or(0.04),
        batch: args.batch.or(cfg.get("batch")?).unwrap_or(64),
        epochs: args.epochs.or(cfg.get("epochs")?).unwrap_or(50),
        warmup_epochs: args.warmup_epochs.or(cfg.get("warmup_epochs")?).unwrap_or(10),
        lambda_recon: args.lambda_recon.or(cfg.get("lambda_recon")?).unwrap_or(0.1),
        momentum: args.momentum.or(cfg.get("momentum")?).unwrap_or(0.9),
        seed,
        val_every: args.val_every.or(cfg.get("val_every")?).unwrap_or(10),
    };
    let map_side = args.map_side.or(cfg.get("map_side")?).unwrap_or(64);
    let init_model = args.init_model.clone().or(cfg.get::<PathBuf>("init_model")?);
    let out = args
        .common
        .out
        .clone()
        .or(cfg.get::<PathBuf>("out")?)
        .unwrap_or_else(|| PathBuf::from("model.npfm"));
    let loss_csv = args
        .loss_csv
        .clone()
        .or(cfg.get::<PathBuf>("loss_csv")?)
        .unwrap_or_else(|| out.with_extension("loss.csv"));
    let resolution: f64 = args.resolution.or(cfg.get("resolution")?).unwrap_or(0.02);
    cfg.reject_unknown()?;

    // datasets must agree on the potential weights
    let mut samples = Vec::new();
    let mut params: Option<PotentialParams> = None;
    for path in &dataset_paths {
        let mut r = BufReader::new(fs::File::open(path).with_context(|| format!("dataset {}", path.display()))?);
        let (part, p) = read_dataset(&mut r).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        match params {
            None => params = Some(p),
            Some(prev) if prev == p => {}
            Some(prev) => bail!(
                "dataset {} has weights w1={} w2={}, expected w1={} w2={}",
                path.display(),
                p.w1,
                p.w2,
                prev.w1,
                prev.w2
            ),
        }
        samples.extend(part);
    }
    let params = params.unwrap();

    // resolve rasters; the map frame comes from the dataset's sampling extent,
    // so a resample keeps world geometry while matching the encoder side
    let mut maps = Vec::new();
    for spec in &map_specs {
        let (id, path) = parse_id_path(spec);
        let mut map = load_map(&path, resolution)?;
        if map.width() != map_side || map.height() != map_side {
            println!(
                "note: resampling map {} from {}x{} to {map_side}x{map_side}",
                path.display(),
                map.width(),
                map.height()
            );
            map = map.resample_to(map_side);
        }
        maps.push((id, map));
    }
    let mut footprints = Vec::new();
    for spec in &fp_specs {
        let (id, path) = parse_id_path(spec);
        footprints.push((id, load_footprint(&path)?));
    }

    let mut model = match &init_model {
        Some(path) => {
            let m = load_model(path).map_err(|e| anyhow!("{}: {e}", path.display()))?;
            if (m.config().potential_scale - params.max_potential()).abs() > 1e-9 {
                bail!(
                    "model scale {} does not match dataset w1*pi = {}",
                    m.config().potential_scale,
                    params.max_potential()
                );
            }
            m
        }
        None => {
            let config = ModelConfig {
                map_side,
                seed,
                potential_scale: params.max_potential(),
                ..ModelConfig::default()
            };
            PotentialModel::new(config)?
        }
    };

    let history = if hyper.epochs > 0 {
        npnet::train(&mut model, &samples, &maps, &footprints, &hyper)?
    } else {
        Vec::new()
    };

    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    save_model(&out, &model)?;

    let mut csv = String::from("epoch,train_mse,train_recon,val_mse\n");
    for e in &history {
        csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_mse, e.train_recon, e.val_mse));
    }
    fs::write(&loss_csv, csv)?;

    if let Some(last) = history.last() {
        println!(
            "trained {} epochs: train MSE {:.6}, val MSE {:.6} (raw potential units)",
            history.len(),
            last.train_mse,
            last.val_mse
        );
    } else {
        println!("wrote initialized model without training (epochs=0)");
    }

    let mut eff = Effective::new();
    eff.set("command", "train");
    for (i, d) in dataset_paths.iter().enumerate() {
        eff.set(&format!("dataset.{i}"), d.display());
    }
    for spec in &map_specs {
        let (id, path) = parse_id_path(spec);
        eff.set(&format!("map.{id}"), path.display());
    }
    for spec in &fp_specs {
        let (id, path) = parse_id_path(spec);
        eff.set(&format!("footprint.{id}"), path.display());
    }
    eff.set("epochs", hyper.epochs);
    eff.set("lr", hyper.lr);
    eff.set("warmup_epochs", hyper.warmup_epochs);
    eff.set("batch", hyper.batch);
    eff.set("lambda_recon", hyper.lambda_recon);
    eff.set("momentum", hyper.momentum);
    eff.set("val_every", hyper.val_every);
    eff.set("seed", seed);
    eff.set("map_side", map_side);
    eff.set("resolution", resolution);
    if let Some(m) = &init_model {
        eff.set("init_model", m.display());
    }
    eff.set("out", out.display());
    eff.set("loss_csv", loss_csv.display());
    eff.write(&out.with_extension("effective-config.txt"))?;
    Ok(EXIT_OK)
}

pub fn cmd_plan(args: &PlanArgs) -> Result<i32> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    init_threads(args.common.threads.or(cfg.get("threads")?));
    let scenario_path: PathBuf = args
        .scenario
        .clone()
        .or(cfg.get::<PathBuf>("scenario")?)
        .ok_or_else(|| anyhow!("--scenario is required"))?;
    let skip_mpc = args.skip_mpc || cfg.get::<bool>("skip_mpc")?.unwrap_or(false);
    let out_dir = args
        .common
        .out
        .clone()
        .or(cfg.get::<PathBuf>("out")?)
        .unwrap_or_else(|| PathBuf::from("plan-out"));
    cfg.reject_unknown()?;

    let scenario = Scenario::load(&scenario_path)?;
    let map = load_map(&scenario.map_path, scenario.resolution)?;
    let fp = load_footprint(&scenario.footprint_path)?;

    fs::create_dir_all(&out_dir)?;

    let inflated = inflate(&map, scenario.inflate_radius);
    let goal_pose = Pose::new(scenario.goal.0, scenario.goal.1, 0.0);
    let plan = match theta_star(&inflated, scenario.start, goal_pose) {
        Ok(p) => p,
        Err(e @ (PlanError::NoPath
        | PlanError::StartOccupied
        | PlanError::GoalOccupied
        | PlanError::StartOutOfBounds
        | PlanError::GoalOutOfBounds)) => {
            eprintln!("no global path: {e}");
            return Ok(EXIT_NO_PATH);
        }
    };
    fs::write(out_dir.join(format!("{}.plan.txt", scenario.id)), plan.to_text())?;

    let mut eff = Effective::new();
    eff.set("command", "plan");
    eff.set("scenario", scenario_path.display());
    eff.set("skip_mpc", skip_mpc);
    eff.set("out", out_dir.display());
    eff.write(&out_dir.join("effective-config.txt"))?;

    if skip_mpc {
        let svg = render_svg(&map, Some(&plan), None, Some(&fp), 0);
        fs::write(out_dir.join(format!("{}.svg", scenario.id)), svg)?;
        println!("plan length {:.3} m, {} waypoints", plan.total_length, plan.waypoints.len());
        return Ok(EXIT_OK);
    }

    let net = load_model(&scenario.model_path).map_err(|e| anyhow!("{}: {e}", scenario.model_path.display()))?;
    let run = match receding_horizon_run(&map, &fp, &net, &plan, scenario.start, &scenario.receding) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("optimizer failure: {e}");
            return Ok(EXIT_OPTIMIZER);
        }
    };
    fs::write(out_dir.join(format!("{}.traj.csv", scenario.id)), trajectory_csv(&run))?;
    let svg = render_svg(&map, Some(&plan), Some(&run.states), Some(&fp), 10);
    fs::write(out_dir.join(format!("{}.svg", scenario.id)), svg)?;
    println!(
        "executed {} steps, reached_goal={}, encode {:.3} s, solve {:.3} s",
        run.controls.len(),
        run.reached_goal,
        run.encode_seconds,
        run.solve_seconds
    );
    Ok(EXIT_OK)
}

pub fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    init_threads(args.common.threads.or(cfg.get("threads")?));
    let manifest: PathBuf = args
        .manifest
        .clone()
        .or(cfg.get::<PathBuf>("manifest")?)
        .ok_or_else(|| anyhow!("--manifest is required"))?;
    let planner_spec = args
        .planners
        .clone()
        .or(cfg.get::<String>("planners")?)
        .unwrap_or_else(|| "npfield".to_string());
    let out_dir = args
        .common
        .out
        .clone()
        .or(cfg.get::<PathBuf>("out")?)
        .unwrap_or_else(|| PathBuf::from("bench-out"));
    cfg.reject_unknown()?;

    let planners: Vec<PlannerKind> = planner_spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| PlannerKind::from_id(s).ok_or_else(|| anyhow!("unknown planner id {s:?}")))
        .collect::<Result<_>>()?;

    let scenarios = read_manifest(&manifest)?;
    let records = run_suite(&scenarios, &planners, Some(&out_dir))?;

    let mut eff = Effective::new();
    eff.set("command", "bench");
    eff.set("manifest", manifest.display());
    eff.set("planners", &planner_spec);
    eff.set("out", out_dir.display());
    eff.write(&out_dir.join("effective-config.txt"))?;

    let successes = records.iter().filter(|r| r.success).count();
    println!("{} runs, {} successes; report at {}", records.len(), successes, out_dir.join("suite.csv").display());
    if records.is_empty() || successes > 0 {
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_ERROR)
    }
}

/// Parse the state columns back out of an exported trajectory CSV.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<State>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| anyhow!("empty trajectory CSV"))?;
    if header != "t,x,y,v,theta,a,u2,J_s,J_o" {
        bail!("unexpected trajectory CSV header: {header:?}");
    }
    let mut states = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            bail!("line {}: expected 9 columns", ln + 2);
        }
        let f = |i: usize| -> Result<f64> {
            cols[i].parse().map_err(|_| anyhow!("line {}: bad number {:?}", ln + 2, cols[i]))
        };
        states.push(State::new(f(1)?, f(2)?, f(3)?, f(4)?));
    }
    Ok(states)
}

pub fn cmd_render(args: &RenderArgs) -> Result<i32> {
    let cfg = ConfigFile::load(args.common.config.as_deref())?;
    let map_path: PathBuf = args
        .map
        .clone()
        .or(cfg.get::<PathBuf>("map")?)
        .ok_or_else(|| anyhow!("--map is required"))?;
    let resolution = args.resolution.or(cfg.get("resolution")?).unwrap_or(0.02);
    let trajectory = args.trajectory.clone().or(cfg.get::<PathBuf>("trajectory")?);
    let plan_path = args.plan.clone().or(cfg.get::<PathBuf>("plan")?);
    let fp_path = args.footprint.clone().or(cfg.get::<PathBuf>("footprint")?);
    let every_k = args.every_k.or(cfg.get("every_k")?).unwrap_or(10);
    let out = args
        .common
        .out
        .clone()
        .or(cfg.get::<PathBuf>("out")?)
        .unwrap_or_else(|| PathBuf::from("render.svg"));
    cfg.reject_unknown()?;

    let map = load_map(&map_path, resolution)?;
    let states = match &trajectory {
        Some(path) => Some(parse_trajectory_csv(&fs::read_to_string(path)?)?),
        None => None,
    };
    let plan = match &plan_path {
        Some(path) => Some(
            GlobalPlan::from_text(&fs::read_to_string(path)?)
                .ok_or_else(|| anyhow!("{}: not a plan polyline", path.display()))?,
        ),
        None => None,
    };
    let fp = match &fp_path {
        Some(path) => Some(load_footprint(path)?),
        None => None,
    };

    let svg = render_svg(&map, plan.as_ref(), states.as_deref(), fp.as_ref(), every_k);
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(&out, svg)?;

    let mut eff = Effective::new();
    eff.set("command", "render");
    eff.set("map", map_path.display());
    eff.set("resolution", resolution);
    if let Some(t) = &trajectory {
        eff.set("trajectory", t.display());
    }
    if let Some(p) = &plan_path {
        eff.set("plan", p.display());
    }
    if let Some(f) = &fp_path {
        eff.set("footprint", f.display());
    }
    eff.set("every_k", every_k);
    eff.set("out", out.display());
    eff.write(&out.with_extension("effective-config.txt"))?;
    Ok(EXIT_OK)
}

/// Dispatch a parsed command line; returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenDataset(args) => cmd_gen_dataset(args),
        Command::Train(args) => cmd_train(args),
        Command::Plan(args) => cmd_plan(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Render(args) => cmd_render(args),
    }
}
