//! Signed distance transform, repulsive potential grids, footprint-aware
//! collision potential targets, and the stratified training-set sampler.
//!
//! The potential per cell is `w1 * (pi/2 + atan(w2 - w2 * sdf))` with the SDF in
//! meters: a sigmoid that is small far from obstacles and approaches `w1 * pi`
//! inside them. Targets for a whole footprint take the maximum potential over
//! the covered cells.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gridmap::{project_footprint, Footprint, GridError, OccupancyGrid, Pose};

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("distance transform undefined: map is {0}")]
    DegenerateMap(&'static str),
    #[error("grid geometry mismatch between map and potential grid")]
    GeometryMismatch,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("footprint coverage is empty")]
    EmptyCoverage,
    #[error(
        "sampling stalled in the {stratum} stratum after {attempts} attempts; \
         achieved fractions low/mid/high = {low:.4}/{mid:.4}/{high:.4}"
    )]
    StratumStarved { stratum: &'static str, attempts: usize, low: f64, mid: f64, high: f64 },
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset file: {0}")]
    BadDataset(String),
}

/// Weights of the repulsive potential sigmoid. `w1` scales the range
/// (dimensionless), `w2` scales the SDF argument (1/meter).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialParams {
    pub w1: f64,
    pub w2: f64,
}

impl PotentialParams {
    pub fn new(w1: f64, w2: f64) -> Self {
        assert!(w1 > 0.0 && w2 > 0.0, "potential weights must be positive");
        Self { w1, w2 }
    }

    /// Supremum of the potential range, `w1 * pi`.
    pub fn max_potential(&self) -> f64 {
        self.w1 * PI
    }
}

impl Default for PotentialParams {
    fn default() -> Self {
        Self { w1: 15.0, w2: 10.0 }
    }
}

/// Repulsive potential of a signed distance in meters:
/// `w1 * (pi/2 + atan(w2 - w2 * sdf))`, strictly decreasing, range (0, w1*pi).
pub fn potential_from_sdf(sdf: f64, params: PotentialParams) -> f64 {
    params.w1 * (PI / 2.0 + (params.w2 - params.w2 * sdf).atan())
}

/// Analytic derivative of [`potential_from_sdf`] with respect to the SDF:
/// `-w1 * w2 / (1 + (w2 - w2 * sdf)^2)`.
pub fn potential_derivative(sdf: f64, params: PotentialParams) -> f64 {
    let a = params.w2 - params.w2 * sdf;
    -params.w1 * params.w2 / (1.0 + a * a)
}

/// Exact squared Euclidean distances (in cell units) from every cell to the
/// nearest site cell, by the two-pass separable lower-envelope transform.
///
/// `is_site` marks the zero-distance set. Runs in O(width * height).
fn squared_distance_cells(
    width: usize,
    height: usize,
    is_site: impl Fn(usize, usize) -> bool,
) -> Vec<i64> {
    const INF: i64 = i64::MAX / 4;

    // Pass 1: per row, distance in columns to the nearest site in that row.
    let mut rowdist = vec![INF; width * height];
    for r in 0..height {
        let base = r * width;
        let mut last: Option<i64> = None;
        for c in 0..width {
            if is_site(r, c) {
                last = Some(c as i64);
            }
            if let Some(s) = last {
                rowdist[base + c] = c as i64 - s;
            }
        }
        last = None;
        for c in (0..width).rev() {
            if is_site(r, c) {
                last = Some(c as i64);
            }
            if let Some(s) = last {
                rowdist[base + c] = rowdist[base + c].min(s - c as i64);
            }
        }
    }

    // Pass 2: per column, lower envelope of the parabolas
    // d(r) = (r - r')^2 + rowdist(r')^2.
    let mut out = vec![INF; width * height];
    let mut v = vec![0usize; height]; // parabola apex rows
    let mut z = vec![0.0f64; height + 1]; // envelope breakpoints
    let mut f = vec![0i64; height];
    for c in 0..width {
        for r in 0..height {
            let d = rowdist[r * width + c];
            f[r] = if d >= INF { INF } else { d * d };
        }
        let mut k = 0usize;
        let mut started = false;
        for (r, &fr) in f.iter().enumerate() {
            if fr >= INF {
                continue;
            }
            let rq = r as f64;
            if !started {
                v[0] = r;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                started = true;
                continue;
            }
            loop {
                let p = v[k] as f64;
                let s = ((fr as f64 + rq * rq) - (f[v[k]] as f64 + p * p)) / (2.0 * rq - 2.0 * p);
                if s <= z[k] {
                    if k == 0 {
                        v[0] = r;
                        z[0] = f64::NEG_INFINITY;
                        z[1] = f64::INFINITY;
                        break;
                    }
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = r;
                    z[k] = s;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        if !started {
            continue; // no site anywhere in this column's rows
        }
        let mut k = 0usize;
        for r in 0..height {
            while z[k + 1] < r as f64 {
                k += 1;
            }
            let dr = r as i64 - v[k] as i64;
            out[r * width + c] = dr * dr + f[v[k]];
        }
    }
    out
}

/// Squared cell-unit distances from every cell to the nearest occupied cell
/// center. The map must contain at least one obstacle. Exact integers, useful
/// when the caller wants to compare against a radius without rounding.
pub fn squared_obstacle_distance_cells(map: &OccupancyGrid) -> Vec<i64> {
    assert!(map.occupied_count() > 0, "map has no obstacle cells");
    squared_distance_cells(map.width(), map.height(), |r, c| map.is_occupied(r, c))
}

/// Exact Euclidean distance transform of a map: for every cell, the distance in
/// meters from its center to the nearest occupied cell center (0 on obstacles).
///
/// Errors when the map is all-free or all-occupied, where the paired signed
/// transform would be undefined on one side.
pub fn euclidean_distance_transform(map: &OccupancyGrid) -> Result<Vec<f64>, FieldError> {
    let occupied = map.occupied_count();
    if occupied == 0 {
        return Err(FieldError::DegenerateMap("all free"));
    }
    if occupied == map.width() * map.height() {
        return Err(FieldError::DegenerateMap("all occupied"));
    }
    let sq = squared_distance_cells(map.width(), map.height(), |r, c| map.is_occupied(r, c));
    Ok(sq.iter().map(|&d| (d as f64).sqrt() * map.resolution()).collect())
}

/// Per-cell signed distance in meters: positive on free cells (distance to the
/// nearest occupied center), negative on occupied cells (distance to the
/// nearest free center). Cell centers never sit on the border, so no value is
/// exactly zero.
#[derive(Debug, Clone)]
pub struct SdfGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: (f64, f64),
    values: Vec<f64>,
}

impl SdfGrid {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn matches_geometry(&self, map: &OccupancyGrid) -> bool {
        self.width == map.width()
            && self.height == map.height()
            && self.resolution == map.resolution()
            && self.origin == map.origin()
    }
}

/// Signed distance grid of a map (see [`SdfGrid`] for the sign convention).
pub fn signed_distance(map: &OccupancyGrid) -> Result<SdfGrid, FieldError> {
    let occupied = map.occupied_count();
    if occupied == 0 {
        return Err(FieldError::DegenerateMap("all free"));
    }
    if occupied == map.width() * map.height() {
        return Err(FieldError::DegenerateMap("all occupied"));
    }
    let (w, h) = (map.width(), map.height());
    let to_occ = squared_distance_cells(w, h, |r, c| map.is_occupied(r, c));
    let to_free = squared_distance_cells(w, h, |r, c| !map.is_occupied(r, c));
    let res = map.resolution();
    let values = (0..w * h)
        .map(|i| {
            if map.cells()[i] {
                -(to_free[i] as f64).sqrt() * res
            } else {
                (to_occ[i] as f64).sqrt() * res
            }
        })
        .collect();
    Ok(SdfGrid { width: w, height: h, resolution: res, origin: map.origin(), values })
}

/// Per-cell repulsive potential, same geometry as the source map. Every value
/// lies strictly inside (0, w1*pi) and decreases with the SDF.
#[derive(Debug, Clone)]
pub struct PotentialGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: (f64, f64),
    params: PotentialParams,
    values: Vec<f64>,
}

impl PotentialGrid {
    /// Build the potential grid from a signed distance grid.
    pub fn from_sdf(sdf: &SdfGrid, params: PotentialParams) -> Self {
        Self {
            width: sdf.width,
            height: sdf.height,
            resolution: sdf.resolution,
            origin: sdf.origin,
            params,
            values: sdf.values.iter().map(|&s| potential_from_sdf(s, params)).collect(),
        }
    }

    /// Convenience: SDF then potential in one step.
    pub fn from_map(map: &OccupancyGrid, params: PotentialParams) -> Result<Self, FieldError> {
        Ok(Self::from_sdf(&signed_distance(map)?, params))
    }

    pub fn params(&self) -> PotentialParams {
        self.params
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn matches_geometry(&self, map: &OccupancyGrid) -> bool {
        self.width == map.width()
            && self.height == map.height()
            && self.resolution == map.resolution()
            && self.origin == map.origin()
    }
}

/// Collision potential of a footprint at a pose: the maximum potential among
/// the footprint-covered cells. Coverage outside the map counts as the
/// supremum `w1 * pi` — leaving the local window is as bad as a collision.
pub fn collision_potential(
    map: &OccupancyGrid,
    fp: &Footprint,
    pose: Pose,
    pg: &PotentialGrid,
) -> Result<f64, FieldError> {
    if !pg.matches_geometry(map) {
        return Err(FieldError::GeometryMismatch);
    }
    let coverage = project_footprint(map, fp, pose)?;
    if coverage.is_empty() {
        return Err(FieldError::EmptyCoverage);
    }
    let mut best = if coverage.out_of_bounds > 0 { pg.params.max_potential() } else { f64::NEG_INFINITY };
    for &(r, c) in &coverage.cells {
        best = best.max(pg.value(r, c));
    }
    Ok(best)
}

/// One training-set unit: which map and footprint, the pose, and the collision
/// potential target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub map_id: u32,
    pub footprint_id: u32,
    pub pose: Pose,
    pub target: f64,
}

/// Stratum bounds: targets inside `[0.1, 0.9] * w1 * pi` are "intermediate",
/// below is the low tail (deep free space), above is the high tail (collision).
pub fn intermediate_band(params: PotentialParams) -> (f64, f64) {
    (0.10 * params.max_potential(), 0.90 * params.max_potential())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stratum {
    Low = 0,
    Mid = 1,
    High = 2,
}

impl Stratum {
    fn contains(self, target: f64, band: (f64, f64)) -> bool {
        match self {
            Stratum::Low => target < band.0,
            Stratum::Mid => target >= band.0 && target <= band.1,
            Stratum::High => target > band.1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Stratum::Low => "low",
            Stratum::Mid => "intermediate",
            Stratum::High => "high",
        }
    }
}

/// Per-sample attempt budget for rejection sampling. A stratum that occupies
/// less than roughly 1/1000 of pose space will exhaust this and surface as a
/// starvation error instead of spinning forever.
pub const REJECTION_BUDGET: usize = 4096;

fn sample_rng(seed: u64, stratum: Stratum, index: usize) -> ChaCha8Rng {
    // splitmix-style mix so per-sample streams are independent of each other.
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(1 + stratum as u64))
        .wrapping_add((index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Draw a stratified training set: 80% of samples with intermediate potential
/// targets, 10% low tail, 10% high tail, poses uniform over the map extent and
/// (-pi, pi], drawn by per-stratum rejection.
///
/// Deterministic under a fixed seed: every sample gets its own generator keyed
/// by (seed, stratum, index), so the result does not depend on worker count.
pub fn sample_dataset(
    map: &OccupancyGrid,
    fp: &Footprint,
    pg: &PotentialGrid,
    map_id: u32,
    footprint_id: u32,
    n: usize,
    seed: u64,
) -> Result<Vec<Sample>, FieldError> {
    assert!(n >= 1, "need at least one sample");
    let band = intermediate_band(pg.params());
    let n_mid = ((n as f64) * 0.8).round() as usize;
    let n_low = ((n as f64) * 0.1).round() as usize;
    let n_high = n.saturating_sub(n_mid + n_low);

    let (ox, oy) = map.origin();
    let (ex, ey) = map.extent();

    // The high tail is usually the scarcest region; fill it first so that a
    // starved map fails fast with the scarce stratum named in the error.
    let quotas = [(Stratum::High, n_high), (Stratum::Mid, n_mid), (Stratum::Low, n_low)];
    let mut samples = Vec::with_capacity(n);
    let mut done = [0usize; 3];
    let mut attempts_total = 0usize;

    for &(stratum, quota) in &quotas {
        for index in 0..quota {
            let mut rng = sample_rng(seed, stratum, index);
            let mut accepted = None;
            for _ in 0..REJECTION_BUDGET {
                attempts_total += 1;
                let x = ox + rng.gen::<f64>() * ex;
                let y = oy + rng.gen::<f64>() * ey;
                let theta = PI - rng.gen::<f64>() * 2.0 * PI;
                let pose = Pose::new(x, y, theta);
                let target = collision_potential(map, fp, pose, pg)?;
                if stratum.contains(target, band) {
                    accepted = Some(Sample { map_id, footprint_id, pose, target });
                    break;
                }
            }
            match accepted {
                Some(s) => {
                    samples.push(s);
                    done[stratum as usize] += 1;
                }
                None => {
                    let total: usize = done.iter().sum::<usize>().max(1);
                    return Err(FieldError::StratumStarved {
                        stratum: stratum.name(),
                        attempts: attempts_total,
                        low: done[Stratum::Low as usize] as f64 / total as f64,
                        mid: done[Stratum::Mid as usize] as f64 / total as f64,
                        high: done[Stratum::High as usize] as f64 / total as f64,
                    });
                }
            }
        }
    }

    // Interleave strata deterministically so that a positional train/val split
    // sees all three.
    let mut ordered = Vec::with_capacity(n);
    let (high, rest) = samples.split_at(n_high);
    let (mid, low) = rest.split_at(n_mid);
    let (mut im, mut il, mut ih) = (0, 0, 0);
    for i in 0..n {
        // pattern over 10 slots: 8 mid, 1 low, 1 high
        let slot = i % 10;
        if slot == 4 && il < low.len() {
            ordered.push(low[il]);
            il += 1;
        } else if slot == 9 && ih < high.len() {
            ordered.push(high[ih]);
            ih += 1;
        } else if im < mid.len() {
            ordered.push(mid[im]);
            im += 1;
        } else if il < low.len() {
            ordered.push(low[il]);
            il += 1;
        } else {
            ordered.push(high[ih]);
            ih += 1;
        }
    }
    Ok(ordered)
}

/// Fractions of samples per stratum (low, mid, high).
pub fn stratum_fractions(samples: &[Sample], params: PotentialParams) -> (f64, f64, f64) {
    let band = intermediate_band(params);
    let mut counts = [0usize; 3];
    for s in samples {
        if s.target < band.0 {
            counts[0] += 1;
        } else if s.target <= band.1 {
            counts[1] += 1;
        } else {
            counts[2] += 1;
        }
    }
    let n = samples.len().max(1) as f64;
    (counts[0] as f64 / n, counts[1] as f64 / n, counts[2] as f64 / n)
}

const DATASET_MAGIC: &str = "npfield-dataset v1";

/// Write the dataset format: a one-line text header with the record count and
/// potential weights, then little-endian binary records of
/// (map_id: u32, footprint_id: u32, x: f64, y: f64, theta: f64, target: f64).
pub fn write_dataset(
    w: &mut impl Write,
    samples: &[Sample],
    params: PotentialParams,
) -> Result<(), FieldError> {
    writeln!(w, "{DATASET_MAGIC} count={} w1={} w2={}", samples.len(), params.w1, params.w2)?;
    for s in samples {
        w.write_all(&s.map_id.to_le_bytes())?;
        w.write_all(&s.footprint_id.to_le_bytes())?;
        w.write_all(&s.pose.x.to_le_bytes())?;
        w.write_all(&s.pose.y.to_le_bytes())?;
        w.write_all(&s.pose.theta.to_le_bytes())?;
        w.write_all(&s.target.to_le_bytes())?;
    }
    Ok(())
}

/// Read the dataset format written by [`write_dataset`].
pub fn read_dataset(r: &mut impl BufRead) -> Result<(Vec<Sample>, PotentialParams), FieldError> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let header = header.trim_end();
    let rest = header
        .strip_prefix(DATASET_MAGIC)
        .ok_or_else(|| FieldError::BadDataset(format!("bad magic line: {header:?}")))?;
    let mut count = None;
    let mut w1 = None;
    let mut w2 = None;
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| FieldError::BadDataset(format!("bad header token {tok:?}")))?;
        match k {
            "count" => count = v.parse::<usize>().ok(),
            "w1" => w1 = v.parse::<f64>().ok(),
            "w2" => w2 = v.parse::<f64>().ok(),
            other => return Err(FieldError::BadDataset(format!("unknown header key {other:?}"))),
        }
    }
    let count = count.ok_or_else(|| FieldError::BadDataset("missing count".into()))?;
    let w1 = w1.ok_or_else(|| FieldError::BadDataset("missing w1".into()))?;
    let w2 = w2.ok_or_else(|| FieldError::BadDataset("missing w2".into()))?;

    let mut samples = Vec::with_capacity(count);
    let mut rec = [0u8; 40];
    for i in 0..count {
        r.read_exact(&mut rec)
            .map_err(|_| FieldError::BadDataset(format!("truncated at record {i} of {count}")))?;
        let u32le = |o: usize| u32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
        let f64le = |o: usize| f64::from_le_bytes(rec[o..o + 8].try_into().unwrap());
        samples.push(Sample {
            map_id: u32le(0),
            footprint_id: u32le(4),
            pose: Pose { x: f64le(8), y: f64le(16), theta: f64le(24) },
            target: f64le(32),
        });
    }
    Ok((samples, PotentialParams::new(w1, w2)))
}
