//! Instance sampling for all sixteen variants from uniform or map-point
//! coordinate distributions.

mod io;

pub use io::{
    load_map_points, parse_map_points, read_instances, read_solutions, write_instances,
    write_solutions, InstanceRecord, SolutionRecord,
};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream_rng;
use crate::vrp::{Instance, TaskSpec, FEAS_EPS};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("distribution {name:?} has {available} points but {needed} are required")]
    InsufficientPoints {
        name: String,
        available: usize,
        needed: usize,
    },
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("could not place every time-window customer within reach of the depot after {0} attempts")]
    Unreachable(usize),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Uniform,
    MapPoints,
}

/// Where customer and depot coordinates come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionSource {
    pub name: String,
    pub kind: DistributionKind,
    /// Normalized to the unit square; empty for the uniform kind.
    pub points: Vec<[f64; 2]>,
}

impl DistributionSource {
    pub fn uniform() -> Self {
        DistributionSource {
            name: "uniform".to_string(),
            kind: DistributionKind::Uniform,
            points: Vec::new(),
        }
    }

    /// Resolves `uniform` or `map:<path>`.
    pub fn from_spec(spec: &str) -> Result<Self, GenError> {
        if spec == "uniform" {
            Ok(DistributionSource::uniform())
        } else if let Some(path) = spec.strip_prefix("map:") {
            load_map_points(path)
        } else {
            Err(GenError::InvalidConfig(format!(
                "distribution {spec:?} must be `uniform` or `map:<path>`"
            )))
        }
    }
}

/// Constants of the instance generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub capacity: f64,
    pub demand_choices: Vec<u32>,
    pub backhaul_fraction: f64,
    pub duration_limit: f64,
    pub depot_window: [f64; 2],
    pub service_time: f64,
    pub halfwidth_range: [f64; 2],
    pub seed: u64,
}

impl GenConfig {
    pub fn new(n: usize, capacity: f64, seed: u64) -> Self {
        GenConfig {
            n,
            capacity,
            demand_choices: (1..=9).collect(),
            backhaul_fraction: 0.2,
            duration_limit: 3.0,
            depot_window: [0.0, 3.0],
            service_time: 0.2,
            halfwidth_range: [0.1, 1.0],
            seed,
        }
    }

    /// Config with the standard capacity for `n`, when one is defined.
    pub fn standard(n: usize, seed: u64) -> Result<Self, GenError> {
        let capacity = standard_capacity(n).ok_or_else(|| {
            GenError::InvalidConfig(format!("no standard capacity for n={n}; set it explicitly"))
        })?;
        Ok(GenConfig::new(n, capacity, seed))
    }

    pub fn check(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::InvalidConfig(m.to_string()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.capacity.is_nan() || self.capacity <= 0.0 {
            return bad("capacity must be positive");
        }
        if self.demand_choices.is_empty() || self.demand_choices.contains(&0) {
            return bad("demand choices must be positive integers");
        }
        if self.demand_choices.iter().any(|&d| d as f64 > self.capacity) {
            return bad("every demand choice must fit the capacity");
        }
        if !(0.0..1.0).contains(&self.backhaul_fraction) {
            return bad("backhaul fraction must lie in [0, 1)");
        }
        if !(self.duration_limit > 0.0 && self.service_time > 0.0) {
            return bad("duration limit and service time must be positive");
        }
        let [o, c] = self.depot_window;
        if !(o == 0.0 && c > 0.0) {
            return bad("depot window must be [0, c] with c > 0");
        }
        let [lo, hi] = self.halfwidth_range;
        if !(0.0 < lo && lo <= hi) {
            return bad("half-width range must satisfy 0 < lo <= hi");
        }
        Ok(())
    }
}

/// Capacity used for the standard problem sizes; other sizes must be set
/// explicitly.
pub fn standard_capacity(n: usize) -> Option<f64> {
    match n {
        10 => Some(20.0),
        20 => Some(30.0),
        50 => Some(40.0),
        100 => Some(50.0),
        _ => None,
    }
}

/// Constraint indicator vector (open, time window, duration limit,
/// backhaul) as 0/1 floats.
pub fn task_onehot(task: TaskSpec) -> [f64; 4] {
    task.onehot()
}

/// Draws `count` coordinates; index 0 becomes the depot.
pub fn sample_coords(
    source: &DistributionSource,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<[f64; 2]>, GenError> {
    match source.kind {
        DistributionKind::Uniform => Ok((0..count).map(|_| [rng.gen::<f64>(), rng.gen::<f64>()]).collect()),
        DistributionKind::MapPoints => {
            if source.points.len() < count {
                return Err(GenError::InsufficientPoints {
                    name: source.name.clone(),
                    available: source.points.len(),
                    needed: count,
                });
            }
            Ok(sample_indices(rng, source.points.len(), count)
                .into_iter()
                .map(|i| source.points[i])
                .collect())
        }
    }
}

/// Builds an instance of `task` on fixed coordinates.
///
/// Draw order is demands, then backhaul selection, then time windows, so
/// variants sharing a seed share everything their constraints have in
/// common.
pub fn generate_instance(
    coords: Vec<[f64; 2]>,
    task: TaskSpec,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Instance, GenError> {
    cfg.check()?;
    let n1 = coords.len();
    if n1 < 2 {
        return Err(GenError::InvalidConfig("need a depot and at least one customer".into()));
    }
    let n = n1 - 1;
    let mut demand = vec![0.0; n1];
    for d in demand.iter_mut().skip(1) {
        let raw = cfg.demand_choices[rng.gen_range(0..cfg.demand_choices.len())];
        *d = raw as f64 / cfg.capacity;
    }
    if task.backhaul {
        let count = backhaul_count(n, cfg.backhaul_fraction);
        for i in sample_indices(rng, n, count) {
            demand[i + 1] = -demand[i + 1];
        }
    }
    let mut time_windows = vec![[0.0, 0.0]; n1];
    let mut service = vec![0.0; n1];
    if task.time_window {
        let [depot_open, depot_close] = cfg.depot_window;
        time_windows[0] = cfg.depot_window;
        let dist0 = |i: usize| {
            let [ax, ay] = coords[0];
            let [bx, by] = coords[i];
            ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
        };
        for i in 1..n1 {
            service[i] = cfg.service_time;
            let d = dist0(i);
            let lo = depot_open + d;
            let hi = depot_close - d - cfg.service_time;
            let center = if hi > lo {
                rng.gen_range(lo..hi)
            } else {
                if hi < lo {
                    log::warn!("customer {i}: empty time-window center interval [{lo:.4}, {hi:.4}], using its midpoint");
                }
                0.5 * (lo + hi)
            };
            let [hw_lo, hw_hi] = cfg.halfwidth_range;
            let half = if hw_hi > hw_lo { rng.gen_range(hw_lo..hw_hi) } else { hw_lo };
            time_windows[i] = [
                depot_open.max(center - half),
                depot_close.min(center + half),
            ];
        }
    }
    let instance = Instance {
        task,
        coords,
        demand,
        capacity: cfg.capacity,
        time_windows,
        service,
        duration_limit: task.duration_limit.then_some(cfg.duration_limit),
    };
    instance
        .check()
        .map_err(|e| GenError::InvalidConfig(e.to_string()))?;
    Ok(instance)
}

/// Exactly ⌊fraction·n⌋ customers become backhauls.
pub fn backhaul_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

const MAX_COORD_ATTEMPTS: usize = 1000;

/// Samples coordinates and builds an instance. For time-window tasks,
/// coordinate draws that leave a customer unreachable within the depot
/// window (even on a dedicated out-and-back trip) are redrawn.
pub fn sample_instance(
    source: &DistributionSource,
    task: TaskSpec,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Instance, GenError> {
    for _ in 0..MAX_COORD_ATTEMPTS {
        let coords = sample_coords(source, cfg.n + 1, rng)?;
        if task.time_window && !all_reachable(&coords, cfg) {
            log::warn!("redrawing coordinates: a customer cannot be served within the depot window");
            continue;
        }
        return generate_instance(coords, task, cfg, rng);
    }
    Err(GenError::Unreachable(MAX_COORD_ATTEMPTS))
}

fn all_reachable(coords: &[[f64; 2]], cfg: &GenConfig) -> bool {
    let [dx, dy] = coords[0];
    coords[1..].iter().all(|[x, y]| {
        let d = ((x - dx).powi(2) + (y - dy).powi(2)).sqrt();
        2.0 * d + cfg.service_time <= cfg.depot_window[1] - cfg.depot_window[0] + FEAS_EPS
    })
}

/// `count` instances, instance `i` drawn from its own RNG stream
/// `(cfg.seed, i)` so any subset can be regenerated independently.
pub fn generate_batch(
    source: &DistributionSource,
    task: TaskSpec,
    cfg: &GenConfig,
    count: usize,
) -> Result<Vec<Instance>, GenError> {
    (0..count)
        .map(|i| sample_instance(source, task, cfg, &mut stream_rng(cfg.seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vrp::{validate, Solution};
    use rand::SeedableRng;

    #[test]
    fn standard_capacities() {
        assert_eq!(GenConfig::standard(50, 0).unwrap().capacity, 40.0);
        assert_eq!(GenConfig::standard(100, 0).unwrap().capacity, 50.0);
        assert_eq!(GenConfig::standard(10, 0).unwrap().capacity, 20.0);
        assert!(GenConfig::standard(30, 0).is_err());
    }

    #[test]
    fn uniform_coords_in_range_and_reproducible() {
        let src = DistributionSource::uniform();
        let a = sample_coords(&src, 2, &mut stream_rng(5, 0)).unwrap();
        let b = sample_coords(&src, 2, &mut stream_rng(5, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn uniform_mean_is_centered() {
        let src = DistributionSource::uniform();
        let pts = sample_coords(&src, 10_000, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64;
        assert!((mx - 0.5).abs() < 0.01 && (my - 0.5).abs() < 0.01, "{mx} {my}");
    }

    #[test]
    fn map_sampling_exhausts_points() {
        let pts: Vec<[f64; 2]> = (0..5).map(|i| [i as f64 / 4.0, 0.5]).collect();
        let src = DistributionSource {
            name: "five".into(),
            kind: DistributionKind::MapPoints,
            points: pts.clone(),
        };
        let mut got = sample_coords(&src, 5, &mut stream_rng(1, 0)).unwrap();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, pts);
        assert!(matches!(
            sample_coords(&src, 6, &mut stream_rng(1, 0)),
            Err(GenError::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn backhaul_count_is_floor_of_fifth() {
        for (n, want) in [(1, 0), (4, 0), (5, 1), (10, 2), (20, 4), (50, 10), (99, 19)] {
            assert_eq!(backhaul_count(n, 0.2), want);
        }
        let cfg = GenConfig::new(20, 30.0, 3);
        let inst = generate_batch(&DistributionSource::uniform(), "VRPB".parse().unwrap(), &cfg, 1).unwrap();
        assert_eq!(inst[0].demand.iter().filter(|d| **d < 0.0).count(), 4);
    }

    #[test]
    fn time_window_constants() {
        let cfg = GenConfig::standard(50, 9).unwrap();
        let task: TaskSpec = "VRPTW".parse().unwrap();
        for inst in generate_batch(&DistributionSource::uniform(), task, &cfg, 20).unwrap() {
            assert_eq!(inst.time_windows[0], [0.0, 3.0]);
            assert_eq!(inst.service[0], 0.0);
            assert!(inst.service[1..].iter().all(|s| *s == 0.2));
            assert!(inst.time_windows.iter().all(|[o, c]| 0.0 <= *o && o <= c && *c <= 3.0));
        }
    }

    #[test]
    fn time_window_instances_admit_out_and_back() {
        let cfg = GenConfig::new(20, 30.0, 21);
        for task in TaskSpec::all().into_iter().filter(|t| t.time_window) {
            for inst in generate_batch(&DistributionSource::uniform(), task, &cfg, 50).unwrap() {
                let tours = (1..=inst.n())
                    .map(|i| if task.open { vec![0, i] } else { vec![0, i, 0] })
                    .collect::<Vec<_>>();
                // Backhauls may only start a tour once every linehaul is done.
                let mut tours = tours;
                tours.sort_by_key(|t| inst.demand[t[1]] < 0.0);
                assert_eq!(validate(&inst, &Solution::new(tours)), vec![], "{task}");
            }
        }
    }

    #[test]
    fn inactive_constraints_are_zero_filled() {
        let cfg = GenConfig::new(10, 20.0, 4);
        let inst = &generate_batch(&DistributionSource::uniform(), TaskSpec::CVRP, &cfg, 1).unwrap()[0];
        assert!(inst.time_windows.iter().flatten().all(|v| *v == 0.0));
        assert!(inst.service.iter().all(|v| *v == 0.0));
        assert_eq!(inst.duration_limit, None);
        assert!(inst.demand[1..].iter().all(|d| *d > 0.0 && *d <= 9.0 / 20.0));
    }

    #[test]
    fn shared_seed_shares_common_features() {
        let cfg = GenConfig::new(10, 20.0, 4);
        let src = DistributionSource::uniform();
        let a = &generate_batch(&src, TaskSpec::CVRP, &cfg, 1).unwrap()[0];
        let b = &generate_batch(&src, "VRPL".parse().unwrap(), &cfg, 1).unwrap()[0];
        assert_eq!(a.coords, b.coords);
        assert_eq!(a.demand, b.demand);
    }

    #[test]
    fn empty_center_interval_uses_midpoint() {
        let cfg = GenConfig::new(1, 10.0, 0);
        let coords = vec![[0.0, 0.0], [1.0, 1.0]];
        let inst = generate_instance(coords, "VRPTW".parse().unwrap(), &cfg, &mut stream_rng(0, 0)).unwrap();
        let [o, c] = inst.time_windows[1];
        // midpoint of [√2, 3 − √2 − 0.2] is 1.4
        assert!(o <= 1.4 && 1.4 <= c);
    }
}
