//! Test-set evaluation: eight-fold augmentation, greedy multi-start
//! decoding, optimality gaps and a local-search reference.

mod heuristic;

pub use heuristic::{heuristic_baseline, HEURISTIC_LABEL};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::generate::SolutionRecord;
use crate::model::{Net, PolicyParams};
use crate::rng::stream_rng;
use crate::train::{rollout_instance, DecodeMode, TrainError};
use crate::vrp::{solution_cost, validate, Instance, Solution, TaskSpec, VrpError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric error: {0}")]
    Metric(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Vrp(#[from] VrpError),
    #[error("report {path}: {source}")]
    Report {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// The eight isometries of the unit square, identity first.
pub const AUGMENTATIONS: [fn([f64; 2]) -> [f64; 2]; 8] = [
    |[x, y]| [x, y],
    |[x, y]| [y, x],
    |[x, y]| [x, 1.0 - y],
    |[x, y]| [y, 1.0 - x],
    |[x, y]| [1.0 - x, y],
    |[x, y]| [1.0 - y, x],
    |[x, y]| [1.0 - x, 1.0 - y],
    |[x, y]| [1.0 - y, 1.0 - x],
];

/// Copies of `instance` under each map of [`AUGMENTATIONS`]. Only
/// coordinates change.
pub fn augment8(instance: &Instance) -> Vec<Instance> {
    AUGMENTATIONS
        .iter()
        .map(|f| Instance {
            coords: instance.coords.iter().map(|&p| f(p)).collect(),
            ..instance.clone()
        })
        .collect()
}

/// `(mean(neural) / mean(reference) − 1) · 100`, a ratio of means.
pub fn optimality_gap(neural: &[f64], reference: &[f64]) -> Result<f64, EvalError> {
    if neural.is_empty() || neural.len() != reference.len() {
        return Err(EvalError::Metric(format!(
            "need equal non-empty cost lists, got {} and {}",
            neural.len(),
            reference.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let r = mean(reference);
    if r.is_nan() || r <= 0.0 {
        return Err(EvalError::Metric(format!("reference mean {r} must be positive")));
    }
    Ok((mean(neural) / r - 1.0) * 100.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOptions {
    pub n_starts: usize,
    /// Decode all eight augmentations rather than the identity only.
    pub augment: bool,
    /// Extra sampled multi-start rollouts per augmentation.
    pub samples: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            n_starts: 8,
            augment: true,
            samples: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solved {
    pub solution: Solution,
    /// Cost of `solution`, recomputed on the original instance.
    pub cost: f64,
    /// Best greedy cost on the unaugmented instance.
    pub identity_cost: f64,
}

/// Best solution over augmentations and starts. The winner is validated on
/// the original instance; ties go to the earlier augmentation.
pub fn solve_instance(params: &PolicyParams, instance: &Instance, opts: &SolveOptions) -> Result<Solved, EvalError> {
    let variants = if opts.augment { augment8(instance) } else { vec![instance.clone()] };
    let mut best: Option<(Solution, f64)> = None;
    let mut identity_cost = f64::INFINITY;
    for (k, variant) in variants.iter().enumerate() {
        let mut candidates = Vec::new();
        let mut net = Net::new(params);
        let mut rng = stream_rng(opts.seed, k as u64);
        let greedy = rollout_instance(&mut net, variant, opts.n_starts, DecodeMode::Greedy, &mut rng, false)?;
        candidates.push(greedy.best().solution.clone());
        for _ in 0..opts.samples {
            let mut net = Net::new(params);
            let sampled = rollout_instance(&mut net, variant, opts.n_starts, DecodeMode::Sample, &mut rng, false)?;
            candidates.push(sampled.best().solution.clone());
        }
        for (c, solution) in candidates.into_iter().enumerate() {
            let cost = solution_cost(instance, &solution)?;
            if k == 0 && c == 0 {
                identity_cost = cost;
            }
            if best.as_ref().is_none_or(|(_, b)| cost < *b) {
                best = Some((solution, cost));
            }
        }
    }
    let (solution, cost) = best.expect("at least one variant");
    Ok(Solved {
        solution,
        cost,
        identity_cost,
    })
}

/// Mean greedy multi-start cost without augmentation.
pub fn greedy_mean_cost(params: &PolicyParams, instances: &[Instance], n_starts: usize) -> Result<f64, EvalError> {
    let opts = SolveOptions {
        n_starts,
        augment: false,
        ..SolveOptions::default()
    };
    let mut total = 0.0;
    for inst in instances {
        total += solve_instance(params, inst, &opts)?.cost;
    }
    Ok(total / instances.len() as f64)
}

/// Where a reference cost came from.
#[derive(Clone, Debug, PartialEq)]
pub enum ReferenceSource {
    /// Costs read from a file, labeled with its name.
    File(String),
    Heuristic,
}

impl ReferenceSource {
    pub fn label(&self) -> &str {
        match self {
            ReferenceSource::File(name) => name,
            ReferenceSource::Heuristic => HEURISTIC_LABEL,
        }
    }
}

/// Membership lists for the in/out labels of report rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub in_tasks: Vec<TaskSpec>,
    pub in_dists: Vec<String>,
}

impl Splits {
    pub fn label(&self, task: TaskSpec, dist: &str) -> String {
        let t = if self.in_tasks.contains(&task) { "in-task" } else { "out-task" };
        let d = if self.in_dists.iter().any(|x| x == dist) { "in-dist" } else { "out-dist" };
        format!("{t}/{d}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub task: String,
    pub dist: String,
    pub split: String,
    pub obj: f64,
    #[serde(rename = "ref")]
    pub reference: Option<f64>,
    pub gap_pct: Option<f64>,
    pub n: usize,
    pub seconds: f64,
    pub ref_source: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let err = |source| EvalError::Report {
            path: path.display().to_string(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        for row in &self.rows {
            w.serialize(row).map_err(err)?;
        }
        w.flush().map_err(|e| err(e.into()))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:<12} {:<18} {:>9} {:>9} {:>8} {:>5} {:>8}  ref_source",
            "task", "dist", "split", "obj", "ref", "gap%", "n", "seconds"
        );
        for r in &self.rows {
            let opt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
            let _ = writeln!(
                s,
                "{:<10} {:<12} {:<18} {:>9.4} {:>9} {:>8} {:>5} {:>8.2}  {}",
                r.task,
                r.dist,
                r.split,
                r.obj,
                opt(r.reference, 4),
                opt(r.gap_pct, 3),
                r.n,
                r.seconds,
                r.ref_source
            );
        }
        s
    }
}

/// Per-instance outcome of [`evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub solved: Vec<Solved>,
    pub report: EvalReport,
}

/// Solves every instance and aggregates per task in first-seen order.
///
/// `refs`, when given, must be line-aligned with `instances`. Reference
/// tours that are present are validated.
pub fn evaluate(
    params: &PolicyParams,
    instances: &[Instance],
    refs: Option<(&[SolutionRecord], ReferenceSource)>,
    dist: &str,
    splits: &Splits,
    opts: &SolveOptions,
    threads: usize,
) -> Result<EvalOutcome, EvalError> {
    if let Some((r, _)) = &refs {
        if r.len() != instances.len() {
            return Err(EvalError::Input(format!(
                "{} reference lines for {} instances",
                r.len(),
                instances.len()
            )));
        }
        for (i, (rec, inst)) in r.iter().zip(instances).enumerate() {
            if !rec.tours.is_empty() {
                let violations = validate(inst, &rec.solution());
                if !violations.is_empty() {
                    return Err(EvalError::Input(format!("reference line {}: {violations:?}", i + 1)));
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| EvalError::Input(format!("thread pool: {e}")))?;
    let timed: Vec<Result<(Solved, f64), EvalError>> = pool.install(|| {
        instances
            .par_iter()
            .map(|inst| {
                let clock = Instant::now();
                let s = solve_instance(params, inst, opts)?;
                Ok((s, clock.elapsed().as_secs_f64()))
            })
            .collect()
    });
    let timed = timed.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut order: Vec<TaskSpec> = Vec::new();
    let mut groups: BTreeMap<TaskSpec, Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        if !groups.contains_key(&inst.task) {
            order.push(inst.task);
        }
        groups.entry(inst.task).or_default().push(i);
    }
    let mut rows = Vec::new();
    for task in order {
        let idx = &groups[&task];
        let costs: Vec<f64> = idx.iter().map(|&i| timed[i].0.cost).collect();
        let obj = costs.iter().sum::<f64>() / costs.len() as f64;
        let (reference, gap_pct, ref_source) = match &refs {
            Some((r, source)) => {
                let rc: Vec<f64> = idx.iter().map(|&i| r[i].cost).collect();
                let gap = optimality_gap(&costs, &rc)?;
                (Some(rc.iter().sum::<f64>() / rc.len() as f64), Some(gap), source.label().to_string())
            }
            None => (None, None, String::new()),
        };
        rows.push(ReportRow {
            task: task.name(),
            dist: dist.to_string(),
            split: splits.label(task, dist),
            obj,
            reference,
            gap_pct,
            n: idx.len(),
            seconds: idx.iter().map(|&i| timed[i].1).sum(),
            ref_source,
        });
    }
    Ok(EvalOutcome {
        solved: timed.into_iter().map(|(s, _)| s).collect(),
        report: EvalReport { rows },
    })
}

/// Reference records from [`heuristic_baseline`].
pub fn heuristic_references(instances: &[Instance]) -> Result<Vec<SolutionRecord>, EvalError> {
    instances
        .iter()
        .map(|inst| {
            let sol = heuristic_baseline(inst)?;
            Ok(SolutionRecord {
                cost: solution_cost(inst, &sol)?,
                tours: sol.tours,
            })
        })
        .collect()
}
