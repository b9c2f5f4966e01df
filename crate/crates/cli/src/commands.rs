use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use shield_core::eval::{evaluate, heuristic_references, EvalError, ReferenceSource, SolveOptions, Splits};
use shield_core::generate::{
    generate_batch, read_instances, read_solutions, standard_capacity, write_instances, write_solutions,
    DistributionSource, GenConfig, GenError, SolutionRecord,
};
use shield_core::model::PolicyParams;
use shield_core::train::{
    load_checkpoint, save_checkpoint, CheckpointError, MetricsWriter, TrainConfig, TrainError, Trainer,
};
use shield_core::vrp::{solution_cost, validate as check_solution, Instance, VrpError};
use thiserror::Error;

use crate::{DecodeArgs, EvalArgs, GenerateArgs, SolveArgs, TrainArgs, TrainOverrides, ValidateArgs};

const SEED_ENV: &str = "SHIELD_SEED";
/// Recorded costs further than this from the recomputed cost are flagged.
const COST_MISMATCH_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Vrp(#[from] VrpError),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Input(_) => "input",
            CliError::Config(_) => "config",
            CliError::Gen(GenError::Io { .. }) => "io",
            CliError::Gen(GenError::Parse { .. }) => "input",
            CliError::Gen(_) => "generate",
            CliError::Train(_) => "train",
            CliError::Eval(_) => "eval",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Vrp(_) => "vrp",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

pub fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let seed = resolve_seed(a.seed)?;
    let capacity = a
        .capacity
        .or_else(|| standard_capacity(a.n))
        .ok_or_else(|| CliError::Config(format!("no standard capacity for n={}; pass --capacity", a.n)))?;
    let source = DistributionSource::from_spec(&a.dist)?;
    let instances = generate_batch(&source, a.task, &GenConfig::new(a.n, capacity, seed), a.count)?;
    write_instances(&a.out, &instances)?;
    println!(
        "wrote {} {} instances (n={}, seed={seed}) to {}",
        instances.len(),
        a.task,
        a.n,
        display(&a.out)
    );
    Ok(ExitCode::SUCCESS)
}

fn load_config(path: Option<&Path>) -> Result<(TrainConfig, bool)> {
    let Some(path) = path else {
        return Ok((TrainConfig::default(), false));
    };
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: display(path),
        source,
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", display(path))))?;
    let has_seed = value.get("seed").is_some();
    let config = serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", display(path))))?;
    Ok((config, has_seed))
}

fn apply_overrides(config: &mut TrainConfig, o: TrainOverrides) {
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = o.$flag {
                config.$field = v;
            })*
        };
    }
    set!(epochs => epochs, episodes => episodes_per_epoch, batch_size => batch_size, lr => learn_rate,
         n_starts => n_starts, n => n, tasks => tasks, distributions => distributions);
    if o.capacity.is_some() {
        config.capacity = o.capacity;
    }
}

fn checkpoint_err(path: &Path, source: CheckpointError) -> CliError {
    CliError::Checkpoint {
        path: display(path),
        source,
    }
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut name = a.out.clone().into_os_string();
        name.push(".metrics.csv");
        PathBuf::from(name)
    });
    let mut trainer = match &a.resume {
        Some(path) => {
            let o = &a.overrides;
            let others = o.episodes.is_some()
                || o.batch_size.is_some()
                || o.lr.is_some()
                || o.n_starts.is_some()
                || o.n.is_some()
                || o.capacity.is_some()
                || o.tasks.is_some()
                || o.distributions.is_some()
                || o.seed.is_some();
            if others {
                return Err(CliError::Config("only --epochs and --threads may change when resuming".into()));
            }
            let mut ckpt = load_checkpoint(path).map_err(|e| checkpoint_err(path, e))?;
            if let Some(epochs) = o.epochs {
                ckpt.config.epochs = epochs;
            }
            if let Some(threads) = a.threads {
                ckpt.config.threads = threads;
            }
            Trainer::from_checkpoint(ckpt)?
        }
        None => {
            let (mut config, has_seed) = load_config(a.config.as_deref())?;
            let seed_flag = a.overrides.seed;
            apply_overrides(&mut config, a.overrides);
            if let Some(s) = seed_flag {
                config.seed = s;
            } else if !has_seed {
                if let Some(s) = env_seed()? {
                    config.seed = s;
                }
            }
            if let Some(threads) = a.threads {
                config.threads = threads;
            }
            Trainer::new(config)?
        }
    };
    let mut metrics = MetricsWriter::open(&metrics_path, a.resume.is_some())?;
    let out = a.out.clone();
    let start = trainer.epoch;
    trainer.fit(|t, m| {
        metrics.write(m)?;
        save_checkpoint(&out, &t.checkpoint()).map_err(TrainError::from)
    })?;
    if trainer.epoch == start {
        save_checkpoint(&out, &trainer.checkpoint()).map_err(|e| checkpoint_err(&out, e))?;
    }
    println!(
        "trained epochs {}..{} (seed {}); checkpoint {}, metrics {}",
        start,
        trainer.epoch,
        trainer.config.seed,
        display(&out),
        display(&metrics_path)
    );
    Ok(ExitCode::SUCCESS)
}

struct Loaded {
    params: PolicyParams,
    config: TrainConfig,
    instances: Vec<Instance>,
    opts: SolveOptions,
    threads: usize,
}

fn load_for_decoding(a: &DecodeArgs) -> Result<Loaded> {
    let ckpt = load_checkpoint(&a.ckpt).map_err(|e| checkpoint_err(&a.ckpt, e))?;
    let params = PolicyParams::from_tensors(ckpt.config.model.clone(), ckpt.params)
        .map_err(|e| CliError::Input(format!("{}: {e}", display(&a.ckpt))))?;
    let instances = read_instances(&a.instances)?;
    if instances.is_empty() {
        return Err(CliError::Input(format!("{}: no instances", display(&a.instances))));
    }
    let opts = SolveOptions {
        n_starts: a.n_starts.unwrap_or(ckpt.config.n_starts),
        augment: !a.no_augment,
        samples: a.samples,
        seed: resolve_seed(a.seed)?,
    };
    if opts.n_starts == 0 {
        return Err(CliError::Config("--n-starts must be positive".into()));
    }
    Ok(Loaded {
        params,
        config: ckpt.config,
        instances,
        opts,
        threads: a.threads,
    })
}

fn splits(config: &TrainConfig) -> Result<Splits> {
    Ok(Splits {
        in_tasks: config.task_specs()?,
        in_dists: config.distributions.clone(),
    })
}

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let l = load_for_decoding(&a.decode)?;
    let refs = match (&a.refs, a.heuristic_refs) {
        (Some(path), _) => {
            let name = path.file_name().map_or_else(|| display(path), |n| n.to_string_lossy().into_owned());
            Some((read_solutions(path)?, ReferenceSource::File(name)))
        }
        (None, true) => Some((heuristic_references(&l.instances)?, ReferenceSource::Heuristic)),
        (None, false) => None,
    };
    let outcome = evaluate(
        &l.params,
        &l.instances,
        refs.as_ref().map(|(r, s)| (r.as_slice(), s.clone())),
        &a.dist,
        &splits(&l.config)?,
        &l.opts,
        l.threads,
    )?;
    outcome.report.write_csv(&a.report)?;
    print!("{}", outcome.report.to_table());
    Ok(ExitCode::SUCCESS)
}

pub fn solve(a: SolveArgs) -> Result<ExitCode> {
    let l = load_for_decoding(&a.decode)?;
    let outcome = evaluate(&l.params, &l.instances, None, "", &Splits::default(), &l.opts, l.threads)?;
    let records: Vec<SolutionRecord> = outcome
        .solved
        .into_iter()
        .map(|s| SolutionRecord {
            cost: s.cost,
            tours: s.solution.tours,
        })
        .collect();
    write_solutions(&a.out_solutions, &records)?;
    let mean = records.iter().map(|r| r.cost).sum::<f64>() / records.len() as f64;
    println!(
        "solved {} instances, mean cost {mean:.6}; solutions {}",
        records.len(),
        display(&a.out_solutions)
    );
    Ok(ExitCode::SUCCESS)
}

pub fn validate(a: ValidateArgs) -> Result<ExitCode> {
    let instances = read_instances(&a.instances)?;
    let solutions = read_solutions(&a.solutions)?;
    if instances.len() != solutions.len() {
        return Err(CliError::Input(format!(
            "{} has {} lines but {} has {}",
            display(&a.instances),
            instances.len(),
            display(&a.solutions),
            solutions.len()
        )));
    }
    let mut bad = 0;
    for (i, (inst, rec)) in instances.iter().zip(&solutions).enumerate() {
        let sol = rec.solution();
        let mut problems: Vec<String> = check_solution(inst, &sol).iter().map(|v| format!("{v:?}")).collect();
        if problems.is_empty() {
            let cost = solution_cost(inst, &sol)?;
            if (cost - rec.cost).abs() > COST_MISMATCH_TOL {
                problems.push(format!("CostMismatch {{ recorded: {}, actual: {cost} }}", rec.cost));
            }
        }
        if problems.is_empty() {
            println!("line {}: ok", i + 1);
        } else {
            bad += 1;
            println!("line {}: {}", i + 1, problems.join("; "));
        }
    }
    println!("{} of {} solutions valid", solutions.len() - bad, solutions.len());
    Ok(if bad == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
