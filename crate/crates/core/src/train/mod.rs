//! REINFORCE training with a shared multi-start baseline.

mod adam;
mod checkpoint;
mod rollout;

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, MAGIC, VERSION};
pub use rollout::{first_moves, replay_instance, rollout_instance, DecodeMode, InstanceRollout, Trajectory};

use std::fs::OpenOptions;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::{sample_instance, standard_capacity, DistributionSource, GenConfig, GenError};
use crate::model::{ModelConfig, ModelError, Net, PolicyParams};
use crate::rng::{stream_rng, RngSnapshot};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::vrp::{TaskSpec, VrpError};

/// Tasks seen during training in the standard multi-task setup.
pub const IN_TASKS: [&str; 6] = ["CVRP", "OVRP", "VRPB", "VRPL", "VRPTW", "OVRPTW"];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vrp(#[from] VrpError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: u64,
        batch: usize,
    },
    #[error("metrics file {path}: {source}")]
    Metrics {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub learn_rate: f64,
    pub n_starts: usize,
    /// Customers per training instance.
    pub n: usize,
    /// Vehicle capacity; defaults to the standard value for `n`.
    pub capacity: Option<f64>,
    pub model: ModelConfig,
    pub seed: u64,
    pub tasks: Vec<String>,
    /// `uniform` or `map:<path>` entries.
    pub distributions: Vec<String>,
    /// Worker threads for rollouts. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            episodes_per_epoch: 1024,
            batch_size: 32,
            learn_rate: 1e-4,
            n_starts: 8,
            n: 20,
            capacity: None,
            model: ModelConfig::default(),
            seed: 1,
            tasks: IN_TASKS.iter().map(|s| s.to_string()).collect(),
            distributions: vec!["uniform".into()],
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.model.check()?;
        if self.n_starts < 2 {
            return bad(format!("n_starts={} but the shared baseline needs at least 2", self.n_starts));
        }
        if self.episodes_per_epoch == 0 || self.batch_size == 0 || self.n == 0 {
            return bad("episodes_per_epoch, batch_size and n must be positive".into());
        }
        if !(self.learn_rate >= 0.0 && self.learn_rate.is_finite()) {
            return bad(format!("learn_rate {} must be finite and non-negative", self.learn_rate));
        }
        if self.tasks.is_empty() || self.distributions.is_empty() {
            return bad("task and distribution sets must be non-empty".into());
        }
        self.task_specs()?;
        self.capacity()?;
        Ok(())
    }

    pub fn task_specs(&self) -> Result<Vec<TaskSpec>, TrainError> {
        Ok(self.tasks.iter().map(|t| t.parse()).collect::<Result<_, VrpError>>()?)
    }

    pub fn capacity(&self) -> Result<f64, TrainError> {
        self.capacity
            .or_else(|| standard_capacity(self.n))
            .ok_or_else(|| TrainError::Config(format!("no standard capacity for n={}; set `capacity`", self.n)))
    }

    pub fn sources(&self) -> Result<Vec<DistributionSource>, TrainError> {
        Ok(self
            .distributions
            .iter()
            .map(|d| DistributionSource::from_spec(d))
            .collect::<Result<_, _>>()?)
    }
}

/// Advantages `R − mean(R)` for one instance's agents.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    rewards.iter().map(|r| r - mean).collect()
}

/// Surrogate `−mean_a (R_a − b)·Σ_t log p_t` whose gradient is the
/// negated policy-gradient estimate.
pub fn reinforce_loss(log_prob_sums: &[f64], rewards: &[f64]) -> Result<f64, TrainError> {
    check_group(log_prob_sums.len(), rewards.len())?;
    let adv = advantages(rewards);
    Ok(-adv.iter().zip(log_prob_sums).map(|(a, l)| a * l).sum::<f64>() / rewards.len() as f64)
}

/// [`reinforce_loss`] recorded on a tape over `[a × 1]` log-prob sums.
pub fn reinforce_surrogate(tape: &mut Tape<'_>, log_prob_sums: Var, rewards: &[f64]) -> Result<Var, TrainError> {
    check_group(tape.value(log_prob_sums).len(), rewards.len())?;
    let adv = tape.constant(Tensor::matrix(rewards.len(), 1, advantages(rewards))?);
    let weighted = tape.mul(log_prob_sums, adv)?;
    let total = tape.sum_all(weighted)?;
    Ok(tape.scale(total, -1.0 / rewards.len() as f64)?)
}

fn check_group(logps: usize, rewards: usize) -> Result<(), TrainError> {
    if logps != rewards {
        return Err(TrainError::Config(format!("{logps} log-prob sums for {rewards} rewards")));
    }
    if rewards < 2 {
        return Err(TrainError::Config("the shared baseline needs at least 2 starts".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub mean_cost: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Seconds; the only field outside the determinism guarantee.
    pub wallclock: f64,
}

/// Appends epoch rows to a CSV file, writing the header only for a new file.
pub struct MetricsWriter {
    inner: csv::Writer<std::fs::File>,
    path: String,
}

impl MetricsWriter {
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let exists = append && path.exists() && path.metadata().map(|m| m.len() > 0).unwrap_or(false);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| TrainError::Metrics {
                path: name.clone(),
                source: e.into(),
            })?;
        let inner = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        Ok(MetricsWriter { inner, path: name })
    }

    pub fn write(&mut self, m: &EpochMetrics) -> Result<(), TrainError> {
        let err = |source| TrainError::Metrics {
            path: self.path.clone(),
            source,
        };
        self.inner.serialize(m).map_err(err)?;
        self.inner.flush().map_err(|e| err(e.into()))
    }
}

struct InstanceResult {
    grads: Vec<Tensor>,
    mean_cost: f64,
    loss: f64,
}

/// Training state: parameters, optimizer, RNG and epoch counter.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: PolicyParams,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    sources: Vec<DistributionSource>,
    tasks: Vec<TaskSpec>,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.check()?;
        let params = PolicyParams::init(config.model.clone(), config.seed)?;
        let adam = Adam::new(config.learn_rate, params.tensors());
        let rng = stream_rng(config.seed, 0);
        Self::assemble(config, params, adam, rng, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, TrainError> {
        ckpt.config.check()?;
        let params = PolicyParams::from_tensors(ckpt.config.model.clone(), ckpt.params)?;
        let shapes_match = |ts: &[Tensor]| {
            ts.len() == params.tensors().len() && ts.iter().zip(params.tensors()).all(|(a, b)| a.shape() == b.shape())
        };
        if !shapes_match(&ckpt.adam_m) || !shapes_match(&ckpt.adam_v) {
            return Err(CheckpointError::Corrupt("optimizer moments do not match the parameters".into()).into());
        }
        let adam = Adam {
            lr: ckpt.config.learn_rate,
            t: ckpt.adam_t,
            m: ckpt.adam_m,
            v: ckpt.adam_v,
        };
        Self::assemble(ckpt.config, params, adam, ckpt.rng.restore(), ckpt.epoch)
    }

    fn assemble(
        config: TrainConfig,
        params: PolicyParams,
        adam: Adam,
        rng: ChaCha8Rng,
        epoch: u64,
    ) -> Result<Self, TrainError> {
        let sources = config.sources()?;
        let tasks = config.task_specs()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads.max(1))
            .build()
            .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
        Ok(Trainer {
            config,
            params,
            adam,
            rng,
            epoch,
            sources,
            tasks,
            pool,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            epoch: self.epoch,
            adam_t: self.adam.t,
            rng: RngSnapshot::capture(&self.rng),
            params: self.params.tensors().to_vec(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
        }
    }

    fn instance_step(
        params: &PolicyParams,
        source: &DistributionSource,
        task: TaskSpec,
        gen: &GenConfig,
        starts: usize,
        scale: f64,
        index: u64,
    ) -> Result<InstanceResult, TrainError> {
        let mut rng = stream_rng(gen.seed, index);
        let instance = sample_instance(source, task, gen, &mut rng)?;
        let mut net = Net::new(params);
        let out = rollout_instance(&mut net, &instance, starts, DecodeMode::Sample, &mut rng, true)?;
        let rewards: Vec<f64> = out.trajectories.iter().map(Trajectory::reward).collect();
        let sums = out.log_prob_sums.expect("recorded");
        let loss = reinforce_surrogate(&mut net.tape, sums, &rewards)?;
        let mut grads = params.zeros_like();
        net.tape.backward(loss, scale, &mut grads)?;
        Ok(InstanceResult {
            grads,
            mean_cost: -rewards.iter().sum::<f64>() / rewards.len() as f64,
            loss: net.value(loss).data()[0],
        })
    }

    /// One pass over `episodes_per_epoch` freshly sampled instances.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics, TrainError> {
        let clock = Instant::now();
        let cfg = self.config.clone();
        let capacity = cfg.capacity()?;
        let batches = cfg.episodes_per_epoch.div_ceil(cfg.batch_size);
        let (mut cost_sum, mut loss_sum, mut norm_sum) = (0.0, 0.0, 0.0);
        for batch in 0..batches {
            let size = cfg.batch_size.min(cfg.episodes_per_epoch - batch * cfg.batch_size);
            let batch_seed: u64 = self.rng.gen();
            let source = &self.sources[self.rng.gen_range(0..self.sources.len())];
            let task = self.tasks[self.rng.gen_range(0..self.tasks.len())];
            let gen = GenConfig::new(cfg.n, capacity, batch_seed);
            let params = &self.params;
            let results: Vec<Result<InstanceResult, TrainError>> = self.pool.install(|| {
                (0..size)
                    .into_par_iter()
                    .map(|i| Self::instance_step(params, source, task, &gen, cfg.n_starts, 1.0 / size as f64, i as u64))
                    .collect()
            });
            // Fixed-order reduction keeps results independent of threads.
            let mut grads = self.params.zeros_like();
            let (mut batch_cost, mut batch_loss) = (0.0, 0.0);
            for r in results {
                let r = r?;
                for (g, add) in grads.iter_mut().zip(&r.grads) {
                    for (a, b) in g.data_mut().iter_mut().zip(add.data()) {
                        *a += b;
                    }
                }
                batch_cost += r.mean_cost;
                batch_loss += r.loss;
            }
            let batch_loss = batch_loss / size as f64;
            let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
            if !batch_loss.is_finite() || !norm.is_finite() {
                log::error!(
                    "epoch {} batch {batch}: task {task}, source {}, loss {batch_loss}, grad norm {norm}",
                    self.epoch,
                    source.name
                );
                let what = if batch_loss.is_finite() { "gradient" } else { "loss" };
                return Err(TrainError::NonFinite {
                    what,
                    epoch: self.epoch,
                    batch,
                });
            }
            self.adam.step(self.params.tensors_mut(), &grads);
            cost_sum += batch_cost / size as f64;
            loss_sum += batch_loss;
            norm_sum += norm;
            log::debug!("epoch {} batch {batch}: {task} cost {:.4}", self.epoch, batch_cost / size as f64);
        }
        self.epoch += 1;
        let b = batches as f64;
        Ok(EpochMetrics {
            epoch: self.epoch,
            mean_cost: cost_sum / b,
            loss: loss_sum / b,
            grad_norm: norm_sum / b,
            wallclock: clock.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `config.epochs`, calling `after_epoch` after each one.
    pub fn fit<F>(&mut self, mut after_epoch: F) -> Result<Vec<EpochMetrics>, TrainError>
    where
        F: FnMut(&Trainer, &EpochMetrics) -> Result<(), TrainError>,
    {
        let mut all = Vec::new();
        while self.epoch < self.config.epochs {
            let m = self.train_epoch()?;
            log::info!(
                "epoch {}: cost {:.4} loss {:.5} grad {:.4} ({:.1}s)",
                m.epoch,
                m.mean_cost,
                m.loss,
                m.grad_norm,
                m.wallclock
            );
            after_epoch(self, &m)?;
            all.push(m);
        }
        Ok(all)
    }
}
