//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails or overruns its time budget.
//!
//! Runs with `harness = false`, so every criterion reports even when an
//! earlier one fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use shield_core::eval::{augment8, greedy_mean_cost, heuristic_baseline, optimality_gap, solve_instance, SolveOptions};
use shield_core::generate::{generate_batch, DistributionSource, GenConfig};
use shield_core::model::{update_clusters, ClusterState, ModelConfig, Net, PolicyParams};
use shield_core::rng::stream_rng;
use shield_core::tensor::Tensor;
use shield_core::train::{
    load_checkpoint, reinforce_loss, reinforce_surrogate, replay_instance, rollout_instance, save_checkpoint,
    CheckpointError, DecodeMode, EpochMetrics, MetricsWriter, TrainConfig, TrainError, Trainer,
};
use shield_core::vrp::{
    brute_force_optimal, feasible_mask, initial_state, solution_cost, step, tours_length, validate, Instance,
    RolloutState, Solution, TaskSpec, VrpError,
};

/// Slack for cost comparisons between exact and heuristic solvers.
const COST_TOL: f64 = 1e-9;
/// Frozen upper bound on heuristic cost over the optimum, per instance.
/// Measured worst case on the reference run: 1.5006.
const HEURISTIC_BAND: f64 = 1.55;
/// Frozen upper bound on the mean of that ratio. Reference run: 1.034.
const HEURISTIC_MEAN_BAND: f64 = 1.10;
const PSI_ROW_TOL: f64 = 1e-9;
const RECONSTRUCT_TOL: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;
/// Both gradients below this norm count as agreeing at zero.
const GRAD_ZERO: f64 = 1e-10;
const SMOKE_MIN_IMPROVEMENT_PCT: f64 = 10.0;
const SMOKE_MAX_GAP_PCT: f64 = 15.0;
const ISOMETRY_TOL: f64 = 1e-9;
const GAP_EXAMPLE_TOL: f64 = 5e-4;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn untrained() -> PolicyParams {
    PolicyParams::init(ModelConfig::default(), 1).expect("default config is valid")
}

fn fixture_map() -> DistributionSource {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "fixtures", "maps", "clusters.txt"].iter().collect();
    DistributionSource::from_spec(&format!("map:{}", path.display())).expect("fixture map loads")
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        ff: 16,
        enc_layers: 1,
        dec_layers: 1,
        experts: 4,
        top_k: 2,
        n_clusters: 2,
        cluster_iters: 2,
        mod_capacity: 0.5,
        clip: 10.0,
    }
}

fn feasibility_soundness() -> Outcome {
    let params = untrained();
    let mut checked = 0;
    for source in [DistributionSource::uniform(), fixture_map()] {
        for (t, task) in TaskSpec::all().into_iter().enumerate() {
            let cfg = ok(GenConfig::standard(20, 100 + t as u64))?;
            for (i, inst) in ok(generate_batch(&source, task, &cfg, 500))?.iter().enumerate() {
                let mut net = Net::new(&params);
                let mut rng = stream_rng(t as u64, i as u64);
                let out = ok(rollout_instance(&mut net, inst, 8, DecodeMode::Sample, &mut rng, false))?;
                for tr in &out.trajectories {
                    let v = validate(inst, &tr.solution);
                    ensure!(v.is_empty(), "{task} on {} instance {i}: {v:?}", source.name);
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} solutions, 0 violations"))
}

fn oracle_bound() -> Outcome {
    let params = untrained();
    let (mut worst, mut ratio_sum, mut count, mut dp_checked) = (0.0f64, 0.0, 0, 0);
    for (t, task) in TaskSpec::all().into_iter().enumerate() {
        let cfg = GenConfig::new(6, 20.0, 200 + t as u64);
        for (i, inst) in ok(generate_batch(&DistributionSource::uniform(), task, &cfg, 50))?.iter().enumerate() {
            let (best, opt) = ok(brute_force_optimal(inst))?;
            ensure!(validate(inst, &best).is_empty(), "{task} #{i}: oracle solution invalid");
            if let Some(dp) = common::dp_optimal(inst) {
                ensure!((dp - opt).abs() <= COST_TOL, "{task} #{i}: brute force {opt} vs DP {dp}");
                dp_checked += 1;
            }
            let h = ok(solution_cost(inst, &ok(heuristic_baseline(inst))?))?;
            ensure!(opt <= h + COST_TOL, "{task} #{i}: heuristic {h} beats optimum {opt}");
            let mut net = Net::new(&params);
            let out = ok(rollout_instance(&mut net, inst, 6, DecodeMode::Greedy, &mut stream_rng(0, 0), false))?;
            let g = out.best().cost;
            ensure!(opt <= g + COST_TOL, "{task} #{i}: greedy {g} beats optimum {opt}");
            let ratio = h / opt;
            ensure!(ratio <= HEURISTIC_BAND, "{task} #{i}: heuristic ratio {ratio:.4} above {HEURISTIC_BAND}");
            worst = worst.max(ratio);
            ratio_sum += ratio;
            count += 1;
        }
    }
    let mean = ratio_sum / count as f64;
    ensure!(mean <= HEURISTIC_MEAN_BAND, "mean heuristic ratio {mean:.4} above {HEURISTIC_MEAN_BAND}");
    Ok(format!(
        "{count} instances, heuristic/opt worst {worst:.3} mean {mean:.3}, {dp_checked} cross-checked by DP"
    ))
}

struct MaskWalk<'a> {
    inst: &'a Instance,
    states: usize,
    leaves: usize,
    prefix: Vec<usize>,
}

impl MaskWalk<'_> {
    /// Visits every state reachable through the mask, validating each
    /// complete solution.
    fn explore(&mut self, state: &RolloutState) -> Result<(), String> {
        self.states += 1;
        let inst = self.inst;
        ensure!(self.prefix.len() <= 2 * inst.n() + 1, "walk did not terminate: {:?}", self.prefix);
        if state.done {
            ensure!(
                matches!(feasible_mask(state, inst), Err(VrpError::Finished)),
                "mask of a finished state is not an error"
            );
            let sol = Solution::from_actions(&self.prefix, inst.task.open);
            let v = validate(inst, &sol);
            ensure!(v.is_empty(), "{} {:?}: {v:?}", inst.task, self.prefix);
            self.leaves += 1;
            return Ok(());
        }
        let mask = ok(feasible_mask(state, inst))?;
        ensure!(mask.iter().any(|m| *m), "{}: all-false mask after {:?}", inst.task, self.prefix);
        for j in (0..mask.len()).filter(|&j| mask[j]) {
            let next = ok(step(state, inst, j))?;
            self.prefix.push(j);
            let leaves = self.leaves;
            self.explore(&next)?;
            ensure!(
                self.leaves > leaves,
                "{}: action {j} after {:?} has no feasible completion",
                inst.task,
                &self.prefix
            );
            self.prefix.pop();
        }
        Ok(())
    }
}

fn mask_completeness() -> Outcome {
    let (mut states, mut leaves, mut instances) = (0, 0, 0);
    for (t, task) in TaskSpec::all().into_iter().enumerate() {
        for n in 2..=6 {
            let cfg = GenConfig::new(n, 15.0, 300 + 10 * t as u64 + n as u64);
            for inst in ok(generate_batch(&DistributionSource::uniform(), task, &cfg, 3))? {
                let mut walk = MaskWalk {
                    inst: &inst,
                    states: 0,
                    leaves: 0,
                    prefix: Vec::new(),
                };
                walk.explore(&ok(initial_state(&inst))?)?;
                ensure!(walk.leaves > 0, "{task} n={n}: no complete solution reachable");
                states += walk.states;
                leaves += walk.leaves;
                instances += 1;
            }
        }
    }
    Ok(format!("{instances} instances, {states} states, {leaves} complete solutions validated"))
}

fn mod_contract() -> Outcome {
    let cfg = GenConfig::new(10, 20.0, 400);
    let inst = &ok(generate_batch(&DistributionSource::uniform(), "VRPBTW".parse().unwrap(), &cfg, 1))?[0];
    let mut layers_checked = 0;
    for (num, den) in [(1usize, 10usize), (1, 5), (1, 2), (1, 1)] {
        let beta = num as f64 / den as f64;
        let model = ModelConfig {
            d: 16,
            dec_layers: 3,
            mod_capacity: beta,
            ..ModelConfig::default()
        };
        let params = ok(PolicyParams::init(model, 5))?;
        for agents in [8usize, 20, 64] {
            let expected = (agents * num).div_ceil(den);
            let mut net = Net::new(&params);
            let enc = ok(net.encode(inst))?;
            let mut rng = stream_rng(agents as u64, den as u64);
            let ctx: Vec<f64> = (0..agents * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x = net.tape.constant(ok(Tensor::matrix(agents, 16, ctx))?);
            let masked = vec![false; agents * enc.nodes()];
            for layer in 0..3 {
                let before = net.value(x).clone();
                let router = &params.tensors()[params.index_of(&format!("decoder.{layer}.router")).unwrap()];
                let scores: Vec<f64> = (0..agents)
                    .map(|a| before.row(a).iter().zip(router.data()).map(|(c, w)| c * w).sum())
                    .collect();
                let mut order: Vec<usize> = (0..agents).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                let mut top = order[..expected].to_vec();
                top.sort_unstable();

                let (out, chosen) = ok(net.mod_layer(x, layer, &enc, &masked))?;
                ensure!(
                    chosen.len() == expected,
                    "beta {beta}, {agents} agents, layer {layer}: {} tokens, want {expected}",
                    chosen.len()
                );
                ensure!(chosen == top, "beta {beta}, {agents} agents, layer {layer}: routing is not top-k");
                let after = net.value(out);
                for a in (0..agents).filter(|a| !chosen.contains(a)) {
                    let same = before.row(a).iter().zip(after.row(a)).all(|(p, q)| p.to_bits() == q.to_bits());
                    ensure!(same, "beta {beta}, {agents} agents, layer {layer}: agent {a} changed");
                }
                x = out;
                layers_checked += 1;
            }
        }
    }
    Ok(format!("{layers_checked} layer applications"))
}

fn clustering_contract() -> Outcome {
    let cfg = GenConfig::new(12, 30.0, 500);
    let mut rows = 0;
    for (t, task) in TaskSpec::all().into_iter().enumerate() {
        let inst = &ok(generate_batch(&DistributionSource::uniform(), task, &cfg, 1))?[0];
        for n_clusters in [1usize, 3, 5] {
            let params = ok(PolicyParams::init(
                ModelConfig {
                    d: 16,
                    n_clusters,
                    cluster_iters: 3,
                    ..ModelConfig::default()
                },
                t as u64,
            ))?;
            let mut net = Net::new(&params);
            let enc = ok(net.encode(inst))?;
            let h = net.value(enc.h).clone();
            let psi = net.value(enc.clusters.psi).clone();
            let pre = net.value(enc.clusters.pre_residual).clone();
            for i in 0..psi.rows() {
                let s: f64 = psi.row(i).iter().sum();
                ensure!((s - 1.0).abs() <= PSI_ROW_TOL, "{task}: psi row {i} sums to {s}");
                rows += 1;
            }
            for j in 0..n_clusters {
                for k in 0..h.cols() {
                    let want: f64 = (0..h.rows()).map(|i| psi.get(i, j) * h.get(i, k)).sum();
                    let got = pre.get(j, k);
                    ensure!(
                        (want - got).abs() <= RECONSTRUCT_TOL * (1.0 + want.abs()),
                        "{task}: center {j} dim {k} is {got}, weighted sum {want}"
                    );
                }
            }

            let state = ok(ClusterState::new(pre.clone(), psi.clone()))?;
            let nodes: Vec<usize> = (1..h.rows()).collect();
            let forward = nodes.iter().try_fold(state.clone(), |s, &v| update_clusters(&s, &h, v));
            let backward = nodes.iter().rev().try_fold(state.clone(), |s, &v| update_clusters(&s, &h, v));
            let (forward, backward) = (ok(forward)?, ok(backward)?);
            for (a, b) in forward.centers.data().iter().zip(backward.centers.data()) {
                ensure!((a - b).abs() <= RECONSTRUCT_TOL * (1.0 + a.abs()), "{task}: order changes centers");
            }
            ensure!(
                update_clusters(&forward, &h, 1).is_err(),
                "{task}: subtracting a node twice was accepted"
            );
            if n_clusters == 1 {
                // One cluster: every weight is 1, so after removing customers
                // the center is the sum of the remaining rows (the depot).
                for k in 0..h.cols() {
                    let got = forward.centers.get(0, k);
                    let want = h.get(0, k);
                    let scale: f64 = (0..h.rows()).map(|i| h.get(i, k).abs()).sum::<f64>() + 1.0;
                    ensure!((got - want).abs() <= RECONSTRUCT_TOL * scale, "{task}: single center does not telescope");
                }
            }
        }
    }
    Ok(format!("{rows} psi rows, 48 encoder passes"))
}

/// Surrogate value of fixed trajectories under `params`.
/// An instance with its recorded actions and per-start advantages.
type Replayed = (Instance, Vec<Vec<usize>>, Vec<f64>);

fn surrogate_value(params: &PolicyParams, batch: &[Replayed]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (inst, actions, rewards) in batch {
        let mut net = Net::new(params);
        let out = replay_instance(&mut net, inst, actions)?;
        let sums = net.value(out.log_prob_sums.expect("replay records")).data().to_vec();
        total += reinforce_loss(&sums, rewards)?;
    }
    Ok(total)
}

fn gradient_fidelity() -> Outcome {
    let params = ok(PolicyParams::init(tiny_model(), 11))?;
    let cfg = GenConfig::new(4, 10.0, 600);
    let mut batch = Vec::new();
    for (k, task) in ["CVRP", "OVRPBLTW", "VRPTW", "VRPBL"].iter().enumerate() {
        let inst = ok(generate_batch(&DistributionSource::uniform(), task.parse().unwrap(), &cfg, 1))?.remove(0);
        let mut net = Net::new(&params);
        let out = ok(rollout_instance(&mut net, &inst, 4, DecodeMode::Sample, &mut stream_rng(k as u64, 0), false))?;
        let actions: Vec<Vec<usize>> = out.trajectories.iter().map(|t| t.actions.clone()).collect();
        let rewards: Vec<f64> = out.trajectories.iter().map(|t| t.reward()).collect();
        batch.push((inst, actions, rewards));
    }

    let mut analytic = params.zeros_like();
    for (inst, actions, rewards) in &batch {
        let mut net = Net::new(&params);
        let out = ok(replay_instance(&mut net, inst, actions))?;
        let loss = ok(reinforce_surrogate(&mut net.tape, out.log_prob_sums.unwrap(), rewards))?;
        ok(net.tape.backward(loss, 1.0, &mut analytic))?;
    }

    let mut groups: Vec<(String, f64, f64, f64)> = Vec::new();
    let mut probe = params.clone();
    for (p, name) in params.names().iter().enumerate() {
        let group = PolicyParams::group_of(name).to_string();
        if groups.last().is_none_or(|g| g.0 != group) {
            groups.push((group, 0.0, 0.0, 0.0));
        }
        let g = groups.last_mut().unwrap();
        for e in 0..params.tensors()[p].len() {
            let base = params.tensors()[p].data()[e];
            probe.tensors_mut()[p].data_mut()[e] = base + FD_STEP;
            let up = ok(surrogate_value(&probe, &batch))?;
            probe.tensors_mut()[p].data_mut()[e] = base - FD_STEP;
            let down = ok(surrogate_value(&probe, &batch))?;
            probe.tensors_mut()[p].data_mut()[e] = base;
            let fd = (up - down) / (2.0 * FD_STEP);
            let a = analytic[p].data()[e];
            g.1 += (a - fd).powi(2);
            g.2 += a * a;
            g.3 += fd * fd;
        }
    }
    let mut worst = 0.0f64;
    for (group, diff, a, fd) in &groups {
        let scale = a.sqrt().max(fd.sqrt());
        if scale < GRAD_ZERO {
            continue;
        }
        let rel = diff.sqrt() / scale;
        ensure!(rel <= GRAD_REL_TOL, "group {group}: relative error {rel:.2e}");
        worst = worst.max(rel);
    }
    Ok(format!("{} groups, worst relative error {worst:.2e}", groups.len()))
}

fn smoke_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 30,
        episodes_per_epoch: 256,
        batch_size: 32,
        learn_rate: 1e-3,
        n_starts: 10,
        n: 10,
        model: ModelConfig {
            d: 32,
            heads: 4,
            ff: 64,
            enc_layers: 2,
            dec_layers: 2,
            ..ModelConfig::default()
        },
        seed,
        tasks: vec!["CVRP".into()],
        ..TrainConfig::default()
    }
}

fn training_smoke() -> Outcome {
    let test = ok(generate_batch(
        &DistributionSource::uniform(),
        TaskSpec::CVRP,
        &ok(GenConfig::standard(10, 999))?,
        100,
    ))?;
    let refs: Vec<f64> = test
        .iter()
        .map(|i| common::dp_optimal(i).ok_or("DP oracle out of scope"))
        .collect::<Result<_, _>>()?;
    let mut trainer = ok(Trainer::new(smoke_config(7)))?;
    let before = ok(greedy_mean_cost(&trainer.params, &test, 10))?;
    ok(trainer.fit(|_, _| Ok(())))?;
    let opts = SolveOptions {
        n_starts: 10,
        augment: false,
        ..SolveOptions::default()
    };
    let mut costs = Vec::with_capacity(test.len());
    for inst in &test {
        let s = ok(solve_instance(&trainer.params, inst, &opts))?;
        ensure!(validate(inst, &s.solution).is_empty(), "trained policy produced an invalid solution");
        costs.push(s.cost);
    }
    let after = costs.iter().sum::<f64>() / costs.len() as f64;
    let improvement = (1.0 - after / before) * 100.0;
    let gap = ok(optimality_gap(&costs, &refs))?;
    ensure!(
        improvement >= SMOKE_MIN_IMPROVEMENT_PCT,
        "greedy cost {before:.4} -> {after:.4} improves only {improvement:.1}%"
    );
    ensure!(gap < SMOKE_MAX_GAP_PCT, "gap {gap:.2}% vs exact references");
    Ok(format!("greedy {before:.4} -> {after:.4} ({improvement:.1}% better), gap {gap:.2}%"))
}

fn augmentation_metric() -> Outcome {
    let params = untrained();
    let mut instances = 0;
    for (t, task) in TaskSpec::all().into_iter().enumerate() {
        let cfg = GenConfig::new(10, 20.0, 800 + t as u64);
        for inst in ok(generate_batch(&DistributionSource::uniform(), task, &cfg, 5))? {
            let s = ok(solve_instance(&params, &inst, &SolveOptions::default()))?;
            ensure!(s.cost <= s.identity_cost, "{task}: best-of-8 {} above identity {}", s.cost, s.identity_cost);
            ensure!(validate(&inst, &s.solution).is_empty(), "{task}: reported solution invalid");
            let fixed = ok(heuristic_baseline(&inst))?;
            let base = tours_length(&inst, &fixed);
            for (k, a) in augment8(&inst).iter().enumerate() {
                let len = tours_length(a, &fixed);
                ensure!((len - base).abs() <= ISOMETRY_TOL, "{task}: map {k} changes cost {base} -> {len}");
                ensure!(validate(a, &fixed).is_empty(), "{task}: map {k} breaks feasibility");
            }
            instances += 1;
        }
    }
    let g = ok(optimality_gap(&[2.0, 2.0], &[1.0, 3.0]))?;
    ensure!(g.abs() <= GAP_EXAMPLE_TOL, "ratio-of-means example gives {g}%");
    let g = ok(optimality_gap(&[6.0136], &[5.8773]))?;
    ensure!((g - 2.319).abs() <= GAP_EXAMPLE_TOL, "formula example gives {g}%, want 2.319%");
    ensure!(optimality_gap(&[], &[]).is_err(), "empty input accepted");
    ensure!(optimality_gap(&[1.0], &[0.0]).is_err(), "zero reference mean accepted");
    Ok(format!("{instances} instances, 8 isometries, gap examples reproduced"))
}

fn determinism_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        episodes_per_epoch: 48,
        batch_size: 16,
        n: 8,
        n_starts: 4,
        learn_rate: 1e-3,
        model: ModelConfig {
            d: 16,
            enc_layers: 1,
            dec_layers: 1,
            ..ModelConfig::default()
        },
        seed: 21,
        capacity: Some(20.0),
        tasks: ["CVRP", "VRPTW", "OVRP", "VRPB"].map(String::from).to_vec(),
        ..TrainConfig::default()
    }
}

/// Metrics CSV with the wall-clock column removed.
fn deterministic_metrics(path: &std::path::Path) -> Result<String, String> {
    let text = ok(std::fs::read_to_string(path))?;
    Ok(text
        .lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n"))
}

fn train_logged(trainer: &mut Trainer, path: &std::path::Path, append: bool) -> Result<Vec<EpochMetrics>, String> {
    let mut w = ok(MetricsWriter::open(path, append))?;
    ok(trainer.fit(|_, m| w.write(m)))
}

fn determinism_persistence() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let metrics = |name: &str| dir.path().join(name);

    let mut a = ok(Trainer::new(determinism_config()))?;
    train_logged(&mut a, &metrics("a.csv"), false)?;
    let mut b = ok(Trainer::new(TrainConfig {
        threads: 2,
        ..determinism_config()
    }))?;
    train_logged(&mut b, &metrics("b.csv"), false)?;
    let (ma, mb) = (deterministic_metrics(&metrics("a.csv"))?, deterministic_metrics(&metrics("b.csv"))?);
    ensure!(ma == mb, "metrics differ between runs:\n{ma}\n{mb}");
    ensure!(a.params == b.params, "parameters differ between runs");

    let ckpt = dir.path().join("half.ckpt");
    let mut half = ok(Trainer::new(TrainConfig {
        epochs: 2,
        ..determinism_config()
    }))?;
    train_logged(&mut half, &metrics("r.csv"), false)?;
    ok(save_checkpoint(&ckpt, &half.checkpoint()))?;
    let mut loaded = ok(load_checkpoint(&ckpt))?;
    loaded.config.epochs = 4;
    let mut resumed = ok(Trainer::from_checkpoint(loaded))?;
    train_logged(&mut resumed, &metrics("r.csv"), true)?;
    ensure!(deterministic_metrics(&metrics("r.csv"))? == ma, "resumed metrics differ from the straight run");
    ensure!(resumed.params == a.params, "resumed parameters differ");
    ensure!(resumed.adam == a.adam, "resumed optimizer state differs");
    ensure!(resumed.checkpoint().rng == a.checkpoint().rng, "resumed RNG differs");

    let good = ok(std::fs::read(&ckpt))?;
    let mut rejected = 0;
    let mut try_bytes = |bytes: Vec<u8>, want: fn(&CheckpointError) -> bool, what: &str| -> Result<(), String> {
        let path = dir.path().join("bad.ckpt");
        ok(std::fs::write(&path, &bytes))?;
        match load_checkpoint(&path) {
            Err(e) if want(&e) => {
                rejected += 1;
                Ok(())
            }
            Err(e) => Err(format!("{what}: wrong error {e}")),
            Ok(_) => Err(format!("{what}: corrupted checkpoint accepted")),
        }
    };
    let mut flipped = good.clone();
    flipped[good.len() / 2] ^= 0x10;
    try_bytes(flipped, |e| matches!(e, CheckpointError::Checksum), "bit flip")?;
    try_bytes(good[..good.len() - 100].to_vec(), |e| matches!(e, CheckpointError::Truncated), "truncation")?;
    let mut magic = good.clone();
    magic[0] = b'X';
    try_bytes(magic, |e| matches!(e, CheckpointError::BadMagic), "magic")?;
    let mut version = good.clone();
    version[4] = 99;
    try_bytes(version, |e| matches!(e, CheckpointError::Version { .. }), "version")?;
    try_bytes(Vec::new(), |e| matches!(e, CheckpointError::BadMagic), "empty file")?;

    // A failed save leaves the previous checkpoint in place.
    let blocker = dir.path().join("half.ckpt.tmp");
    ok(std::fs::create_dir(&blocker))?;
    ensure!(save_checkpoint(&ckpt, &a.checkpoint()).is_err(), "save through a blocked temp file succeeded");
    ensure!(ok(std::fs::read(&ckpt))? == good, "failed save modified the existing checkpoint");
    Ok(format!("2 identical runs, resume matches, {rejected} corruptions rejected"))
}

struct Criterion {
    id: u8,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "feasibility soundness", budget: Duration::from_secs(120), run: feasibility_soundness },
        Criterion { id: 2, name: "oracle optimality bound", budget: Duration::from_secs(300), run: oracle_bound },
        Criterion { id: 3, name: "mask completeness", budget: Duration::from_secs(600), run: mask_completeness },
        Criterion { id: 4, name: "mixture-of-depths contract", budget: Duration::from_secs(60), run: mod_contract },
        Criterion { id: 5, name: "clustering contract", budget: Duration::from_secs(60), run: clustering_contract },
        Criterion { id: 6, name: "gradient fidelity", budget: Duration::from_secs(300), run: gradient_fidelity },
        Criterion { id: 7, name: "training smoke", budget: Duration::from_secs(1800), run: training_smoke },
        Criterion { id: 8, name: "augmentation metric", budget: Duration::from_secs(60), run: augmentation_metric },
        Criterion { id: 9, name: "determinism and persistence", budget: Duration::from_secs(600), run: determinism_persistence },
    ];
    let filter: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| filter.is_empty() || filter.contains(&c.id)) {
        let clock = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = clock.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > c.budget => Err(format!("{detail}; took {took:.1?}, budget {:?}", c.budget)),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {} {}: {detail} [{:.1}s]", c.id, c.name, took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} {}: {why} [{:.1}s]", c.id, c.name, took.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
