//! Shared fixtures for the benchmarks.

use shield_core::generate::{generate_batch, DistributionSource, GenConfig};
use shield_core::vrp::{Instance, TaskSpec};

/// `count` uniform instances of `task` with `n` customers and a fixed seed.
pub fn fixture(task: &str, n: usize, capacity: f64, count: usize) -> Vec<Instance> {
    let task: TaskSpec = task.parse().expect("known task name");
    generate_batch(&DistributionSource::uniform(), task, &GenConfig::new(n, capacity, 17), count)
        .expect("fixture generation")
}
