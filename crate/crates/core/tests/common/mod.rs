//! Test-only exact solver written independently of the library's search.
//!
//! Held-Karp gives the cheapest single-vehicle route over every customer
//! subset; a set-partition recursion then combines routes. Only tasks
//! without time windows or backhauls are covered, where a route's
//! feasibility depends on its customer set and length alone.

#![allow(dead_code, clippy::needless_range_loop)]

use shield_core::vrp::Instance;

const EPS: f64 = 1e-9;
pub const DP_MAX_N: usize = 12;

/// Optimal cost, or `None` when the task is outside the oracle's scope.
pub fn dp_optimal(inst: &Instance) -> Option<f64> {
    let task = inst.task;
    let n = inst.coords.len() - 1;
    if task.time_window || task.backhaul || n > DP_MAX_N {
        return None;
    }
    let full = (1usize << n) - 1;
    let d = |i: usize, j: usize| {
        let (a, b) = (inst.coords[i], inst.coords[j]);
        (a[0] - b[0]).hypot(a[1] - b[1])
    };
    // path[s][k]: shortest path from the depot through set s ending at k.
    let mut path = vec![vec![f64::INFINITY; n]; full + 1];
    for k in 0..n {
        path[1 << k][k] = d(0, k + 1);
    }
    for s in 1..=full {
        for k in 0..n {
            let here = path[s][k];
            if s & (1 << k) == 0 || !here.is_finite() {
                continue;
            }
            for j in 0..n {
                if s & (1 << j) == 0 {
                    let t = s | (1 << j);
                    let c = here + d(k + 1, j + 1);
                    if c < path[t][j] {
                        path[t][j] = c;
                    }
                }
            }
        }
    }
    let mut route = vec![f64::INFINITY; full + 1];
    for s in 1..=full {
        let load: f64 = (0..n).filter(|k| s & (1 << k) != 0).map(|k| inst.demand[k + 1]).sum();
        if load > 1.0 + EPS {
            continue;
        }
        let best = (0..n)
            .filter(|k| s & (1 << k) != 0)
            .map(|k| path[s][k] + if task.open { 0.0 } else { d(k + 1, 0) })
            .fold(f64::INFINITY, f64::min);
        if let Some(limit) = inst.duration_limit {
            if best > limit + EPS {
                continue;
            }
        }
        route[s] = best;
    }
    let mut part = vec![f64::INFINITY; full + 1];
    part[0] = 0.0;
    for s in 1..=full {
        let low = s & s.wrapping_neg();
        let rest = s ^ low;
        // Every route through the lowest customer: low plus a subset of rest.
        let mut sub = rest;
        loop {
            let r = sub | low;
            let c = route[r] + part[s ^ r];
            if c < part[s] {
                part[s] = c;
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
    }
    part[full].is_finite().then_some(part[full])
}
