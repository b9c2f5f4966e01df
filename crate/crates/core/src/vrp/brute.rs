use super::{Instance, Solution, TourSim, VrpError};

pub const BRUTE_FORCE_MAX_N: usize = 8;

/// Costs closer than this are treated as ties.
const TIE_EPS: f64 = 1e-12;

struct Search<'a> {
    instance: &'a Instance,
    full: u32,
    seq: Vec<usize>,
    best_cost: f64,
    best_seq: Option<Vec<usize>>,
}

impl<'a> Search<'a> {
    fn dfs(&mut self, sim: &TourSim<'a>, visited: u32, cost: f64) {
        if cost >= self.best_cost - TIE_EPS {
            return;
        }
        // Depot first, then customers in index order: the first optimum
        // found is the lexicographically smallest node sequence.
        if sim.customers > 0 {
            let mut closing = sim.clone();
            let (travel, issues) = closing.close();
            if issues.ok() {
                let total = cost + travel;
                self.seq.push(0);
                if visited == self.full {
                    if total < self.best_cost - TIE_EPS {
                        self.best_cost = total;
                        self.best_seq = Some(self.seq.clone());
                    }
                } else {
                    let fresh = TourSim::start(self.instance, closing.linehaul_left());
                    self.dfs(&fresh, visited, total);
                }
                self.seq.pop();
            }
        }
        for j in 1..=self.instance.n() {
            if visited & (1 << j) != 0 {
                continue;
            }
            let mut next = sim.clone();
            let (travel, issues) = next.visit(j);
            if !issues.ok() {
                continue;
            }
            self.seq.push(j);
            self.dfs(&next, visited | (1 << j), cost + travel);
            self.seq.pop();
        }
    }
}

/// Globally optimal solution by exhaustive search over visit orders and
/// depot insertions. Only practical for tiny instances.
pub fn brute_force_optimal(instance: &Instance) -> Result<(Solution, f64), VrpError> {
    instance.check()?;
    let n = instance.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(VrpError::TooLarge {
            n,
            max: BRUTE_FORCE_MAX_N,
        });
    }
    let mut search = Search {
        instance,
        full: ((1u32 << (n + 1)) - 1) & !1,
        seq: Vec::with_capacity(2 * n + 1),
        best_cost: f64::INFINITY,
        best_seq: None,
    };
    let start = TourSim::start(instance, instance.linehaul_count());
    search.dfs(&start, 0, 0.0);
    let seq = search.best_seq.ok_or(VrpError::NoFeasibleSolution)?;
    Ok((Solution::from_actions(&seq, instance.task.open), search.best_cost))
}
