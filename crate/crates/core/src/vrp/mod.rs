//! Problem definitions for the sixteen capacitated routing variants.
//!
//! Every variant is capacitated routing plus any subset of four extra
//! constraints: open routes (O), time windows (TW), a per-route duration
//! limit (L) and mixed backhauls (B).

mod brute;
mod state;
mod validate;

pub use brute::{brute_force_optimal, BRUTE_FORCE_MAX_N};
pub use state::{feasible_mask, initial_state, step, RolloutState};
pub use validate::{solution_cost, tours_length, validate, TourSim, Violation};

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Slack applied to every feasibility comparison so accumulated rounding
/// (e.g. demands that sum exactly to capacity) does not flip a decision.
pub const FEAS_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VrpError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("invalid solution: {0:?}")]
    InvalidSolution(Vec<Violation>),
    #[error("no feasible action in a non-terminal state (position {position})")]
    NoFeasibleAction { position: usize },
    #[error("action {action} is not feasible in the current state")]
    InfeasibleAction { action: usize },
    #[error("rollout already finished")]
    Finished,
    #[error("instance has {n} customers; exhaustive search supports at most {max}")]
    TooLarge { n: usize, max: usize },
    #[error("instance admits no feasible solution")]
    NoFeasibleSolution,
    #[error("unknown task name {0:?}; expected one of {names}", names = TaskSpec::all_names().join(", "))]
    UnknownTask(String),
}

/// Which of the four optional constraints are active. Capacity always is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TaskSpec {
    pub open: bool,
    pub time_window: bool,
    pub duration_limit: bool,
    pub backhaul: bool,
}

impl TaskSpec {
    pub const CVRP: TaskSpec = TaskSpec {
        open: false,
        time_window: false,
        duration_limit: false,
        backhaul: false,
    };

    pub const fn new(open: bool, time_window: bool, duration_limit: bool, backhaul: bool) -> Self {
        TaskSpec {
            open,
            time_window,
            duration_limit,
            backhaul,
        }
    }

    /// All sixteen variants, in the canonical listing order.
    pub fn all() -> [TaskSpec; 16] {
        const NAMES: [&str; 16] = [
            "CVRP", "OVRP", "VRPB", "VRPL", "VRPTW", "OVRPTW", "OVRPB", "OVRPL", "VRPBL", "VRPBTW",
            "VRPLTW", "OVRPBL", "OVRPBTW", "OVRPLTW", "VRPBLTW", "OVRPBLTW",
        ];
        NAMES.map(|n| n.parse().expect("canonical names parse"))
    }

    pub fn all_names() -> Vec<String> {
        TaskSpec::all().iter().map(TaskSpec::name).collect()
    }

    pub fn name(&self) -> String {
        if *self == TaskSpec::CVRP {
            return "CVRP".to_string();
        }
        let mut s = String::new();
        if self.open {
            s.push('O');
        }
        s.push_str("VRP");
        if self.backhaul {
            s.push('B');
        }
        if self.duration_limit {
            s.push('L');
        }
        if self.time_window {
            s.push_str("TW");
        }
        s
    }

    /// Constraint indicator vector in the order (open, time window,
    /// duration limit, backhaul).
    pub fn onehot(&self) -> [f64; 4] {
        let f = |b: bool| if b { 1.0 } else { 0.0 };
        [
            f(self.open),
            f(self.time_window),
            f(self.duration_limit),
            f(self.backhaul),
        ]
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for TaskSpec {
    type Err = VrpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "CVRP" {
            return Ok(TaskSpec::CVRP);
        }
        let unknown = || VrpError::UnknownTask(s.to_string());
        let (open, rest) = match s.strip_prefix('O') {
            Some(r) => (true, r),
            None => (false, s),
        };
        let mut rest = rest.strip_prefix("VRP").ok_or_else(unknown)?;
        let mut take = |tag: &str| match rest.strip_prefix(tag) {
            Some(r) => {
                rest = r;
                true
            }
            None => false,
        };
        let backhaul = take("B");
        let duration_limit = take("L");
        let time_window = take("TW");
        if !rest.is_empty() || !(open || backhaul || duration_limit || time_window) {
            return Err(unknown());
        }
        Ok(TaskSpec {
            open,
            time_window,
            duration_limit,
            backhaul,
        })
    }
}

/// Static description of one routing instance. Node 0 is the depot.
///
/// Demands are normalized by `capacity`; backhaul customers carry negative
/// demand. Inactive constraints have zero-filled fields: time windows and
/// service times are all zero without TW, and `duration_limit` is `None`
/// without L.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub task: TaskSpec,
    pub coords: Vec<[f64; 2]>,
    pub demand: Vec<f64>,
    pub capacity: f64,
    pub time_windows: Vec<[f64; 2]>,
    pub service: Vec<f64>,
    pub duration_limit: Option<f64>,
}

impl Instance {
    /// Number of customers (excluding the depot).
    pub fn n(&self) -> usize {
        self.coords.len().saturating_sub(1)
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let [ax, ay] = self.coords[i];
        let [bx, by] = self.coords[j];
        ((ax - bx) * (ax - bx) + (ay - by) * (ay - by)).sqrt()
    }

    pub fn is_backhaul(&self, node: usize) -> bool {
        self.demand[node] < 0.0
    }

    pub fn linehaul_count(&self) -> usize {
        self.demand.iter().skip(1).filter(|d| **d > 0.0).count()
    }

    /// Checks every structural invariant and consistency with `self.task`.
    pub fn check(&self) -> Result<(), VrpError> {
        let bad = |msg: String| Err(VrpError::InvalidInstance(msg));
        let n1 = self.coords.len();
        if n1 < 2 {
            return bad("at least one customer is required".into());
        }
        if self.demand.len() != n1 || self.time_windows.len() != n1 || self.service.len() != n1 {
            return bad(format!(
                "field lengths differ: coords {n1}, demand {}, tw {}, service {}",
                self.demand.len(),
                self.time_windows.len(),
                self.service.len()
            ));
        }
        if !(self.capacity.is_finite() && self.capacity > 0.0) {
            return bad(format!("capacity must be positive, got {}", self.capacity));
        }
        for (i, [x, y]) in self.coords.iter().enumerate() {
            if !(0.0..=1.0).contains(x) || !(0.0..=1.0).contains(y) {
                return bad(format!("node {i} lies outside the unit square"));
            }
        }
        if self.demand[0] != 0.0 {
            return bad("depot demand must be 0".into());
        }
        for (i, &d) in self.demand.iter().enumerate().skip(1) {
            if !d.is_finite() || d == 0.0 || d.abs() > 1.0 + FEAS_EPS {
                return bad(format!("customer {i} demand {d} must be non-zero and within capacity"));
            }
            if d < 0.0 && !self.task.backhaul {
                return bad(format!("customer {i} is a backhaul but the task has none"));
            }
        }
        if self.task.time_window {
            for (i, &[o, c]) in self.time_windows.iter().enumerate() {
                if !(o.is_finite() && c.is_finite() && 0.0 <= o && o <= c) {
                    return bad(format!("node {i} has an invalid time window [{o}, {c}]"));
                }
            }
            if self.time_windows[0][0] != 0.0 || self.time_windows[0][1] <= 0.0 {
                return bad("depot window must open at time 0 and close after it".into());
            }
            if self.service.iter().any(|s| !s.is_finite() || *s < 0.0) {
                return bad("service times must be non-negative".into());
            }
        } else if self.time_windows.iter().flatten().any(|v| *v != 0.0)
            || self.service.iter().any(|s| *s != 0.0)
        {
            return bad("time-window features must be zero for tasks without TW".into());
        }
        match (self.task.duration_limit, self.duration_limit) {
            (true, Some(l)) if l.is_finite() && l > 0.0 => {}
            (true, _) => return bad("duration-limited task needs a positive limit".into()),
            (false, Some(_)) => return bad("duration limit given for a task without L".into()),
            (false, None) => {}
        }
        Ok(())
    }
}

/// A sequence of sub-tours. Each tour starts at the depot; closed tasks end
/// every tour at the depot, open tasks may omit the final depot node.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Solution {
    pub tours: Vec<Vec<usize>>,
}

impl Solution {
    pub fn new(tours: Vec<Vec<usize>>) -> Self {
        Solution { tours }
    }

    /// Splits a flat action sequence (depot visits as 0) into tours.
    ///
    /// `[0, 2, 1, 0, 3, 0]` becomes `[[0, 2, 1, 0], [0, 3, 0]]` for a closed
    /// task and `[[0, 2, 1], [0, 3]]` for an open one.
    pub fn from_actions(actions: &[usize], open: bool) -> Self {
        let mut tours = Vec::new();
        let mut cur: Vec<usize> = Vec::new();
        for &a in actions {
            if a == 0 {
                if cur.is_empty() {
                    continue;
                }
                let mut tour = vec![0];
                tour.append(&mut cur);
                if !open {
                    tour.push(0);
                }
                tours.push(tour);
            } else {
                cur.push(a);
            }
        }
        if !cur.is_empty() {
            let mut tour = vec![0];
            tour.append(&mut cur);
            if !open {
                tour.push(0);
            }
            tours.push(tour);
        }
        Solution { tours }
    }

    /// Customers of each tour with depot markers stripped.
    pub fn customer_routes(&self) -> Vec<Vec<usize>> {
        self.tours
            .iter()
            .map(|t| t.iter().copied().filter(|&v| v != 0).collect())
            .collect()
    }

    /// Flattened node sequence used for lexicographic tie-breaking.
    pub fn flat(&self) -> Vec<usize> {
        self.tours.iter().flatten().copied().collect()
    }
}
