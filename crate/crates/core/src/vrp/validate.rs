use super::{Instance, Solution, VrpError, FEAS_EPS};

/// One way a solution breaks the rules. Violations are data, not errors.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Structure { tour: usize, detail: String },
    EmptyTour { tour: usize },
    VisitCount { node: usize, count: usize },
    Capacity { tour: usize, node: usize },
    BackhaulStart { tour: usize, node: usize },
    DurationLimit { tour: usize, length: f64 },
    /// Late arrival at `node`; node 0 means the depot deadline was missed.
    TimeWindow { tour: usize, node: usize, arrival: f64 },
    DepotReturn { tour: usize },
}

/// Constraint outcomes of a single simulated move.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MoveIssues {
    pub capacity: bool,
    pub backhaul_start: bool,
    pub time_window: bool,
    pub duration: bool,
}

impl MoveIssues {
    pub fn ok(&self) -> bool {
        !(self.capacity || self.backhaul_start || self.time_window || self.duration)
    }
}

/// Forward simulation of a single vehicle, independent of the decoder's
/// feasibility mask. Used by [`validate`] and by exhaustive search.
#[derive(Clone, Debug)]
pub struct TourSim<'a> {
    instance: &'a Instance,
    pub position: usize,
    pub load: f64,
    pub time: f64,
    pub length: f64,
    pub customers: usize,
    linehaul_left: usize,
}

impl<'a> TourSim<'a> {
    /// A vehicle leaving the depot while `linehaul_left` linehaul customers
    /// are still unserved (globally, not just on this tour).
    pub fn start(instance: &'a Instance, linehaul_left: usize) -> Self {
        let load = if instance.task.backhaul && linehaul_left == 0 {
            0.0
        } else {
            1.0
        };
        TourSim {
            instance,
            position: 0,
            load,
            time: 0.0,
            length: 0.0,
            customers: 0,
            linehaul_left,
        }
    }

    pub fn linehaul_left(&self) -> usize {
        self.linehaul_left
    }

    /// Moves to customer `j`, returning the travel distance and any
    /// constraint that the move breaks.
    pub fn visit(&mut self, j: usize) -> (f64, MoveIssues) {
        let inst = self.instance;
        let mut issues = MoveIssues::default();
        let travel = inst.dist(self.position, j);
        let demand = inst.demand[j];
        if demand < 0.0 && self.customers == 0 && self.linehaul_left > 0 {
            issues.backhaul_start = true;
        }
        self.load -= demand;
        if self.load < -FEAS_EPS || self.load > 1.0 + FEAS_EPS {
            issues.capacity = true;
        }
        if demand > 0.0 {
            self.linehaul_left = self.linehaul_left.saturating_sub(1);
        }
        self.length += travel;
        if inst.task.time_window {
            let arrival = self.time + travel;
            let [open, close] = inst.time_windows[j];
            if arrival > close + FEAS_EPS {
                issues.time_window = true;
            }
            self.time = arrival.max(open) + inst.service[j];
        }
        if inst.task.duration_limit && inst.task.open {
            if let Some(limit) = inst.duration_limit {
                if self.length > limit + FEAS_EPS {
                    issues.duration = true;
                }
            }
        }
        self.position = j;
        self.customers += 1;
        (travel, issues)
    }

    /// Ends the tour: returns to the depot for closed tasks (travel is
    /// counted) or simply stops for open ones.
    pub fn close(&mut self) -> (f64, MoveIssues) {
        let inst = self.instance;
        let mut issues = MoveIssues::default();
        if inst.task.open {
            return (0.0, issues);
        }
        let travel = inst.dist(self.position, 0);
        self.length += travel;
        if let Some(limit) = inst.duration_limit.filter(|_| inst.task.duration_limit) {
            if self.length > limit + FEAS_EPS {
                issues.duration = true;
            }
        }
        if inst.task.time_window {
            let arrival = self.time + travel;
            if arrival > inst.time_windows[0][1] + FEAS_EPS {
                issues.time_window = true;
            }
            self.time = arrival;
        }
        self.position = 0;
        (travel, issues)
    }
}

/// Lists every rule the solution breaks; an empty list means feasible.
pub fn validate(instance: &Instance, solution: &Solution) -> Vec<Violation> {
    let mut out = Vec::new();
    if let Err(e) = instance.check() {
        out.push(Violation::Structure {
            tour: 0,
            detail: e.to_string(),
        });
        return out;
    }
    let n = instance.n();
    let open = instance.task.open;
    let mut counts = vec![0usize; n + 1];
    let mut linehaul_left = instance.linehaul_count();
    for (t, tour) in solution.tours.iter().enumerate() {
        if tour.first() != Some(&0) {
            out.push(Violation::Structure {
                tour: t,
                detail: "tour must start at the depot".into(),
            });
            continue;
        }
        if let Some(&bad) = tour.iter().find(|&&v| v > n) {
            out.push(Violation::Structure {
                tour: t,
                detail: format!("node {bad} does not exist"),
            });
            continue;
        }
        let ends_at_depot = tour.len() > 1 && tour.last() == Some(&0);
        if !open && !ends_at_depot {
            out.push(Violation::DepotReturn { tour: t });
        }
        let body_end = if ends_at_depot { tour.len() - 1 } else { tour.len() };
        let body = &tour[1..body_end];
        if body.contains(&0) {
            out.push(Violation::Structure {
                tour: t,
                detail: "depot visited inside a tour".into(),
            });
            continue;
        }
        if body.is_empty() {
            out.push(Violation::EmptyTour { tour: t });
            continue;
        }
        let mut sim = TourSim::start(instance, linehaul_left);
        let mut capacity_reported = false;
        for &j in body {
            counts[j] += 1;
            let arrival = sim.time + instance.dist(sim.position, j);
            let (_, issues) = sim.visit(j);
            if issues.backhaul_start {
                out.push(Violation::BackhaulStart { tour: t, node: j });
            }
            if issues.capacity && !capacity_reported {
                capacity_reported = true;
                out.push(Violation::Capacity { tour: t, node: j });
            }
            if issues.time_window {
                out.push(Violation::TimeWindow {
                    tour: t,
                    node: j,
                    arrival,
                });
            }
        }
        let arrival = sim.time + instance.dist(sim.position, 0);
        let (_, issues) = sim.close();
        let open_over = open
            && instance.task.duration_limit
            && instance.duration_limit.is_some_and(|l| sim.length > l + FEAS_EPS);
        if issues.duration || open_over {
            out.push(Violation::DurationLimit {
                tour: t,
                length: sim.length,
            });
        }
        if issues.time_window {
            out.push(Violation::TimeWindow {
                tour: t,
                node: 0,
                arrival,
            });
        }
        linehaul_left = sim.linehaul_left();
    }
    for (node, &count) in counts.iter().enumerate().skip(1) {
        if count != 1 {
            out.push(Violation::VisitCount { node, count });
        }
    }
    out
}

/// Total Euclidean length of all tours without any feasibility checks. The
/// last leg back to the depot is not charged on open tasks.
pub fn tours_length(instance: &Instance, solution: &Solution) -> f64 {
    let open = instance.task.open;
    solution
        .tours
        .iter()
        .map(|tour| {
            let edges = tour.windows(2).map(|w| instance.dist(w[0], w[1]));
            if open && tour.len() > 1 && tour.last() == Some(&0) {
                let mut legs: Vec<f64> = edges.collect();
                legs.pop();
                legs.into_iter().sum::<f64>()
            } else {
                edges.sum::<f64>()
            }
        })
        .sum()
}

/// Cost of a feasible solution; infeasible solutions are rejected.
pub fn solution_cost(instance: &Instance, solution: &Solution) -> Result<f64, VrpError> {
    let violations = validate(instance, solution);
    if violations.is_empty() {
        Ok(tours_length(instance, solution))
    } else {
        Err(VrpError::InvalidSolution(violations))
    }
}
