use super::{Instance, VrpError, FEAS_EPS};

/// Dynamic state of one constructing vehicle sequence.
///
/// `load` is the vehicle's on-board load as a fraction of capacity under
/// the convention that it departs full: linehaul deliveries lower it,
/// backhaul pickups raise it, and it must stay within `[0, 1]`. When no
/// linehaul customer is left, a fresh vehicle departs empty instead.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutState {
    pub position: usize,
    pub load: f64,
    pub time: f64,
    pub route_len: f64,
    pub open_flag: bool,
    pub visited: Vec<bool>,
    pub done: bool,
    /// Customers served by the current vehicle.
    pub tour_customers: usize,
    pub remaining: usize,
    pub remaining_linehaul: usize,
}

impl RolloutState {
    /// `(z, l, t, o)` as fed to the decoder.
    pub fn dynamic_features(&self) -> [f64; 4] {
        [
            self.load,
            self.route_len,
            self.time,
            if self.open_flag { 1.0 } else { 0.0 },
        ]
    }

    fn fresh_load(instance: &Instance, remaining_linehaul: usize) -> f64 {
        if instance.task.backhaul && remaining_linehaul == 0 {
            0.0
        } else {
            1.0
        }
    }

    /// Whether moving to `j` next keeps the partial solution completable.
    pub fn action_feasible(&self, instance: &Instance, j: usize) -> bool {
        if self.done || j > instance.n() {
            return false;
        }
        if j == 0 {
            return self.tour_customers > 0;
        }
        if self.visited[j] {
            return false;
        }
        let task = instance.task;
        let i = self.position;
        let demand = instance.demand[j];
        if demand > 0.0 {
            if demand > self.load + FEAS_EPS {
                return false;
            }
        } else {
            // Tours start with a linehaul while any linehaul is still unserved.
            if self.tour_customers == 0 && self.remaining_linehaul > 0 {
                return false;
            }
            if self.load - demand > 1.0 + FEAS_EPS {
                return false;
            }
        }
        let dij = instance.dist(i, j);
        if let Some(limit) = instance.duration_limit.filter(|_| task.duration_limit) {
            let back = if task.open { 0.0 } else { instance.dist(j, 0) };
            if self.route_len + dij + back > limit + FEAS_EPS {
                return false;
            }
        }
        if task.time_window {
            let arrival = self.time + dij;
            let [open_j, close_j] = instance.time_windows[j];
            if arrival > close_j + FEAS_EPS {
                return false;
            }
            if !task.open {
                let depart = arrival.max(open_j) + instance.service[j];
                if depart + instance.dist(j, 0) > instance.time_windows[0][1] + FEAS_EPS {
                    return false;
                }
            }
        }
        true
    }

    /// Applies `action` in place after checking it is feasible.
    pub fn apply(&mut self, instance: &Instance, action: usize) -> Result<(), VrpError> {
        if self.done {
            return Err(VrpError::Finished);
        }
        if !self.action_feasible(instance, action) {
            return Err(VrpError::InfeasibleAction { action });
        }
        if action == 0 {
            self.position = 0;
            self.route_len = 0.0;
            self.time = 0.0;
            self.tour_customers = 0;
            self.load = Self::fresh_load(instance, self.remaining_linehaul);
            self.done = self.remaining == 0;
            return Ok(());
        }
        let travel = instance.dist(self.position, action);
        self.route_len += travel;
        let demand = instance.demand[action];
        self.load = (self.load - demand).clamp(0.0, 1.0);
        if instance.task.time_window {
            let arrival = self.time + travel;
            self.time = arrival.max(instance.time_windows[action][0]) + instance.service[action];
        }
        self.visited[action] = true;
        self.remaining -= 1;
        if demand > 0.0 {
            self.remaining_linehaul -= 1;
        }
        self.tour_customers += 1;
        self.position = action;
        Ok(())
    }
}

pub fn initial_state(instance: &Instance) -> Result<RolloutState, VrpError> {
    instance.check()?;
    let linehaul = instance.linehaul_count();
    Ok(RolloutState {
        position: 0,
        load: RolloutState::fresh_load(instance, linehaul),
        time: 0.0,
        route_len: 0.0,
        open_flag: instance.task.open,
        visited: vec![false; instance.n() + 1],
        done: false,
        tour_customers: 0,
        remaining: instance.n(),
        remaining_linehaul: linehaul,
    })
}

/// Feasibility of every next node; an all-false row is reported as an error
/// because a reachable non-terminal state must always have a move.
pub fn feasible_mask(state: &RolloutState, instance: &Instance) -> Result<Vec<bool>, VrpError> {
    if state.done {
        return Err(VrpError::Finished);
    }
    let mask: Vec<bool> = (0..=instance.n())
        .map(|j| state.action_feasible(instance, j))
        .collect();
    if mask.iter().any(|m| *m) {
        Ok(mask)
    } else {
        Err(VrpError::NoFeasibleAction {
            position: state.position,
        })
    }
}

pub fn step(state: &RolloutState, instance: &Instance, action: usize) -> Result<RolloutState, VrpError> {
    let mut next = state.clone();
    next.apply(instance, action)?;
    Ok(next)
}
