use crate::vrp::{feasible_mask, initial_state, validate, Instance, Solution, VrpError};

/// Label attached to gaps measured against [`heuristic_baseline`].
pub const HEURISTIC_LABEL: &str = "heuristic-ref";

const IMPROVE_EPS: f64 = 1e-10;

/// Nearest feasible neighbor construction followed by 2-opt inside routes
/// and single-customer relocation across routes, including into a new
/// route. Only moves that keep the
/// solution valid and strictly shorten it are taken; the search stops at a
/// local optimum. Deterministic.
pub fn heuristic_baseline(instance: &Instance) -> Result<Solution, VrpError> {
    let routes = nearest_neighbor(instance)?;
    let mut search = LocalSearch {
        instance,
        cost: total_length(instance, &routes),
        routes,
    };
    while search.two_opt() || search.relocate() {}
    Ok(to_solution(instance, &search.routes))
}

fn nearest_neighbor(instance: &Instance) -> Result<Vec<Vec<usize>>, VrpError> {
    let mut state = initial_state(instance)?;
    let mut routes = vec![Vec::new()];
    while !state.done {
        let mask = feasible_mask(&state, instance)?;
        let here = state.position;
        let next = (1..mask.len())
            .filter(|&j| mask[j])
            .min_by(|&a, &b| instance.dist(here, a).total_cmp(&instance.dist(here, b)).then(a.cmp(&b)))
            .unwrap_or(0);
        state.apply(instance, next)?;
        if next == 0 {
            routes.push(Vec::new());
        } else {
            routes.last_mut().expect("non-empty").push(next);
        }
    }
    routes.retain(|r| !r.is_empty());
    Ok(routes)
}

fn route_length(instance: &Instance, route: &[usize]) -> f64 {
    let mut len = 0.0;
    let mut prev = 0;
    for &v in route {
        len += instance.dist(prev, v);
        prev = v;
    }
    if !instance.task.open {
        len += instance.dist(prev, 0);
    }
    len
}

fn total_length(instance: &Instance, routes: &[Vec<usize>]) -> f64 {
    routes.iter().map(|r| route_length(instance, r)).sum()
}

fn to_solution(instance: &Instance, routes: &[Vec<usize>]) -> Solution {
    let tours = routes
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let mut t = Vec::with_capacity(r.len() + 2);
            t.push(0);
            t.extend_from_slice(r);
            if !instance.task.open {
                t.push(0);
            }
            t
        })
        .collect();
    Solution::new(tours)
}

struct LocalSearch<'a> {
    instance: &'a Instance,
    routes: Vec<Vec<usize>>,
    cost: f64,
}

impl LocalSearch<'_> {
    /// Records `candidate` in `best` when it is valid and cheaper than both
    /// the current solution and the best move found so far.
    fn consider(&self, best: &mut Option<(Vec<Vec<usize>>, f64)>, candidate: Vec<Vec<usize>>, cost: f64) {
        let bar = best.as_ref().map_or(self.cost - IMPROVE_EPS, |(_, c)| *c - IMPROVE_EPS);
        if cost >= bar {
            return;
        }
        let candidate: Vec<Vec<usize>> = candidate.into_iter().filter(|r| !r.is_empty()).collect();
        if validate(self.instance, &to_solution(self.instance, &candidate)).is_empty() {
            *best = Some((candidate, cost));
        }
    }

    fn apply(&mut self, best: Option<(Vec<Vec<usize>>, f64)>) -> bool {
        match best {
            Some((routes, cost)) => {
                self.routes = routes;
                self.cost = cost;
                true
            }
            None => false,
        }
    }

    /// Best improving segment reversal inside any route.
    fn two_opt(&mut self) -> bool {
        let mut best = None;
        for r in 0..self.routes.len() {
            let len = self.routes[r].len();
            let old = route_length(self.instance, &self.routes[r]);
            for i in 0..len {
                for j in i + 1..len {
                    let mut route = self.routes[r].clone();
                    route[i..=j].reverse();
                    let cost = self.cost - old + route_length(self.instance, &route);
                    if cost < self.cost - IMPROVE_EPS {
                        let mut candidate = self.routes.clone();
                        candidate[r] = route;
                        self.consider(&mut best, candidate, cost);
                    }
                }
            }
        }
        self.apply(best)
    }

    /// Best improving move of one customer to another position, in its
    /// own route, another route, or a new route of its own.
    fn relocate(&mut self) -> bool {
        let mut best = None;
        let k = self.routes.len();
        for r in 0..k {
            for p in 0..self.routes[r].len() {
                let node = self.routes[r][p];
                let mut from = self.routes[r].clone();
                from.remove(p);
                let from_delta = route_length(self.instance, &from) - route_length(self.instance, &self.routes[r]);
                for s in 0..=k {
                    if s == k && from.is_empty() {
                        continue;
                    }
                    let target = match s {
                        s if s == r => from.clone(),
                        s if s == k => Vec::new(),
                        s => self.routes[s].clone(),
                    };
                    let base = route_length(self.instance, &target);
                    for q in 0..=target.len() {
                        if s == r && q == p {
                            continue;
                        }
                        let mut to = target.clone();
                        to.insert(q, node);
                        let cost = self.cost + from_delta + route_length(self.instance, &to) - base;
                        if cost < self.cost - IMPROVE_EPS {
                            let mut candidate = self.routes.clone();
                            if s == r {
                                candidate[r] = to;
                            } else {
                                candidate[r] = from.clone();
                                if s == k {
                                    candidate.push(to);
                                } else {
                                    candidate[s] = to;
                                }
                            }
                            self.consider(&mut best, candidate, cost);
                        }
                    }
                }
            }
        }
        self.apply(best)
    }
}
