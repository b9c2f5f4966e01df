use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::model::{EncodedInstance, Net, StepInput};
use crate::tensor::{Tensor, Var};
use crate::vrp::{feasible_mask, initial_state, solution_cost, Instance, RolloutState, Solution};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Sample,
    Greedy,
}

/// One agent's finished construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    pub solution: Solution,
    pub cost: f64,
}

impl Trajectory {
    pub fn reward(&self) -> f64 {
        -self.cost
    }
}

/// Result of decoding one instance with several agents.
pub struct InstanceRollout {
    pub trajectories: Vec<Trajectory>,
    /// `[a × 1]` sum of chosen-action log-probabilities per agent. Forced
    /// first moves are excluded.
    pub log_prob_sums: Option<Var>,
}

impl InstanceRollout {
    pub fn best(&self) -> &Trajectory {
        self.trajectories
            .iter()
            .min_by(|a, b| a.cost.total_cmp(&b.cost))
            .expect("at least one agent")
    }
}

/// Distinct feasible first customers, one per agent.
///
/// Greedy mode takes the lowest indices; sample mode draws a random subset.
/// With more agents than feasible customers every customer is used once
/// and the remainder is drawn with replacement.
pub fn first_moves(
    feasible: &[usize],
    agents: usize,
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if agents <= feasible.len() {
        return match mode {
            DecodeMode::Greedy => feasible[..agents].to_vec(),
            DecodeMode::Sample => sample_indices(rng, feasible.len(), agents)
                .into_iter()
                .map(|i| feasible[i])
                .collect(),
        };
    }
    log::debug!(
        "{agents} agents but only {} feasible first moves; reusing some with replacement",
        feasible.len()
    );
    let mut out = feasible.to_vec();
    while out.len() < agents {
        out.push(match mode {
            DecodeMode::Greedy => feasible[out.len() % feasible.len()],
            DecodeMode::Sample => feasible[rng.gen_range(0..feasible.len())],
        });
    }
    out
}

fn choose(log_probs: &[f64], feasible: &[bool], mode: DecodeMode, rng: &mut ChaCha8Rng) -> usize {
    let allowed = || (0..feasible.len()).filter(|&j| feasible[j]);
    match mode {
        DecodeMode::Greedy => allowed()
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if log_probs[b] >= log_probs[j] => Some(b),
                _ => Some(j),
            })
            .expect("feasible row"),
        DecodeMode::Sample => {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut last = 0;
            for j in allowed() {
                acc += log_probs[j].exp();
                last = j;
                if u < acc {
                    return j;
                }
            }
            last
        }
    }
}

struct Agent {
    state: RolloutState,
    actions: Vec<usize>,
    first: usize,
}

/// Decodes `instance` with `agents` multi-start agents.
///
/// Steps where every unfinished agent has a single feasible move skip the
/// network, since such moves carry no log-probability. With `record` set
/// the summed log-probabilities stay on the tape for a backward pass.
pub fn rollout_instance(
    net: &mut Net<'_>,
    instance: &Instance,
    agents: usize,
    mode: DecodeMode,
    rng: &mut ChaCha8Rng,
    record: bool,
) -> Result<InstanceRollout, TrainError> {
    if agents == 0 {
        return Err(TrainError::Config("at least one agent is required".into()));
    }
    let enc = net.encode(instance)?;
    rollout_encoded(net, &enc, instance, agents, Driver::Decode(mode, rng), record)
}

/// Re-decodes fixed action sequences, one per agent, recording their
/// log-probabilities under the current parameters.
pub fn replay_instance(
    net: &mut Net<'_>,
    instance: &Instance,
    actions: &[Vec<usize>],
) -> Result<InstanceRollout, TrainError> {
    if actions.is_empty() || actions.iter().any(|a| a.is_empty()) {
        return Err(TrainError::Config("replay needs a non-empty action list per agent".into()));
    }
    let enc = net.encode(instance)?;
    let out = rollout_encoded(net, &enc, instance, actions.len(), Driver::Replay(actions), true)?;
    if out.trajectories.iter().zip(actions).any(|(t, a)| t.actions != *a) {
        return Err(TrainError::Config("replayed actions continue past the end of the episode".into()));
    }
    Ok(out)
}

enum Driver<'a> {
    Decode(DecodeMode, &'a mut ChaCha8Rng),
    Replay(&'a [Vec<usize>]),
}

impl Driver<'_> {
    fn first(&mut self, candidates: &[usize], agents: usize) -> Vec<usize> {
        match self {
            Driver::Decode(mode, rng) => first_moves(candidates, agents, *mode, rng),
            Driver::Replay(actions) => actions.iter().map(|a| a[0]).collect(),
        }
    }

    fn next(&mut self, agent: usize, step: usize, log_probs: &[f64], feasible: &[bool]) -> Result<usize, TrainError> {
        match self {
            Driver::Decode(mode, rng) => Ok(choose(log_probs, feasible, *mode, rng)),
            Driver::Replay(actions) => actions[agent]
                .get(step)
                .copied()
                .filter(|&j| feasible.get(j) == Some(&true))
                .ok_or_else(|| TrainError::Config(format!("replayed agent {agent} has no feasible action at step {step}"))),
        }
    }
}

fn rollout_encoded(
    net: &mut Net<'_>,
    enc: &EncodedInstance,
    instance: &Instance,
    agents: usize,
    mut driver: Driver<'_>,
    record: bool,
) -> Result<InstanceRollout, TrainError> {
    let n1 = instance.coords.len();
    let start = initial_state(instance)?;
    let start_mask = feasible_mask(&start, instance)?;
    let candidates: Vec<usize> = (1..n1).filter(|&j| start_mask[j]).collect();
    let firsts = driver.first(&candidates, agents);
    if firsts.iter().any(|&j| start_mask.get(j) != Some(&true)) {
        return Err(TrainError::Config("infeasible first move".into()));
    }
    let mut team: Vec<Agent> = firsts
        .into_iter()
        .map(|j| {
            let mut state = start.clone();
            state.apply(instance, j)?;
            Ok(Agent {
                state,
                actions: vec![j],
                first: j,
            })
        })
        .collect::<Result<_, TrainError>>()?;

    let mut log_sum: Option<Var> = None;
    while team.iter().any(|a| !a.state.done) {
        let masks: Vec<Vec<bool>> = team
            .iter()
            .map(|a| {
                if a.state.done {
                    Ok((0..n1).map(|j| j == 0).collect())
                } else {
                    feasible_mask(&a.state, instance)
                }
            })
            .collect::<Result<_, _>>()?;
        let forced = team
            .iter()
            .zip(&masks)
            .all(|(a, m)| a.state.done || m.iter().filter(|f| **f).count() == 1);
        let chosen: Vec<usize> = if forced {
            let only: Vec<usize> = masks.iter().map(|m| m.iter().position(|f| *f).expect("non-empty")).collect();
            if let Driver::Replay(actions) = &driver {
                for (a, agent) in team.iter().enumerate() {
                    if !agent.state.done && actions[a].get(agent.actions.len()) != Some(&only[a]) {
                        return Err(TrainError::Config(format!("replayed agent {a} departs from its only feasible move")));
                    }
                }
            }
            only
        } else {
            let input = StepInput {
                positions: team.iter().map(|a| a.state.position).collect(),
                first: team.iter().map(|a| a.first).collect(),
                dynamic: team.iter().map(|a| a.state.dynamic_features()).collect(),
                subtracted: team.iter().map(|a| a.state.visited.clone()).collect(),
                feasible: masks.clone(),
            };
            let step = net.decode_step(enc, &input)?;
            let lp = net.value(step.log_probs).clone();
            let chosen: Vec<usize> = (0..agents)
                .map(|a| {
                    if team[a].state.done {
                        Ok(0)
                    } else {
                        driver.next(a, team[a].actions.len(), lp.row(a), &masks[a])
                    }
                })
                .collect::<Result<_, _>>()?;
            if record {
                let picked = net.tape.pick(step.log_probs, &chosen)?;
                let live: Vec<f64> = team.iter().map(|a| if a.state.done { 0.0 } else { 1.0 }).collect();
                let live = net.tape.constant(Tensor::matrix(agents, 1, live)?);
                let picked = net.tape.mul(picked, live)?;
                log_sum = Some(match log_sum {
                    None => picked,
                    Some(acc) => net.tape.add(acc, picked)?,
                });
            }
            chosen
        };
        for (agent, action) in team.iter_mut().zip(chosen) {
            if !agent.state.done {
                agent.state.apply(instance, action)?;
                agent.actions.push(action);
            }
        }
    }

    let trajectories = team
        .into_iter()
        .map(|a| {
            let solution = Solution::from_actions(&a.actions, instance.task.open);
            let cost = solution_cost(instance, &solution)?;
            Ok(Trajectory {
                actions: a.actions,
                solution,
                cost,
            })
        })
        .collect::<Result<_, TrainError>>()?;
    let log_prob_sums = if record {
        Some(match log_sum {
            Some(v) => v,
            None => net.tape.constant(Tensor::zeros(&[agents, 1])),
        })
    } else {
        None
    };
    Ok(InstanceRollout {
        trajectories,
        log_prob_sums,
    })
}
