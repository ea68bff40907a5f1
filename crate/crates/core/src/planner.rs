//! Action selection: the two greedy baselines and a receding-horizon
//! particle lookahead over the generative model.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{Belief, ObjectKind, WorldState};
use crate::error::{Error, Result};
use crate::grasp::Location;
use crate::hypothesis::SceneContext;
use crate::rng::{derive_seed, stream_rng};
use crate::world::{Action, Observation, TaskKind, TaskSpec, Transition, WorldModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub rollouts_per_action: usize,
    pub particles_per_node: usize,
    /// Distinct observations whose posterior is cached per root action.
    pub observation_branching: usize,
    pub seed: u64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 3,
            rollouts_per_action: 200,
            particles_per_node: 100,
            observation_branching: 4,
            seed: 0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("horizon", self.horizon),
            ("rollouts_per_action", self.rollouts_per_action),
            ("particles_per_node", self.particles_per_node),
            ("observation_branching", self.observation_branching),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Human-readable action identity, stable across runs.
pub fn action_label(ctx: &SceneContext, action: Action) -> String {
    match action {
        Action::Stop => "stop".to_string(),
        Action::Grasp { owner, destination } => {
            format!("grasp {} -> {destination}", ctx.hypothesis(owner).fingerprint)
        }
        Action::RevealedMove { parent, destination } => {
            format!(
                "revealed behind {} -> {destination}",
                ctx.hypothesis(parent).fingerprint
            )
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QValue {
    pub action: String,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDiagnostics {
    pub chosen_action: String,
    pub q_values: Vec<QValue>,
    pub rollout_count: usize,
}

// Stop comes first so it wins ties; any other action must be strictly better.
fn argmax(values: &[(Action, f64)]) -> (Action, f64) {
    values.iter().fold(
        (Action::Stop, 0.0),
        |best, &(a, v)| if v > best.1 { (a, v) } else { best },
    )
}

/// Exact expected immediate reward of `action` under the belief.
pub fn expected_reward(model: &WorldModel, belief: &Belief, action: Action) -> f64 {
    belief.iter().map(|(s, w)| w * model.expected_reward(s, action)).sum()
}

/// Action with the highest one-step expected reward, or stop when nothing
/// is worth more than stopping.
pub fn max_utility_action(model: &WorldModel, belief: &Belief, actions: &[Action]) -> Action {
    let values: Vec<(Action, f64)> = actions
        .iter()
        .map(|&a| (a, expected_reward(model, belief, a)))
        .collect();
    argmax(&values).0
}

/// Best grasp within the most frequent composition.
///
/// `modal` is the single-particle belief of the modal composition. Table
/// clearing may move any hypothesis; object search only moves red hypotheses
/// into the red box. Returns stop when no admissible grasp can succeed.
pub fn best_segmentation_action(model: &WorldModel, modal: &WorldState) -> Action {
    let destination = match model.task {
        TaskKind::TableClearing => Location::Removed,
        TaskKind::ObjectSearch => Location::RedBox,
    };
    let mut best = (Action::Stop, 0.0);
    for obj in &modal.objects {
        let ObjectKind::Visible { hyp } = obj.kind else {
            continue;
        };
        if model.task == TaskKind::ObjectSearch && !obj.is_red {
            continue;
        }
        if model.ctx.hypothesis(hyp).grasp.is_none() {
            continue;
        }
        let action = Action::Grasp {
            owner: hyp,
            destination,
        };
        if let Some((k, p)) = model.target(modal, action) {
            if modal.objects[k].hyp() == Some(hyp) && p > best.1 {
                best = (action, p);
            }
        }
    }
    best.0
}

fn resample(belief: &[(WorldState, f64)], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let index = WeightedIndex::new(belief.iter().map(|(_, w)| *w)).expect("weights are normalized");
    (0..count).map(|_| index.sample(rng)).collect()
}

// Posterior particles after observing `obs`, normalized; empty when the
// observation contradicts every particle.
fn filter(model: &WorldModel, batch: &[(Transition, f64)], obs: &Observation) -> Vec<(WorldState, f64)> {
    let mut out: Vec<(WorldState, f64)> = batch
        .iter()
        .filter_map(|(tr, w)| {
            let p = w * model.observation_probability(obs, tr);
            (p > 0.0).then(|| (tr.state.clone(), p))
        })
        .collect();
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut out {
        *w /= total;
    }
    out
}

// Actions available at an inner node: the root grasps plus moves of any
// hidden object that a particle has revealed.
fn inner_actions(model: &WorldModel, belief: &[(WorldState, f64)], root: &[Action]) -> Vec<Action> {
    let mut actions: Vec<Action> = root.iter().copied().filter(|a| *a != Action::Stop).collect();
    let mut parents: Vec<usize> = belief
        .iter()
        .flat_map(|(s, _)| {
            s.objects.iter().filter_map(move |o| match o.kind {
                ObjectKind::Hidden { parent } if o.on_table() && !s.objects[parent].on_table() => {
                    s.objects[parent].hyp()
                }
                _ => None,
            })
        })
        .collect();
    parents.sort_unstable();
    parents.dedup();
    for parent in parents {
        for &destination in model.task.destinations() {
            actions.push(Action::RevealedMove { parent, destination });
        }
    }
    actions
}

// One-step greedy choice under a particle belief.
fn greedy_action(model: &WorldModel, belief: &[(WorldState, f64)], root: &[Action]) -> Action {
    let values: Vec<(Action, f64)> = inner_actions(model, belief, root)
        .into_iter()
        .map(|a| (a, belief.iter().map(|(s, w)| w * model.expected_reward(s, a)).sum()))
        .collect();
    argmax(&values).0
}

// Discounted return of the greedy policy from depth `depth` on, with the
// belief filtered by the observations of a sampled true trajectory. `first`
// is the greedy choice for `belief` when the caller already knows it.
#[allow(clippy::too_many_arguments)]
fn greedy_return(
    model: &WorldModel,
    belief: &[(WorldState, f64)],
    first: Option<Action>,
    mut truth: WorldState,
    root: &[Action],
    depth: usize,
    config: &PlannerConfig,
    discount: f64,
    rng: &mut impl Rng,
) -> f64 {
    let mut belief = Cow::Borrowed(belief);
    let mut known = first;
    let mut total = 0.0;
    let mut scale = 1.0;
    for step_depth in depth..config.horizon {
        let action = known.take().unwrap_or_else(|| greedy_action(model, &belief, root));
        if action == Action::Stop {
            break;
        }
        // The exact expected reward of the true state has the sampled
        // reward's mean and less variance.
        total += scale * model.expected_reward(&truth, action);
        scale *= discount;
        if step_depth + 1 == config.horizon {
            break;
        }
        let step = model.transition(&truth, action, rng);
        let obs = model.observe(&step, rng);
        let batch: Vec<(Transition, f64)> = belief
            .iter()
            .map(|(s, w)| (model.transition(s, action, rng), *w))
            .collect();
        let posterior = filter(model, &batch, &obs);
        belief = if posterior.is_empty() {
            Cow::Owned(vec![(step.state.clone(), 1.0)])
        } else {
            Cow::Owned(posterior)
        };
        truth = step.state;
    }
    total
}

struct Estimate {
    mean: f64,
    stderr: f64,
    rollouts: usize,
}

fn evaluate(
    model: &WorldModel,
    particles: &[(WorldState, f64)],
    action: Action,
    actions: &[Action],
    config: &PlannerConfig,
    discount: f64,
    seed: u64,
) -> Estimate {
    let immediate: f64 = particles
        .iter()
        .map(|(s, w)| w * model.expected_reward(s, action))
        .sum();
    if action == Action::Stop || config.horizon == 1 {
        return Estimate {
            mean: immediate,
            stderr: 0.0,
            rollouts: 0,
        };
    }
    let mut rng = stream_rng(seed, 0);
    let batch_w = 1.0 / config.particles_per_node as f64;
    let batch: Vec<(Transition, f64)> = resample(particles, config.particles_per_node, &mut rng)
        .into_iter()
        .map(|k| (model.transition(&particles[k].0, action, &mut rng), batch_w))
        .collect();
    // Posterior and its greedy choice per observation.
    let mut cache: HashMap<Observation, (Vec<(WorldState, f64)>, Action)> = HashMap::new();
    let mut futures = Vec::with_capacity(config.rollouts_per_action);
    for _ in 0..config.rollouts_per_action {
        let k = resample(particles, 1, &mut rng)[0];
        let step = model.transition(&particles[k].0, action, &mut rng);
        let obs = model.observe(&step, &mut rng);
        let future = match cache.get(&obs) {
            Some((posterior, first)) => greedy_return(
                model,
                posterior,
                Some(*first),
                step.state,
                actions,
                1,
                config,
                discount,
                &mut rng,
            ),
            None => {
                let posterior = filter(model, &batch, &obs);
                if posterior.is_empty() {
                    // No batch particle explains the observation: plan on the truth.
                    let alone = [(step.state.clone(), 1.0)];
                    futures.push(greedy_return(
                        model, &alone, None, step.state, actions, 1, config, discount, &mut rng,
                    ));
                    continue;
                }
                let first = greedy_action(model, &posterior, actions);
                let future = greedy_return(
                    model,
                    &posterior,
                    Some(first),
                    step.state,
                    actions,
                    1,
                    config,
                    discount,
                    &mut rng,
                );
                if cache.len() < config.observation_branching {
                    cache.insert(obs, (posterior, first));
                }
                future
            }
        };
        futures.push(future);
    }
    let n = futures.len() as f64;
    let mean = futures.iter().sum::<f64>() / n;
    let var = if futures.len() > 1 {
        futures.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Estimate {
        mean: immediate + discount * mean,
        stderr: discount * (var / n).sqrt(),
        rollouts: futures.len(),
    }
}

/// Receding-horizon lookahead.
///
/// Each root action gets its exact expected immediate reward plus the mean
/// discounted return of greedy continuations over sampled trajectories. The
/// inner belief is a resampled particle batch, filtered by each sampled
/// observation. Returns the action with the largest estimate; stop wins ties.
pub fn plan(
    model: &WorldModel,
    belief: &Belief,
    actions: &[Action],
    task: &TaskSpec,
    config: &PlannerConfig,
) -> Result<(Action, PolicyDiagnostics)> {
    config.validate()?;
    let particles: Vec<(WorldState, f64)> = belief.iter().map(|(s, w)| (s.clone(), w)).collect();
    let mut all = vec![Action::Stop];
    all.extend(actions.iter().copied().filter(|a| *a != Action::Stop));
    let estimates: Vec<Estimate> = all
        .par_iter()
        .enumerate()
        .map(|(k, &a)| {
            let seed = derive_seed(config.seed, &[k as u64]);
            evaluate(model, &particles, a, &all, config, task.discount, seed)
        })
        .collect();
    let values: Vec<(Action, f64)> = all.iter().copied().zip(estimates.iter().map(|e| e.mean)).collect();
    let (chosen, _) = argmax(&values);
    let diagnostics = PolicyDiagnostics {
        chosen_action: action_label(model.ctx, chosen),
        q_values: all
            .iter()
            .zip(&estimates)
            .map(|(&a, e)| QValue {
                action: action_label(model.ctx, a),
                mean: e.mean,
                stderr: e.stderr,
            })
            .collect(),
        rollout_count: estimates.iter().map(|e| e.rollouts).sum(),
    };
    Ok((chosen, diagnostics))
}
