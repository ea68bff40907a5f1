//! Generative model of the manipulation task: transitions, observations,
//! observation likelihoods and rewards over belief particles.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{FailureKey, ObjectKind, WorldState};
use crate::error::{Error, Result};
use crate::grasp::{occlusion_signature, occlusion_success, Location};
use crate::hypothesis::{HypId, SceneContext};

/// Color observation model: `p_correct(v) = 1 - 0.5 * exp(A1 + A2 * 100 v)`.
pub const COLOR_A1: f64 = -0.5;
pub const COLOR_A2: f64 = -0.02;
/// Default number of objects whose color is observed after a move.
pub const DEFAULT_K_OBS: usize = 3;

/// Probability of observing the true color of an object with visible fraction `v`.
pub fn p_correct(v: f64) -> f64 {
    1.0 - 0.5 * (COLOR_A1 + COLOR_A2 * 100.0 * v.clamp(0.0, 1.0)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TableClearing,
    ObjectSearch,
}

impl TaskKind {
    /// Destinations a grasp can be paired with.
    pub fn destinations(self) -> &'static [Location] {
        match self {
            TaskKind::TableClearing => &[Location::Removed],
            TaskKind::ObjectSearch => &[Location::RedBox, Location::GreenBox],
        }
    }

    /// Default episode length cap.
    pub fn max_steps(self) -> usize {
        match self {
            TaskKind::TableClearing => 6,
            TaskKind::ObjectSearch => 12,
        }
    }

    /// Reward for moving an object with the given color to `destination`.
    pub fn reward(self, is_red: bool, destination: Location) -> f64 {
        match (self, destination) {
            (TaskKind::TableClearing, _) => 1.0,
            (TaskKind::ObjectSearch, Location::RedBox) => {
                if is_red {
                    1.0
                } else {
                    -1.0
                }
            }
            (TaskKind::ObjectSearch, _) => 0.0,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::TableClearing => "table_clearing",
            TaskKind::ObjectSearch => "object_search",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub horizon: usize,
    pub discount: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        TaskSpec {
            kind,
            horizon: kind.max_steps(),
            discount: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "discount {} outside (0, 1]",
                self.discount
            )));
        }
        Ok(())
    }
}

/// Actions over the hypotheses of one [`SceneContext`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    Stop,
    /// Execute the grasp computed for `owner` and place the object at `destination`.
    Grasp {
        owner: HypId,
        destination: Location,
    },
    /// Move the hidden object revealed behind `parent`. Only meaningful inside
    /// lookahead, where revealed objects have no geometry yet.
    RevealedMove {
        parent: HypId,
        destination: Location,
    },
}

/// Object identity shared across particles of one context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectRef {
    Hypothesis(HypId),
    Hidden { parent: HypId },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Observation {
    pub moved: Option<ObjectRef>,
    pub move_succeeded: bool,
    pub color_obs: Vec<(ObjectRef, bool)>,
}

impl Observation {
    pub fn nothing() -> Self {
        Observation {
            moved: None,
            move_succeeded: false,
            color_obs: Vec::new(),
        }
    }
}

/// Result of one sampled transition.
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: WorldState,
    /// Object the action acted on, if any had a positive success probability.
    pub target: Option<usize>,
    pub succeeded: bool,
    pub reward: f64,
}

/// The generative model for one scene view and task.
#[derive(Clone, Copy, Debug)]
pub struct WorldModel<'a> {
    pub ctx: &'a SceneContext,
    pub task: TaskKind,
    pub k_obs: usize,
}

impl<'a> WorldModel<'a> {
    pub fn new(ctx: &'a SceneContext, task: TaskKind) -> Self {
        WorldModel {
            ctx,
            task,
            k_obs: DEFAULT_K_OBS,
        }
    }

    /// Object reference of object `k` in `state`.
    pub fn object_ref(&self, state: &WorldState, k: usize) -> ObjectRef {
        match state.objects[k].kind {
            ObjectKind::Visible { hyp } => ObjectRef::Hypothesis(hyp),
            ObjectKind::Hidden { parent } => ObjectRef::Hidden {
                parent: state.objects[parent]
                    .hyp()
                    .expect("hidden objects sit behind visible ones"),
            },
        }
    }

    /// Occlusion signature of `owner`'s grasp in `state`: its occluders still on the table.
    pub fn signature(&self, state: &WorldState, owner: HypId) -> u64 {
        let info = self.ctx.hypothesis(owner);
        if info.occluder_slots.iter().all(|&s| state.slot_on_table(s)) {
            return info.signature;
        }
        let present: Vec<u32> = info
            .occluders
            .iter()
            .zip(&info.occluder_slots)
            .filter(|(_, &s)| state.slot_on_table(s))
            .map(|(&id, _)| id)
            .collect();
        occlusion_signature(&present)
    }

    fn failure_key(&self, state: &WorldState, action: Action) -> Option<FailureKey> {
        match action {
            Action::Stop => None,
            Action::Grasp { owner, .. } => {
                let key = self.ctx.hypothesis(owner).grasp_key.as_ref()?;
                Some(FailureKey {
                    grasp: key.digest(),
                    signature: self.signature(state, owner),
                })
            }
            Action::RevealedMove { parent, .. } => Some(FailureKey {
                grasp: !(parent as u64),
                signature: 0,
            }),
        }
    }

    /// Success probability of `owner`'s grasp on object `k`.
    pub fn grasp_success(&self, state: &WorldState, owner: HypId, k: usize, key: &FailureKey) -> f64 {
        let obj = &state.objects[k];
        let Some(hyp) = obj.hyp() else { return 0.0 };
        if !obj.on_table() || obj.failed.contains(key) {
            return 0.0;
        }
        let quality = self.ctx.quality(owner, hyp);
        if quality <= 0.0 {
            return 0.0;
        }
        let blocked = self
            .ctx
            .hypothesis(owner)
            .blocker_slots
            .iter()
            .any(|&s| state.owner_of(s) != k && state.slot_on_table(s));
        if blocked {
            return 0.0;
        }
        quality * occlusion_success(obj.visible_fraction)
    }

    /// Object the action would act on and its success probability.
    /// The target maximizes the success probability; on ties the fingers meet
    /// the higher object first, then the lowest index wins.
    pub fn target(&self, state: &WorldState, action: Action) -> Option<(usize, f64)> {
        let key = self.failure_key(state, action)?;
        match action {
            Action::Stop => None,
            Action::Grasp { owner, .. } => {
                let height = |k: usize| {
                    state.objects[k]
                        .hyp()
                        .map_or(0.0, |h| self.ctx.hypothesis(h).shape.plane_z)
                };
                let mut best: Option<(usize, f64)> = None;
                for k in 0..state.objects.len() {
                    let p = self.grasp_success(state, owner, k, &key);
                    let better = match best {
                        None => true,
                        Some((j, b)) => p > b || (p == b && height(k) > height(j)),
                    };
                    if p > 0.0 && better {
                        best = Some((k, p));
                    }
                }
                best
            }
            Action::RevealedMove { parent, .. } => {
                let k = state.object_of(parent)?;
                if state.objects[k].on_table() {
                    return None;
                }
                let child = state.hidden_child(k)?;
                let obj = &state.objects[child];
                (obj.on_table() && !obj.failed.contains(&key)).then(|| (child, occlusion_success(obj.visible_fraction)))
            }
        }
    }

    fn destination(action: Action) -> Option<Location> {
        match action {
            Action::Stop => None,
            Action::Grasp { destination, .. } | Action::RevealedMove { destination, .. } => Some(destination),
        }
    }

    /// Exact expected immediate reward of `action` in `state`.
    pub fn expected_reward(&self, state: &WorldState, action: Action) -> f64 {
        match (self.target(state, action), Self::destination(action)) {
            (Some((k, p)), Some(dest)) => p * self.task.reward(state.objects[k].is_red, dest),
            _ => 0.0,
        }
    }

    /// Samples the next state.
    pub fn transition(&self, state: &WorldState, action: Action, rng: &mut impl Rng) -> Transition {
        let unchanged = |target| Transition {
            state: state.clone(),
            target,
            succeeded: false,
            reward: 0.0,
        };
        let (Some((k, p)), Some(dest)) = (self.target(state, action), Self::destination(action)) else {
            return unchanged(None);
        };
        let mut next = state.clone();
        if rng.random::<f64>() >= p {
            let key = self
                .failure_key(state, action)
                .expect("actions with a target have a key");
            next.objects[k].failed.push(key);
            return Transition {
                state: next,
                target: Some(k),
                succeeded: false,
                reward: 0.0,
            };
        }
        next.objects[k].location = dest;
        if let Some(child) = next.hidden_child(k) {
            next.objects[child].visible_fraction = 1.0;
        }
        self.update_visibility(&mut next, k);
        let reward = self.task.reward(next.objects[k].is_red, dest);
        Transition {
            state: next,
            target: Some(k),
            succeeded: true,
            reward,
        }
    }

    // Objects that `moved` occluded see more of themselves: the visible
    // fraction grows by the share of their occluders that left the table.
    fn update_visibility(&self, state: &mut WorldState, moved: usize) {
        for k in self.occluded_by(state, moved) {
            let hyp = state.objects[k].hyp().expect("occluded objects are visible ones");
            let info = self.ctx.hypothesis(hyp);
            let gone = info.occluder_slots.iter().filter(|&&s| !state.slot_on_table(s)).count();
            let share = gone as f64 / info.occluder_slots.len() as f64;
            let v0 = info.visible_fraction;
            state.objects[k].visible_fraction = (v0 + (1.0 - v0) * share).min(1.0);
        }
    }

    // Visible table objects with an occluder segment owned by object `moved`,
    // nearest first.
    fn occluded_by(&self, state: &WorldState, moved: usize) -> Vec<usize> {
        let Some(moved_hyp) = state.objects[moved].hyp() else {
            return Vec::new();
        };
        let origin = self.ctx.hypothesis(moved_hyp).centroid;
        let mut found: Vec<(usize, f64)> = state
            .objects
            .iter()
            .enumerate()
            .filter(|&(k, o)| k != moved && o.on_table())
            .filter_map(|(k, o)| {
                let info = self.ctx.hypothesis(o.hyp()?);
                info.occluder_slots
                    .iter()
                    .any(|&s| state.owner_of(s) == moved)
                    .then(|| (k, (info.centroid - origin).norm()))
            })
            .collect();
        found.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        found.into_iter().map(|(k, _)| k).collect()
    }

    /// Objects whose color is observed after a successful move of `target`:
    /// the revealed hidden object first, then formerly occluded objects.
    pub fn observed_objects(&self, state: &WorldState, target: usize) -> Vec<usize> {
        let mut list: Vec<usize> = state.hidden_child(target).into_iter().collect();
        list.extend(self.occluded_by(state, target));
        list.truncate(self.k_obs);
        list
    }

    /// Samples the observation that follows a transition.
    pub fn observe(&self, tr: &Transition, rng: &mut impl Rng) -> Observation {
        let Some(target) = tr.target else {
            return Observation::nothing();
        };
        if !tr.succeeded {
            return Observation::nothing();
        }
        let color_obs = self
            .observed_objects(&tr.state, target)
            .into_iter()
            .map(|k| {
                let obj = &tr.state.objects[k];
                let correct = rng.random::<f64>() < p_correct(obj.visible_fraction);
                (self.object_ref(&tr.state, k), obj.is_red == correct)
            })
            .collect();
        Observation {
            moved: Some(self.object_ref(&tr.state, target)),
            move_succeeded: true,
            color_obs,
        }
    }

    /// Likelihood of `obs` after the transition `tr`.
    pub fn observation_probability(&self, obs: &Observation, tr: &Transition) -> f64 {
        let (moved, succeeded) = match tr.target {
            Some(k) if tr.succeeded => (Some(self.object_ref(&tr.state, k)), true),
            _ => (None, false),
        };
        if obs.moved != moved || obs.move_succeeded != succeeded {
            return 0.0;
        }
        let Some(target) = tr.target.filter(|_| tr.succeeded) else {
            return if obs.color_obs.is_empty() { 1.0 } else { 0.0 };
        };
        let expected = self.observed_objects(&tr.state, target);
        if expected.len() != obs.color_obs.len() {
            return 0.0;
        }
        let mut p = 1.0;
        for (&k, &(r, red)) in expected.iter().zip(&obs.color_obs) {
            if self.object_ref(&tr.state, k) != r {
                return 0.0;
            }
            let obj = &tr.state.objects[k];
            let pc = p_correct(obj.visible_fraction);
            p *= if red == obj.is_red { pc } else { 1.0 - pc };
        }
        p
    }
}
