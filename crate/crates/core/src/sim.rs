//! Episodes against a simulated ground truth: perceive, sample compositions,
//! build the belief, pick an action with one of the compared methods, execute
//! it on the true world and remember the outcome.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::action_set::{restricted_action_set, DEFAULT_BUDGET};
use crate::belief::{build_belief, Belief, BeliefOptions, BeliefSummary, GraspRecord, History, Outcome};
use crate::composition::{Composition, ConnectionModel};
use crate::error::{Error, Result};
use crate::generator::TrueWorld;
use crate::grasp::GraspAction;
use crate::hypothesis::SceneContext;
use crate::mcmc::{sample_with_model, CompositionSet, SamplerConfig};
use crate::planner::{
    action_label, best_segmentation_action, max_utility_action, plan, PlannerConfig, PolicyDiagnostics,
};
use crate::rng::{derive_seed, stream_rng};
use crate::scene::{Fingerprint, Scene};
use crate::world::{Action, TaskKind, TaskSpec, WorldModel, DEFAULT_K_OBS};

/// Action selection strategies under comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Best grasp in the most frequent composition.
    BestSeg,
    /// Largest expected immediate reward over the belief.
    MaxUtil,
    /// Multi-step lookahead over the belief.
    Pomdp,
    /// Lookahead with hallucinated hidden objects.
    PomdpHalluc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::BestSeg, Method::MaxUtil, Method::Pomdp, Method::PomdpHalluc];

    pub fn name(self) -> &'static str {
        match self {
            Method::BestSeg => "best_seg",
            Method::MaxUtil => "max_util",
            Method::Pomdp => "pomdp",
            Method::PomdpHalluc => "pomdp_halluc",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::InvalidArgument(format!("unknown method {s:?}; valid methods: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub task: TaskSpec,
    pub sampler: SamplerConfig,
    pub planner: PlannerConfig,
    pub action_budget: usize,
    /// Defaults to the task's cap.
    pub max_steps: Option<usize>,
    pub k_obs: usize,
    /// Scales the simulated success probability to study model mismatch.
    pub success_multiplier: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig::new(TaskKind::ObjectSearch)
    }
}

impl EpisodeConfig {
    pub fn new(task: TaskKind) -> Self {
        EpisodeConfig {
            task: TaskSpec::new(task),
            sampler: SamplerConfig::default(),
            planner: PlannerConfig::default(),
            action_budget: DEFAULT_BUDGET,
            max_steps: None,
            k_obs: DEFAULT_K_OBS,
            success_multiplier: 1.0,
        }
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps.unwrap_or_else(|| self.task.kind.max_steps())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.sampler.validate()?;
        self.planner.validate()?;
        if self.action_budget == 0 {
            return Err(Error::InvalidConfig("action_budget must be positive".into()));
        }
        if self.k_obs == 0 {
            return Err(Error::InvalidConfig("k_obs must be positive".into()));
        }
        if !(self.success_multiplier >= 0.0 && self.success_multiplier.is_finite()) {
            return Err(Error::InvalidConfig("success_multiplier must be non-negative".into()));
        }
        Ok(())
    }
}

/// Sampler diagnostics of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSummary {
    pub samples: usize,
    pub cftp_collapsed: bool,
    pub cftp_horizon: u64,
    pub ess: f64,
    pub truncated: bool,
}

impl From<&CompositionSet> for SamplerSummary {
    fn from(set: &CompositionSet) -> Self {
        SamplerSummary {
            samples: set.samples.len(),
            cftp_collapsed: set.cftp_collapsed,
            cftp_horizon: set.cftp_horizon,
            ess: set.ess_achieved,
            truncated: set.truncated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// `None` when the method chose to stop.
    pub action: Option<GraspAction>,
    pub label: String,
    pub outcome: Option<Outcome>,
    pub success_probability: f64,
    pub reward: f64,
    pub moved: Option<Fingerprint>,
    pub sampler: SamplerSummary,
    pub belief: BeliefSummary,
    pub action_set_value: Option<f64>,
    pub planner: Option<PolicyDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scene_id: String,
    pub method: Method,
    pub seed: u64,
    pub task: TaskKind,
    pub steps: Vec<StepRecord>,
    pub total_reward: f64,
    /// Set when a module error ended the episode early.
    pub error: Option<String>,
}

/// Wall-clock time per phase, summed over the steps of an episode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseTiming {
    /// Rendering the view and describing hypotheses.
    pub pre_processing: Duration,
    /// Composition sampling.
    pub segmentation: Duration,
    pub belief_generation: Duration,
    pub planning: Duration,
}

impl PhaseTiming {
    pub fn total(&self) -> Duration {
        self.pre_processing + self.segmentation + self.belief_generation + self.planning
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub record: EpisodeRecord,
    pub timing: PhaseTiming,
}

fn elapsed(slot: &mut Duration, start: Instant) {
    *slot += start.elapsed();
}

// Samples compositions, doubling the sample budget once if the history
// rules out every sampled composition.
fn sample_and_weigh(
    view: &Scene,
    history: &History,
    config: &EpisodeConfig,
    options: &BeliefOptions,
    sampler_seed: u64,
    timing: &mut PhaseTiming,
) -> Result<(SceneContext, CompositionSet, Belief, BeliefSummary)> {
    let mut sampler = SamplerConfig {
        seed: sampler_seed,
        ..config.sampler.clone()
    };
    let model = ConnectionModel::new(view);
    let mut attempt = 0;
    loop {
        let t = Instant::now();
        let set = sample_with_model(&model, &sampler)?;
        let compositions: Vec<Composition> = set.compositions(&model).collect();
        elapsed(&mut timing.segmentation, t);
        let t = Instant::now();
        let ctx = SceneContext::from_compositions(view.clone(), &compositions)?;
        elapsed(&mut timing.pre_processing, t);
        let t = Instant::now();
        let built = build_belief(&ctx, &compositions, history, options);
        elapsed(&mut timing.belief_generation, t);
        match built {
            Ok((belief, summary)) => return Ok((ctx, set, belief, summary)),
            Err(Error::BeliefCollapse) if attempt == 0 => {
                attempt += 1;
                sampler.h_size *= 2;
                sampler.seed = derive_seed(sampler_seed, &[1]);
            }
            Err(e) => return Err(e),
        }
    }
}

/// Runs one episode of `method` on a copy of `world`. Deterministic given
/// `seed`; module errors end the episode and are kept in the record.
pub fn run_episode(world: &TrueWorld, scene_id: &str, method: Method, config: &EpisodeConfig, seed: u64) -> Episode {
    let mut world = world.clone();
    let mut record = EpisodeRecord {
        scene_id: scene_id.to_string(),
        method,
        seed,
        task: config.task.kind,
        steps: Vec::new(),
        total_reward: 0.0,
        error: None,
    };
    let mut timing = PhaseTiming::default();
    if let Err(e) = config.validate() {
        record.error = Some(e.to_string());
        return Episode { record, timing };
    }
    let mut history = History::new();
    for step in 0..config.max_steps() {
        if world.visible_objects().is_empty() {
            break;
        }
        match run_step(&mut world, &mut history, method, config, seed, step as u64, &mut timing) {
            Ok(Some(s)) => {
                record.total_reward += s.reward;
                record.steps.push(s);
            }
            Ok(None) => break,
            Err(e) => {
                record.error = Some(e.to_string());
                break;
            }
        }
    }
    Episode { record, timing }
}

fn run_step(
    world: &mut TrueWorld,
    history: &mut History,
    method: Method,
    config: &EpisodeConfig,
    seed: u64,
    step: u64,
    timing: &mut PhaseTiming,
) -> Result<Option<StepRecord>> {
    let t = Instant::now();
    let view = world.view(step)?;
    elapsed(&mut timing.pre_processing, t);
    let options = BeliefOptions {
        hallucination: method == Method::PomdpHalluc,
        red_prior: None,
        seed: derive_seed(seed, &[step, 1]),
    };
    let (ctx, set, belief, summary) =
        sample_and_weigh(&view, history, config, &options, derive_seed(seed, &[step, 0]), timing)?;
    let mut model = WorldModel::new(&ctx, config.task.kind);
    model.k_obs = config.k_obs;

    let t = Instant::now();
    let (action, action_set_value, diagnostics) = match method {
        Method::BestSeg => {
            let modal = ctx.model().components(set.modal());
            let (single, _) = build_belief(
                &ctx,
                std::slice::from_ref(&modal),
                history,
                &BeliefOptions {
                    hallucination: false,
                    ..options
                },
            )?;
            (best_segmentation_action(&model, &single.particles[0]), None, None)
        }
        Method::MaxUtil => {
            let set = restricted_action_set(&model, &belief, config.action_budget);
            (
                max_utility_action(&model, &belief, &set.actions),
                Some(set.expected_value),
                None,
            )
        }
        Method::Pomdp | Method::PomdpHalluc => {
            let set = restricted_action_set(&model, &belief, config.action_budget);
            let planner = PlannerConfig {
                seed: derive_seed(seed, &[step, 2]),
                ..config.planner
            };
            let (a, d) = plan(&model, &belief, &set.actions, &config.task, &planner)?;
            (a, Some(set.expected_value), Some(d))
        }
    };
    elapsed(&mut timing.planning, t);

    let Action::Grasp { owner, destination } = action else {
        return Ok(None);
    };
    let info = ctx.hypothesis(owner);
    let grasp = info
        .grasp
        .clone()
        .ok_or_else(|| Error::NoStableGrasp(format!("{} has no grasp", info.fingerprint)))?;
    let executed = GraspAction { grasp, destination };
    let mut rng = stream_rng(derive_seed(seed, &[step, 3]), 0);
    let result = world.step(&executed, &view, config.success_multiplier, &mut rng)?;
    let reward = match (result.succeeded, result.object) {
        (true, Some(k)) => config.task.kind.reward(world.objects[k].is_red, destination),
        _ => 0.0,
    };
    let outcome = if result.succeeded {
        Outcome::Success
    } else {
        Outcome::Failure
    };
    history.push(GraspRecord {
        grasp: executed.grasp.clone(),
        outcome,
        occlusion_signature: info.signature,
        blockers: info.blockers.clone(),
        moved: result.moved.clone(),
    });
    Ok(Some(StepRecord {
        label: action_label(&ctx, action),
        action: Some(executed),
        outcome: Some(outcome),
        success_probability: result.success_probability,
        reward,
        moved: result.moved,
        sampler: SamplerSummary::from(&set),
        belief: summary,
        action_set_value,
        planner: diagnostics,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::GeneratorConfig;
    use crate::grasp::Location;

    fn fast_config(task: TaskKind) -> EpisodeConfig {
        let mut config = EpisodeConfig::new(task);
        config.sampler.h_size = 200;
        config.sampler.n_ess_target = 50;
        config.sampler.t_max = 20_000;
        config.planner.rollouts_per_action = 20;
        config.planner.particles_per_node = 30;
        config.planner.horizon = 2;
        config
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        let err = "greedy".parse::<Method>().unwrap_err().to_string();
        assert!(err.contains("best_seg") && err.contains("pomdp_halluc"));
    }

    #[test]
    fn episodes_are_deterministic() {
        let world = TrueWorld::generate(&GeneratorConfig::object_search(), 3).unwrap();
        let config = fast_config(TaskKind::ObjectSearch);
        for method in [Method::MaxUtil, Method::Pomdp] {
            let a = run_episode(&world, "s3", method, &config, 11);
            let b = run_episode(&world, "s3", method, &config, 11);
            assert_eq!(
                serde_json::to_string(&a.record).unwrap(),
                serde_json::to_string(&b.record).unwrap()
            );
        }
    }

    #[test]
    fn table_clearing_conserves_objects() {
        let config = fast_config(TaskKind::TableClearing);
        for seed in 0..3 {
            let world = TrueWorld::generate(&GeneratorConfig::simple(3, 2), seed).unwrap();
            let ep = run_episode(&world, "tc", Method::MaxUtil, &config, seed);
            let r = &ep.record;
            assert!(r.error.is_none(), "{:?}", r.error);
            assert!(r.steps.len() <= 6);
            let moves = r.steps.iter().filter(|s| s.outcome == Some(Outcome::Success)).count();
            let mut replay = world.clone();
            for s in &r.steps {
                if let Some(fp) = &s.moved {
                    let k = (0..replay.objects.len())
                        .find(|&k| replay.fingerprint(k) == *fp)
                        .unwrap();
                    replay.objects[k].location = Location::Removed;
                }
            }
            assert_eq!(moves + replay.on_table(), world.objects.len());
            assert_eq!(r.total_reward, r.steps.iter().map(|s| s.reward).sum::<f64>());
        }
    }

    #[test]
    fn object_search_reward_matches_the_red_box() {
        let config = fast_config(TaskKind::ObjectSearch);
        let world = TrueWorld::generate(&GeneratorConfig::object_search(), 5).unwrap();
        let ep = run_episode(&world, "os", Method::MaxUtil, &config, 2);
        let mut replay = world.clone();
        for s in &ep.record.steps {
            if let (Some(fp), Some(a)) = (&s.moved, &s.action) {
                let k = (0..replay.objects.len())
                    .find(|&k| replay.fingerprint(k) == *fp)
                    .unwrap();
                replay.objects[k].location = a.destination;
            }
        }
        assert_eq!(ep.record.total_reward, replay.red_box_score());
    }

    #[test]
    fn records_round_trip() {
        let world = TrueWorld::generate(&GeneratorConfig::object_search(), 8).unwrap();
        let ep = run_episode(&world, "rt", Method::Pomdp, &fast_config(TaskKind::ObjectSearch), 4);
        let text = serde_json::to_string(&ep.record).unwrap();
        let back: EpisodeRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ep.record);
    }

    #[test]
    fn invalid_config_is_recorded() {
        let world = TrueWorld::generate(&GeneratorConfig::simple(2, 1), 0).unwrap();
        let mut config = fast_config(TaskKind::TableClearing);
        config.action_budget = 0;
        let ep = run_episode(&world, "bad", Method::MaxUtil, &config, 0);
        assert!(ep.record.error.unwrap().contains("action_budget"));
        assert!(ep.record.steps.is_empty());
    }
}
