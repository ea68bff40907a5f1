//! Run configuration file and its merge with command-line flags.

use std::path::PathBuf;

use objcomp::generator::GeneratorConfig;
use objcomp::mcmc::SamplerConfig;
use objcomp::planner::PlannerConfig;
use objcomp::sim::Method;
use objcomp::world::TaskKind;
use objcomp::{Error, Result};
use serde::{Deserialize, Serialize};

/// Generated scenes: `count` worlds drawn from `config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub count: usize,
    #[serde(default = "GeneratorConfig::object_search")]
    pub config: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Scene files with ground truth.
    pub scenes: Vec<PathBuf>,
    pub generate: Option<GenerateSpec>,
    pub methods: Vec<Method>,
    pub task: TaskKind,
    pub sampler: SamplerConfig,
    pub planner: PlannerConfig,
    pub discount: f64,
    pub max_steps: Option<usize>,
    pub action_budget: Option<usize>,
    pub success_multiplier: f64,
    pub trials: usize,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenes: Vec::new(),
            generate: None,
            methods: vec![Method::BestSeg, Method::MaxUtil, Method::Pomdp],
            task: TaskKind::ObjectSearch,
            sampler: SamplerConfig::default(),
            planner: PlannerConfig::default(),
            discount: 1.0,
            max_steps: None,
            action_budget: None,
            success_multiplier: 1.0,
            trials: 1,
            out: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.scenes.is_empty(), &self.generate) {
            (true, None) => {
                return Err(Error::InvalidConfig(
                    "give scene files or a generator, not neither".into(),
                ))
            }
            (false, Some(_)) => return Err(Error::InvalidConfig("give scene files or a generator, not both".into())),
            (_, Some(g)) if g.count == 0 => return Err(Error::InvalidConfig("generate.count must be positive".into())),
            (_, Some(g)) => g.config.validate()?,
            _ => {}
        }
        if self.methods.len() < 2 {
            return Err(Error::InvalidConfig("an evaluation needs at least two methods".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be positive".into()));
        }
        self.sampler.validate()?;
        self.planner.validate()
    }
}
