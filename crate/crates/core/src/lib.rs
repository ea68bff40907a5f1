pub mod action_set;
pub mod belief;
pub mod composition;
pub mod error;
pub mod ess;
pub mod generator;
pub mod geometry;
pub mod grasp;
pub mod hypothesis;
pub mod mcmc;
pub mod occlusion;
pub mod planner;
pub mod rng;
pub mod scene;
pub mod sim;
pub mod stats;
pub mod world;

pub use error::{Error, Result};

// Compile and run the guide's snippets as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/beliefs.md")]
    mod beliefs {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
