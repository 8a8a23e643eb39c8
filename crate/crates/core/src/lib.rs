//! Safe exploration in deterministic grid MDPs with Gaussian-process beliefs
//! over an unknown reward and an unknown safety function.

pub mod agent;
pub mod experiment;
pub mod gp;
pub mod gridworld;
pub mod planning;
pub mod safesets;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/gridworld.md")]
    mod gridworld {}
    #[doc = include_str!("../../../book/src/gp.md")]
    mod gp {}
    #[doc = include_str!("../../../book/src/safe-sets.md")]
    mod safe_sets {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/agent.md")]
    mod agent {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    mod file_formats {}
}
