//! Staged multi-joint motion planning from response-time matrices.
//!
//! See the guide in `book/` for a walkthrough of each module.

pub mod cli;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod nlp;
pub mod ocp;
pub mod oracle;
pub mod planner;
pub mod scenarios;
pub mod schedule;
pub mod simplex;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/segments.md")]
    mod segments {}
    #[doc = include_str!("../../../book/src/planning.md")]
    mod planning {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
