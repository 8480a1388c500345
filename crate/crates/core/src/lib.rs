//! Flow-matching action policies for long-running manipulation, at desk scale.
//!
//! The crate covers the learning stack (a small dense network, flow-matching
//! training and sampling, rectified-flow distillation, classifier-free
//! guidance, phase-adaptive downsampling), a deterministic 2D pick-and-place
//! world that generates play, episodic and cyclic demonstrations, and the
//! continuous-run evaluation protocol with its throughput and reliability
//! metrics.
//!
//! ```
//! use cycleflow::metrics::{mtbi, tph, Mtbi};
//!
//! assert_eq!(tph(124, 3600.0).unwrap(), 124.0);
//! assert_eq!(mtbi(0, 3600.0).unwrap(), Mtbi::Censored(3600.0));
//! ```

// Config checks are written `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distill;
pub mod error;
pub mod espada;
pub mod flowmatch;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod net;
mod parallel;
pub mod pipeline;
pub mod runner;
pub mod simenv;
pub mod traj;

pub use error::{Error, Result};

/// The guide in `book/`, compiled so its snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/flow-matching.md")]
    mod flow_matching {}
    #[doc = include_str!("../../../book/src/distillation.md")]
    mod distillation {}
    #[doc = include_str!("../../../book/src/guidance.md")]
    mod guidance {}
    #[doc = include_str!("../../../book/src/espada.md")]
    mod espada {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
