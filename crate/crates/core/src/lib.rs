//! Lax-Hopf traffic engine and two-stage stochastic control of entry
//! metering and variable speed limits on a freeway corridor.
//!
//! The guide in `book/` walks through the modules; its code blocks run as
//! doctests.

pub mod experiment;
pub mod link;
pub mod lwr;
pub mod milp;
pub mod network;
pub mod rolling;
pub mod stochastic;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/traffic-model.md")]
    mod traffic_model {}
    #[doc = include_str!("../../../book/src/constraints.md")]
    mod constraints {}
    #[doc = include_str!("../../../book/src/solving.md")]
    mod solving {}
    #[doc = include_str!("../../../book/src/closed-loop.md")]
    mod closed_loop {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
