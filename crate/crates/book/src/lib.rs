//! The guide under `book/src`, compiled so that every snippet runs as a doctest.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/voting.md")]
pub mod voting {}

#[doc = include_str!("../../../book/src/rank-verification.md")]
pub mod rank_verification {}

#[doc = include_str!("../../../book/src/certification.md")]
pub mod certification {}

#[doc = include_str!("../../../book/src/attacks.md")]
pub mod attacks {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
