//! Doctests for the guide in `book/`. Every rust block in a chapter is
//! compiled and run by `cargo test -p mimpc-book`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/convexification.md")]
pub mod convexification {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/terminal.md")]
pub mod terminal {}

#[doc = include_str!("../../../book/src/solver.md")]
pub mod solver {}

#[doc = include_str!("../../../book/src/rounding.md")]
pub mod rounding {}

#[doc = include_str!("../../../book/src/closed_loop.md")]
pub mod closed_loop {}

#[doc = include_str!("../../../book/src/analysis.md")]
pub mod analysis {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
