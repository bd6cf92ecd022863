//! Keeps the book's code snippets compiling and passing: every chapter is
//! included as a doc comment here, so `cargo test --doc` runs the book.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/probability.md")]
pub mod probability {}

#[doc = include_str!("../../../book/src/problem-model.md")]
pub mod problem_model {}

#[doc = include_str!("../../../book/src/region.md")]
pub mod region {}

#[doc = include_str!("../../../book/src/exponent.md")]
pub mod exponent {}

#[doc = include_str!("../../../book/src/simulation.md")]
pub mod simulation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
