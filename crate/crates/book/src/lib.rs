//! The guide in `book/src` has no way to pull in this workspace's crates when
//! mdbook tests it, so each chapter is included here as a module doc and
//! `cargo test` runs its listings.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("../../../book/src/layers.md")]
pub mod layers {}
#[doc = include_str!("../../../book/src/graph.md")]
pub mod graph {}
#[doc = include_str!("../../../book/src/architecture.md")]
pub mod architecture {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/gradcheck.md")]
pub mod gradcheck {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
