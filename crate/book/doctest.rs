//! Every chapter of the guide, compiled as rustdoc so `cargo test` runs its
//! listings. One module per chapter keeps failures traceable.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("src/features.md")]
pub mod features {}
#[doc = include_str!("src/transformer.md")]
pub mod transformer {}
#[doc = include_str!("src/matching.md")]
pub mod matching {}
#[doc = include_str!("src/refinement.md")]
pub mod refinement {}
#[doc = include_str!("src/training.md")]
pub mod training {}
#[doc = include_str!("src/data.md")]
pub mod data {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
