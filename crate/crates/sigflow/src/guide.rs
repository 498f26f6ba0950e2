//! The user guide, rendered by mdbook from `book/` and compiled here so
//! every code block in the book runs under `cargo test --doc`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/flow_matching.md")]
pub mod flow_matching {}

#[doc = include_str!("../../../book/src/sampling.md")]
pub mod sampling {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data_pipeline {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics_guide {}

#[doc = include_str!("../../../book/src/harness.md")]
pub mod harness_guide {}
