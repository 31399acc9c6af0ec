#![doc = include_str!("../../../book/src/introduction.md")]

#[doc = include_str!("../../../book/src/core/geometry.md")]
pub mod geometry {}

#[doc = include_str!("../../../book/src/core/scenes.md")]
pub mod scenes {}

#[doc = include_str!("../../../book/src/core/selection.md")]
pub mod selection {}

#[doc = include_str!("../../../book/src/core/refinement.md")]
pub mod refinement {}

#[doc = include_str!("../../../book/src/core/pipeline.md")]
pub mod pipeline {}

#[doc = include_str!("../../../book/src/core/synthetic.md")]
pub mod synthetic {}

#[doc = include_str!("../../../book/src/cli/commands.md")]
pub mod commands {}

#[doc = include_str!("../../../book/src/cli/configuration.md")]
pub mod configuration {}
