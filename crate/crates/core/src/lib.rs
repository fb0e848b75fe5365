pub mod alignment;
pub mod bottleneck;
pub mod checkpoint;
pub mod compose;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod text;
pub mod theory;
pub mod train;
pub mod world;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub struct Geometry;
    #[doc = include_str!("../../../book/src/world.md")]
    pub struct World;
    #[doc = include_str!("../../../book/src/bottleneck.md")]
    pub struct Bottleneck;
    #[doc = include_str!("../../../book/src/generator.md")]
    pub struct Generator;
    #[doc = include_str!("../../../book/src/composition.md")]
    pub struct Composition;
    #[doc = include_str!("../../../book/src/bounds.md")]
    pub struct Bounds;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
