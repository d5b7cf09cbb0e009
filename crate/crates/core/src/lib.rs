//! Spatially-aware, pull-based dataflow pipelines for volumetric images.

pub mod batching;
pub mod catalog;
pub mod error;
pub mod graph;
pub mod model;
pub mod netshape;
pub mod nifti_io;
pub mod pipeline;
pub mod sample;
pub mod sampling;
pub mod transformers;

pub use batching::{BatchConfig, BatchIterator, PipelineBundle};
pub use error::{Error, Result};
pub use graph::{Connection, Creator, Graph, NodeId, Step};
pub use sampling::{Identifier, Sampler};
pub use transformers::{Kind, Multiplicity};
pub use sample::{compose_offset, promote, Affine, AxisRole, Sample};
