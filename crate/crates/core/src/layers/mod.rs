//! Layer kernels, the parameter registry and the computation graph.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;

pub use gradcheck::{gradcheck, gradcheck_with, randomize_batch_norm, rel_error, GradcheckOptions, GradcheckReport};
pub use graph::{
    ArchGraph, BnConfig, Gradients, GraphBuilder, InputSpec, LayerKind, LayerNode, Mode, OutputSpec, ParamSlot, ValueId,
};
pub use params::{EntryKind, ParamCounts, ParamEntry, ParamStore};
