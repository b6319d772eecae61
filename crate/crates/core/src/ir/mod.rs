//! Typed computation-graph IR: shapes, graph validation, shape inference,
//! the JSON file format and the model zoo.

mod format;
mod graph;
mod infer;
mod shape;
mod zoo;

use thiserror::Error;

pub use format::{from_json, to_json, IR_VERSION};
pub use graph::{build_graph, Activation, ActivationParams, Conv2dParams, FcParams, NetworkGraph, OpKind, OpNode, PoolParams, UpsampleMode, UpsampleParams};
pub use infer::{downsampling_layers, head_resolution, infer_shapes, main_path, op_output_shape, upsampling_layers, ShapeTable};
pub(crate) use infer::{downsampling_positions, upsampling_positions};
pub use shape::{window_out, TensorShape};
pub use zoo::{model_zoo, ZooConfig, ZooModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IrError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{node}` references missing input `{input}`")]
    DanglingInput { node: String, input: String },
    #[error("node `{node}` expects {expected} inputs, got {got}")]
    ArityMismatch { node: String, expected: &'static str, got: usize },
    #[error("cycle through node `{0}`")]
    CycleDetected(String),
    #[error("expected exactly one input node, found {0}")]
    InputCount(usize),
    #[error("expected exactly one output node, found {0}")]
    OutputCount(usize),
    #[error("node `{0}` is not reachable from the input")]
    Unreachable(String),
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-positive dimension at node `{node}`: {detail}")]
    NonPositiveDim { node: String, detail: String },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("resolution {resolution} is incompatible with {model} (total stride {total_stride})")]
    IncompatibleResolution { model: String, resolution: u64, total_stride: u64 },
    #[error("invalid node `{node}`: {detail}")]
    InvalidNode { node: String, detail: String },
    #[error("malformed graph document: {0}")]
    Parse(String),
    #[error("unsupported ir_version {0}")]
    UnsupportedVersion(u32),
}
