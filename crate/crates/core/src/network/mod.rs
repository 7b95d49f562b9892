//! Model graphs: sequential layers with gate attachments and identity
//! bypasses, their execution in every mode, and the model file format.

mod config;
mod exec;
mod io;
mod model;

pub use config::{
    Activation, ItemShape, LayerKind, LayerSpec, LkamAttachment, NetworkConfig, ResidualBlock, Topology,
    MANIFEST_HEADER,
};
pub use exec::{argmax_rows, label_ranks, sparse_conv_step, ForwardOptions, ForwardOutput, GateOverride, GraphOutput, MacTally};
pub use io::{peek_precision, peek_precision_file, MAGIC, VERSION};
pub use model::{parameter_layout, LayerParams, Model, GATE_BIAS_INIT, GATE_INIT_SCALE};
