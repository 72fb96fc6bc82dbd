//! LAWCAT attention: causal depthwise convolution over queries and keys, a
//! shared feature projection, a low-rank sigmoid gate and normalized gated
//! linear attention.

pub mod check;
pub mod conv;
pub mod feature;
pub mod gate;
pub mod gla;
pub mod hybrid;
pub mod layer;

pub use check::{oracle_check, relative_deviation, OracleCheckReport};
pub use conv::{causal_conv1d, causal_conv1d_op, identity_kernel, ConvRing};
pub use feature::{feature_map, FeatureKind};
pub use gate::{gate_values, gate_values_biased, init_gate_bias};
pub use gla::{
    gla_multihead, gla_op, gla_parallel_oracle, gla_parallel_oracle_matrix, gla_scan_chunked,
    gla_scan_recurrent, gla_step, GlaOptions, GlaState, ScanMode, DEFAULT_EPS, ORACLE_MAX_LEN,
};
pub use hybrid::{hybrid_attention, hybrid_op, hybrid_oracle, HybridHead, HybridInputs};
pub use layer::{
    is_projection, lawcat_attention, lawcat_attention_op, stream_step, LawcatConfig, LawcatParams,
    LawcatVars, LayerState,
};
