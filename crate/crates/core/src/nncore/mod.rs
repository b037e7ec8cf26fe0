//! Minimal dense-tensor numeric core with explicitly differentiable layers
//! and the Adam optimizer. Every layer pairs a forward with a hand-written
//! backward; there is no general autodiff graph.

mod lstm;
mod ops;
mod params;
mod tensor;

pub use lstm::{
    bilstm_layer_backward, bilstm_layer_forward, lstm_cell_backward, lstm_cell_forward,
    BilstmCache, BilstmWeights, FinalStates, LstmCellCache, LstmCellGrads, LstmWeights,
};
pub use ops::{
    dropout_backward, dropout_forward, embedding_backward, embedding_forward, linear_backward,
    linear_forward, masked_temporal_max_pool, max_pool_backward, softmax_cross_entropy,
    MaxPoolCache,
};
pub use params::{
    adam_step, adam_step_filtered, clip_global_norm, AdamConfig, Param, ParamId, ParamSet,
};
pub use tensor::{debug_check_finite, matmul_nn, matmul_nt, matmul_tn, Tensor};
