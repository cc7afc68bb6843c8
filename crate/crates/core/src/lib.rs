//! Bounded key/value cache for frame-wise streaming attention.
//!
//! The cache keeps the first frame, the current frame, and the middle tokens
//! that the current frame's pooled queries score highest, up to a fixed
//! budget. Retained keys are quantized per channel and values per token.

pub mod attention;
pub mod config;
pub mod error;
pub mod harness;
pub mod kv_cache;
pub mod numerics;
pub mod packing;
pub mod pruning;
pub mod quantization;
pub mod snapshot;

pub use attention::{
    project_qkv, temporal_causal_attention, AttentionOutput, FrameTokens, LayerWeights, Qkv, TokenKind,
};
pub use config::StreamConfig;
pub use error::{Error, Result};
pub use harness::{
    compare_outputs, emit_metrics, gen_frames, parse_metrics, quant_error_tensors, run_frames, run_stream,
    sparsity_matrix, stream_hash, BenchMetrics, Deviation, FrameStream, MetricRecord, MetricsFormat, Mode, StreamRun,
};
pub use kv_cache::{KVCacheLayer, KvStore, PruneSelection, QuantSettings};
pub use numerics::{MultiHeadTensor, RealMatrix};
pub use pruning::{
    build_pooled_query, prune_step, score_matrix, score_tokens, select_keep_indices, summarize_prunable_keys,
    ImportanceScores, PooledQuery,
};
pub use quantization::{
    dequantize_group, fit_params, mse_report, quant_params, quantize_group, quantize_tensor, write_mse_csv, MseRow,
    QuantAxis, QuantParams, QuantizedBlockSet, TensorRole,
};
