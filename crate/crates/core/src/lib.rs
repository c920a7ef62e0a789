//! Non-local attention blocks in two flavors — softmax-normalized and
//! softmax-free with a fixed `1/sqrt(HW)` scale — together with the
//! machinery to interrogate them: hand-derived backward passes certified by
//! finite differences, an analytic FLOP/peak-memory model matched against
//! instrumented forwards, attention-map diagnostics, a wall-clock
//! micro-bench, and a planted long-range toy task with an SGD trainer.
//!
//! Everything is double precision with pinned accumulation orders, so a seed
//! reproduces results bit-for-bit.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod cost;
pub mod error;
pub mod io;
pub mod mem;
pub mod rng;
pub mod tensor;
pub mod toy;

pub use attention::{
    ablated_forward, embed, init_embeddings, init_heads, logits, multi_head_forward,
    multi_head_forward_with_maps, project_direction, project_magnitude, scaled_nl_forward,
    softmax_nl_forward, AblationScope, AttentionConfig, AttentionMap, BlockVariant, ComputeMode,
    EmbeddingSet, FeatureMap, InitScheme,
};
pub use error::{Error, Result};
pub use mem::MemTrace;
pub use rng::Rng;
pub use tensor::{max_abs_diff, max_rel_diff, Tensor};
