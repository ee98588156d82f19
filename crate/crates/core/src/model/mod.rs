//! Byte-level decoder-only transformer with an explicitly layered parameter
//! set: `embed`, one `block{i}` per transformer block, and `head`.

mod checkpoint;
mod config;
mod lm;
mod params;

pub use checkpoint::{Checkpoint, MANIFEST_FILE, PARAMS_FILE};
pub use config::{
    decode_until_eos, encode_answer, encode_prompt, ModelConfig, BOS, EOS, PAD, VOCAB_SIZE,
};
pub use lm::{
    greedy_generate, init_model, next_token_distribution, BoundModel, Generation,
    TokenDistribution, BLOCK_PARAMS,
};
pub use params::{Layer, ParameterSet};
