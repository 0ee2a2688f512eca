//! The toy multimodal transformer: configuration, weights, the synthetic
//! task, forward passes, decoding, training, and pair synthesis.

pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod forward;
pub mod task;
pub mod train;
pub mod tuned;

pub use checkpoint::{Checkpoint, CheckpointMeta, Lineage};
pub use config::{vocab, ModelConfig};
pub use decode::{
    accuracy_with, decode_greedy, decode_sample, decode_with, greedy_accuracy, is_correct, perplexity,
    perplexity_with, DecodeMode,
};
pub use forward::{forward_tokens, forward_with_trace, ActivationTrace, ForwardOutput, InputEdit, Splice};
pub use task::{generate_tasks, read_jsonl, write_jsonl, GeneratedTask, MultimodalSequence, TaskOp, TaskSpec};
pub use train::{held_out_sequences, held_out_suite, train_toy, TrainConfig, TrainReport};
pub use tuned::{make_tuned, ModelPair, TuneMode};
