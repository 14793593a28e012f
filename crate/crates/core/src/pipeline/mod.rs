//! Context ordering, the three model variants, training, evaluation,
//! checkpoints and attention dumps.

mod checkpoint;
mod config;
mod context;
mod dump;
mod evaluate;
mod model;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Manifest,
    MetricPoint, CHECKPOINT_MAGIC,
};
pub use config::{RunConfig, Variant, ARCHITECTURE_FIELDS};
pub use context::{order_observations, Batch, OrderedContext};
pub use dump::{
    attention_csv, dump_attention, dump_context, render_episode, write_frame_strip,
    ATTENTION_CSV_HEADER,
};
pub use evaluate::{
    eval_contexts, evaluate, evaluate_with, predict_queries, split_dataset, EvalProtocol,
};
pub use model::{ForwardNodes, Model};
pub use train::{
    run_paths, sample_batch, train, train_until, StepRecord, TrainReport, TRAIN_LOG_HEADER,
};
