//! Model assembly, optimization, evaluation and artifacts.

mod checkpoint;
mod eval;
mod gradcheck;
mod metrics;
mod model;
mod optim;
mod step;

pub use checkpoint::{
    decode_checkpoint_into, encode_checkpoint, load_checkpoint, read_checkpoint_header, save_checkpoint,
    CheckpointHeader, OptimizerEntry, ParamEntry, FORMAT_VERSION, MAGIC,
};
pub use eval::{evaluate, export_embeddings, Evaluation};
pub use gradcheck::{gradcheck, ComponentCheck, GradcheckOptions, GradcheckReport};
pub use metrics::{argmax, confusion_matrix, merge_confusion, ClassMetrics, MetricsReport};
pub use model::{DrkfModel, ForwardOutput, FuseInput, LossBreakdown, LossVars, ModelConfig};
pub use optim::{AdamW, AdamWConfig};
pub use step::{batch_indices, train_step, Trainer};
