//! Transformer encoder pre-trained with a masked-token objective.
//!
//! Everything runs in f64 with hand-written backward passes. A sequence is
//! processed at its true length; because PAD keys are masked out of the
//! softmax and PAD rows are zeroed before every convolution, running the
//! padded sequence gives the same hidden states on real tokens.

mod attention;
mod checkpoint;
mod config;
mod masking;
mod model;
mod optim;
mod params;
mod tensor;
mod train;

pub use attention::{attention, AttentionOutput};
pub use checkpoint::{
    checkpoint_hash, copy_checkpoint, read_log, read_tensors, write_log, write_tensors, Checkpoint,
    CheckpointConfig, Manifest, ManifestEntry,
};
pub use config::{EncoderConfig, OptimizerConfig, REFERENCE_PARAM_COUNT};
pub use masking::{mask_batch, mask_sequence, MLMBatch, MaskedSequence, NO_TARGET};
pub use model::{AttentionExport, EncoderModel};
pub use optim::{clip_grad_norm, Adam, LinearSchedule};
pub use params::{Grads, ParamStore, Tensor};
pub use tensor::{log_sum_exp, softmax, Mat};
pub use train::{evaluate_mlm, mlm_loss, mlm_loss_and_grads, pretrain, EpochLog, MlmStats, GRAD_CHUNKS};

pub(crate) use model::{mean_rows, mean_rows_backward};
pub(crate) use tensor::{linear, linear_backward};

/// Cosine similarity of two vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
