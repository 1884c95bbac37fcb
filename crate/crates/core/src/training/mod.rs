//! Loss, schedule, optimiser and the training/evaluation loop for mask heads
//! on the synthetic task.

mod loss;
mod model;
mod schedule;
mod trainer;

pub use loss::{bce_mask_loss, mask_iou, pixel_accuracy};
pub use model::{
    from_checkpoint, tensor_text, text_tensor, to_checkpoint, HeadModel, HeadParams, SolveStatus,
};
pub use schedule::{lr_at, TrainConfig, WARMUP_START_FACTOR};
pub use trainer::{
    evaluate, held_out_samples, sgd_step, train, train_from, EvalMetrics, MetricsRow, TrainState,
    ABORT_DIVERGED_FRACTION,
};
