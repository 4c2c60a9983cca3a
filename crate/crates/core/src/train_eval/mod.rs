//! Classifier head, objectives, optimizer loop, evaluation and diagnostics.

pub mod ablation;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod train;

pub use ablation::{ablation_sweep, ablation_table, AblationData, AblationRow, DEFAULT_VARIANTS};
pub use gradcheck::{check_gradients, grad_check, GradCheckOptions, GradCheckReport};
pub use loss::{classify, cross_entropy, total_loss, LossReport};
pub use metrics::{ClassMetrics, EvalReport};
pub use model::{DialogueInput, HbafModel};
pub use optim::{Adam, AdamConfig};
pub use train::{evaluate, evaluate_inputs, train, train_observed, EpochRecord, TrainConfig, TrainOutcome};
