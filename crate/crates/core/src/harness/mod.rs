//! Training, evaluation, false-negative scoring and the threshold ablation.

mod ablate;
mod config;
mod eval;
mod fn_detect;
mod train;

pub use ablate::{ablate_threshold, run_experiment, summarize, AblationRow, AblationTable, RunSummary};
pub use config::{EvalConfig, Mode, Seeds, TrainConfig};
pub use eval::{
    average_precision, coco_thresholds, evaluate, match_detections, propose, recall_at,
    score_detections, Detection, EvalReport,
};
pub use fn_detect::{
    audit_flags, hit_probability, random_flag_recall, score_fn_detection, FnScore, FN_IOU,
};
pub use train::{train, train_with, FlaggedAnchor, IterationLog, TrainOutput};
