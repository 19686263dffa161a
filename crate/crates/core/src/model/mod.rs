//! The region proposal network: backbone, the four RPN heads, negative/positive
//! attention, false-negative flagging and the soft-label objective.

mod attention;
pub mod checkpoint;
mod loss;
mod network;
mod sampling;

pub use attention::{attention_graph, attention_map, detect_false_negatives, AttentionMap};
pub use loss::{
    build_loss, negative_targets, soft_label_loss, vanilla_rpn_loss, BuiltLoss, LossTerms,
    NegativeTargets,
};
pub use network::{
    forward_rpn, BackboneParams, ConvLayer, ModelConfig, ProposalBatch, RpnForward, RpnModel,
    RpnParams, FEATURE_STRIDE,
};
pub use sampling::{sample_proposals, ProposalSample};

pub(crate) use network::regression_targets;
