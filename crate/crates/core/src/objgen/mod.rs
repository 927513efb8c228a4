//! Object generation: proposal heads, aggregation losses, mask head,
//! DBSCAN aggregation, the NMS baseline and prediction files.

pub mod aggregate;
pub mod dbscan;
pub mod heads;
pub mod output;

pub use aggregate::{
    aggregate, form_objects, nms_baseline, sorted_iou, Aggregation, ClusterParams, FinalObject, Mode,
    ScoredProposal,
};
pub use dbscan::{dbscan, NOISE};
pub use heads::{
    assign_objectness, discriminative_loss, geometric_agg_loss, mask_loss, objectness_from_distances,
    AggFeatures, HeadVars, Heads, MaskHead, Objectness, ProposalHeads,
};
pub use output::{read_predictions, write_predictions};
