//! Bipartite matching between prediction slots and ground truth, and the
//! set-prediction training loss.

mod boxes;
mod hungarian;
mod loss;

pub use boxes::{box_iou, generalized_iou, BoxCxcywh};
pub use hungarian::{hungarian, Assignment, CostMatrix};
pub use loss::{
    class_probabilities, generalized_iou_rows, match_and_loss, matching_cost, set_loss, CostWeights,
    GroundTruthObject, MotionLabel, SetLoss, NO_OBJECT, NUM_CLASSES,
};
