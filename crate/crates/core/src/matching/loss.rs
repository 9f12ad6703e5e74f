use serde::{Deserialize, Serialize};

use super::boxes::{generalized_iou, BoxCxcywh};
use super::hungarian::{hungarian, Assignment, CostMatrix};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Number of class logits per slot: moving, static, no-object.
pub const NUM_CLASSES: usize = 3;
pub const NO_OBJECT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionLabel {
    Moving,
    Static,
}

impl MotionLabel {
    pub const ALL: [MotionLabel; 2] = [MotionLabel::Moving, MotionLabel::Static];

    pub fn class_index(self) -> usize {
        match self {
            MotionLabel::Moving => 0,
            MotionLabel::Static => 1,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(MotionLabel::Moving),
            1 => Some(MotionLabel::Static),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionLabel::Moving => "moving",
            MotionLabel::Static => "static",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    #[serde(flatten)]
    pub bbox: BoxCxcywh,
    pub label: MotionLabel,
}

impl GroundTruthObject {
    pub fn new(bbox: BoxCxcywh, label: MotionLabel) -> Self {
        GroundTruthObject { bbox, label }
    }

    pub fn validate(&self) -> Result<()> {
        self.bbox.validate()?;
        if !self.bbox.is_normalized() {
            return Err(Error::contract(format!("ground-truth box outside [0,1]: {:?}", self.bbox)));
        }
        Ok(())
    }
}

/// Matching-cost and loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub no_object: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("class", self.class),
            ("l1", self.l1),
            ("giou", self.giou),
            ("no_object", self.no_object),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss_weights.{name}"), "must be a non-negative number"));
            }
        }
        Ok(())
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Per-slot class probabilities for an `N_q×3` logit tensor.
pub fn class_probabilities(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.shape()[0]).map(|i| softmax_row(logits.row(i))).collect()
}

/// `cost[i][j] = −λ_cls·p_j(label_i) + λ_l1·‖b_i − b̂_j‖₁ + λ_giou·(1 − GIoU)`.
pub fn matching_cost(
    logits: &Tensor,
    boxes: &Tensor,
    gts: &[GroundTruthObject],
    w: &CostWeights,
) -> Result<CostMatrix> {
    let slots = logits.shape()[0];
    if logits.shape() != [slots, NUM_CLASSES] || boxes.shape() != [slots, 4] {
        return Err(Error::shape("matching_cost", logits.shape(), boxes.shape()));
    }
    if gts.len() > slots {
        return Err(Error::contract(format!(
            "{} ground truths exceed {slots} prediction slots",
            gts.len()
        )));
    }
    let probs = class_probabilities(logits);
    let mut data = Vec::with_capacity(gts.len() * slots);
    for gt in gts {
        for (j, p) in probs.iter().enumerate() {
            let pred = BoxCxcywh::from_slice(boxes.row(j));
            let giou = generalized_iou(&gt.bbox, &pred)?;
            data.push(
                -w.class * p[gt.label.class_index()]
                    + w.l1 * gt.bbox.l1_distance(&pred)
                    + w.giou * (1.0 - giou),
            );
        }
    }
    CostMatrix::new(gts.len(), slots, data)
}

/// Differentiable GIoU between matching rows of two `M×4` box tensors.
pub fn generalized_iou_rows<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let corners = |x: Var<'t>| -> Result<[Var<'t>; 4]> {
        let (cx, cy) = (x.slice(1, 0, 1)?, x.slice(1, 1, 1)?);
        let (hw, hh) = (x.slice(1, 2, 1)?.scale(0.5), x.slice(1, 3, 1)?.scale(0.5));
        Ok([cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?])
    };
    let [ax0, ay0, ax1, ay1] = corners(a)?;
    let [bx0, by0, bx1, by1] = corners(b)?;
    let area = |x: Var<'t>| -> Result<Var<'t>> { x.slice(1, 2, 1)?.mul(x.slice(1, 3, 1)?) };
    let iw = ax1.minimum(bx1)?.sub(ax0.maximum(bx0)?)?.relu();
    let ih = ay1.minimum(by1)?.sub(ay0.maximum(by0)?)?.relu();
    let inter = iw.mul(ih)?;
    let union = area(a)?.add(area(b)?)?.sub(inter)?;
    let cw = ax1.maximum(bx1)?.sub(ax0.minimum(bx0)?)?;
    let ch = ay1.maximum(by1)?.sub(ay0.minimum(by0)?)?;
    let enclosing = cw.mul(ch)?;
    let empty_fraction = enclosing.sub(union)?.div(enclosing)?;
    inter.div(union)?.sub(empty_fraction)
}

/// Training loss for one scene and its breakdown.
pub struct SetLoss<'t> {
    pub total: Var<'t>,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
}

/// Class cross-entropy over every slot (unmatched slots target no-object,
/// weighted by `w.no_object`) plus L1 and GIoU terms over matched pairs,
/// normalized by the ground-truth count.
pub fn set_loss<'t>(
    logits: Var<'t>,
    boxes: Var<'t>,
    gts: &[GroundTruthObject],
    assignment: &Assignment,
    w: &CostWeights,
) -> Result<SetLoss<'t>> {
    let tape = logits.tape();
    let slots = logits.shape()[0];
    if logits.shape() != [slots, NUM_CLASSES] || boxes.shape() != [slots, 4] {
        return Err(Error::shape("set_loss", &logits.shape(), &boxes.shape()));
    }
    assignment.validate(gts.len(), slots)?;

    let targets = assignment.slot_targets(slots);
    let mut picks = Vec::with_capacity(slots);
    let mut weights = Vec::with_capacity(slots);
    for (slot, target) in targets.iter().enumerate() {
        let (class, weight) = match target {
            Some(g) => (gts[*g].label.class_index(), 1.0),
            None => (NO_OBJECT, w.no_object),
        };
        picks.push(slot * NUM_CLASSES + class);
        weights.push(weight);
    }
    let weight_sum: f64 = weights.iter().sum();
    let log_probs = logits.log_softmax(1)?.select(&picks)?;
    let weights = tape.constant(&Tensor::new(&[slots], weights)?);
    let loss_cls = if weight_sum > 0.0 {
        log_probs.mul(weights)?.sum().scale(-1.0 / weight_sum)
    } else {
        tape.constant(&Tensor::scalar(0.0))
    };

    let norm = gts.len().max(1) as f64;
    let mut total = loss_cls.scale(w.class);
    let (mut l1_value, mut giou_value) = (0.0, 0.0);
    if !assignment.pairs.is_empty() {
        let pred_rows: Vec<usize> = assignment.pairs.iter().map(|&(_, p)| p).collect();
        let gt_data: Vec<f64> = assignment
            .pairs
            .iter()
            .flat_map(|&(g, _)| gts[g].bbox.to_array())
            .collect();
        let matched = boxes.gather_rows(&pred_rows)?;
        let target = tape.constant(&Tensor::new(&[pred_rows.len(), 4], gt_data)?);
        let loss_l1 = matched.sub(target)?.abs().sum().scale(1.0 / norm);
        let giou = generalized_iou_rows(matched, target)?;
        let loss_giou = giou.neg().add_scalar(1.0).sum().scale(1.0 / norm);
        l1_value = loss_l1.item();
        giou_value = loss_giou.item();
        total = total.add(loss_l1.scale(w.l1))?.add(loss_giou.scale(w.giou))?;
    }
    Ok(SetLoss {
        total,
        loss_cls: loss_cls.item(),
        loss_l1: l1_value,
        loss_giou: giou_value,
    })
}

/// Matches under the current predictions, then builds the loss.
pub fn match_and_loss<'t>(
    logits: Var<'t>,
    boxes: Var<'t>,
    gts: &[GroundTruthObject],
    w: &CostWeights,
) -> Result<(Assignment, SetLoss<'t>)> {
    let cost = matching_cost(&logits.value(), &boxes.value(), gts, w)?;
    let assignment = hungarian(&cost)?;
    let loss = set_loss(logits, boxes, gts, &assignment, w)?;
    Ok((assignment, loss))
}
