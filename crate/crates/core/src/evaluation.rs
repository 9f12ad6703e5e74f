//! Detection metrics: greedy IoU matching, all-point interpolated AP, and
//! mAP at IoU 0.5, 0.75, and averaged over 0.50:0.95.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{box_iou, BoxCxcywh, GroundTruthObject, MotionLabel};

/// IoU thresholds of the averaged metric, in hundredths.
pub const SWEEP_PERCENT: [u32; 10] = [50, 55, 60, 65, 70, 75, 80, 85, 90, 95];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    #[serde(flatten)]
    pub bbox: BoxCxcywh,
    pub label: MotionLabel,
    pub score: f64,
}

impl ScoredDetection {
    pub fn new(bbox: BoxCxcywh, label: MotionLabel, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::contract(format!("detection score {score} outside [0,1]")));
        }
        bbox.validate()?;
        Ok(ScoredDetection { bbox, label, score })
    }
}

/// One detection after matching, in ranking order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedFlag {
    pub score: f64,
    /// Highest IoU to any ground truth of the image, used to break ties.
    pub best_iou: f64,
    pub index: usize,
    pub true_positive: bool,
}

fn rank(a: &RankedFlag, b: &RankedFlag) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.best_iou.total_cmp(&a.best_iou))
        .then(a.index.cmp(&b.index))
}

/// Greedy matching within one image; callers pre-filter to one class.
///
/// Detections are visited by descending score (ties: higher best IoU, then
/// input index); each claims the highest-IoU unclaimed ground truth with
/// IoU ≥ `iou_thresh`.
pub fn match_detections(
    dets: &[ScoredDetection],
    gts: &[GroundTruthObject],
    iou_thresh: f64,
) -> Result<Vec<RankedFlag>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::contract(format!("IoU threshold {iou_thresh} outside (0,1)")));
    }
    let ious = dets
        .iter()
        .map(|d| gts.iter().map(|g| box_iou(&d.bbox, &g.bbox)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut ranked: Vec<RankedFlag> = dets
        .iter()
        .zip(&ious)
        .enumerate()
        .map(|(index, (d, row))| RankedFlag {
            score: d.score,
            best_iou: row.iter().copied().fold(0.0, f64::max),
            index,
            true_positive: false,
        })
        .collect();
    ranked.sort_by(rank);
    let mut claimed = vec![false; gts.len()];
    for flag in &mut ranked {
        let best = ious[flag.index]
            .iter()
            .enumerate()
            .filter(|&(g, &iou)| !claimed[g] && iou >= iou_thresh)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            claimed[g] = true;
            flag.true_positive = true;
        }
    }
    Ok(ranked)
}

/// Area under the precision envelope of a ranked TP/FP list.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let points: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += usize::from(hit);
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (&(recall, _), &precision) in points.iter().zip(&envelope) {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub map_total: f64,
    pub map50: f64,
    pub map75: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub moving: ClassMetrics,
    #[serde(rename = "static")]
    pub static_: ClassMetrics,
    /// Mean over the two motion classes.
    pub mean: ClassMetrics,
}

impl MetricReport {
    pub fn class(&self, label: MotionLabel) -> &ClassMetrics {
        match label {
            MotionLabel::Moving => &self.moving,
            MotionLabel::Static => &self.static_,
        }
    }
}

/// AP of one class at one threshold over many images.
pub fn class_average_precision(
    dets: &[Vec<ScoredDetection>],
    gts: &[Vec<GroundTruthObject>],
    label: MotionLabel,
    iou_thresh: f64,
) -> Result<f64> {
    if dets.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let mut pooled: Vec<(usize, RankedFlag)> = Vec::new();
    let mut n_gt = 0;
    for (image, (d, g)) in dets.iter().zip(gts).enumerate() {
        let d: Vec<_> = d.iter().filter(|x| x.label == label).copied().collect();
        let g: Vec<_> = g.iter().filter(|x| x.label == label).copied().collect();
        n_gt += g.len();
        pooled.extend(match_detections(&d, &g, iou_thresh)?.into_iter().map(|f| (image, f)));
    }
    pooled.sort_by(|(ia, a), (ib, b)| {
        b.score
            .total_cmp(&a.score)
            .then(b.best_iou.total_cmp(&a.best_iou))
            .then(ia.cmp(ib))
            .then(a.index.cmp(&b.index))
    });
    let flags: Vec<bool> = pooled.iter().map(|(_, f)| f.true_positive).collect();
    Ok(average_precision(&flags, n_gt))
}

pub fn map_report(dets: &[Vec<ScoredDetection>], gts: &[Vec<GroundTruthObject>]) -> Result<MetricReport> {
    let per_class = |label| -> Result<ClassMetrics> {
        let sweep = SWEEP_PERCENT
            .iter()
            .map(|&p| class_average_precision(dets, gts, label, f64::from(p) / 100.0))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassMetrics {
            map_total: sweep.iter().sum::<f64>() / sweep.len() as f64,
            map50: sweep[0],
            map75: sweep[5],
        })
    };
    let moving = per_class(MotionLabel::Moving)?;
    let static_ = per_class(MotionLabel::Static)?;
    let mean = ClassMetrics {
        map_total: (moving.map_total + static_.map_total) / 2.0,
        map50: (moving.map50 + static_.map50) / 2.0,
        map75: (moving.map75 + static_.map75) / 2.0,
    };
    Ok(MetricReport {
        moving,
        static_,
        mean,
    })
}
