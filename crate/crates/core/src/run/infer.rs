use super::train::Prepared;
use crate::error::Result;
use crate::evaluation::{map_report, MetricReport, ScoredDetection};
use crate::matching::{class_probabilities, BoxCxcywh, GroundTruthObject, MotionLabel};
use crate::model::{Modetr, PredictionSet};

/// Slots whose most probable class is not no-object, scored by that
/// probability. No suppression step.
pub fn detections(pred: &PredictionSet) -> Result<Vec<ScoredDetection>> {
    class_probabilities(&pred.class_logits)
        .iter()
        .enumerate()
        .filter_map(|(slot, p)| {
            let (class, &score) = p
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))?;
            let label = MotionLabel::from_class_index(class)?;
            let bbox = BoxCxcywh::from_slice(pred.boxes.row(slot));
            Some(ScoredDetection::new(bbox, label, score))
        })
        .collect()
}

/// Forward-only detections for every sample.
pub fn predict_all(model: &Modetr, data: &[Prepared]) -> Result<Vec<Vec<ScoredDetection>>> {
    data.iter()
        .map(|s| detections(&model.predict(&s.input)?))
        .collect()
}

pub fn report_for(dets: &[Vec<ScoredDetection>], data: &[Prepared]) -> Result<MetricReport> {
    let gts: Vec<Vec<GroundTruthObject>> = data.iter().map(|s| s.objects.clone()).collect();
    map_report(dets, &gts)
}

pub fn evaluate(model: &Modetr, data: &[Prepared]) -> Result<MetricReport> {
    report_for(&predict_all(model, data)?, data)
}
