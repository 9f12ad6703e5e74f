use std::fmt;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::optim::Adam;
use crate::data::{Dataset, SamplePair};
use crate::error::{Error, Result};
use crate::matching::{match_and_loss, GroundTruthObject};
use crate::model::{ModelConfig, ModelInput, Modetr, Variant};
use crate::tensor::{Tape, Tensor};

/// Network input for one sample under a variant. Flow is divided by the
/// image extent per axis so it shares the normalized box coordinates.
pub fn model_input(sample: &SamplePair, variant: Variant) -> Result<ModelInput> {
    let rgb = match variant.rgb_frames() {
        1 => vec![sample.frame_t1.clone()],
        _ => vec![sample.frame_t.clone(), sample.frame_t1.clone()],
    };
    let flow = if variant.uses_flow() {
        let f = sample
            .flow
            .as_ref()
            .ok_or_else(|| Error::contract(format!("variant {} needs flow maps", variant.name())))?;
        let (h, w) = (f.shape()[1], f.shape()[2]);
        let plane = h * w;
        let data = f
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| if i < plane { v / w as f64 } else { v / h as f64 })
            .collect();
        Some(Tensor::new(f.shape(), data)?)
    } else {
        None
    };
    Ok(ModelInput { rgb, flow })
}

/// Rejects datasets the model cannot consume, before any work starts.
pub fn check_dataset(dataset: &Dataset, config: &ModelConfig) -> Result<()> {
    let variant = config.variant;
    if variant.uses_flow() && !dataset.has_flow() {
        return Err(Error::contract(format!(
            "variant {} needs flow maps but the dataset has none",
            variant.name()
        )));
    }
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.frame_t1.shape() != [3, config.height, config.width] {
            return Err(Error::contract(format!(
                "sample {i} has frames {:?}, model expects 3×{}×{}",
                s.frame_t1.shape(),
                config.height,
                config.width
            )));
        }
        if s.objects.len() > config.num_queries {
            return Err(Error::contract(format!(
                "sample {i} has {} objects but the model has {} query slots",
                s.objects.len(),
                config.num_queries
            )));
        }
    }
    Ok(())
}

/// A sample converted once into model input and targets.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub input: ModelInput,
    pub objects: Vec<GroundTruthObject>,
}

pub fn prepare(dataset: &Dataset, config: &ModelConfig) -> Result<Vec<Prepared>> {
    check_dataset(dataset, config)?;
    dataset
        .samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                input: model_input(s, config.variant)?,
                objects: s.objects.clone(),
            })
        })
        .collect()
}

/// Batch-mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub total: f64,
    pub loss_cls: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
}

impl StepLog {
    pub const HEADER: &'static str = "step,total,loss_cls,loss_l1,loss_giou";
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.total, self.loss_cls, self.loss_l1, self.loss_giou
        )
    }
}

/// Model, optimizer, and sampling state of a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Modetr,
    pub optimizer: Adam,
    /// Optimizer steps completed.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Modetr::new(config.model.clone(), config.seed)?;
        let optimizer = Adam::new(config.optimizer.clone(), &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Trainer {
            config,
            model,
            optimizer,
            step: 0,
            rng,
        })
    }

    /// Loss and parameter gradients for one sample.
    pub fn sample_gradients(&self, sample: &Prepared) -> Result<(StepLog, Vec<Tensor>)> {
        let tape = Tape::new();
        let params = self.model.params.bind(&tape);
        let out = self.model.forward(&params, &tape, &sample.input)?;
        let (_, loss) = match_and_loss(out.logits, out.boxes, &sample.objects, &self.config.loss_weights)?;
        let grads = tape.backward(loss.total)?;
        let log = StepLog {
            step: self.step,
            total: loss.total.item(),
            loss_cls: loss.loss_cls,
            loss_l1: loss.loss_l1,
            loss_giou: loss.loss_giou,
        };
        Ok((log, params.gradients(&grads)))
    }

    /// One Adam update on a batch drawn without replacement.
    pub fn train_step(&mut self, data: &[Prepared]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let batch = self.config.batch_size.min(data.len());
        let picks = sample_indices(&mut self.rng, data.len(), batch).into_vec();
        let mut sum: Option<Vec<Tensor>> = None;
        let mut log = StepLog {
            step: self.step + 1,
            total: 0.0,
            loss_cls: 0.0,
            loss_l1: 0.0,
            loss_giou: 0.0,
        };
        for &i in &picks {
            let (l, grads) = self.sample_gradients(&data[i])?;
            log.total += l.total;
            log.loss_cls += l.loss_cls;
            log.loss_l1 += l.loss_l1;
            log.loss_giou += l.loss_giou;
            match &mut sum {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / batch as f64;
        let mut grads = sum.expect("non-empty batch");
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.step += 1;
        log.total *= inv;
        log.loss_cls *= inv;
        log.loss_l1 *= inv;
        log.loss_giou *= inv;
        Ok(log)
    }
}
