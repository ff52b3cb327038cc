use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::optim::Optimizer;
use crate::data::{random_erase, IdentityDataset, OcclusionSpec, PkSampler};
use crate::diffcore::{Tape, Tensor};
use crate::encoder::{ops, EncoderModel};
use crate::error::{Error, Result};
use crate::losses::{joint_loss, AnnStats};
use crate::seeding::{derive_rng, derive_seed};

/// Stream tags passed to [`derive_seed`].
const INIT_STREAM: u64 = 0x696e_6974;
const STEP_STREAM: u64 = 0x7374_6570;

/// Bins of the entropy histogram spanning `[0, ln N]`.
pub const ENTROPY_BINS: usize = 10;

/// Loss components and ANN bookkeeping of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub total: f64,
    pub softmax: f64,
    pub metric: Option<f64>,
    pub stats: Option<AnnStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub total: f64,
    pub softmax: f64,
    pub metric: Option<f64>,
    /// Counts of anchor entropies in `ENTROPY_BINS` equal bins over `[0, ln N]`.
    pub entropy_histogram: Vec<usize>,
    /// Counts of the neighbourhood size actually used.
    pub k_histogram: BTreeMap<usize, usize>,
    pub clamp_events: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochSummary>,
    pub step_losses: Vec<f64>,
    pub clamp_events: usize,
    /// Mean joint loss of the last epoch.
    pub final_loss: f64,
}

impl TrainingLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A model with its optimiser state; one call to [`Trainer::step`] is one
/// forward, backward and update on a fixed batch.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: EncoderModel,
    pub config: TrainConfig,
    optimizer: Optimizer,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = EncoderModel::new(
            config.encoder.clone(),
            derive_seed(config.seed, &[INIT_STREAM]),
        )?;
        Ok(Self::with_model(model, config))
    }

    pub fn with_model(model: EncoderModel, config: TrainConfig) -> Self {
        let optimizer = Optimizer::new(config.optimizer, config.learning_rate);
        Self {
            model,
            config,
            optimizer,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.optimizer.steps()
    }

    pub fn step(&mut self, images: &[Tensor], labels: &[usize]) -> Result<StepReport> {
        let step = self.optimizer.steps() + 1;
        let mut tape = Tape::new();
        let enc = self.model.bind(&mut tape, true);
        let x = tape.constant(self.model.batch_images(images)?);
        let vars =
            ops::encoder_forward(&mut tape, &enc, x, self.config.encoder.normalize_embeddings)?;
        let loss = joint_loss(
            &mut tape,
            vars.embedding,
            vars.logits,
            labels,
            self.config.variant,
            &self.config.ann,
        )
        .map_err(|e| at_step(e, step))?;
        let report = StepReport {
            total: tape.value(loss.total).item()?,
            softmax: tape.value(loss.softmax).item()?,
            metric: loss.metric.map(|m| tape.value(m).item()).transpose()?,
            stats: loss.stats,
        };
        tape.backward(loss.total).map_err(|e| at_step(e, step))?;
        let grads = enc.gradients(&tape);
        self.optimizer
            .step(self.model.parameters_mut(), &grads)
            .map_err(|e| at_step(e, step))?;
        Ok(report)
    }
}

fn at_step(err: Error, step: u64) -> Error {
    match err {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("training step {step}: {context}"),
        },
        other => other,
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EncoderModel,
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
    pub dataset: IdentityDataset,
}

/// Training images of one step, augmented with random erasing when
/// configured; each image draws its own fraction from `[0, s]`.
fn augment<R: Rng>(
    images: Vec<Tensor>,
    spec: Option<&OcclusionSpec>,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let Some(spec) = spec else { return Ok(images) };
    if spec.s == 0.0 {
        return Ok(images);
    }
    images
        .iter()
        .map(|img| {
            let s = rng.random_range(0.0..=spec.s);
            random_erase(img, &OcclusionSpec { s, ..*spec }, rng)
        })
        .collect()
}

fn entropy_bin(h: f64, classes: usize) -> usize {
    let max = (classes as f64).ln();
    if max <= 0.0 {
        return 0;
    }
    ((h / max * ENTROPY_BINS as f64).floor().max(0.0) as usize).min(ENTROPY_BINS - 1)
}

/// Generates the configured dataset and trains on it.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = IdentityDataset::generate(config.data.clone())?;
    train_on(config, dataset)
}

/// Trains `epochs × steps_per_epoch` PK batches of `dataset`'s train split.
pub fn train_on(config: &TrainConfig, dataset: IdentityDataset) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.config.input_shape != config.encoder.input_shape
        || dataset.num_classes() > config.encoder.num_classes
    {
        return Err(Error::Config(format!(
            "dataset of {} ids with shape {:?} does not fit the encoder",
            dataset.num_classes(),
            dataset.config.input_shape
        )));
    }
    let sampler = PkSampler::new(&dataset, config.pk)?;
    let mut trainer = Trainer::new(config.clone())?;
    let classes = config.encoder.num_classes;
    let mut log = TrainingLog::default();
    for epoch in 0..config.epochs {
        let mut sums = (0.0, 0.0, 0.0);
        let mut entropy_histogram = vec![0; ENTROPY_BINS];
        let mut k_histogram = BTreeMap::new();
        let mut clamp_events = 0;
        let mut has_metric = false;
        for step in 0..config.steps_per_epoch {
            let mut rng = derive_rng(config.seed, &[STEP_STREAM, epoch as u64, step as u64]);
            let batch = sampler.sample(&mut rng);
            let images = augment(
                dataset.images(&batch.indices),
                config.occlusion_train.as_ref(),
                &mut rng,
            )?;
            let report = trainer.step(&images, &batch.labels)?;
            sums.0 += report.total;
            sums.1 += report.softmax;
            if let Some(m) = report.metric {
                sums.2 += m;
                has_metric = true;
            }
            if let Some(stats) = &report.stats {
                for &h in &stats.entropies {
                    entropy_histogram[entropy_bin(h, classes)] += 1;
                }
                for &k in &stats.used_k {
                    *k_histogram.entry(k).or_insert(0) += 1;
                }
                clamp_events += stats.clamp_events;
            }
            log.step_losses.push(report.total);
        }
        let n = config.steps_per_epoch.max(1) as f64;
        log.clamp_events += clamp_events;
        log.epochs.push(EpochSummary {
            epoch,
            total: sums.0 / n,
            softmax: sums.1 / n,
            metric: has_metric.then_some(sums.2 / n),
            entropy_histogram,
            k_histogram,
            clamp_events,
        });
    }
    log.final_loss = log.epochs.last().map_or(f64::NAN, |e| e.total);
    let checkpoint = Checkpoint::from_model(
        &trainer.model,
        config,
        config.epochs,
        log.final_loss,
        log.clamp_events,
    );
    Ok(TrainOutcome {
        model: trainer.model,
        checkpoint,
        log,
        dataset,
    })
}
