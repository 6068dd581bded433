use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{forward, loss_and_gradients};
use super::{FcnConfig, FcnParameters};
use crate::annotation::FrameLabelSeq;
use crate::error::{Error, Result};
use crate::eval::frame_accuracy;
use crate::features::{normalize, FeatureExtractor, MelSpectrogram, NormStats};
use crate::synth::DatasetManifest;
use crate::vocab::TechniqueVocabulary;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

/// RNG stream used for mini-batch shuffling (stream 0 is weight init).
const SHUFFLE_STREAM: u64 = 1;

/// Un-normalized log-mel spectrogram with its frame labels.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub mel: MelSpectrogram,
    pub labels: FrameLabelSeq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Frame accuracy on the training batches as seen during the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
        }
    }
}

/// Extracts features and frame labels for every segment of a manifest.
pub fn load_examples(manifest: &DatasetManifest, extractor: &FeatureExtractor) -> Result<Vec<LabeledExample>> {
    manifest
        .segments
        .par_iter()
        .map(|seg| {
            let audio = manifest.read_audio(seg)?;
            let mel = extractor.extract(&audio)?;
            let labels = manifest.read_frame_labels(seg)?;
            if labels.len() != mel.n_frames() {
                return Err(Error::Shape(format!(
                    "{}: {} frame labels for {} spectrogram frames",
                    seg.frame_labels,
                    labels.len(),
                    mel.n_frames()
                )));
            }
            Ok(LabeledExample { mel, labels })
        })
        .collect()
}

/// Mean per-example frame accuracy of `params` on pre-normalized examples.
fn accuracy_on(params: &FcnParameters, examples: &[(MelSpectrogram, &FrameLabelSeq)]) -> Result<f64> {
    let accs = examples
        .par_iter()
        .map(|(mel, labels)| frame_accuracy(&forward(params, mel)?.argmax(), labels.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

pub fn train(
    config: &FcnConfig,
    train_set: &[LabeledExample],
    val_set: Option<&[LabeledExample]>,
    vocabulary: Option<TechniqueVocabulary>,
) -> Result<(FcnParameters, TrainHistory)> {
    train_with(config, train_set, val_set, vocabulary, |_| {})
}

/// Adam training with seeded shuffling; `on_epoch` sees each epoch's record as it completes.
///
/// Normalization statistics are fitted on the training set and stored in the
/// returned parameters. With a validation set, the parameters of the epoch with
/// the highest validation accuracy are returned (earliest on ties); otherwise
/// those of the final epoch.
pub fn train_with(
    config: &FcnConfig,
    train_set: &[LabeledExample],
    val_set: Option<&[LabeledExample]>,
    vocabulary: Option<TechniqueVocabulary>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(FcnParameters, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training set has no segments".into()));
    }
    if let Some(v) = &vocabulary {
        if v.len() != config.k {
            return Err(Error::Config(format!(
                "k = {} but the vocabulary has {} classes",
                config.k,
                v.len()
            )));
        }
    }

    let stats = NormStats::fit(train_set.iter().map(|e| &e.mel))?;
    let prepare = |set: &[LabeledExample]| -> Result<Vec<MelSpectrogram>> {
        set.iter().map(|e| normalize(&e.mel, &stats)).collect()
    };
    let train_mels = prepare(train_set)?;
    let val = match val_set {
        Some(set) if !set.is_empty() => Some(
            prepare(set)?
                .into_iter()
                .zip(set.iter().map(|e| &e.labels))
                .collect::<Vec<_>>(),
        ),
        _ => None,
    };

    let mut params = FcnParameters::init(config, config.seed)?;
    params.norm = stats;
    params.vocabulary = vocabulary;

    let mut adam = Adam::new(params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, FcnParameters)> = None;
    let frames_per_example = config.n_frames as f64;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&MelSpectrogram, &[usize])> = chunk
                .iter()
                .map(|&i| (&train_mels[i], train_set[i].labels.as_slice()))
                .collect();
            let (loss, grads, ok) = match loss_and_gradients(&params, &batch) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Divergence {
                        epoch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            loss_sum += loss * chunk.len() as f64;
            correct += ok;
            adam.update(params.values_mut(), grads.values(), config.learning_rate);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        if !train_loss.is_finite() || params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                loss: train_loss,
            });
        }

        let val_accuracy = val.as_ref().map(|v| accuracy_on(&params, v)).transpose()?;
        let record = EpochRecord {
            epoch,
            train_loss,
            train_accuracy: correct as f64 / (train_set.len() as f64 * frames_per_example),
            val_accuracy,
        };
        on_epoch(&record);
        history.epochs.push(record);

        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, params.clone()));
                history.best_epoch = epoch;
            }
        } else {
            history.best_epoch = epoch;
        }
    }

    let params = best.map_or(params, |(_, p)| p);
    Ok((params, history))
}

/// Loads both manifests, checks the vocabulary against `config.k`, and trains.
pub fn train_from_manifests(
    config: &FcnConfig,
    train_manifest: impl AsRef<Path>,
    val_manifest: Option<&Path>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(FcnParameters, TrainHistory)> {
    config.validate()?;
    let train_m = DatasetManifest::load(train_manifest)?;
    if train_m.vocabulary.len() != config.k {
        return Err(Error::Config(format!(
            "k = {} but the dataset vocabulary has {} classes",
            config.k,
            train_m.vocabulary.len()
        )));
    }
    let val_m = val_manifest.map(DatasetManifest::load).transpose()?;
    if let Some(v) = &val_m {
        if v.vocabulary != train_m.vocabulary {
            return Err(Error::Config("validation vocabulary differs from training vocabulary".into()));
        }
    }
    let extractor = FeatureExtractor::new();
    let train_set = load_examples(&train_m, &extractor)?;
    let val_set = val_m.as_ref().map(|m| load_examples(m, &extractor)).transpose()?;
    train_with(
        config,
        &train_set,
        val_set.as_deref(),
        Some(train_m.vocabulary.clone()),
        on_epoch,
    )
}
