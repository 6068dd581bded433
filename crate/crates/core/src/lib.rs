//! Playing-technique detection toolkit.
//!
//! Synthesizes frame-labeled long segments from short technique clips, extracts
//! 128-bin log-mel spectrograms framed at 0.05 s, trains a fully convolutional
//! frame classifier, and detects techniques in recordings of any length by
//! averaging overlapping 10 s window predictions.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod audio;
pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod matrix;
pub mod model;
pub mod synth;
pub mod viz;
pub mod vocab;

pub use annotation::{events_to_frame_labels, Event, EventAnnotation, FrameLabelSeq};
pub use audio::{read_wav, write_wav, AudioClip, SAMPLE_RATE};
pub use detector::{
    decode_events, detect_fixed, detect_variable, plan_windows, Detector, FramePredictor,
    WindowPlan,
};
pub use error::{Error, Result};
pub use eval::{evaluate_dataset, frame_accuracy, EvalReport};
pub use features::{FeatureExtractor, MelFilterbank, MelSpectrogram, NormStats};
pub use matrix::Matrix;
pub use model::{FcnConfig, FcnParameters, FramePrediction};
pub use synth::{build_dataset, crossfade_concat, synthesize_segment, ClipLibrary, DatasetManifest};
pub use vocab::TechniqueVocabulary;

/// Samples per label frame (0.05 s at 44.1 kHz); also the STFT hop.
pub const FRAME_HOP: usize = 2205;
/// Label frame length in seconds.
pub const FRAME_SECONDS: f64 = 0.05;
/// Length of a synthesized segment and of the model's input window.
pub const SEGMENT_SECONDS: f64 = 10.0;
pub const SEGMENT_SAMPLES: usize = 441_000;
pub const SEGMENT_FRAMES: usize = 200;
/// Crossfade between adjacent clips in a synthesized segment.
pub const CROSSFADE_SECONDS: f64 = 0.05;

/// Number of 0.05 s frames needed to cover `num_samples` samples.
pub fn frames_for_samples(num_samples: usize) -> usize {
    num_samples.div_ceil(FRAME_HOP)
}
