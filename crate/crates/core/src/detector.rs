//! Fixed-window inference and sliding-window detection over recordings of any length.
//!
//! Windows of the model's input length advance by a hop (2 s by default). When
//! the last regular window stops short of the end, one more window is aligned
//! to the final frame. Each frame's output is the arithmetic mean of the
//! probability vectors from every window covering it, accumulated in window
//! order.

use rayon::prelude::*;

use crate::annotation::{Event, EventAnnotation};
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::{normalize, FeatureExtractor};
use crate::matrix::Matrix;
use crate::model::{forward, FcnParameters, FramePrediction};
use crate::{frames_for_samples, FRAME_HOP, FRAME_SECONDS, SEGMENT_SECONDS};

/// Default hop between window starts, in seconds.
pub const DEFAULT_HOP_SECONDS: f64 = 2.0;

/// Anything that maps a fixed-length audio window to per-frame class probabilities.
pub trait FramePredictor: Sync {
    fn num_classes(&self) -> usize;

    /// Window length in 0.05 s frames.
    fn window_frames(&self) -> usize;

    /// `window` has exactly `window_frames() * 2205` samples.
    fn predict_window(&self, window: &AudioClip) -> Result<FramePrediction>;

    fn window_samples(&self) -> usize {
        self.window_frames() * FRAME_HOP
    }
}

/// Trained network plus feature pipeline: log-mel, normalization, forward pass.
#[derive(Debug, Clone)]
pub struct Detector {
    params: FcnParameters,
    extractor: FeatureExtractor,
}

impl Detector {
    pub fn new(params: FcnParameters) -> Result<Self> {
        let extractor = FeatureExtractor::new();
        let cfg = params.config();
        if extractor.filterbank().n_mels() != cfg.n_mels {
            return Err(Error::Config(format!(
                "model expects {} mel bins, feature extractor produces {}",
                cfg.n_mels,
                extractor.filterbank().n_mels()
            )));
        }
        Ok(Self { params, extractor })
    }

    pub fn params(&self) -> &FcnParameters {
        &self.params
    }
}

impl FramePredictor for Detector {
    fn num_classes(&self) -> usize {
        self.params.config().k
    }

    fn window_frames(&self) -> usize {
        self.params.config().n_frames
    }

    fn predict_window(&self, window: &AudioClip) -> Result<FramePrediction> {
        let mel = self.extractor.extract(window)?;
        let mel = normalize(&mel, &self.params.norm)?;
        forward(&self.params, &mel)
    }
}

/// Window start positions over a recording, in frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub window_frames: usize,
    pub hop_frames: usize,
    pub n_frames: usize,
    pub starts: Vec<usize>,
}

impl WindowPlan {
    pub fn new(n_frames: usize, window_frames: usize, hop_frames: usize) -> Result<Self> {
        if n_frames == 0 || window_frames == 0 || hop_frames == 0 {
            return Err(Error::InvalidArgument(format!(
                "window plan over {n_frames} frames with window {window_frames}, hop {hop_frames}"
            )));
        }
        let mut starts = vec![0];
        if n_frames > window_frames {
            let mut s = hop_frames;
            while s + window_frames <= n_frames {
                starts.push(s);
                s += hop_frames;
            }
            let last = *starts.last().unwrap();
            if last + window_frames < n_frames {
                starts.push(n_frames - window_frames);
            }
        }
        Ok(Self {
            window_frames,
            hop_frames,
            n_frames,
            starts,
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn start_seconds(&self) -> Vec<f64> {
        self.starts.iter().map(|&s| s as f64 * FRAME_SECONDS).collect()
    }

    /// Frames `[start, end)` of window `w` that fall inside the recording.
    pub fn span(&self, w: usize) -> (usize, usize) {
        let s = self.starts[w];
        (s, (s + self.window_frames).min(self.n_frames))
    }

    /// Indices of the windows covering `frame`, in start order.
    pub fn covering(&self, frame: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.starts.len()).filter(move |&w| {
            let (s, e) = self.span(w);
            (s..e).contains(&frame)
        })
    }
}

fn seconds_to_frames(seconds: f64, what: &str) -> Result<usize> {
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(Error::InvalidArgument(format!("{what} must be positive, got {seconds}")));
    }
    Ok(((seconds / FRAME_SECONDS) - 1e-9).ceil().max(1.0) as usize)
}

/// Plans windows of `window` seconds every `hop` seconds over `duration` seconds.
pub fn plan_windows(duration: f64, window: f64, hop: f64) -> Result<WindowPlan> {
    WindowPlan::new(
        seconds_to_frames(duration, "duration")?,
        seconds_to_frames(window, "window")?,
        seconds_to_frames(hop, "hop")?,
    )
}

/// Prediction for a clip of exactly one window, with no post-processing.
pub fn detect_fixed<P: FramePredictor + ?Sized>(predictor: &P, clip: &AudioClip) -> Result<FramePrediction> {
    if clip.len() != predictor.window_samples() {
        return Err(Error::Shape(format!(
            "fixed-length detection needs {} samples, got {}",
            predictor.window_samples(),
            clip.len()
        )));
    }
    predictor.predict_window(clip)
}

pub fn detect_variable<P: FramePredictor + ?Sized>(predictor: &P, clip: &AudioClip) -> Result<FramePrediction> {
    detect_variable_with_hop(predictor, clip, DEFAULT_HOP_SECONDS)
}

/// Sliding-window detection; returns `ceil(len / 2205)` frames.
///
/// Recordings shorter than one window are zero-padded and the padded frames
/// dropped. Window predictions run in parallel; averaging is sequential.
pub fn detect_variable_with_hop<P: FramePredictor + ?Sized>(
    predictor: &P,
    clip: &AudioClip,
    hop_seconds: f64,
) -> Result<FramePrediction> {
    if clip.is_empty() {
        return Err(Error::InvalidClip("empty clip".into()));
    }
    let plan = WindowPlan::new(
        frames_for_samples(clip.len()),
        predictor.window_frames(),
        seconds_to_frames(hop_seconds, "hop")?,
    )?;
    let window_samples = predictor.window_samples();
    let preds = plan
        .starts
        .par_iter()
        .map(|&s| {
            let start = s * FRAME_HOP;
            predictor.predict_window(&clip.slice_padded(start, start + window_samples))
        })
        .collect::<Result<Vec<_>>>()?;
    average_windows(&plan, &preds)
}

/// Per-frame mean of the covering windows' probability vectors.
pub fn average_windows(plan: &WindowPlan, preds: &[FramePrediction]) -> Result<FramePrediction> {
    let k = preds
        .first()
        .map(FramePrediction::num_classes)
        .ok_or_else(|| Error::InvalidArgument("no window predictions".into()))?;
    if preds.len() != plan.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} windows",
            preds.len(),
            plan.len()
        )));
    }
    if let Some(p) = preds
        .iter()
        .find(|p| p.num_classes() != k || p.n_frames() != plan.window_frames)
    {
        return Err(Error::Shape(format!(
            "window prediction {} x {}, expected {k} x {}",
            p.num_classes(),
            p.n_frames(),
            plan.window_frames
        )));
    }

    let mut sum = Matrix::zeros(k, plan.n_frames);
    let mut count = vec![0u32; plan.n_frames];
    for (w, pred) in preds.iter().enumerate() {
        let (s, e) = plan.span(w);
        for (t, n) in count.iter_mut().enumerate().take(e).skip(s) {
            for c in 0..k {
                let v = sum.get(c, t) + pred.probs().get(c, t - s);
                sum.set(c, t, v);
            }
            *n += 1;
        }
    }
    for (t, &n) in count.iter().enumerate() {
        debug_assert!(n >= 1, "frame {t} not covered");
        for c in 0..k {
            sum.set(c, t, sum.get(c, t) / n as f64);
        }
    }
    Ok(FramePrediction::from_matrix_unchecked(sum))
}

/// Merges runs of equal per-frame argmax labels into events.
pub fn decode_events(pred: &FramePrediction) -> EventAnnotation {
    frame_labels_to_events(&pred.argmax(), FRAME_SECONDS)
}

pub fn frame_labels_to_events(labels: &[usize], frame_len: f64) -> EventAnnotation {
    let mut events: Vec<Event> = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            events.push(Event {
                onset: start as f64 * frame_len,
                offset: i as f64 * frame_len,
                label: labels[start],
            });
            start = i;
        }
    }
    EventAnnotation::new(events).expect("runs of consecutive frames tile the time axis")
}

/// Window length the reference model was trained on.
pub const WINDOW_SECONDS: f64 = SEGMENT_SECONDS;
