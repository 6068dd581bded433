//! Fully convolutional frame classifier.
//!
//! Reference stack for a 1 x 128 x 200 log-mel input (channels x mel x time):
//!
//! | stage                                   | output          |
//! |-----------------------------------------|-----------------|
//! | 3 x [conv3x3 -> ReLU -> maxpool 2x2]     | 64 x 16 x 25    |
//! | conv3x3 -> ReLU                         | 64 x 16 x 25    |
//! | max over the mel axis                   | 64 x 1 x 25     |
//! | time transposed conv (k 8, s 8)         | 64 x 1 x 200    |
//! | 1x1 conv -> softmax over classes        | k x 200         |

mod layers;
mod network;
mod train;

pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::matrix::Matrix;
use crate::vocab::TechniqueVocabulary;

pub use network::{forward, gradients, loss, loss_and_gradients, Gradients, LOSS_PROB_FLOOR};
pub use train::{
    load_examples, train, train_from_manifests, train_with, EpochRecord, LabeledExample,
    TrainHistory,
};

/// Number of 2x2 pooling blocks; input height and width must divide by `2^POOL_BLOCKS`.
pub const POOL_BLOCKS: u32 = 3;

/// Transposed-convolution (kernel, stride) pairs printed for the 4-, 7- and 11-class models.
///
/// Kept for experiments; with the reference 25-step bottleneck none of them
/// reaches 200 frames, so [`FcnConfig::validate`] rejects them there.
pub fn published_deconv(k: usize) -> Option<(usize, usize)> {
    match k {
        4 => Some((3, 1)),
        7 => Some((3, 2)),
        11 => Some((4, 3)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnConfig {
    /// Class count.
    pub k: usize,
    pub n_mels: usize,
    pub n_frames: usize,
    /// Output channels of the four 3x3 convolutions.
    pub widths: [usize; 4],
    pub deconv_kernel: usize,
    pub deconv_stride: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FcnConfig {
    fn default() -> Self {
        Self::reference(4)
    }
}

impl FcnConfig {
    pub fn reference(k: usize) -> Self {
        Self {
            k,
            n_mels: crate::features::N_MELS,
            n_frames: crate::SEGMENT_FRAMES,
            widths: [16, 32, 64, 64],
            deconv_kernel: 8,
            deconv_stride: 8,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 8,
            seed: 0,
        }
    }

    /// Small network on an 8 x 16 input, for gradient checks.
    pub fn miniature(k: usize) -> Self {
        Self {
            n_mels: 8,
            n_frames: 16,
            widths: [2; 4],
            ..Self::reference(k)
        }
    }

    pub fn bottleneck_frames(&self) -> usize {
        self.n_frames >> POOL_BLOCKS
    }

    pub fn bottleneck_mels(&self) -> usize {
        self.n_mels >> POOL_BLOCKS
    }

    /// Output length of the time upsampler.
    pub fn head_frames(&self) -> usize {
        (self.bottleneck_frames().max(1) - 1) * self.deconv_stride + self.deconv_kernel
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k < 2 {
            return fail(format!("k = {} (need at least 2 classes)", self.k));
        }
        if self.widths.contains(&0) {
            return fail(format!("channel widths {:?} must all be >= 1", self.widths));
        }
        let unit = 1usize << POOL_BLOCKS;
        if self.n_mels == 0 || !self.n_mels.is_multiple_of(unit) || self.n_frames == 0 || !self.n_frames.is_multiple_of(unit) {
            return fail(format!(
                "input {} x {} must have both sides divisible by {unit}",
                self.n_mels, self.n_frames
            ));
        }
        if self.deconv_kernel == 0 || self.deconv_stride == 0 {
            return fail("deconv kernel and stride must be >= 1".into());
        }
        if self.head_frames() != self.n_frames {
            return fail(format!(
                "time upsampler (kernel {}, stride {}) maps {} steps to {} frames, expected {}",
                self.deconv_kernel,
                self.deconv_stride,
                self.bottleneck_frames(),
                self.head_frames(),
                self.n_frames
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        Ok(())
    }
}

/// Name, shape and fan-in of one parameter tensor in declared order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
    /// Fan-in for initialization; zero marks a bias.
    #[serde(skip)]
    pub fan_in: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_bias(&self) -> bool {
        self.fan_in == 0
    }
}

/// Flat parameter layout for a config.
pub fn param_layout(config: &FcnConfig) -> Vec<TensorSpec> {
    let [c1, c2, c3, c4] = config.widths;
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: &str, shape: Vec<usize>, fan_in: usize| {
        let len: usize = shape.iter().product();
        specs.push(TensorSpec {
            name: name.to_owned(),
            shape,
            offset,
            fan_in,
        });
        offset += len;
    };
    for (i, (cin, cout)) in [(1, c1), (c1, c2), (c2, c3), (c3, c4)].into_iter().enumerate() {
        push(&format!("conv{}.weight", i + 1), vec![cout, cin, 3, 3], cin * 9);
        push(&format!("conv{}.bias", i + 1), vec![cout], 0);
    }
    let taps = config.deconv_kernel.div_ceil(config.deconv_stride);
    push("deconv.weight", vec![c4, c4, config.deconv_kernel], c4 * taps);
    push("deconv.bias", vec![c4], 0);
    push("head.weight", vec![config.k, c4], c4);
    push("head.bias", vec![config.k], 0);
    specs
}

/// Trainable weights plus everything needed to run them on raw audio.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnParameters {
    config: FcnConfig,
    layout: Vec<TensorSpec>,
    values: Vec<f64>,
    pub norm: NormStats,
    pub vocabulary: Option<TechniqueVocabulary>,
}

impl FcnParameters {
    /// Fan-in scaled uniform weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn init(config: &FcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        let total = layout.iter().map(TensorSpec::len).sum();
        let mut values = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for spec in layout.iter().filter(|s| !s.is_bias()) {
            let bound = (6.0 / spec.fan_in as f64).sqrt();
            for v in &mut values[spec.offset..spec.offset + spec.len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
            norm: NormStats::identity(config.n_mels),
            vocabulary: None,
        })
    }

    pub fn from_values(config: &FcnConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        let total: usize = layout.iter().map(TensorSpec::len).sum();
        if values.len() != total {
            return Err(Error::Shape(format!(
                "{} parameter values for a layout of {total}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter values".into()));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
            norm: NormStats::identity(config.n_mels),
            vocabulary: None,
        })
    }

    pub fn config(&self) -> &FcnConfig {
        &self.config
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.layout.iter().find(|s| s.name == name)
    }

    /// Values and shape of the named tensor, e.g. `"conv2.weight"`.
    pub fn tensor(&self, name: &str) -> Option<(&[f64], &[usize])> {
        self.spec(name)
            .map(|s| (&self.values[s.offset..s.offset + s.len()], s.shape.as_slice()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let s = self.spec(name)?.clone();
        Some(&mut self.values[s.offset..s.offset + s.len()])
    }

    pub(crate) fn slice(&self, index: usize) -> &[f64] {
        let s = &self.layout[index];
        &self.values[s.offset..s.offset + s.len()]
    }
}

pub fn init_params(config: &FcnConfig, seed: u64) -> Result<FcnParameters> {
    FcnParameters::init(config, seed)
}

/// Column-stochastic `k x n_frames` class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    probs: Matrix,
}

/// Allowed deviation of a column sum from 1.
pub const COLUMN_SUM_TOLERANCE: f64 = 1e-6;

impl FramePrediction {
    pub fn new(probs: Matrix) -> Result<Self> {
        if probs.rows() == 0 {
            return Err(Error::Shape("prediction with no classes".into()));
        }
        if let Some(v) = probs.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("probability {v} outside [0, 1]")));
        }
        for t in 0..probs.cols() {
            let s: f64 = probs.column(t).sum();
            if (s - 1.0).abs() > COLUMN_SUM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("column {t} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_matrix_unchecked(probs: Matrix) -> Self {
        Self { probs }
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.rows()
    }

    pub fn n_frames(&self) -> usize {
        self.probs.cols()
    }

    pub fn frame(&self, t: usize) -> Vec<f64> {
        self.probs.column(t).collect()
    }

    /// Per-frame most likely class; the lowest index wins ties.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.n_frames())
            .map(|t| {
                let mut best = 0;
                for c in 1..self.num_classes() {
                    if self.probs.get(c, t) > self.probs.get(best, t) {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Writes the `PRED` dump: magic, k and n_frames as little-endian u32, then f32 row-major.
    pub fn write_posteriors<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"PRED")?;
        w.write_all(&(self.num_classes() as u32).to_le_bytes())?;
        w.write_all(&(self.n_frames() as u32).to_le_bytes())?;
        for &v in self.probs.as_slice() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_posteriors<R: std::io::Read>(mut r: R) -> Result<Matrix> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format("truncated PRED header".into()))?;
        if &header[..4] != b"PRED" {
            return Err(Error::Format("bad PRED magic".into()));
        }
        let k = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; k * n * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format("truncated PRED payload".into()))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Matrix::new(k, n, data)
    }
}
