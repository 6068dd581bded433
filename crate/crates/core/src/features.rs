//! Log-mel spectrogram features.
//!
//! Frames are centered at multiples of the 2205-sample hop on a signal that is
//! reflection-padded by half a window on each side, so a clip of `n` samples
//! yields `ceil(n / 2205)` columns, one per 0.05 s label frame.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::FRAME_HOP;

pub const FFT_SIZE: usize = 2048;
pub const N_MELS: usize = 128;
pub const LOG_EPSILON: f64 = 1e-10;
pub const STD_FLOOR: f64 = 1e-6;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / len as f64).cos())
        .collect()
}

/// Mirror index `i` into `[0, len)` without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Short-time power spectrum with a fixed window, FFT size and hop.
#[derive(Clone)]
pub struct Stft {
    fft_size: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("fft_size", &self.fft_size)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(fft_size: usize, hop: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(fft_size);
        Self {
            fft_size,
            hop,
            window: hann_window(fft_size),
            fft,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn n_frames(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.hop)
    }

    /// Windowed samples of frame `t`: centered on sample `t * hop`.
    pub fn frame(&self, samples: &[f32], t: usize) -> Vec<f64> {
        let half = (self.fft_size / 2) as isize;
        let center = (t * self.hop) as isize;
        (0..self.fft_size)
            .map(|i| {
                let idx = reflect(center - half + i as isize, samples.len());
                samples[idx] as f64 * self.window[i]
            })
            .collect()
    }

    /// `n_bins x n_frames` matrix of squared DFT magnitudes.
    pub fn power(&self, samples: &[f32]) -> Result<Matrix> {
        if samples.is_empty() {
            return Err(Error::InvalidClip("empty clip".into()));
        }
        let n_frames = self.n_frames(samples.len());
        let n_bins = self.n_bins();
        let mut out = Matrix::zeros(n_bins, n_frames);
        let mut buf = vec![Complex::new(0.0, 0.0); self.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            for (b, v) in buf.iter_mut().zip(self.frame(samples, t)) {
                *b = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (bin, c) in buf[..n_bins].iter().enumerate() {
                out.set(bin, t, c.norm_sqr());
            }
        }
        Ok(out)
    }
}

/// Power spectrogram with the default 2048-point window and 2205-sample hop.
pub fn power_spectrogram(clip: &AudioClip) -> Result<Matrix> {
    clip.require_pipeline_rate()?;
    Stft::new(FFT_SIZE, FRAME_HOP).power(clip.samples())
}

/// Triangular filters with centers equally spaced on the HTK mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    weights: Matrix,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Result<Self> {
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || fft_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "filterbank with {n_mels} mels over a {fft_size}-point FFT"
            )));
        }
        if !(fmin >= 0.0 && fmin < fmax && fmax <= nyquist) {
            return Err(Error::InvalidArgument(format!(
                "mel range [{fmin}, {fmax}] Hz invalid for Nyquist {nyquist} Hz"
            )));
        }
        let n_bins = fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / fft_size as f64;

        let mut weights = Matrix::zeros(n_mels, n_bins);
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = weights.row_mut(m);
            for (bin, w) in row.iter_mut().enumerate() {
                let f = bin as f64 * bin_hz;
                let rising = (f - left) / (center - left);
                let falling = (right - f) / (right - center);
                *w = rising.min(falling).max(0.0);
            }
            if row.iter().all(|&w| w == 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin"
                )));
            }
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.cols()
    }

    /// `filterbank . power`, returning `n_mels x n_frames`.
    pub fn apply(&self, power: &Matrix) -> Result<Matrix> {
        if power.rows() != self.n_bins() {
            return Err(Error::Shape(format!(
                "power spectrum has {} bins, filterbank expects {}",
                power.rows(),
                self.n_bins()
            )));
        }
        let mut out = Matrix::zeros(self.n_mels(), power.cols());
        for m in 0..self.n_mels() {
            let w = self.weights.row(m);
            let row = out.row_mut(m);
            for (bin, &wv) in w.iter().enumerate().filter(|(_, &wv)| wv != 0.0) {
                for (o, &p) in row.iter_mut().zip(power.row(bin)) {
                    *o += wv * p;
                }
            }
        }
        Ok(out)
    }
}

/// Default 128-band filterbank over 0 Hz .. Nyquist.
pub fn mel_filterbank() -> MelFilterbank {
    MelFilterbank::new(N_MELS, FFT_SIZE, crate::SAMPLE_RATE, 0.0, crate::SAMPLE_RATE as f64 / 2.0)
        .expect("default filterbank parameters are valid")
}

/// `n_mels x n_frames` log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Matrix,
}

impl MelSpectrogram {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mel spectrogram".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn n_mels(&self) -> usize {
        self.values.rows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.cols()
    }

    /// Writes the `MELF` dump: 16-byte header then little-endian `f32`, row-major.
    pub fn write_melf<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"MELF")?;
        w.write_all(&MELF_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_mels() as u32).to_le_bytes())?;
        w.write_all(&(self.n_frames() as u32).to_le_bytes())?;
        for &v in self.values.as_slice() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_melf<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|_| Error::Format("truncated MELF header".into()))?;
        if &header[..4] != b"MELF" {
            return Err(Error::Format("bad MELF magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
        if word(4) != MELF_VERSION {
            return Err(Error::Format(format!("unsupported MELF version {}", word(4))));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        let mut bytes = vec![0u8; rows * cols * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Format("truncated MELF payload".into()))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(Matrix::new(rows, cols, data)?)
    }

    pub fn save_melf(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_melf(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

const MELF_VERSION: u32 = 1;

/// `log(filterbank . power_spectrogram + 1e-10)`.
pub fn mel_spectrogram(clip: &AudioClip, filterbank: &MelFilterbank) -> Result<MelSpectrogram> {
    FeatureExtractor::with_filterbank(filterbank.clone()).extract(clip)
}

/// Reusable STFT plan plus filterbank.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    stft: Stft,
    filterbank: MelFilterbank,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::with_filterbank(mel_filterbank())
    }
}

impl FeatureExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_filterbank(filterbank: MelFilterbank) -> Self {
        let fft_size = (filterbank.n_bins() - 1) * 2;
        Self {
            stft: Stft::new(fft_size, FRAME_HOP),
            filterbank,
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        clip.require_pipeline_rate()?;
        let power = self.stft.power(clip.samples())?;
        let mel = self.filterbank.apply(&power)?;
        MelSpectrogram::new(mel.map(|v| (v + LOG_EPSILON).ln()))
    }
}

/// Per-mel-bin mean and standard deviation for z-normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(n_mels: usize) -> Self {
        Self {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    /// Population statistics over every frame of every spectrogram; std floored at 1e-6.
    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a MelSpectrogram> + Clone) -> Result<Self> {
        let mut iter = specs.clone().into_iter().peekable();
        let n_mels = iter
            .peek()
            .map(|s| s.n_mels())
            .ok_or_else(|| Error::EmptyDataset("no spectrograms for normalization".into()))?;
        let mut sum = vec![0.0; n_mels];
        let mut count = 0usize;
        for s in iter {
            if s.n_mels() != n_mels {
                return Err(Error::Shape(format!("{} vs {n_mels} mel bins", s.n_mels())));
            }
            for (m, acc) in sum.iter_mut().enumerate() {
                *acc += s.values().row(m).iter().sum::<f64>();
            }
            count += s.n_frames();
        }
        if count == 0 {
            return Err(Error::EmptyDataset("spectrograms have no frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; n_mels];
        for s in specs {
            for (m, acc) in sq.iter_mut().enumerate() {
                *acc += s.values().row(m).iter().map(|v| (v - mean[m]).powi(2)).sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn n_mels(&self) -> usize {
        self.mean.len()
    }
}

/// `(value - mean[bin]) / max(std[bin], 1e-6)` per mel bin.
pub fn normalize(mel: &MelSpectrogram, stats: &NormStats) -> Result<MelSpectrogram> {
    if stats.mean.len() != mel.n_mels() || stats.std.len() != mel.n_mels() {
        return Err(Error::Shape(format!(
            "normalization stats for {} bins applied to {} mel bins",
            stats.mean.len(),
            mel.n_mels()
        )));
    }
    let mut values = mel.values().clone();
    for m in 0..values.rows() {
        let (mu, sd) = (stats.mean[m], stats.std[m].max(STD_FLOOR));
        for v in values.row_mut(m) {
            *v = (*v - mu) / sd;
        }
    }
    MelSpectrogram::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SAMPLE_RATE;

    fn naive_dft_power(frame: &[f64], bins: usize) -> Vec<f64> {
        let n = frame.len();
        (0..bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * (k * i % n) as f64 / n as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    fn sine(freq: f64, len: usize, amp: f64) -> AudioClip {
        let s = (0..len)
            .map(|i| (amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect();
        AudioClip::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn frame_count() {
        let p = power_spectrogram(&AudioClip::silence(441_000)).unwrap();
        assert_eq!(p.shape(), (1025, 200));
        assert_eq!(Stft::new(2048, 2205).n_frames(441_001), 201);
        assert_eq!(Stft::new(2048, 2205).n_frames(1), 1);
    }

    #[test]
    fn silence_has_zero_power() {
        let p = power_spectrogram(&AudioClip::silence(22_050)).unwrap();
        assert!(p.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sine_peaks_at_expected_bin_and_matches_dft() {
        let clip = sine(440.0, 44_100, 1.0);
        let p = power_spectrogram(&clip).unwrap();
        let t = 10;
        let col: Vec<f64> = p.column(t).collect();
        let peak = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, (440.0f64 * 2048.0 / 44_100.0).round() as usize);
        assert_eq!(peak, 20);

        let stft = Stft::new(2048, 2205);
        let oracle = naive_dft_power(&stft.frame(clip.samples(), t), 1025);
        let scale = oracle.iter().cloned().fold(0.0, f64::max);
        for (a, b) in col.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn parseval() {
        let clip = sine(1234.5, 20_000, 0.7);
        let stft = Stft::new(2048, 2205);
        let p = stft.power(clip.samples()).unwrap();
        for t in 0..p.cols() {
            let frame = stft.frame(clip.samples(), t);
            let energy: f64 = frame.iter().map(|x| x * x).sum();
            // one-sided spectrum: DC and Nyquist once, the rest twice
            let col: Vec<f64> = p.column(t).collect();
            let total = col[0] + col[1024] + 2.0 * col[1..1024].iter().sum::<f64>();
            assert!((total / 2048.0 - energy).abs() <= 1e-6 * energy.max(1e-300));
        }
    }

    #[test]
    fn reflection_padding() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(0, 1), 0);
        assert_eq!(reflect(-7, 3), 1);
    }

    #[test]
    fn filterbank_shape_and_rows() {
        let fb = mel_filterbank();
        assert_eq!(fb.weights().shape(), (128, 1025));
        for m in 0..128 {
            let row = fb.weights().row(m);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!(row.iter().any(|&w| w > 0.0), "row {m}");
            // unimodal: non-decreasing then non-increasing
            let peak = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert!(row[..=peak].windows(2).all(|w| w[0] <= w[1]));
            assert!(row[peak..].windows(2).all(|w| w[0] >= w[1]));
        }
        // adjacent filters overlap somewhere on the frequency axis
        for m in 0..127 {
            let (a, b) = (fb.weights().row(m), fb.weights().row(m + 1));
            let last_a = a.iter().rposition(|&w| w > 0.0).unwrap();
            let first_b = b.iter().position(|&w| w > 0.0).unwrap();
            assert!(first_b <= last_a + 1, "filters {m} and {}", m + 1);
        }
    }

    #[test]
    fn mel_scale_closed_form() {
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
        assert!((hz_to_mel(700.0) - 781.17).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(3000.0)) - 3000.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_range() {
        assert!(MelFilterbank::new(128, 2048, 44_100, 100.0, 50.0).is_err());
        assert!(MelFilterbank::new(128, 2048, 44_100, 0.0, 30_000.0).is_err());
    }

    #[test]
    fn silent_segment_log_floor() {
        let mel = FeatureExtractor::new().extract(&AudioClip::silence(441_000)).unwrap();
        assert_eq!((mel.n_mels(), mel.n_frames()), (128, 200));
        let floor = LOG_EPSILON.ln();
        assert!(mel.values().as_slice().iter().all(|&v| v == floor));
    }

    #[test]
    fn louder_is_never_smaller() {
        let ex = FeatureExtractor::new();
        let quiet = ex.extract(&sine(300.0, 30_000, 0.2)).unwrap();
        let loud = ex.extract(&sine(300.0, 30_000, 0.4)).unwrap();
        for (a, b) in quiet.values().as_slice().iter().zip(loud.values().as_slice()) {
            assert!(b >= a);
        }
    }

    #[test]
    fn normalization() {
        let ex = FeatureExtractor::new();
        let specs = vec![
            ex.extract(&sine(300.0, 30_000, 0.2)).unwrap(),
            ex.extract(&sine(3000.0, 20_000, 0.5)).unwrap(),
        ];
        let stats = NormStats::fit(&specs).unwrap();
        let normed: Vec<_> = specs.iter().map(|s| normalize(s, &stats).unwrap()).collect();
        let check = NormStats::fit(&normed).unwrap();
        for m in 0..128 {
            assert!(check.mean[m].abs() < 1e-6);
            // bins with zero variance stay at zero after the floor
            assert!((check.std[m] - 1.0).abs() < 1e-6 || stats.std[m] == STD_FLOOR);
        }

        let same = normalize(&specs[0], &NormStats::identity(128)).unwrap();
        assert_eq!(same, specs[0]);
        assert!(normalize(&specs[0], &NormStats::identity(64)).is_err());
    }

    #[test]
    fn zero_variance_bin_is_finite() {
        let spec = MelSpectrogram::new(Matrix::filled(2, 3, -4.0)).unwrap();
        let stats = NormStats::fit([&spec]).unwrap();
        assert_eq!(stats.std, vec![STD_FLOOR; 2]);
        let n = normalize(&spec, &stats).unwrap();
        assert!(n.values().as_slice().iter().all(|v| v.is_finite() && *v == 0.0));
    }

    #[test]
    fn melf_round_trip() {
        let spec = MelSpectrogram::new(Matrix::new(2, 2, vec![1.5, -2.0, 0.25, 8.0]).unwrap()).unwrap();
        let mut bytes = Vec::new();
        spec.write_melf(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 4 * 4);
        assert_eq!(&bytes[..4], b"MELF");
        assert_eq!(MelSpectrogram::read_melf(&bytes[..]).unwrap(), spec);
        assert!(MelSpectrogram::read_melf(&bytes[..20]).is_err());
    }
}
