//! Mono 44.1 kHz audio clips and RIFF/WAVE I/O.
//!
//! Reading accepts 16-bit PCM and 32-bit IEEE float, mono or stereo. Stereo is
//! mixed down by the arithmetic mean of the two channels. Writing always
//! produces 16-bit PCM mono with saturating quantization.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 44_100;

/// Scale between 16-bit integer samples and unit amplitudes.
const I16_SCALE: f32 = 32_768.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, rejecting non-finite samples or amplitudes outside [-1, 1].
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidClip("sample rate must be positive".into()));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::InvalidClip(format!(
                "sample {i} = {s} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Copy of samples `[start, end)`; indices past the end are zero-filled.
    pub fn slice_padded(&self, start: usize, end: usize) -> AudioClip {
        let mut out = vec![0.0; end.saturating_sub(start)];
        if start < self.samples.len() {
            let stop = end.min(self.samples.len());
            out[..stop - start].copy_from_slice(&self.samples[start..stop]);
        }
        AudioClip {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }

    pub(crate) fn require_pipeline_rate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedSampleRate(self.sample_rate));
        }
        Ok(())
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav_from(BufReader::new(file)).map_err(|e| match e {
        Error::MalformedWav(msg) => Error::MalformedWav(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_wav_from<R: Read>(reader: R) -> Result<AudioClip> {
    let mut reader = hound::WavReader::new(reader).map_err(wav_error)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedSampleRate(spec.sample_rate));
    }
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::UnsupportedEncoding(format!(
            "{channels} channels (mono or stereo only)"
        )));
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / I16_SCALE))
            .collect::<Result<_, _>>()
            .map_err(wav_error)?,
        (hound::SampleFormat::Float, 32) => {
            let raw = reader
                .samples::<f32>()
                .collect::<Result<Vec<_>, _>>()
                .map_err(wav_error)?;
            if raw.iter().any(|s| !s.is_finite()) {
                return Err(Error::MalformedWav("non-finite float sample".into()));
            }
            raw.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect()
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!(
                "{bits}-bit {fmt:?} (16-bit PCM or 32-bit float only)"
            )))
        }
    };

    let samples = if channels == 2 {
        interleaved
            .chunks_exact(2)
            .map(|lr| (lr[0] + lr[1]) / 2.0)
            .collect()
    } else {
        interleaved
    };
    Ok(AudioClip {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_wav_to(BufWriter::new(file), clip).map_err(|e| match e {
        Error::MalformedWav(msg) => Error::io(path, std::io::Error::other(msg)),
        other => other,
    })
}

pub fn write_wav_to<W: Write + Seek>(writer: W, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut wav = hound::WavWriter::new(writer, spec).map_err(wav_error)?;
    {
        let mut samples = wav.get_i16_writer(clip.samples.len() as u32);
        for (i, &s) in clip.samples.iter().enumerate() {
            samples.write_sample(quantize(s).ok_or_else(|| {
                Error::InvalidClip(format!("sample {i} = {s} out of range"))
            })?);
        }
        samples.flush().map_err(wav_error)?;
    }
    wav.finalize().map_err(wav_error)
}

/// Saturating conversion of a unit amplitude to a 16-bit sample.
pub fn quantize(sample: f32) -> Option<i16> {
    if !sample.is_finite() || sample.abs() > 1.0 {
        return None;
    }
    let scaled = (sample * I16_SCALE).round();
    Some(scaled.clamp(i16::MIN as f32, i16::MAX as f32) as i16)
}

fn wav_error(err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) => Error::MalformedWav(e.to_string()),
        hound::Error::Unsupported => Error::UnsupportedEncoding("unsupported WAV variant".into()),
        other => Error::MalformedWav(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn encode(spec: hound::WavSpec, write: impl FnOnce(&mut hound::WavWriter<&mut Cursor<Vec<u8>>>)) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
            write(&mut w);
            w.finalize().unwrap();
        }
        buf.into_inner()
    }

    fn pcm16(channels: u16, rate: u32) -> hound::WavSpec {
        hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        }
    }

    #[test]
    fn silent_mono_second() {
        let bytes = encode(pcm16(1, 44_100), |w| {
            for _ in 0..44_100 {
                w.write_sample(0i16).unwrap();
            }
        });
        let clip = read_wav_from(Cursor::new(bytes)).unwrap();
        assert_eq!(clip.len(), 44_100);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_is_channel_mean() {
        let bytes = encode(pcm16(2, 44_100), |w| {
            for _ in 0..100 {
                w.write_sample(16_384i16).unwrap();
                w.write_sample(-16_384i16).unwrap();
            }
        });
        let clip = read_wav_from(Cursor::new(bytes)).unwrap();
        assert_eq!(clip.len(), 100);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_negative_is_minus_one() {
        let bytes = encode(pcm16(1, 44_100), |w| w.write_sample(i16::MIN).unwrap());
        let clip = read_wav_from(Cursor::new(bytes)).unwrap();
        assert_eq!(clip.samples(), &[-1.0]);
    }

    #[test]
    fn float_input_accepted() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let bytes = encode(spec, |w| {
            w.write_sample(0.25f32).unwrap();
            w.write_sample(-0.5f32).unwrap();
        });
        let clip = read_wav_from(Cursor::new(bytes)).unwrap();
        assert_eq!(clip.samples(), &[0.25, -0.5]);
    }

    #[test]
    fn rejects_other_rates_and_encodings() {
        let bytes = encode(pcm16(1, 22_050), |w| w.write_sample(0i16).unwrap());
        assert!(matches!(
            read_wav_from(Cursor::new(bytes)),
            Err(Error::UnsupportedSampleRate(22_050))
        ));

        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let bytes = encode(spec, |w| w.write_sample(0i32).unwrap());
        assert!(matches!(
            read_wav_from(Cursor::new(bytes)),
            Err(Error::UnsupportedEncoding(_))
        ));
    }

    #[test]
    fn malformed_header() {
        let err = read_wav_from(Cursor::new(b"RIFX\0\0\0\0garbage".to_vec())).unwrap_err();
        assert!(matches!(err, Error::MalformedWav(_)), "{err}");
    }

    #[test]
    fn quantize_saturates() {
        assert_eq!(quantize(1.0), Some(i16::MAX));
        assert_eq!(quantize(-1.0), Some(i16::MIN));
        assert_eq!(quantize(0.0), Some(0));
        assert_eq!(quantize(1.5), None);
        assert_eq!(quantize(f32::NAN), None);
        // brute force over the representable grid: every code maps back to itself
        for code in i16::MIN..=i16::MAX {
            assert_eq!(quantize(code as f32 / I16_SCALE), Some(code));
        }
    }

    #[test]
    fn write_zero_clip() {
        let mut buf = Cursor::new(Vec::new());
        write_wav_to(&mut buf, &AudioClip::silence(2205)).unwrap();
        buf.set_position(0);
        let clip = read_wav_from(buf).unwrap();
        assert_eq!(clip, AudioClip::silence(2205));
    }

    #[test]
    fn new_rejects_out_of_range() {
        assert!(AudioClip::new(vec![0.0, 1.01], SAMPLE_RATE).is_err());
        assert!(AudioClip::new(vec![f32::INFINITY], SAMPLE_RATE).is_err());
        assert!(AudioClip::new(vec![1.0, -1.0], SAMPLE_RATE).is_ok());
    }

    #[test]
    fn slice_padded_zero_fills() {
        let clip = AudioClip::new(vec![0.1, 0.2, 0.3], SAMPLE_RATE).unwrap();
        assert_eq!(clip.slice_padded(1, 5).samples(), &[0.2, 0.3, 0.0, 0.0]);
        assert_eq!(clip.slice_padded(4, 6).samples(), &[0.0, 0.0]);
    }

    proptest::proptest! {
        #[test]
        fn wav_round_trip_within_one_step(samples in proptest::collection::vec(-1.0f32..=1.0, 0..512)) {
            let clip = AudioClip::new(samples, SAMPLE_RATE).unwrap();
            let mut buf = Cursor::new(Vec::new());
            write_wav_to(&mut buf, &clip).unwrap();
            buf.set_position(0);
            let back = read_wav_from(buf).unwrap();
            proptest::prop_assert_eq!(back.len(), clip.len());
            for (a, b) in clip.samples().iter().zip(back.samples()) {
                proptest::prop_assert!((a - b).abs() <= 1.0 / I16_SCALE);
            }
        }
    }
}
