#![allow(dead_code)]

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use techdetect::synth::{ClipLibrary, LibraryEntry};
use techdetect::{write_wav, AudioClip, TechniqueVocabulary, SAMPLE_RATE};

pub const TOY_LABELS: [&str; 4] = ["tone", "harmonic", "tremolo", "other"];

/// One toy technique clip: pure tone, two-harmonic tone, amplitude-modulated tone or noise.
pub fn toy_clip(class: usize, rng: &mut impl Rng) -> AudioClip {
    let seconds = rng.random_range(0.3..1.5);
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let amp = rng.random_range(0.25..0.5);
    let sr = SAMPLE_RATE as f64;
    let samples: Vec<f32> = match class {
        0 => {
            let f = rng.random_range(200.0..400.0);
            (0..n).map(|i| (amp * (TAU * f * i as f64 / sr).sin()) as f32).collect()
        }
        1 => {
            let f = rng.random_range(600.0..900.0);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (amp * 0.6 * ((TAU * f * t).sin() + (TAU * 2.0 * f * t).sin())) as f32
                })
                .collect()
        }
        2 => {
            let f = rng.random_range(1500.0..2500.0);
            let m = rng.random_range(15.0..25.0);
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    (amp * 0.5 * (1.0 + (TAU * m * t).sin()) * (TAU * f * t).sin()) as f32
                })
                .collect()
        }
        _ => (0..n).map(|_| (amp * rng.random_range(-1.0..1.0)) as f32).collect(),
    };
    AudioClip::new(samples, SAMPLE_RATE).unwrap()
}

pub fn toy_vocabulary() -> TechniqueVocabulary {
    TechniqueVocabulary::from_labels(TOY_LABELS).unwrap()
}

pub fn toy_library(per_class: usize, seed: u64) -> ClipLibrary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (class, name) in TOY_LABELS.iter().enumerate() {
        for i in 0..per_class {
            entries.push(LibraryEntry {
                clip: toy_clip(class, &mut rng),
                label: class,
                source: format!("{name}_{i:02}.wav"),
            });
        }
    }
    ClipLibrary::new(entries, toy_vocabulary()).unwrap()
}

pub struct ToyFiles {
    pub clips_csv: PathBuf,
    pub vocab: PathBuf,
}

/// Writes the toy library as WAV files plus `clips.csv` and `vocab.txt` under `dir`.
pub fn write_toy_library(dir: &Path, per_class: usize, seed: u64) -> ToyFiles {
    let lib = toy_library(per_class, seed);
    std::fs::create_dir_all(dir.join("clips")).unwrap();
    let mut csv = String::from("path,label\n");
    for e in lib.entries() {
        write_wav(dir.join("clips").join(&e.source), &e.clip).unwrap();
        csv.push_str(&format!("clips/{},{}\n", e.source, TOY_LABELS[e.label]));
    }
    let clips_csv = dir.join("clips.csv");
    std::fs::write(&clips_csv, csv).unwrap();
    let vocab = dir.join("vocab.txt");
    std::fs::write(&vocab, TOY_LABELS.join("\n") + "\n").unwrap();
    ToyFiles { clips_csv, vocab }
}

pub fn random_audio(seconds: f64, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let samples = (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect();
    AudioClip::new(samples, SAMPLE_RATE).unwrap()
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_techdetect")
}

/// Runs the CLI binary; returns (exit code, stdout, stderr).
pub fn techdetect(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(bin()).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
