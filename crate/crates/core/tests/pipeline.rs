mod common;

use common::*;
use techdetect::eval::evaluate_oracle;
use techdetect::model::{load_examples, train};
use techdetect::*;

/// Predicts one class with certainty on every frame.
struct Constant {
    class: usize,
    k: usize,
}

impl FramePredictor for Constant {
    fn num_classes(&self) -> usize {
        self.k
    }

    fn window_frames(&self) -> usize {
        SEGMENT_FRAMES
    }

    fn predict_window(&self, window: &AudioClip) -> Result<FramePrediction> {
        assert_eq!(window.len(), self.window_samples());
        let mut m = Matrix::zeros(self.k, SEGMENT_FRAMES);
        for t in 0..SEGMENT_FRAMES {
            m.set(self.class, t, 1.0);
        }
        FramePrediction::new(m)
    }
}

#[test]
fn constant_predictor_scores_label_frequency() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&toy_library(5, 4), 6, 9, dir.path()).unwrap();
    let labels: Vec<Vec<usize>> = m.segments.iter().map(|s| m.read_frame_labels(s).unwrap().0).collect();
    let total: usize = labels.iter().map(Vec::len).sum();
    for class in 0..4 {
        let report = evaluate_dataset(&Constant { class, k: 4 }, &m).unwrap();
        let freq = labels.iter().flatten().filter(|&&l| l == class).count() as f64 / total as f64;
        assert!((report.average_accuracy - freq).abs() < 1e-12, "class {class}");
        let trace = report.confusion.trace() as f64 / report.confusion.total() as f64;
        assert!((report.average_accuracy - trace).abs() < 1e-12);
    }
}

#[test]
fn oracle_is_perfect_and_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&toy_library(5, 5), 4, 2, dir.path()).unwrap();
    let report = evaluate_oracle(&m).unwrap();
    assert_eq!(report.average_accuracy, 1.0);
    assert_eq!(report.total_frames, 800);
    for r in 0..4 {
        for p in 0..4 {
            if r != p {
                assert_eq!(report.confusion.get(r, p), 0);
            }
        }
    }
}

#[test]
fn dataset_is_identical_across_thread_counts() {
    let lib = toy_library(4, 6);
    let read_all = |dir: &std::path::Path| {
        let mut files = walk(dir);
        files.sort();
        files
            .into_iter()
            .map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
            .collect::<Vec<_>>()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| {
        build_dataset(&lib, 6, 12, a.path()).unwrap();
    });
    rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| {
        build_dataset(&lib, 6, 12, b.path()).unwrap();
    });
    assert_eq!(read_all(a.path()), read_all(b.path()));
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn variable_length_detection_frame_counts() {
    let params = FcnParameters::init(&FcnConfig::reference(4), 1).unwrap();
    let detector = Detector::new(params).unwrap();
    for (seconds, frames) in [(3.2, 64), (23.0, 460), (10.01, 201)] {
        let pred = detect_variable(&detector, &random_audio(seconds, 7)).unwrap();
        assert_eq!(pred.n_frames(), frames, "{seconds} s");
        for t in 0..frames {
            assert!((pred.frame(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn short_input_matches_zero_padded_window() {
    let params = FcnParameters::init(&FcnConfig::reference(4), 2).unwrap();
    let detector = Detector::new(params).unwrap();
    let clip = random_audio(3.2, 8);
    let pred = detect_variable(&detector, &clip).unwrap();
    let padded = detect_fixed(&detector, &clip.slice_padded(0, SEGMENT_SAMPLES)).unwrap();
    for t in 0..pred.n_frames() {
        assert_eq!(pred.frame(t), padded.frame(t));
    }
}

#[test]
fn overfits_five_segments() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&toy_library(6, 11), 5, 3, dir.path()).unwrap();
    let examples = load_examples(&m, &FeatureExtractor::new()).unwrap();
    let mut config = FcnConfig::reference(4);
    config.epochs = 200;
    config.batch_size = 5;
    let (_, history) = train(&config, &examples, None, Some(toy_vocabulary())).unwrap();
    let last = history.epochs.last().unwrap();
    assert_eq!(history.epochs.len(), 200);
    assert!(last.train_accuracy >= 0.99, "training accuracy {}", last.train_accuracy);
}
