//! Frame-level scoring.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{detect_fixed, detect_variable, FramePredictor};
use crate::error::{Error, Result};
use crate::synth::DatasetManifest;
use crate::vocab::TechniqueVocabulary;

/// Fraction of frames whose predicted class equals the reference class.
pub fn frame_accuracy(predicted: &[usize], reference: &[usize]) -> Result<f64> {
    if predicted.len() != reference.len() {
        return Err(Error::Shape(format!(
            "{} predicted vs {} reference frames",
            predicted.len(),
            reference.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::InvalidArgument("no frames to score".into()));
    }
    let hits = predicted.iter().zip(reference).filter(|(p, r)| p == r).count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// `k x k` frame counts, rows indexed by reference class, columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, predicted: &[usize], reference: &[usize]) -> Result<()> {
        let k = self.k();
        if let Some(bad) = predicted.iter().chain(reference).find(|&&c| c >= k) {
            return Err(Error::InvalidArgument(format!("class {bad} outside {k} classes")));
        }
        for (&p, &r) in predicted.iter().zip(reference) {
            self.counts[r][p] += 1;
        }
        Ok(())
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference][predicted]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    /// Correct / predicted-as-class; `None` when the class was never predicted.
    pub fn precision(&self) -> Vec<Option<f64>> {
        (0..self.k())
            .map(|c| {
                let col: u64 = self.counts.iter().map(|row| row[c]).sum();
                (col > 0).then(|| self.counts[c][c] as f64 / col as f64)
            })
            .collect()
    }

    /// Correct / reference-class frames; `None` when the class never occurs.
    pub fn recall(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let total: u64 = row.iter().sum();
                (total > 0).then(|| row[c] as f64 / total as f64)
            })
            .collect()
    }

    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut out = String::from("reference\\predicted");
        for l in labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in labels.iter().zip(&self.counts) {
            out.push_str(l);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentScore {
    pub name: String,
    pub frames: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub labels: Vec<String>,
    pub segments: Vec<SegmentScore>,
    /// Unweighted mean of per-segment accuracies.
    pub average_accuracy: f64,
    pub total_frames: u64,
    pub confusion: ConfusionMatrix,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
}

impl EvalReport {
    /// Scores `(name, predicted, reference)` label sequences.
    pub fn from_sequences<'a>(
        vocabulary: &TechniqueVocabulary,
        items: impl IntoIterator<Item = (String, &'a [usize], &'a [usize])>,
    ) -> Result<Self> {
        let mut confusion = ConfusionMatrix::new(vocabulary.len());
        let mut segments = Vec::new();
        for (name, predicted, reference) in items {
            let accuracy = frame_accuracy(predicted, reference)?;
            confusion.add(predicted, reference)?;
            segments.push(SegmentScore {
                name,
                frames: reference.len(),
                accuracy,
            });
        }
        if segments.is_empty() {
            return Err(Error::EmptyDataset("no segments to evaluate".into()));
        }
        let average_accuracy = segments.iter().map(|s| s.accuracy).sum::<f64>() / segments.len() as f64;
        Ok(Self {
            labels: vocabulary.labels().to_vec(),
            total_frames: confusion.total(),
            precision: confusion.precision(),
            recall: confusion.recall(),
            confusion,
            segments,
            average_accuracy,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let (json_path, csv_path) = (json_path.as_ref(), csv_path.as_ref());
        std::fs::write(json_path, self.to_json()? + "\n").map_err(|e| Error::io(json_path, e))?;
        std::fs::write(csv_path, self.confusion.to_csv(&self.labels)).map_err(|e| Error::io(csv_path, e))
    }
}

/// Detects every manifest segment and scores it against its frame labels.
///
/// Segments of exactly one model window use fixed-length inference; any other
/// length goes through sliding-window detection.
pub fn evaluate_dataset<P: FramePredictor + ?Sized>(predictor: &P, manifest: &DatasetManifest) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset("manifest has no segments".into()));
    }
    if predictor.num_classes() != manifest.vocabulary.len() {
        return Err(Error::Config(format!(
            "model has {} classes, dataset vocabulary {}",
            predictor.num_classes(),
            manifest.vocabulary.len()
        )));
    }
    let scored = manifest
        .segments
        .par_iter()
        .map(|seg| {
            let audio = manifest.read_audio(seg)?;
            let reference = manifest.read_frame_labels(seg)?;
            let pred = if audio.len() == predictor.window_samples() {
                detect_fixed(predictor, &audio)?
            } else {
                detect_variable(predictor, &audio)?
            };
            Ok((seg.audio.clone(), pred.argmax(), reference.0))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_sequences(
        &manifest.vocabulary,
        scored.iter().map(|(n, p, r)| (n.clone(), p.as_slice(), r.as_slice())),
    )
}

/// Scores the manifest's own labels against themselves; checks the scoring path end to end.
pub fn evaluate_oracle(manifest: &DatasetManifest) -> Result<EvalReport> {
    let labels = manifest
        .segments
        .iter()
        .map(|seg| Ok((seg.audio.clone(), manifest.read_frame_labels(seg)?.0)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_sequences(
        &manifest.vocabulary,
        labels.iter().map(|(n, l)| (n.clone(), l.as_slice(), l.as_slice())),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_accuracy(p: &[usize], r: &[usize]) -> f64 {
        let mut hits = 0;
        for i in 0..p.len() {
            if p[i] == r[i] {
                hits += 1;
            }
        }
        hits as f64 / p.len() as f64
    }

    #[test]
    fn basic_values() {
        assert_eq!(frame_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(frame_accuracy(&[0, 1, 1, 2], &[0, 1, 1, 3]).unwrap(), 0.75);
        assert!(frame_accuracy(&[0], &[0, 1]).is_err());
        assert!(frame_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn confusion_and_report() {
        let vocab = TechniqueVocabulary::from_labels(["a", "b", "other"]).unwrap();
        let p1 = [0, 0, 1, 2];
        let r1 = [0, 1, 1, 2];
        let p2 = [2, 2, 2, 2];
        let r2 = [0, 0, 2, 2];
        let report = EvalReport::from_sequences(
            &vocab,
            [("x".to_string(), &p1[..], &r1[..]), ("y".to_string(), &p2[..], &r2[..])],
        )
        .unwrap();
        assert_eq!(report.total_frames, 8);
        assert_eq!(report.confusion.rows(), &[vec![1, 0, 2], vec![1, 1, 0], vec![0, 0, 3]]);
        assert!((report.average_accuracy - (0.75 + 0.5) / 2.0).abs() < 1e-15);
        // equal-length segments: mean of per-segment values equals trace / total
        let pooled = report.confusion.trace() as f64 / report.total_frames as f64;
        assert!((report.average_accuracy - pooled).abs() < 1e-12);
        assert_eq!(report.recall[0], Some(1.0 / 3.0));
        assert_eq!(report.precision[1], Some(1.0));
        let csv = report.confusion.to_csv(&report.labels);
        assert_eq!(csv.lines().nth(1).unwrap(), "a,1,0,2");
    }

    #[test]
    fn never_predicted_class_has_no_precision() {
        let mut c = ConfusionMatrix::new(2);
        c.add(&[0, 0], &[0, 1]).unwrap();
        assert_eq!(c.precision(), vec![Some(0.5), None]);
        assert!(c.add(&[5], &[0]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn matches_naive_count(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..400)) {
            let (p, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            proptest::prop_assert_eq!(frame_accuracy(&p, &r).unwrap(), naive_accuracy(&p, &r));
        }

        #[test]
        fn permutation_invariant(pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200), shift in 0usize..4) {
            let (p, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let perm = |v: &[usize]| v.iter().map(|&c| (c + shift) % 4).collect::<Vec<_>>();
            proptest::prop_assert_eq!(frame_accuracy(&p, &r).unwrap(), frame_accuracy(&perm(&p), &perm(&r)).unwrap());
        }

        #[test]
        fn confusion_rows_count_reference(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..200)) {
            let (p, r): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let mut c = ConfusionMatrix::new(3);
            c.add(&p, &r).unwrap();
            for class in 0..3 {
                let row: u64 = c.rows()[class].iter().sum();
                proptest::prop_assert_eq!(row as usize, r.iter().filter(|&&x| x == class).count());
            }
            proptest::prop_assert_eq!(c.total() as usize, p.len());
        }
    }
}
