//! Event lists and per-frame label sequences.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TechniqueVocabulary;

/// Slack for comparing event boundaries that went through seconds <-> samples conversions.
pub const TIME_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub onset: f64,
    pub offset: f64,
    pub label: usize,
}

/// Monophonic event list: sorted by onset, non-overlapping.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventAnnotation {
    events: Vec<Event>,
}

#[derive(Serialize, Deserialize)]
struct EventRecord<'a> {
    onset: f64,
    offset: f64,
    label: std::borrow::Cow<'a, str>,
}

impl EventAnnotation {
    pub fn new(events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if !(e.onset.is_finite() && e.offset.is_finite()) || e.onset < 0.0 || e.onset >= e.offset {
                return Err(Error::InvalidAnnotation(format!(
                    "event {i} has invalid span [{}, {})",
                    e.onset, e.offset
                )));
            }
            if i > 0 && e.onset < events[i - 1].offset - TIME_EPSILON {
                return Err(Error::InvalidAnnotation(format!(
                    "event {i} starts at {} before event {} ends at {}",
                    e.onset,
                    i - 1,
                    events[i - 1].offset
                )));
            }
        }
        Ok(Self { events })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Offset of the last event, or 0 for an empty annotation.
    pub fn end(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.offset)
    }

    pub fn to_jsonl(&self, vocabulary: &TechniqueVocabulary) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            let label = vocabulary.label(e.label).ok_or_else(|| {
                Error::InvalidAnnotation(format!("label index {} outside vocabulary", e.label))
            })?;
            out.push_str(&serde_json::to_string(&EventRecord {
                onset: e.onset,
                offset: e.offset,
                label: label.into(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>, vocabulary: &TechniqueVocabulary) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl(vocabulary)?).map_err(|e| Error::io(path, e))
    }

    pub fn parse_jsonl(text: &str, vocabulary: &TechniqueVocabulary) -> Result<Self> {
        let mut events = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: EventRecord = serde_json::from_str(line)?;
            events.push(Event {
                onset: rec.onset,
                offset: rec.offset,
                label: vocabulary.index_of(&rec.label)?,
            });
        }
        Self::new(events)
    }

    pub fn read_jsonl(path: impl AsRef<Path>, vocabulary: &TechniqueVocabulary) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_jsonl(&text, vocabulary)
    }
}

/// One class index per 0.05 s frame.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FrameLabelSeq(pub Vec<usize>);

impl FrameLabelSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for l in &self.0 {
            writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut labels = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            labels.push(line.parse().map_err(|_| {
                Error::Format(format!("{}:{}: not a class index: {line:?}", path.display(), n + 1))
            })?);
        }
        Ok(Self(labels))
    }
}

/// Labels each frame with the event containing its center `(i + 0.5) * frame_len`.
///
/// Events are half-open `[onset, offset)`. The annotation must tile
/// `[0, n_frames * frame_len]` without gaps or overlaps.
pub fn events_to_frame_labels(
    annotation: &EventAnnotation,
    frame_len: f64,
    n_frames: usize,
) -> Result<FrameLabelSeq> {
    if !(frame_len > 0.0) {
        return Err(Error::InvalidArgument(format!("frame length {frame_len}")));
    }
    let events = annotation.events();
    let Some(first) = events.first() else {
        return Err(Error::InvalidAnnotation("empty annotation".into()));
    };
    if first.onset > TIME_EPSILON {
        return Err(Error::InvalidAnnotation(format!(
            "gap at start: first event begins at {}",
            first.onset
        )));
    }
    for pair in events.windows(2) {
        if (pair[1].onset - pair[0].offset).abs() > TIME_EPSILON {
            return Err(Error::InvalidAnnotation(format!(
                "gap or overlap between {} and {}",
                pair[0].offset, pair[1].onset
            )));
        }
    }
    let covered = n_frames as f64 * frame_len;
    if annotation.end() < covered - TIME_EPSILON {
        return Err(Error::InvalidAnnotation(format!(
            "annotation ends at {} before {covered}",
            annotation.end()
        )));
    }

    let mut idx = 0;
    let labels = (0..n_frames)
        .map(|i| {
            let center = (i as f64 + 0.5) * frame_len;
            while idx + 1 < events.len() && center >= events[idx].offset - TIME_EPSILON {
                idx += 1;
            }
            events[idx].label
        })
        .collect();
    Ok(FrameLabelSeq(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(onset: f64, offset: f64, label: usize) -> Event {
        Event { onset, offset, label }
    }

    #[test]
    fn single_event_fills_all_frames() {
        let a = EventAnnotation::new(vec![ev(0.0, 10.0, 3)]).unwrap();
        let labels = events_to_frame_labels(&a, 0.05, 200).unwrap();
        assert_eq!(labels.0, vec![3; 200]);
    }

    #[test]
    fn boundary_on_frame_center_goes_to_later_event() {
        let a = EventAnnotation::new(vec![ev(0.0, 5.975, 0), ev(5.975, 10.0, 1)]).unwrap();
        let labels = events_to_frame_labels(&a, 0.05, 200).unwrap();
        assert!(labels.0[..119].iter().all(|&l| l == 0));
        assert!(labels.0[119..].iter().all(|&l| l == 1));
    }

    #[test]
    fn frame_count_for_ten_seconds() {
        assert_eq!((10.0f64 / 0.05).round() as usize, 200);
        assert_eq!(crate::frames_for_samples(441_000), 200);
    }

    #[test]
    fn rejects_gaps_and_overlaps() {
        let gap = EventAnnotation::new(vec![ev(0.0, 4.0, 0), ev(4.5, 10.0, 1)]).unwrap();
        assert!(events_to_frame_labels(&gap, 0.05, 200).is_err());
        let late = EventAnnotation::new(vec![ev(0.2, 10.0, 0)]).unwrap();
        assert!(events_to_frame_labels(&late, 0.05, 200).is_err());
        let short = EventAnnotation::new(vec![ev(0.0, 9.0, 0)]).unwrap();
        assert!(events_to_frame_labels(&short, 0.05, 200).is_err());
        assert!(EventAnnotation::new(vec![ev(0.0, 5.0, 0), ev(4.0, 10.0, 1)]).is_err());
        assert!(EventAnnotation::new(vec![ev(1.0, 1.0, 0)]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let vocab = TechniqueVocabulary::from_labels(["slide", "trill", "other"]).unwrap();
        let a = EventAnnotation::new(vec![ev(0.0, 1.25, 1), ev(1.25, 3.0, 2)]).unwrap();
        let text = a.to_jsonl(&vocab).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"onset":0.0,"offset":1.25,"label":"trill"}"#
        );
        assert_eq!(EventAnnotation::parse_jsonl(&text, &vocab).unwrap(), a);
        assert!(EventAnnotation::parse_jsonl(r#"{"onset":0,"offset":1,"label":"vibrato"}"#, &vocab).is_err());
    }
}
