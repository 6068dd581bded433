//! Long-segment synthesis from a library of short single-technique clips.
//!
//! Clips are drawn uniformly with replacement and joined with linear
//! crossfades until the segment reaches its target length, then the excess
//! is trimmed. Each clip's event spans from the midpoint of its leading
//! crossfade to the midpoint of its trailing one.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{events_to_frame_labels, Event, EventAnnotation, FrameLabelSeq};
use crate::audio::{read_wav, write_wav, AudioClip};
use crate::error::{Error, Result};
use crate::vocab::TechniqueVocabulary;
use crate::{CROSSFADE_SECONDS, FRAME_SECONDS, SEGMENT_SECONDS};

/// Allowed durations of clips read from a library manifest, in seconds.
/// Libraries built in memory only enforce the lower bound.
pub const MIN_CLIP_SECONDS: f64 = 0.1;
pub const MAX_CLIP_SECONDS: f64 = 10.0;

/// Attempts per segment before giving up on finding an unseen clip sequence.
pub const DEDUP_RETRIES: usize = 100;

#[derive(Debug, Clone)]
pub struct LibraryEntry {
    pub clip: AudioClip,
    pub label: usize,
    pub source: String,
}

#[derive(Debug, Clone)]
pub struct ClipLibrary {
    entries: Vec<LibraryEntry>,
    vocabulary: TechniqueVocabulary,
}

impl ClipLibrary {
    pub fn new(entries: Vec<LibraryEntry>, vocabulary: TechniqueVocabulary) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        for e in &entries {
            if e.label >= vocabulary.len() {
                return Err(Error::InvalidClip(format!(
                    "{}: label index {} outside a {}-class vocabulary",
                    e.source,
                    e.label,
                    vocabulary.len()
                )));
            }
            e.clip.require_pipeline_rate()?;
            let d = e.clip.duration();
            if d < MIN_CLIP_SECONDS {
                return Err(Error::InvalidClip(format!(
                    "{}: duration {d:.3} s shorter than {MIN_CLIP_SECONDS} s",
                    e.source
                )));
            }
        }
        Ok(Self {
            entries,
            vocabulary,
        })
    }

    pub fn entries(&self) -> &[LibraryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn vocabulary(&self) -> &TechniqueVocabulary {
        &self.vocabulary
    }
}

#[derive(Deserialize)]
struct ClipRow {
    path: String,
    label: String,
}

/// Loads a `path,label` CSV manifest. Relative paths resolve against the manifest's directory.
pub fn load_clip_library(manifest: impl AsRef<Path>, vocabulary: TechniqueVocabulary) -> Result<ClipLibrary> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut entries = Vec::new();
    for row in reader.deserialize() {
        let row: ClipRow = row?;
        let label = vocabulary.index_of(&row.label)?;
        let path = base.join(&row.path);
        let clip = read_wav(&path)?;
        let d = clip.duration();
        if !(MIN_CLIP_SECONDS..=MAX_CLIP_SECONDS).contains(&d) {
            return Err(Error::InvalidClip(format!(
                "{}: duration {d:.3} s outside [{MIN_CLIP_SECONDS}, {MAX_CLIP_SECONDS}] s",
                path.display()
            )));
        }
        entries.push(LibraryEntry {
            clip,
            label,
            source: row.path,
        });
    }
    ClipLibrary::new(entries, vocabulary)
}

/// Gain of the incoming clip at overlap sample `j` of `n`; the outgoing clip gets `1 - fade_in`.
#[inline]
pub fn fade_in(j: usize, n: usize) -> f64 {
    (j as f64 + 0.5) / n as f64
}

fn overlap_samples(overlap: f64, sample_rate: u32) -> Result<usize> {
    if !(overlap >= 0.0) || !overlap.is_finite() {
        return Err(Error::InvalidArgument(format!("crossfade {overlap} s")));
    }
    Ok((overlap * sample_rate as f64).round() as usize)
}

/// Appends `next` to `buf` with an `n`-sample linear crossfade over the tail of `buf`.
fn append_crossfaded(buf: &mut Vec<f32>, next: &[f32], n: usize) {
    let start = buf.len() - n;
    for j in 0..n {
        let g = fade_in(j, n);
        let mixed = buf[start + j] as f64 * (1.0 - g) + next[j] as f64 * g;
        buf[start + j] = mixed.clamp(-1.0, 1.0) as f32;
    }
    buf.extend_from_slice(&next[n..]);
}

/// Joins two clips with a linear crossfade of `overlap` seconds.
///
/// The result has `len(a) + len(b) - round(overlap * sr)` samples.
pub fn crossfade_concat(a: &AudioClip, b: &AudioClip, overlap: f64) -> Result<AudioClip> {
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::InvalidArgument(format!(
            "sample rates differ: {} vs {}",
            a.sample_rate(),
            b.sample_rate()
        )));
    }
    let n = overlap_samples(overlap, a.sample_rate())?;
    if n > a.len() || n > b.len() {
        return Err(Error::InvalidArgument(format!(
            "crossfade of {n} samples exceeds clip lengths {} / {}",
            a.len(),
            b.len()
        )));
    }
    let mut buf = Vec::with_capacity(a.len() + b.len() - n);
    buf.extend_from_slice(a.samples());
    append_crossfaded(&mut buf, b.samples(), n);
    AudioClip::new(buf, a.sample_rate())
}

/// Clip draw order and event layout of one segment, before any audio is rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPlan {
    pub clip_ids: Vec<usize>,
    pub annotation: EventAnnotation,
}

#[derive(Debug, Clone)]
pub struct SynthesizedSegment {
    pub audio: AudioClip,
    pub annotation: EventAnnotation,
    pub clip_ids: Vec<usize>,
}

/// Draws clips until the crossfaded total reaches `duration` and lays out their events.
pub fn plan_segment<R: Rng + ?Sized>(
    library: &ClipLibrary,
    rng: &mut R,
    duration: f64,
    crossfade: f64,
) -> Result<SegmentPlan> {
    if !(duration > 0.0) {
        return Err(Error::InvalidArgument(format!("segment duration {duration} s")));
    }
    let sr = crate::SAMPLE_RATE as f64;
    let target = (duration * sr).round() as usize;
    let n = overlap_samples(crossfade, crate::SAMPLE_RATE)?;
    let entries = library.entries();

    let mut clip_ids = Vec::new();
    // (boundary sample, label) for each placed clip
    let mut starts: Vec<(f64, usize)> = Vec::new();
    let mut total = 0usize;
    while total < target {
        let id = rng.random_range(0..entries.len());
        let len = entries[id].clip.len();
        if clip_ids.is_empty() {
            starts.push((0.0, entries[id].label));
            total = len;
        } else {
            if n > len || n > total {
                return Err(Error::InvalidArgument(format!(
                    "crossfade of {n} samples exceeds clip {} ({len} samples)",
                    entries[id].source
                )));
            }
            let start = total - n;
            starts.push((start as f64 + n as f64 / 2.0, entries[id].label));
            total = start + len;
        }
        clip_ids.push(id);
    }

    let events = starts
        .iter()
        .enumerate()
        .map(|(i, &(boundary, label))| Event {
            onset: boundary / sr,
            offset: starts.get(i + 1).map_or(duration, |next| next.0 / sr),
            label,
        })
        .collect();
    Ok(SegmentPlan {
        clip_ids,
        annotation: EventAnnotation::new(events)?,
    })
}

/// Renders the audio of a plan: crossfaded concatenation trimmed to `duration`.
pub fn render_segment(
    library: &ClipLibrary,
    plan: &SegmentPlan,
    duration: f64,
    crossfade: f64,
) -> Result<AudioClip> {
    let target = (duration * crate::SAMPLE_RATE as f64).round() as usize;
    let n = overlap_samples(crossfade, crate::SAMPLE_RATE)?;
    let mut buf: Vec<f32> = Vec::with_capacity(target + crate::SAMPLE_RATE as usize * 10);
    for (i, &id) in plan.clip_ids.iter().enumerate() {
        let clip = library
            .entries()
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("clip id {id} not in library")))?;
        if i == 0 {
            buf.extend_from_slice(clip.clip.samples());
        } else {
            append_crossfaded(&mut buf, clip.clip.samples(), n);
        }
    }
    buf.truncate(target);
    AudioClip::new(buf, crate::SAMPLE_RATE)
}

pub fn synthesize_segment<R: Rng + ?Sized>(
    library: &ClipLibrary,
    rng: &mut R,
    duration: f64,
    crossfade: f64,
) -> Result<SynthesizedSegment> {
    let plan = plan_segment(library, rng, duration, crossfade)?;
    let audio = render_segment(library, &plan, duration, crossfade)?;
    Ok(SynthesizedSegment {
        audio,
        annotation: plan.annotation,
        clip_ids: plan.clip_ids,
    })
}

/// Independent RNG stream for segment `index` of a dataset seeded with `seed`.
pub fn segment_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub audio: String,
    pub annotation: String,
    pub frame_labels: String,
    pub clip_ids: Vec<usize>,
}

/// Index of a synthesized dataset. File paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub segment_seconds: f64,
    pub crossfade_seconds: f64,
    pub vocabulary: TechniqueVocabulary,
    pub segments: Vec<SegmentRecord>,
    #[serde(skip)]
    root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn read_audio(&self, segment: &SegmentRecord) -> Result<AudioClip> {
        read_wav(self.resolve(&segment.audio))
    }

    pub fn read_frame_labels(&self, segment: &SegmentRecord) -> Result<FrameLabelSeq> {
        FrameLabelSeq::read_csv(self.resolve(&segment.frame_labels))
    }

    pub fn read_annotation(&self, segment: &SegmentRecord) -> Result<EventAnnotation> {
        EventAnnotation::read_jsonl(self.resolve(&segment.annotation), &self.vocabulary)
    }
}

/// Synthesizes `n_segments` distinct-sequence segments into `out_dir`.
///
/// Writes `segments/seg_NNNNN.{wav,jsonl,labels.csv}` and `manifest.json`. The
/// result depends only on the library and `seed`: clip sequences are planned
/// sequentially (so the repetition check is order-dependent but deterministic),
/// then audio is rendered in parallel.
pub fn build_dataset(
    library: &ClipLibrary,
    n_segments: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    build_dataset_with(library, n_segments, seed, SEGMENT_SECONDS, CROSSFADE_SECONDS, out_dir)
}

pub fn build_dataset_with(
    library: &ClipLibrary,
    n_segments: usize,
    seed: u64,
    duration: f64,
    crossfade: f64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if n_segments == 0 {
        return Err(Error::InvalidArgument("n_segments must be at least 1".into()));
    }
    let out_dir = out_dir.as_ref();
    let seg_dir = out_dir.join("segments");
    std::fs::create_dir_all(&seg_dir).map_err(|e| Error::io(&seg_dir, e))?;

    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut plans = Vec::with_capacity(n_segments);
    for index in 0..n_segments {
        let mut rng = segment_rng(seed, index);
        let mut accepted = None;
        for _ in 0..DEDUP_RETRIES {
            let plan = plan_segment(library, &mut rng, duration, crossfade)?;
            if seen.insert(plan.clip_ids.clone()) {
                accepted = Some(plan);
                break;
            }
        }
        plans.push(accepted.ok_or(Error::RetryExhausted {
            segment: index,
            attempts: DEDUP_RETRIES,
        })?);
    }

    let n_frames = (duration / FRAME_SECONDS).round() as usize;
    let vocabulary = library.vocabulary();
    let segments = plans
        .par_iter()
        .enumerate()
        .map(|(index, plan)| {
            let stem = format!("seg_{index:05}");
            let record = SegmentRecord {
                audio: format!("segments/{stem}.wav"),
                annotation: format!("segments/{stem}.jsonl"),
                frame_labels: format!("segments/{stem}.labels.csv"),
                clip_ids: plan.clip_ids.clone(),
            };
            let audio = render_segment(library, plan, duration, crossfade)?;
            write_wav(out_dir.join(&record.audio), &audio)?;
            plan.annotation
                .write_jsonl(out_dir.join(&record.annotation), vocabulary)?;
            events_to_frame_labels(&plan.annotation, FRAME_SECONDS, n_frames)?
                .write_csv(out_dir.join(&record.frame_labels))?;
            Ok(record)
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        seed,
        segment_seconds: duration,
        crossfade_seconds: crossfade,
        vocabulary: vocabulary.clone(),
        segments,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SAMPLE_RATE;

    fn constant(len: usize, v: f32) -> AudioClip {
        AudioClip::new(vec![v; len], SAMPLE_RATE).unwrap()
    }

    fn vocab4() -> TechniqueVocabulary {
        TechniqueVocabulary::from_labels(["slide", "staccato", "trill", "other"]).unwrap()
    }

    fn library(clips: Vec<(AudioClip, usize)>) -> ClipLibrary {
        let entries = clips
            .into_iter()
            .enumerate()
            .map(|(i, (clip, label))| LibraryEntry {
                clip,
                label,
                source: format!("clip{i}"),
            })
            .collect();
        ClipLibrary::new(entries, vocab4()).unwrap()
    }

    #[test]
    fn crossfade_length() {
        let out = crossfade_concat(&constant(44_100, 0.1), &constant(44_100, 0.2), 0.05).unwrap();
        assert_eq!(out.len(), 44_100 + 44_100 - 2205);
        assert_eq!(out.len(), 85_995);
    }

    #[test]
    fn zero_overlap_is_concatenation() {
        let a = AudioClip::new(vec![0.1, 0.2], SAMPLE_RATE).unwrap();
        let b = AudioClip::new(vec![0.3], SAMPLE_RATE).unwrap();
        assert_eq!(crossfade_concat(&a, &b, 0.0).unwrap().samples(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn constant_clips_stay_constant() {
        let out = crossfade_concat(&constant(4410, 0.5), &constant(4410, 0.5), 0.05).unwrap();
        assert!(out.samples().iter().all(|&s| s == 0.5));
    }

    #[test]
    fn overlap_longer_than_clip() {
        assert!(crossfade_concat(&constant(100, 0.0), &constant(44_100, 0.0), 0.05).is_err());
        assert!(crossfade_concat(&constant(44_100, 0.0), &constant(100, 0.0), 0.05).is_err());
    }

    #[test]
    fn ramps_sum_to_one_exactly() {
        for n in [1usize, 2, 3, 7, 2205, 4410] {
            for j in 0..n {
                let g = fade_in(j, n);
                assert!((0.0..=1.0).contains(&g));
                assert_eq!((1.0 - g) + g, 1.0, "n={n} j={j}");
            }
        }
    }

    #[test]
    fn single_long_clip_is_trimmed() {
        let lib = library(vec![(constant(12 * 44_100, 0.25), 2)]);
        let seg = synthesize_segment(&lib, &mut segment_rng(0, 0), 10.0, 0.05).unwrap();
        assert_eq!(seg.audio.len(), 441_000);
        assert_eq!(seg.clip_ids, vec![0]);
        assert_eq!(
            seg.annotation.events(),
            &[Event { onset: 0.0, offset: 10.0, label: 2 }]
        );
    }

    #[test]
    fn two_six_second_clips() {
        // Same clip twice keeps the draw deterministic regardless of the RNG.
        let lib = library(vec![(constant(6 * 44_100, 0.25), 1)]);
        let seg = synthesize_segment(&lib, &mut segment_rng(3, 0), 10.0, 0.05).unwrap();
        assert_eq!(seg.audio.len(), 441_000);
        let ev = seg.annotation.events();
        assert_eq!(ev.len(), 2);
        // overlap spans samples [262395, 264600), midpoint 263497.5 = 5.975 s
        assert!((ev[0].offset - 5.975).abs() < 1e-12);
        assert!((ev[1].onset - 5.975).abs() < 1e-12);
        assert_eq!(ev[1].offset, 10.0);
    }

    #[test]
    fn segments_always_full_length() {
        let lib = library(vec![
            (constant(4410 * 3, 0.1), 0),
            (constant(4410 * 7, -0.1), 1),
            (constant(4410 * 15, 0.2), 2),
        ]);
        for i in 0..20 {
            let seg = synthesize_segment(&lib, &mut segment_rng(11, i), 10.0, 0.05).unwrap();
            assert_eq!(seg.audio.len(), 441_000);
            let labels = events_to_frame_labels(&seg.annotation, 0.05, 200).unwrap();
            assert_eq!(labels.len(), 200);
            assert_eq!(seg.annotation.end(), 10.0);
        }
    }

    #[test]
    fn library_validation() {
        assert!(matches!(ClipLibrary::new(vec![], vocab4()), Err(Error::EmptyLibrary)));
        let short = LibraryEntry { clip: constant(100, 0.0), label: 0, source: "s".into() };
        assert!(ClipLibrary::new(vec![short], vocab4()).is_err());
        let bad_label = LibraryEntry { clip: constant(4410, 0.0), label: 9, source: "s".into() };
        assert!(ClipLibrary::new(vec![bad_label], vocab4()).is_err());
    }

    #[test]
    fn pigeonhole_exhausts_retries() {
        let lib = library(vec![(constant(44_100, 0.1), 0)]);
        let dir = tempfile::tempdir().unwrap();
        let err = build_dataset(&lib, 2, 0, dir.path()).unwrap_err();
        assert!(matches!(err, Error::RetryExhausted { segment: 1, .. }), "{err}");
    }
}
