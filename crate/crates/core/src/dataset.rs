//! Deterministic synthesis of mixture datasets and overlay benchmarks.
//!
//! Sources are cut into 4 s segments at 16 kHz, each normalised to
//! -23 LUFS and stored as float32; a mixture is the float32 sum of its two
//! stored stems, so `mixture == ost + bgm` holds exactly after reloading.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, resample, save_wav, segment, to_mono, AudioClip, WavEncoding};
use crate::error::{Error, Result};
use crate::loudness::{measure_integrated_lufs, normalize_to, TARGET_LUFS};
use crate::spectral::ANALYSIS_RATE;

pub const CLIP_SECS: f64 = 4.0;
pub const MAX_SEGMENTS_PER_TRACK: usize = 10;
pub const FRAMES_PER_CLIP: usize = 4;
const LOUDNESS_TOLERANCE_LU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackKind {
    Ost,
    Bgm,
    VideoAudio,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackSource {
    pub id: String,
    pub kind: TrackKind,
    pub path: PathBuf,
}

/// Lists the `.wav` files of `dir` in name order; ids are the file stems.
pub fn scan_tracks(dir: &Path, kind: TrackKind) -> Result<Vec<TrackSource>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut tracks = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_wav = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if path.is_file() && is_wav {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::InvalidInput(format!("non UTF-8 file name {}", path.display())))?
                .to_string();
            tracks.push(TrackSource { id, kind, path });
        }
    }
    tracks.sort_by(|a, b| a.id.cmp(&b.id));
    for pair in tracks.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::InvalidInput(format!("duplicate track id {}", pair[0].id)));
        }
    }
    if tracks.is_empty() {
        return Err(Error::InvalidInput(format!("no .wav tracks in {}", dir.display())));
    }
    Ok(tracks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManifestKind {
    Mixture,
    Overlay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub kind: ManifestKind,
    pub seed: u64,
    pub clip_len_s: f64,
    pub target_lufs: f64,
    pub sample_rate_hz: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixEntry {
    pub clip_id: String,
    pub ost_track_id: String,
    pub ost_segment_index: usize,
    pub bgm_track_id: String,
    pub bgm_segment_index: usize,
    pub split: Split,
    /// Paths relative to the manifest's directory.
    pub mixture: String,
    pub ost_ref: String,
    pub bgm_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames_dir: Option<String>,
}

/// A header line followed by one record per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MixManifest {
    pub header: ManifestHeader,
    pub entries: Vec<MixEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl MixManifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serialises");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                None => return Err(Error::Manifest("empty manifest".into())),
                Some((i, line)) => {
                    let line = line.map_err(|e| Error::Manifest(e.to_string()))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str::<ManifestHeader>(&line)
                        .map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?;
                }
            }
        };
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::Manifest(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            entries.push(
                serde_json::from_str(&line).map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?,
            );
        }
        Ok(MixManifest { header, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::from_reader(BufReader::new(file))
    }

    /// Loads `manifest.jsonl` from a dataset directory, or a manifest
    /// file given directly. Returns the manifest and its root directory.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, PathBuf)> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::load(&file)?, root))
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let count = |s| self.entries.iter().filter(|e| e.split == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }
}

/// `(train, val, test)` sizes: val and test get `floor(n / 10)` each.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let tenth = n / 10;
    (n - 2 * tenth, tenth, tenth)
}

pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Rounds every sample to the nearest float32 value.
fn quantize_f32(clip: &AudioClip) -> AudioClip {
    clip.map(|v| v as f32 as f64)
}

/// The float32 sum of two float32-exact clips.
fn sum_f32(a: &AudioClip, b: &AudioClip) -> Result<AudioClip> {
    let channels = a
        .channels()
        .iter()
        .zip(b.channels())
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| (p as f32 + q as f32) as f64).collect())
        .collect();
    AudioClip::new(channels, a.sample_rate())
}

fn load_analysis_mono(path: &Path) -> Result<AudioClip> {
    resample(&to_mono(&load_wav(path)?), ANALYSIS_RATE)
}

/// Normalises to the target loudness and quantises; `None` when silent.
fn prepare_segment(seg: &AudioClip, what: &str) -> Result<Option<AudioClip>> {
    match normalize_to(seg, TARGET_LUFS) {
        Ok((clip, _)) => Ok(Some(quantize_f32(&clip))),
        Err(Error::Unmeasurable) => {
            warn!("skipping {what}: below the loudness gate");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

struct Segment {
    track_id: String,
    index: usize,
    clip: AudioClip,
}

fn segment_tracks(tracks: &[TrackSource]) -> Result<Vec<Segment>> {
    let per_track: Vec<Result<Vec<Segment>>> = tracks
        .par_iter()
        .map(|t| {
            let audio = load_analysis_mono(&t.path)?;
            let mut out = Vec::new();
            for (index, seg) in segment(&audio, CLIP_SECS, MAX_SEGMENTS_PER_TRACK)?.iter().enumerate() {
                if let Some(clip) = prepare_segment(seg, &format!("{} segment {index}", t.id))? {
                    out.push(Segment { track_id: t.id.clone(), index, clip });
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_track {
        all.extend(r?);
    }
    Ok(all)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn header(kind: ManifestKind, seed: u64) -> ManifestHeader {
    ManifestHeader {
        kind,
        seed,
        clip_len_s: CLIP_SECS,
        target_lufs: TARGET_LUFS,
        sample_rate_hz: ANALYSIS_RATE,
    }
}

fn write_triplet(out_dir: &Path, entry: &MixEntry, ost: &AudioClip, bgm: &AudioClip) -> Result<()> {
    let mixture = sum_f32(ost, bgm)?;
    save_wav(&mixture, out_dir.join(&entry.mixture), WavEncoding::Float32)?;
    save_wav(ost, out_dir.join(&entry.ost_ref), WavEncoding::Float32)?;
    save_wav(bgm, out_dir.join(&entry.bgm_ref), WavEncoding::Float32)
}

fn stem_paths(clip_id: &str) -> (String, String, String) {
    (
        format!("mixtures/{clip_id}.wav"),
        format!("ost/{clip_id}.wav"),
        format!("bgm/{clip_id}.wav"),
    )
}

/// Builds `n_mixtures` random OST + BGM mixtures into `out_dir` and writes
/// `manifest.jsonl` there.
pub fn build_separation_dataset(
    ost_dir: &Path,
    bgm_dir: &Path,
    n_mixtures: usize,
    seed: u64,
    out_dir: &Path,
    workers: usize,
) -> Result<MixManifest> {
    let ost_tracks = scan_tracks(ost_dir, TrackKind::Ost)?;
    let bgm_tracks = scan_tracks(bgm_dir, TrackKind::Bgm)?;
    if n_mixtures == 0 {
        return Err(Error::InvalidInput("asked for zero mixtures".into()));
    }
    with_workers(workers, || {
        let ost = segment_tracks(&ost_tracks)?;
        let bgm = segment_tracks(&bgm_tracks)?;
        if ost.is_empty() || bgm.is_empty() {
            return Err(Error::InvalidInput(
                "need at least one measurable 4 s segment of each source kind".into(),
            ));
        }
        info!("{} OST and {} BGM segments", ost.len(), bgm.len());

        // All randomness is drawn here, before any parallel work.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(usize, usize)> = (0..n_mixtures)
            .map(|_| (rng.gen_range(0..ost.len()), rng.gen_range(0..bgm.len())))
            .collect();
        let mut order: Vec<usize> = (0..n_mixtures).collect();
        order.shuffle(&mut rng);
        let (_, n_val, n_test) = split_sizes(n_mixtures);
        let mut splits = vec![Split::Train; n_mixtures];
        for (rank, &i) in order.iter().enumerate() {
            if rank < n_val {
                splits[i] = Split::Val;
            } else if rank < n_val + n_test {
                splits[i] = Split::Test;
            }
        }

        let entries: Vec<MixEntry> = pairs
            .iter()
            .zip(&splits)
            .enumerate()
            .map(|(i, (&(o, b), &split))| {
                let clip_id = format!("mix{i:05}");
                let (mixture, ost_ref, bgm_ref) = stem_paths(&clip_id);
                MixEntry {
                    clip_id,
                    ost_track_id: ost[o].track_id.clone(),
                    ost_segment_index: ost[o].index,
                    bgm_track_id: bgm[b].track_id.clone(),
                    bgm_segment_index: bgm[b].index,
                    split,
                    mixture,
                    ost_ref,
                    bgm_ref,
                    frames_dir: None,
                }
            })
            .collect();

        for sub in ["mixtures", "ost", "bgm"] {
            create_dir(&out_dir.join(sub))?;
        }
        entries
            .par_iter()
            .zip(&pairs)
            .try_for_each(|(entry, &(o, b))| write_triplet(out_dir, entry, &ost[o].clip, &bgm[b].clip))?;

        let manifest = MixManifest {
            header: header(ManifestKind::Mixture, seed),
            entries,
        };
        manifest.save(out_dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    })?
}

/// Lists the PGM frames of a directory in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut frames: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    frames.sort();
    Ok(frames)
}

struct OverlayClip {
    entry: MixEntry,
    ost: AudioClip,
    bgm: AudioClip,
    frames: Vec<PathBuf>,
}

/// Overlays a randomly chosen, long-enough BGM track on every video-audio
/// track, cuts the pair into 4 s clips, and links each clip to its four
/// frames. Every entry is assigned to the test split.
pub fn build_overlay_benchmark(
    video_audio_dir: &Path,
    bgm_dir: &Path,
    frames_root: &Path,
    seed: u64,
    out_dir: &Path,
    workers: usize,
) -> Result<MixManifest> {
    let videos = scan_tracks(video_audio_dir, TrackKind::VideoAudio)?;
    let bgm_tracks = scan_tracks(bgm_dir, TrackKind::Bgm)?;
    for v in &videos {
        let dir = frames_root.join(&v.id);
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir));
        }
    }
    with_workers(workers, || {
        let load_all = |tracks: &[TrackSource]| -> Result<Vec<AudioClip>> {
            tracks.par_iter().map(|t| load_analysis_mono(&t.path)).collect()
        };
        let video_audio = load_all(&videos)?;
        let bgm_audio = load_all(&bgm_tracks)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairing = Vec::with_capacity(videos.len());
        for (v, audio) in videos.iter().zip(&video_audio) {
            let eligible: Vec<usize> = (0..bgm_tracks.len())
                .filter(|&b| bgm_audio[b].len() >= audio.len())
                .collect();
            let &b = eligible.choose(&mut rng).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "no BGM track is at least as long as {} ({:.2} s)",
                    v.id,
                    audio.duration_secs()
                ))
            })?;
            pairing.push(b);
        }

        let per_video: Vec<Result<Vec<OverlayClip>>> = (0..videos.len())
            .into_par_iter()
            .map(|vi| {
                let v = &videos[vi];
                let b = pairing[vi];
                let audio = &video_audio[vi];
                let bgm_full = bgm_audio[b].slice(0, audio.len())?;
                let frames = list_frames(&frames_root.join(&v.id))?;
                let v_segs = segment(audio, CLIP_SECS, usize::MAX)?;
                let b_segs = segment(&bgm_full, CLIP_SECS, usize::MAX)?;
                let mut out = Vec::new();
                for (j, (vs, bs)) in v_segs.iter().zip(&b_segs).enumerate() {
                    let clip_frames = frames.get(j * FRAMES_PER_CLIP..(j + 1) * FRAMES_PER_CLIP);
                    let Some(clip_frames) = clip_frames else {
                        warn!("{} segment {j}: not enough frames, skipped", v.id);
                        continue;
                    };
                    let what = format!("{} segment {j}", v.id);
                    let (Some(ost), Some(bgm)) = (prepare_segment(vs, &what)?, prepare_segment(bs, &what)?) else {
                        continue;
                    };
                    out.push(OverlayClip {
                        entry: MixEntry {
                            clip_id: String::new(),
                            ost_track_id: v.id.clone(),
                            ost_segment_index: j,
                            bgm_track_id: bgm_tracks[b].id.clone(),
                            bgm_segment_index: j,
                            split: Split::Test,
                            mixture: String::new(),
                            ost_ref: String::new(),
                            bgm_ref: String::new(),
                            frames_dir: None,
                        },
                        ost,
                        bgm,
                        frames: clip_frames.to_vec(),
                    });
                }
                Ok(out)
            })
            .collect();
        let mut clips = Vec::new();
        for r in per_video {
            clips.extend(r?);
        }
        if clips.is_empty() {
            return Err(Error::InvalidInput("no usable 4 s overlay clips".into()));
        }
        for (i, c) in clips.iter_mut().enumerate() {
            let clip_id = format!("ovl{i:05}");
            let (mixture, ost_ref, bgm_ref) = stem_paths(&clip_id);
            c.entry.frames_dir = Some(format!("frames/{clip_id}"));
            c.entry.mixture = mixture;
            c.entry.ost_ref = ost_ref;
            c.entry.bgm_ref = bgm_ref;
            c.entry.clip_id = clip_id;
        }

        for sub in ["mixtures", "ost", "bgm", "frames"] {
            create_dir(&out_dir.join(sub))?;
        }
        clips.par_iter().try_for_each(|c| -> Result<()> {
            write_triplet(out_dir, &c.entry, &c.ost, &c.bgm)?;
            let dir = out_dir.join(c.entry.frames_dir.as_deref().expect("set above"));
            create_dir(&dir)?;
            for (k, src) in c.frames.iter().enumerate() {
                let dst = dir.join(format!("frame_{k}.pgm"));
                fs::copy(src, &dst).map_err(|e| Error::io(&dst, e))?;
            }
            Ok(())
        })?;

        let manifest = MixManifest {
            header: header(ManifestKind::Overlay, seed),
            entries: clips.into_iter().map(|c| c.entry).collect(),
        };
        manifest.save(out_dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    })?
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    MissingFile { clip_id: String, path: PathBuf },
    Unreadable { clip_id: String, path: PathBuf, reason: String },
    WrongLength { clip_id: String, path: PathBuf, samples: usize, expected: usize },
    Loudness { clip_id: String, path: PathBuf, lufs: f64 },
    SplitRatio { actual: (usize, usize, usize), expected: (usize, usize, usize) },
    DuplicateClipId(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingFile { clip_id, path } => write!(f, "{clip_id}: missing {}", path.display()),
            Violation::Unreadable { clip_id, path, reason } => {
                write!(f, "{clip_id}: cannot read {}: {reason}", path.display())
            }
            Violation::WrongLength { clip_id, path, samples, expected } => write!(
                f,
                "{clip_id}: {} has {samples} samples, expected {expected}",
                path.display()
            ),
            Violation::Loudness { clip_id, path, lufs } => {
                write!(f, "{clip_id}: {} measures {lufs:.2} LUFS", path.display())
            }
            Violation::SplitRatio { actual, expected } => write!(
                f,
                "split sizes {}/{}/{} differ from expected {}/{}/{}",
                actual.0, actual.1, actual.2, expected.0, expected.1, expected.2
            ),
            Violation::DuplicateClipId(id) => write!(f, "duplicate clip id {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_entry(entry: &MixEntry, root: &Path, header: &ManifestHeader) -> Vec<Violation> {
    let expected = (header.clip_len_s * header.sample_rate_hz as f64).round() as usize;
    let mut out = Vec::new();
    for (rel, is_reference) in [(&entry.mixture, false), (&entry.ost_ref, true), (&entry.bgm_ref, true)] {
        let path = root.join(rel);
        if !path.is_file() {
            out.push(Violation::MissingFile { clip_id: entry.clip_id.clone(), path });
            continue;
        }
        let clip = match load_wav(&path) {
            Ok(c) => c,
            Err(e) => {
                out.push(Violation::Unreadable {
                    clip_id: entry.clip_id.clone(),
                    path,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if clip.len() != expected || clip.sample_rate() != header.sample_rate_hz {
            out.push(Violation::WrongLength {
                clip_id: entry.clip_id.clone(),
                path,
                samples: clip.len(),
                expected,
            });
            continue;
        }
        if is_reference {
            let lufs = measure_integrated_lufs(&clip)
                .ok()
                .filter(|r| r.is_measurable)
                .map_or(f64::NEG_INFINITY, |r| r.integrated_lufs);
            if (lufs - header.target_lufs).abs() > LOUDNESS_TOLERANCE_LU || !lufs.is_finite() {
                out.push(Violation::Loudness { clip_id: entry.clip_id.clone(), path, lufs });
            }
        }
    }
    if let Some(dir) = &entry.frames_dir {
        let path = root.join(dir);
        let found = list_frames(&path).map(|f| f.len()).unwrap_or(0);
        if found < FRAMES_PER_CLIP {
            out.push(Violation::MissingFile { clip_id: entry.clip_id.clone(), path });
        }
    }
    out
}

/// Checks files, lengths, reference loudness, split sizes and id
/// uniqueness. Source tracks shared across splits produce a warning.
pub fn validate_manifest(manifest: &MixManifest, root: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.clip_id.as_str()) {
            report.violations.push(Violation::DuplicateClipId(e.clip_id.clone()));
        }
    }
    let per_entry: Vec<Vec<Violation>> = manifest
        .entries
        .par_iter()
        .map(|e| check_entry(e, root, &manifest.header))
        .collect();
    report.violations.extend(per_entry.into_iter().flatten());

    let actual = manifest.split_counts();
    let n = manifest.entries.len();
    let expected = match manifest.header.kind {
        ManifestKind::Mixture => split_sizes(n),
        ManifestKind::Overlay => (0, 0, n),
    };
    if actual != expected {
        report.violations.push(Violation::SplitRatio { actual, expected });
    }

    let mut splits_of: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for e in &manifest.entries {
        splits_of.entry(&e.ost_track_id).or_default().insert(e.split);
        splits_of.entry(&e.bgm_track_id).or_default().insert(e.split);
    }
    let leaking: Vec<&str> = splits_of
        .iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(id, _)| *id)
        .collect();
    if !leaking.is_empty() {
        report.warnings.push(format!(
            "{} source tracks appear in more than one split (e.g. {})",
            leaking.len(),
            leaking[0]
        ));
    }
    report
}

/// Writes a text summary of `report`, one line per finding.
pub fn write_report(report: &ValidationReport, mut out: impl Write) -> std::io::Result<()> {
    for v in &report.violations {
        writeln!(out, "violation: {v}")?;
    }
    for w in &report.warnings {
        writeln!(out, "warning: {w}")?;
    }
    writeln!(out, "{} violations, {} warnings", report.violations.len(), report.warnings.len())
}
