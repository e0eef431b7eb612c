//! End-to-end restoration: two-stem split, speech extraction, mixed-music
//! separation and video-music matching, in that order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{save_wav, AudioClip, WavEncoding};
use crate::dataset::{with_workers, MixEntry, MixManifest};
use crate::error::{Error, Result};
use crate::matching::{load_frames, match_clips, motion_features, Choice, FrameSequence, MatchOutcome, MatcherModel};
use crate::metrics::{DIALOGUE_FILE, RESTORED_FILE};
use crate::separation::{
    detect_speech, extract_speech, separate_mixed_music, separate_two_stem, MaskModel, StemBackend,
};
use crate::spectral::ANALYSIS_RATE;

pub const REPORT_FILE: &str = "report.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub analysis_rate_hz: u32,
    pub backend: StemBackend,
    pub mask_model: PathBuf,
    pub matcher_model: PathBuf,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub seed: u64,
    pub keep_intermediates: bool,
}

impl PipelineConfig {
    pub fn new(mask_model: PathBuf, matcher_model: PathBuf, output_dir: PathBuf) -> Self {
        PipelineConfig {
            analysis_rate_hz: ANALYSIS_RATE,
            backend: StemBackend::Builtin,
            mask_model,
            matcher_model,
            output_dir,
            workers: 1,
            seed: 0,
            keep_intermediates: false,
        }
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub two_stem_ms: f64,
    pub speech_ms: f64,
    pub mixed_music_ms: f64,
    pub matching_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    fn add(&mut self, o: &StageTimings) {
        self.two_stem_ms += o.two_stem_ms;
        self.speech_ms += o.speech_ms;
        self.mixed_music_ms += o.mixed_music_ms;
        self.matching_ms += o.matching_ms;
        self.total_ms += o.total_ms;
    }
}

/// Which mixed-music separator output was kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chosen {
    OstCandidate,
    BgmCandidate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRun {
    pub restored: AudioClip,
    pub dialogue: AudioClip,
    pub vocals: AudioClip,
    pub accompaniment: AudioClip,
    pub ost_candidate: AudioClip,
    pub bgm_candidate: AudioClip,
    pub speech_secs: f64,
    pub outcome: MatchOutcome,
    pub timings: StageTimings,
}

impl ClipRun {
    pub fn chosen(&self) -> Chosen {
        match self.outcome.choice {
            Choice::A => Chosen::OstCandidate,
            Choice::B => Chosen::BgmCandidate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub status: ClipStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<Chosen>,
    /// Both candidates were equally far from the video.
    #[serde(default)]
    pub tie: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_ost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_bgm: Option<f64>,
    /// `distance_bgm - distance_ost`; small values mean a weak decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_gap: Option<f64>,
    #[serde(default)]
    pub speech_secs: f64,
    #[serde(default)]
    pub input_samples: usize,
    #[serde(default)]
    pub output_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
    /// Stem name to path relative to the output directory.
    #[serde(default)]
    pub outputs: BTreeMap<String, String>,
}

impl ClipRecord {
    fn failed(clip_id: &str, err: &Error) -> Self {
        ClipRecord {
            clip_id: clip_id.to_string(),
            status: ClipStatus::Failed,
            error: Some(err.to_string()),
            chosen: None,
            tie: false,
            distance_ost: None,
            distance_bgm: None,
            distance_gap: None,
            speech_secs: 0.0,
            input_samples: 0,
            output_samples: 0,
            timings: None,
            outputs: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AggregateLine {
    aggregate: StageTimings,
    clips_ok: usize,
    clips_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineReport {
    pub clips: Vec<ClipRecord>,
    pub aggregate: StageTimings,
}

impl PipelineReport {
    pub fn from_clips(clips: Vec<ClipRecord>) -> Self {
        let mut aggregate = StageTimings::default();
        for t in clips.iter().filter_map(|c| c.timings.as_ref()) {
            aggregate.add(t);
        }
        PipelineReport { clips, aggregate }
    }

    pub fn failures(&self) -> usize {
        self.clips.iter().filter(|c| c.status == ClipStatus::Failed).count()
    }

    /// The same report with every wall-time field cleared.
    pub fn without_timings(&self) -> Self {
        let clips = self
            .clips
            .iter()
            .map(|c| ClipRecord {
                timings: None,
                ..c.clone()
            })
            .collect();
        PipelineReport {
            clips,
            aggregate: StageTimings::default(),
        }
    }

    /// One record per clip, then one aggregate line.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for c in &self.clips {
            writeln!(out, "{}", serde_json::to_string(c).expect("records serialize"))?;
        }
        let agg = AggregateLine {
            aggregate: self.aggregate,
            clips_ok: self.clips.len() - self.failures(),
            clips_failed: self.failures(),
        };
        writeln!(out, "{}", serde_json::to_string(&agg).expect("records serialize"))
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut clips = Vec::new();
        let mut aggregate = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(a) = serde_json::from_str::<AggregateLine>(&line) {
                aggregate = Some(a.aggregate);
                continue;
            }
            clips.push(serde_json::from_str(&line).map_err(|e| Error::Manifest(format!("line {}: {e}", i + 1)))?);
        }
        let aggregate = aggregate.ok_or_else(|| Error::Manifest("report has no aggregate line".into()))?;
        Ok(PipelineReport { clips, aggregate })
    }
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Models are loaded once and shared read-only by all workers.
pub struct Pipeline {
    cfg: PipelineConfig,
    mask: MaskModel,
    matcher: MatcherModel,
}

impl Pipeline {
    pub fn load(cfg: PipelineConfig) -> Result<Self> {
        let mask = MaskModel::load(&cfg.mask_model)?;
        let matcher = MatcherModel::load(&cfg.matcher_model)?;
        Self::with_models(cfg, mask, matcher)
    }

    pub fn with_models(cfg: PipelineConfig, mask: MaskModel, matcher: MatcherModel) -> Result<Self> {
        if cfg.analysis_rate_hz != ANALYSIS_RATE {
            return Err(Error::InvalidInput(format!(
                "analysis rate must be {ANALYSIS_RATE} Hz, got {}",
                cfg.analysis_rate_hz
            )));
        }
        Ok(Pipeline { cfg, mask, matcher })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Restores one clip. The input must be at the analysis rate.
    pub fn run_clip(&self, input: &AudioClip, frames: &FrameSequence) -> Result<ClipRun> {
        if input.sample_rate() != self.cfg.analysis_rate_hz {
            return Err(Error::InvalidInput(format!(
                "expected {} Hz input, got {} Hz",
                self.cfg.analysis_rate_hz,
                input.sample_rate()
            )));
        }
        let start = Instant::now();
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let stems = separate_two_stem(input, &self.cfg.backend)?;
        timings.two_stem_ms = elapsed_ms(t);

        let t = Instant::now();
        let segments = detect_speech(&stems.vocals)?;
        let dialogue = extract_speech(&stems.vocals, &segments)?;
        timings.speech_ms = elapsed_ms(t);

        let t = Instant::now();
        let music = separate_mixed_music(&stems.accompaniment, &self.mask)?;
        timings.mixed_music_ms = elapsed_ms(t);

        let t = Instant::now();
        let motion = motion_features(frames);
        let outcome = match_clips(frames, &motion, &music.ost, &music.bgm, &self.matcher)?;
        timings.matching_ms = elapsed_ms(t);

        let chosen = match outcome.choice {
            Choice::A => &music.ost,
            Choice::B => &music.bgm,
        };
        let channels = (0..input.num_channels())
            .map(|c| {
                let d = dialogue.channel(c.min(dialogue.num_channels() - 1));
                let m = chosen.channel(c.min(chosen.num_channels() - 1));
                d.iter().zip(m).map(|(a, b)| a + b).collect()
            })
            .collect();
        let restored = AudioClip::new(channels, input.sample_rate())?;
        if restored.len() != input.len() {
            return Err(Error::ShapeMismatch(format!(
                "restored length {} differs from input length {}",
                restored.len(),
                input.len()
            )));
        }
        timings.total_ms = elapsed_ms(start);
        Ok(ClipRun {
            restored,
            dialogue,
            vocals: stems.vocals,
            accompaniment: stems.accompaniment,
            ost_candidate: music.ost,
            bgm_candidate: music.bgm,
            speech_secs: segments.total_duration(),
            outcome,
            timings,
        })
    }

    fn write_outputs(&self, clip_id: &str, run: &ClipRun) -> Result<BTreeMap<String, String>> {
        let dir = self.cfg.output_dir.join(clip_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut stems = vec![("restored", RESTORED_FILE, &run.restored), ("dialogue", DIALOGUE_FILE, &run.dialogue)];
        if self.cfg.keep_intermediates {
            stems.extend([
                ("vocals", "vocals.wav", &run.vocals),
                ("accompaniment", "accompaniment.wav", &run.accompaniment),
                ("ost_candidate", "ost_candidate.wav", &run.ost_candidate),
                ("bgm_candidate", "bgm_candidate.wav", &run.bgm_candidate),
            ]);
        }
        let mut outputs = BTreeMap::new();
        for (name, file, clip) in stems {
            save_wav(clip, dir.join(file), WavEncoding::Float32)?;
            outputs.insert(name.to_string(), format!("{clip_id}/{file}"));
        }
        Ok(outputs)
    }

    fn process_entry(&self, entry: &MixEntry, root: &Path) -> Result<ClipRecord> {
        let input = crate::audio::load_wav(root.join(&entry.mixture))?;
        let frames_dir = entry
            .frames_dir
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("{} has no frame directory", entry.clip_id)))?;
        let frames = load_frames(root.join(frames_dir))?;
        let run = self.run_clip(&input, &frames)?;
        let outputs = self.write_outputs(&entry.clip_id, &run)?;
        Ok(ClipRecord {
            clip_id: entry.clip_id.clone(),
            status: ClipStatus::Ok,
            error: None,
            chosen: Some(run.chosen()),
            tie: run.outcome.tie,
            distance_ost: Some(run.outcome.distance_a),
            distance_bgm: Some(run.outcome.distance_b),
            distance_gap: Some(run.outcome.distance_b - run.outcome.distance_a),
            speech_secs: run.speech_secs,
            input_samples: input.len(),
            output_samples: run.restored.len(),
            timings: Some(run.timings),
            outputs,
        })
    }

    /// Runs every manifest entry on a bounded pool, writes
    /// `<output_dir>/<clip_id>/*.wav` and `<output_dir>/report.jsonl`.
    /// A failing clip gets a failure record; the others still run.
    pub fn run_manifest(&self, manifest: &MixManifest, root: &Path) -> Result<PipelineReport> {
        fs::create_dir_all(&self.cfg.output_dir).map_err(|e| Error::io(&self.cfg.output_dir, e))?;
        let records = with_workers(self.cfg.workers, || {
            manifest
                .entries
                .par_iter()
                .map(|e| {
                    self.process_entry(e, root).unwrap_or_else(|err| {
                        log::warn!("{}: {err}", e.clip_id);
                        ClipRecord::failed(&e.clip_id, &err)
                    })
                })
                .collect::<Vec<_>>()
        })?;
        let report = PipelineReport::from_clips(records);
        let path = self.cfg.output_dir.join(REPORT_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = std::io::BufWriter::new(file);
        report.write_jsonl(&mut out).map_err(|e| Error::io(&path, e))?;
        out.flush().map_err(|e| Error::io(&path, e))?;
        Ok(report)
    }
}
