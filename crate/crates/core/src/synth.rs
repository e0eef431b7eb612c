//! Synthetic desk corpora: pulsed harmonic "OST" tracks, percussive "BGM"
//! tracks, dialogue-like bursts, and texture videos whose motion speed
//! encodes the OST tempo.
//!
//! OST tempi and BGM tempi come from disjoint sets, so a video's motion
//! always agrees with its own soundtrack and never with an overlaid BGM.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::audio::{save_wav, AudioClip, WavEncoding};
use crate::error::{Error, Result};
use crate::matching::{save_pgm, Raster, FRAME_SIZE};

pub const SYNTH_RATE: u32 = 16_000;
/// Tempo of OST class `c`; videos of class `c` move `c + 1` px per second.
pub const OST_TEMPI_BPM: [f64; 4] = [60.0, 80.0, 100.0, 128.0];
pub const BGM_TEMPI_BPM: [f64; 4] = [70.0, 90.0, 115.0, 140.0];
const SCALE_HZ: [f64; 8] = [130.8, 146.8, 164.8, 196.0, 220.0, 261.6, 293.7, 329.6];
const MAX_SHIFT_PX: usize = 4;

fn samples(secs: f64) -> usize {
    (secs * SYNTH_RATE as f64).round() as usize
}

fn beat_times(secs: f64, bpm: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let beat = 60.0 / bpm;
    let mut t = rng.gen_range(0.0..beat);
    let mut out = Vec::new();
    while t < secs {
        out.push(t);
        t += beat;
    }
    out
}

/// Pulsed harmonic notes on every beat over a quiet sustained pad.
pub fn ost_track(secs: f64, tempo_class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = samples(secs);
    let rate = SYNTH_RATE as f64;
    let bpm = OST_TEMPI_BPM[tempo_class % OST_TEMPI_BPM.len()];
    let beat = 60.0 / bpm;
    let mut x = vec![0.0; n];
    for t0 in beat_times(secs, bpm, rng) {
        let f0 = SCALE_HZ[rng.gen_range(0..SCALE_HZ.len())];
        let start = (t0 * rate) as usize;
        let len = ((beat * 1.5) * rate) as usize;
        for i in 0..len.min(n.saturating_sub(start)) {
            let t = i as f64 / rate;
            let env = (t / 0.015).min(1.0) * (-t / (0.45 * beat)).exp();
            let tone: f64 = (1..=6).map(|h| (2.0 * PI * f0 * h as f64 * t).sin() / h as f64).sum();
            x[start + i] += 0.3 * env * tone;
        }
    }
    let pad: Vec<f64> = (0..2).map(|_| SCALE_HZ[rng.gen_range(0..SCALE_HZ.len())] / 2.0).collect();
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / rate;
        let tremolo = 0.75 + 0.25 * (2.0 * PI * 0.2 * t).sin();
        *v += 0.05 * tremolo * pad.iter().map(|f| (2.0 * PI * f * t).sin()).sum::<f64>();
        *v += 0.003 * rng.gen_range(-1.0..1.0);
    }
    x
}

/// Kick on every beat, snare on alternate beats, hi-hat on the off-beats.
pub fn bgm_track(secs: f64, bpm: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = samples(secs);
    let rate = SYNTH_RATE as f64;
    let beat = 60.0 / bpm;
    let mut x = vec![0.0; n];
    let add = |x: &mut Vec<f64>, start: f64, len_s: f64, f: &mut dyn FnMut(f64) -> f64| {
        let s = (start * rate) as usize;
        for i in 0..((len_s * rate) as usize).min(n.saturating_sub(s)) {
            x[s + i] += f(i as f64 / rate);
        }
    };
    for (k, t0) in beat_times(secs, bpm, rng).into_iter().enumerate() {
        let mut phase = 0.0;
        add(&mut x, t0, 0.4, &mut |t| {
            phase += 2.0 * PI * (45.0 + 75.0 * (-t / 0.03).exp()) / rate;
            0.6 * (-t / 0.12).exp() * phase.sin()
        });
        if k % 2 == 1 {
            let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
            add(&mut x, t0, 0.3, &mut |t| 0.3 * (-t / 0.08).exp() * r.gen_range(-1.0..1.0));
        }
        let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut prev = 0.0;
        add(&mut x, t0 + beat / 2.0, 0.1, &mut |t| {
            let w = r.gen_range(-1.0..1.0);
            let hp = w - prev;
            prev = w;
            0.25 * (-t / 0.02).exp() * hp
        });
    }
    x
}

/// Voiced bursts with drifting pitch, moving formants and a syllable
/// envelope.
pub fn dialogue_track(secs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = samples(secs);
    let rate = SYNTH_RATE as f64;
    let mut x = vec![0.0; n];
    let mut t = rng.gen_range(0.2..1.0);
    while t < secs - 0.5 {
        let dur = rng.gen_range(0.8..1.6f64).min(secs - t);
        let f0 = rng.gen_range(120.0..200.0);
        let glide = rng.gen_range(-0.15..0.15);
        let start = (t * rate) as usize;
        let len = (dur * rate) as usize;
        let harmonics = (4000.0 / (f0 * 1.2)) as usize;
        let mut phases = vec![0.0; harmonics];
        let mut formants = (rng.gen_range(500.0..800.0), rng.gen_range(1200.0..2000.0));
        let syllable = (0.2 * rate) as usize;
        for i in 0..len.min(n - start) {
            if i % syllable == 0 {
                formants = (rng.gen_range(500.0..800.0), rng.gen_range(1200.0..2000.0));
            }
            let u = i as f64 / len as f64;
            let f = f0 * (1.0 + glide * u);
            let env = (PI * (i % syllable) as f64 / syllable as f64).sin().powi(2);
            let mut v = 0.0;
            for (h, ph) in phases.iter_mut().enumerate() {
                let fh = f * (h + 1) as f64;
                *ph += 2.0 * PI * fh / rate;
                let w = (-((fh - formants.0) / 200.0).powi(2)).exp() + 0.6 * (-((fh - formants.1) / 300.0).powi(2)).exp() + 0.05;
                v += w * ph.sin();
            }
            x[start + i] += 0.12 * env * v;
        }
        t += dur + rng.gen_range(0.5..2.0);
    }
    x
}

/// One frame per second of a texture drifting right by `tempo_class + 1`
/// pixels per second.
pub fn texture_frames(n_frames: usize, tempo_class: usize, rng: &mut ChaCha8Rng) -> Vec<Raster> {
    let speed = tempo_class % OST_TEMPI_BPM.len() + 1;
    let margin = n_frames * MAX_SHIFT_PX;
    let (w, h) = (FRAME_SIZE + margin, FRAME_SIZE);
    let noise: Vec<f64> = (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect();
    let gratings: Vec<(f64, f64, f64, f64)> = (0..8)
        .map(|_| (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.2..1.0)))
        .collect();
    let total: f64 = gratings.iter().map(|g| g.3).sum();
    let mut canvas = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut blur = 0.0;
            let mut count = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                        blur += noise[yy as usize * w + xx as usize];
                        count += 1.0;
                    }
                }
            }
            let wave: f64 = gratings
                .iter()
                .map(|&(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).cos())
                .sum::<f64>()
                / total;
            canvas[y * w + x] = (0.5 * (0.5 + 0.5 * wave) + 0.5 * blur / count).clamp(0.0, 1.0);
        }
    }
    (0..n_frames)
        .map(|s| {
            let offset = margin - s * speed;
            let data = (0..FRAME_SIZE * FRAME_SIZE)
                .map(|i| canvas[(i / FRAME_SIZE) * w + offset + i % FRAME_SIZE])
                .collect();
            Raster::new(FRAME_SIZE, FRAME_SIZE, data).expect("canvas values lie in [0, 1]")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub ost_tracks: usize,
    pub bgm_tracks: usize,
    pub track_secs: f64,
    pub videos: usize,
    pub video_secs: f64,
    /// BGM tracks for overlays; they last `video_secs + 2`.
    pub overlay_bgm_tracks: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            ost_tracks: 8,
            bgm_tracks: 8,
            track_secs: 40.0,
            videos: 8,
            video_secs: 16.0,
            overlay_bgm_tracks: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusLayout {
    pub ost_dir: PathBuf,
    pub bgm_dir: PathBuf,
    pub video_audio_dir: PathBuf,
    pub overlay_bgm_dir: PathBuf,
    pub frames_root: PathBuf,
}

fn item_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * (1 << 40));
    rng
}

fn write_mono(x: Vec<f64>, path: &Path) -> Result<()> {
    save_wav(&AudioClip::mono(x, SYNTH_RATE)?, path, WavEncoding::Float32)
}

/// Writes `ost/`, `bgm/`, `video_audio/`, `overlay_bgm/` and `frames/<id>/`
/// under `out`. Output depends only on `cfg` and `seed`.
pub fn generate_corpus(out: &Path, cfg: &CorpusConfig, seed: u64) -> Result<CorpusLayout> {
    let layout = CorpusLayout {
        ost_dir: out.join("ost"),
        bgm_dir: out.join("bgm"),
        video_audio_dir: out.join("video_audio"),
        overlay_bgm_dir: out.join("overlay_bgm"),
        frames_root: out.join("frames"),
    };
    for d in [&layout.ost_dir, &layout.bgm_dir, &layout.video_audio_dir, &layout.overlay_bgm_dir, &layout.frames_root] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    (0..cfg.ost_tracks).into_par_iter().try_for_each(|i| {
        let mut rng = item_rng(seed, 1, i);
        write_mono(ost_track(cfg.track_secs, i, &mut rng), &layout.ost_dir.join(format!("ost_{i:03}.wav")))
    })?;
    (0..cfg.bgm_tracks).into_par_iter().try_for_each(|i| {
        let mut rng = item_rng(seed, 2, i);
        let bpm = BGM_TEMPI_BPM[rng.gen_range(0..BGM_TEMPI_BPM.len())];
        write_mono(bgm_track(cfg.track_secs, bpm, &mut rng), &layout.bgm_dir.join(format!("bgm_{i:03}.wav")))
    })?;
    (0..cfg.overlay_bgm_tracks).into_par_iter().try_for_each(|i| {
        let mut rng = item_rng(seed, 3, i);
        let bpm = BGM_TEMPI_BPM[rng.gen_range(0..BGM_TEMPI_BPM.len())];
        let path = layout.overlay_bgm_dir.join(format!("obgm_{i:03}.wav"));
        write_mono(bgm_track(cfg.video_secs + 2.0, bpm, &mut rng), &path)
    })?;
    (0..cfg.videos).into_par_iter().try_for_each(|i| -> Result<()> {
        let mut rng = item_rng(seed, 4, i);
        let class = i % OST_TEMPI_BPM.len();
        let music = ost_track(cfg.video_secs, class, &mut rng);
        let speech = dialogue_track(cfg.video_secs, &mut rng);
        let mixed = music.iter().zip(&speech).map(|(a, b)| a + b).collect();
        let id = format!("vid_{i:03}");
        write_mono(mixed, &layout.video_audio_dir.join(format!("{id}.wav")))?;
        let dir = layout.frames_root.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let n_frames = cfg.video_secs.floor() as usize;
        for (s, frame) in texture_frames(n_frames, class, &mut rng).iter().enumerate() {
            save_pgm(frame, dir.join(format!("frame_{s:04}.pgm")))?;
        }
        Ok(())
    })?;
    Ok(layout)
}
