//! The audio stages of the restoration pipeline: two-stem vocal /
//! accompaniment separation, speech detection and extraction, and OST/BGM
//! separation by spectral masking (oracle and learned).

use std::path::{Path, PathBuf};
use std::process::Command;

use log::{debug, info};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

use crate::audio::{load_wav, save_wav, to_mono, AudioClip, WavEncoding};
use crate::dataset::{MixManifest, Split};
use crate::error::{Error, Result};
use crate::nn::{time_mae_slices, AdamConfig, Matrix, MultiResSpecLoss, ParamStore};
use crate::spectral::{
    default_multires_configs, BandSplitScheme, Spectrogram, StftConfig, StftPlan, ANALYSIS_RATE,
};

// ---------------------------------------------------------------------------
// Masks

/// Ideal ratio masks `|O|^2 / (|O|^2 + |B|^2 + 1e-12)` and its complement.
pub fn oracle_irm(spec_ost: &Spectrogram, spec_bgm: &Spectrogram) -> Result<(Matrix, Matrix)> {
    if spec_ost.frames() != spec_bgm.frames() || spec_ost.bins() != spec_bgm.bins() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{} spectrograms",
            spec_ost.frames(),
            spec_ost.bins(),
            spec_bgm.frames(),
            spec_bgm.bins()
        )));
    }
    let (rows, cols) = (spec_ost.frames(), spec_ost.bins());
    let ost: Vec<f64> = spec_ost
        .values
        .data
        .iter()
        .zip(&spec_bgm.values.data)
        .map(|(o, b)| {
            let po = o.norm_sqr();
            po / (po + b.norm_sqr() + 1e-12)
        })
        .collect();
    let bgm = ost.iter().map(|m| 1.0 - m).collect();
    Ok((Matrix::new(rows, cols, ost)?, Matrix::new(rows, cols, bgm)?))
}

/// Element-wise product of a spectrogram with a real mask.
pub fn apply_mask(spec: &Spectrogram, mask: &Matrix) -> Result<Spectrogram> {
    if mask.shape() != (spec.frames(), spec.bins()) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} for a {}x{} spectrogram",
            mask.shape(),
            spec.frames(),
            spec.bins()
        )));
    }
    let mut out = spec.clone();
    for (c, &m) in out.values.data.iter_mut().zip(mask.as_slice()) {
        *c *= m;
    }
    Ok(out)
}

fn complement(mask: &Matrix) -> Matrix {
    Matrix::from_fn(mask.rows(), mask.cols(), |r, c| 1.0 - mask.get(r, c))
}

// ---------------------------------------------------------------------------
// Two-stem separation

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStemResult {
    pub vocals: AudioClip,
    /// Everything that is not vocals: the "mixed music" track.
    pub accompaniment: AudioClip,
}

/// How the vocal / accompaniment split is produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StemBackend {
    /// Mask heuristic on the STFT; see [`vocal_mask`].
    Builtin,
    /// An external separator invoked as `program [args..] <input.wav> <out_dir>`.
    /// It must write `vocals.wav` and `accompaniment.wav` into `out_dir`.
    External { program: PathBuf, args: Vec<String> },
}

impl StemBackend {
    /// Parses a whitespace-separated command line; `builtin` selects the
    /// heuristic.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut parts = spec.split_whitespace();
        match parts.next() {
            None => Err(Error::InvalidInput("empty stem backend".into())),
            Some("builtin") => Ok(StemBackend::Builtin),
            Some(program) => Ok(StemBackend::External {
                program: PathBuf::from(program),
                args: parts.map(str::to_string).collect(),
            }),
        }
    }
}

const TWO_STEM_STFT: StftConfig = StftConfig::new(2048, 512, true);
const HPSS_KERNEL: usize = 17;
const VOCAL_BAND_HZ: (f64, f64, f64, f64) = (100.0, 200.0, 4000.0, 6000.0);

fn median_of(buf: &mut [f64]) -> f64 {
    let mid = buf.len() / 2;
    *buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1
}

/// Harmonic share `H^2 / (H^2 + P^2)` from median filtering `mag` along
/// time (harmonic) and frequency (percussive).
fn harmonic_ratio(mag: &[f64], frames: usize, bins: usize) -> Vec<f64> {
    let half = HPSS_KERNEL / 2;
    let mut out = vec![0.0; frames * bins];
    let mut window = Vec::with_capacity(HPSS_KERNEL);
    for t in 0..frames {
        for k in 0..bins {
            window.clear();
            for tt in t.saturating_sub(half)..(t + half + 1).min(frames) {
                window.push(mag[tt * bins + k]);
            }
            let h = median_of(&mut window);
            window.clear();
            for kk in k.saturating_sub(half)..(k + half + 1).min(bins) {
                window.push(mag[t * bins + kk]);
            }
            let p = median_of(&mut window);
            let (h2, p2) = (h * h, p * p);
            out[t * bins + k] = if h2 + p2 > 0.0 { h2 / (h2 + p2) } else { 0.0 };
        }
    }
    out
}

fn vocal_band_weight(freq: f64) -> f64 {
    let (lo0, lo1, hi0, hi1) = VOCAL_BAND_HZ;
    let taper = |x: f64| 0.5 - 0.5 * (std::f64::consts::PI * x).cos();
    if freq <= lo0 || freq >= hi1 {
        0.0
    } else if freq < lo1 {
        taper((freq - lo0) / (lo1 - lo0))
    } else if freq <= hi0 {
        1.0
    } else {
        taper((hi1 - freq) / (hi1 - hi0))
    }
}

/// Soft vocal mask: mid-channel dominance times harmonic share times a
/// vocal-band weight. Mono input counts as fully mid.
pub fn vocal_mask(channel_specs: &[Spectrogram]) -> Result<Matrix> {
    let first = channel_specs
        .first()
        .ok_or_else(|| Error::InvalidInput("no channels".into()))?;
    let (frames, bins) = (first.frames(), first.bins());
    let n = first.config.window_size as f64;
    let rate = first.sample_rate_hz as f64;
    let (mid, dominance): (Vec<Complex64>, Vec<f64>) = match channel_specs {
        [mono] => (mono.values.data.clone(), vec![1.0; frames * bins]),
        [l, r] => l
            .values
            .data
            .iter()
            .zip(&r.values.data)
            .map(|(a, b)| {
                let m = (a + b) * 0.5;
                let s = (a - b) * 0.5;
                let (pm, ps) = (m.norm_sqr(), s.norm_sqr());
                let d = if pm + ps > 0.0 { ((pm - ps) / (pm + ps)).clamp(0.0, 1.0) } else { 0.0 };
                (m, d)
            })
            .unzip(),
        _ => return Err(Error::InvalidInput("expected one or two channels".into())),
    };
    let mag: Vec<f64> = mid.iter().map(|c| c.norm()).collect();
    let harmonic = harmonic_ratio(&mag, frames, bins);
    let band: Vec<f64> = (0..bins).map(|k| vocal_band_weight(k as f64 * rate / n)).collect();
    Ok(Matrix::from_fn(frames, bins, |t, k| {
        let i = t * bins + k;
        dominance[i] * harmonic[i] * band[k]
    }))
}

fn builtin_two_stem(clip: &AudioClip) -> Result<TwoStemResult> {
    let plan = StftPlan::new(TWO_STEM_STFT)?;
    let specs: Vec<Spectrogram> = clip
        .channels()
        .iter()
        .map(|ch| plan.forward(ch, clip.sample_rate()))
        .collect::<Result<_>>()?;
    let mask = vocal_mask(&specs)?;
    let rest = complement(&mask);
    let mut vocals = Vec::with_capacity(specs.len());
    let mut accompaniment = Vec::with_capacity(specs.len());
    for spec in &specs {
        vocals.push(plan.inverse(&apply_mask(spec, &mask)?)?);
        accompaniment.push(plan.inverse(&apply_mask(spec, &rest)?)?);
    }
    Ok(TwoStemResult {
        vocals: AudioClip::new(vocals, clip.sample_rate())?,
        accompaniment: AudioClip::new(accompaniment, clip.sample_rate())?,
    })
}

fn external_two_stem(clip: &AudioClip, program: &Path, args: &[String]) -> Result<TwoStemResult> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let input = dir.path().join("input.wav");
    let out_dir = dir.path().join("stems");
    std::fs::create_dir(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    save_wav(clip, &input, WavEncoding::Float32)?;
    let output = Command::new(program)
        .args(args)
        .arg(&input)
        .arg(&out_dir)
        .output()
        .map_err(|e| Error::Backend(format!("could not start {}: {e}", program.display())))?;
    if !output.status.success() {
        return Err(Error::Backend(format!(
            "{} exited with {}: {}",
            program.display(),
            output.status,
            String::from_utf8_lossy(&output.stderr).trim()
        )));
    }
    let load = |name: &str| -> Result<AudioClip> {
        let path = out_dir.join(name);
        if !path.is_file() {
            return Err(Error::Backend(format!("backend did not write {name}")));
        }
        let stem = load_wav(&path)?;
        if stem.sample_rate() != clip.sample_rate() || stem.len() != clip.len() {
            return Err(Error::Backend(format!(
                "{name} is {} samples at {} Hz, expected {} at {} Hz",
                stem.len(),
                stem.sample_rate(),
                clip.len(),
                clip.sample_rate()
            )));
        }
        Ok(stem)
    };
    Ok(TwoStemResult {
        vocals: load("vocals.wav")?,
        accompaniment: load("accompaniment.wav")?,
    })
}

/// Splits a clip of at least one second into vocals and accompaniment.
pub fn separate_two_stem(clip: &AudioClip, backend: &StemBackend) -> Result<TwoStemResult> {
    if clip.len() < clip.sample_rate() as usize {
        return Err(Error::TooShort {
            needed: clip.sample_rate() as usize,
            got: clip.len(),
        });
    }
    match backend {
        StemBackend::Builtin => builtin_two_stem(clip),
        StemBackend::External { program, args } => external_two_stem(clip, program, args),
    }
}

// ---------------------------------------------------------------------------
// Speech detection

/// Ordered, non-overlapping `(start_s, end_s)` intervals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpeechSegments {
    intervals: Vec<(f64, f64)>,
}

impl SpeechSegments {
    pub fn new(intervals: Vec<(f64, f64)>) -> Result<Self> {
        let mut prev_end = 0.0;
        for &(s, e) in &intervals {
            if !(s >= prev_end && s < e) {
                return Err(Error::InvalidInput(format!(
                    "segment ({s}, {e}) is empty, unordered or overlapping"
                )));
            }
            prev_end = e;
        }
        Ok(SpeechSegments { intervals })
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn total_duration(&self) -> f64 {
        self.intervals.iter().map(|(s, e)| e - s).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VadConfig {
    pub frame_secs: f64,
    pub hop_secs: f64,
    /// A frame above this level (dBFS) switches detection on.
    pub onset_db: f64,
    /// Detection stays on while frames remain above this level.
    pub offset_db: f64,
    /// Frames that are both this tonal (spectral flatness) ...
    pub stationary_flatness: f64,
    /// ... and this steady (normalised flux) are not speech.
    pub stationary_flux: f64,
    /// Flatness and flux are averaged over this many seconds each side.
    pub stationarity_span_secs: f64,
    pub pad_secs: f64,
    pub merge_gap_secs: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        VadConfig {
            frame_secs: 0.025,
            hop_secs: 0.010,
            onset_db: -45.0,
            offset_db: -55.0,
            stationary_flatness: 0.1,
            stationary_flux: 0.2,
            stationarity_span_secs: 0.25,
            pad_secs: 0.2,
            merge_gap_secs: 0.3,
        }
    }
}

fn moving_average(x: &[f64], half: usize) -> Vec<f64> {
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Energy VAD with hysteresis and a stationarity gate, on the channel mean.
pub fn detect_speech(clip: &AudioClip) -> Result<SpeechSegments> {
    detect_speech_with(clip, &VadConfig::default())
}

pub fn detect_speech_with(clip: &AudioClip, cfg: &VadConfig) -> Result<SpeechSegments> {
    if cfg.offset_db > cfg.onset_db {
        return Err(Error::InvalidInput("VAD offset threshold above onset threshold".into()));
    }
    let mono = to_mono(clip);
    let x = mono.channel(0);
    let rate = clip.sample_rate() as f64;
    let frame = ((cfg.frame_secs * rate).round() as usize).max(2);
    let hop = ((cfg.hop_secs * rate).round() as usize).max(1);
    if x.len() < frame {
        return Ok(SpeechSegments::default());
    }
    let n_frames = (x.len() - frame) / hop + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(frame);
    let window = crate::spectral::hann(frame);
    let bins = frame / 2 + 1;

    let mut level_db = Vec::with_capacity(n_frames);
    let mut flatness = Vec::with_capacity(n_frames);
    let mut flux = Vec::with_capacity(n_frames);
    let mut prev_mag = vec![0.0; bins];
    let mut buf = vec![Complex64::new(0.0, 0.0); frame];
    for t in 0..n_frames {
        let seg = &x[t * hop..t * hop + frame];
        let ms = seg.iter().map(|v| v * v).sum::<f64>() / frame as f64;
        level_db.push(10.0 * (ms + 1e-12).log10());

        for (b, (v, w)) in buf.iter_mut().zip(seg.iter().zip(&window)) {
            *b = Complex64::new(v * w, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..bins].iter().map(|c| c.norm_sqr() + 1e-20).collect();
        let arith = power.iter().sum::<f64>() / bins as f64;
        let geo = (power.iter().map(|p| p.ln()).sum::<f64>() / bins as f64).exp();
        flatness.push(geo / arith);
        let mag: Vec<f64> = power.iter().map(|p| p.sqrt()).collect();
        let diff = mag.iter().zip(&prev_mag).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = mag.iter().map(|a| a * a).sum::<f64>().sqrt();
        flux.push(if t == 0 { 1.0 } else { diff / norm.max(1e-12) });
        prev_mag = mag;
    }

    let span = (cfg.stationarity_span_secs / cfg.hop_secs).round() as usize;
    let flatness = moving_average(&flatness, span);
    let flux = moving_average(&flux, span);

    let mut active = vec![false; n_frames];
    let mut on = false;
    for t in 0..n_frames {
        on = if on { level_db[t] > cfg.offset_db } else { level_db[t] > cfg.onset_db };
        let stationary = flatness[t] < cfg.stationary_flatness && flux[t] < cfg.stationary_flux;
        active[t] = on && !stationary;
    }

    let duration = x.len() as f64 / rate;
    let mut raw: Vec<(f64, f64)> = Vec::new();
    let mut t = 0;
    while t < n_frames {
        if !active[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < n_frames && active[t] {
            t += 1;
        }
        let s = (start * hop) as f64 / rate - cfg.pad_secs;
        let e = ((t - 1) * hop + frame) as f64 / rate + cfg.pad_secs;
        raw.push((s.max(0.0), e.min(duration)));
    }
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (s, e) in raw {
        match merged.last_mut() {
            Some(last) if s - last.1 < cfg.merge_gap_secs => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    debug!("detected {} speech segments", merged.len());
    SpeechSegments::new(merged)
}

/// Zeroes every sample outside `segments`, keeping the clip's length.
pub fn extract_speech(clip: &AudioClip, segments: &SpeechSegments) -> Result<AudioClip> {
    let rate = clip.sample_rate() as f64;
    let duration = clip.duration_secs();
    let mut keep = vec![false; clip.len()];
    for &(s, e) in segments.intervals() {
        if s < 0.0 || e > duration + 1e-9 {
            return Err(Error::InvalidInput(format!(
                "segment ({s}, {e}) outside a {duration} s clip"
            )));
        }
        let a = ((s * rate).round() as usize).min(clip.len());
        let b = ((e * rate).round() as usize).min(clip.len());
        keep[a..b].fill(true);
    }
    let channels = clip
        .channels()
        .iter()
        .map(|ch| ch.iter().zip(&keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect())
        .collect();
    AudioClip::new(channels, clip.sample_rate())
}

// ---------------------------------------------------------------------------
// Learned band-mask estimator

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationResult {
    pub ost: AudioClip,
    pub bgm: AudioClip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    pub stft: StftConfig,
    pub n_bands: usize,
    /// Context frames on each side; the same count of neighbouring bins
    /// on each side is used as well.
    pub context: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            stft: StftConfig::new(1024, 256, true),
            n_bands: 8,
            context: 2,
        }
    }
}

impl MaskConfig {
    pub fn n_features(&self) -> usize {
        4 * self.context + 1
    }
}

/// Per-band logistic regression from standardised log-power context to
/// an OST ratio mask. The BGM mask is its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskModel {
    config: MaskConfig,
    scheme: BandSplitScheme,
    band_of_bin: Vec<usize>,
    /// Standardisation of `ln(1 + |S|^2)`: mean and standard deviation.
    feature_mean: f64,
    feature_std: f64,
    params: ParamStore,
}

const MASK_W: &str = "mask.weights";
const MASK_B: &str = "mask.bias";
const MASK_CONFIG: &str = "mask.config";
const MASK_NORM: &str = "mask.norm";

/// Standardised log-power features of one spectrogram.
struct Features {
    frames: usize,
    bins: usize,
    log_power: Vec<f64>,
}

impl Features {
    fn new(spec: &Spectrogram, mean: f64, std: f64) -> Self {
        Features {
            frames: spec.frames(),
            bins: spec.bins(),
            log_power: spec
                .values
                .data
                .iter()
                .map(|c| ((1.0 + c.norm_sqr()).ln() - mean) / std)
                .collect(),
        }
    }

    /// Writes the context vector of cell `(t, k)` into `out`.
    fn context(&self, t: usize, k: usize, c: usize, out: &mut [f64]) {
        let at = |tt: isize, kk: isize| {
            let tt = tt.clamp(0, self.frames as isize - 1) as usize;
            let kk = kk.clamp(0, self.bins as isize - 1) as usize;
            self.log_power[tt * self.bins + kk]
        };
        let (t, k, c) = (t as isize, k as isize, c as isize);
        let mut i = 0;
        for dt in -c..=c {
            out[i] = at(t + dt, k);
            i += 1;
        }
        for dk in (-c..0).chain(1..=c) {
            out[i] = at(t, k + dk);
            i += 1;
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl MaskModel {
    /// A model whose mask is 0.5 everywhere.
    pub fn new(config: MaskConfig, feature_mean: f64, feature_std: f64) -> Result<Self> {
        config.stft.validate()?;
        if !(feature_std > 0.0) || !feature_mean.is_finite() {
            return Err(Error::InvalidInput("feature standardisation must be finite and positive".into()));
        }
        let scheme = BandSplitScheme::mel_spaced(config.n_bands, config.stft.bins(), ANALYSIS_RATE)?;
        let mut params = ParamStore::new();
        params.insert(MASK_W, Matrix::zeros(config.n_bands, config.n_features()));
        params.insert(MASK_B, Matrix::zeros(1, config.n_bands));
        Ok(MaskModel {
            band_of_bin: scheme.band_of_bins(),
            scheme,
            config,
            feature_mean,
            feature_std,
            params,
        })
    }

    pub fn config(&self) -> MaskConfig {
        self.config
    }

    pub fn scheme(&self) -> &BandSplitScheme {
        &self.scheme
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn features(&self, spec: &Spectrogram) -> Features {
        Features::new(spec, self.feature_mean, self.feature_std)
    }

    /// OST mask for `spec`, `frames x bins`, values in `[0, 1]`.
    pub fn predict_mask(&self, spec: &Spectrogram) -> Result<Matrix> {
        self.mask_with(&self.params, spec)
    }

    fn mask_with(&self, params: &ParamStore, spec: &Spectrogram) -> Result<Matrix> {
        if spec.config != self.config.stft {
            return Err(Error::InvalidInput("spectrogram configuration differs from the model's".into()));
        }
        let w = params.get(MASK_W)?;
        let b = params.get(MASK_B)?;
        let feats = self.features(spec);
        let c = self.config.context;
        let mut ctx = vec![0.0; self.config.n_features()];
        let mut data = Vec::with_capacity(spec.frames() * spec.bins());
        for t in 0..spec.frames() {
            for k in 0..spec.bins() {
                let band = self.band_of_bin[k];
                feats.context(t, k, c, &mut ctx);
                let z = b.get(0, band) + crate::nn::dot(w.row(band), &ctx);
                data.push(sigmoid(z));
            }
        }
        Matrix::new(spec.frames(), spec.bins(), data)
    }

    /// Accumulates `dL/dW`, `dL/db` into `grads` given `dL/dmask`.
    fn mask_backward(
        &self,
        spec: &Spectrogram,
        mask: &Matrix,
        d_mask: &[f64],
        dw: &mut Matrix,
        db: &mut Matrix,
    ) {
        let feats = self.features(spec);
        let c = self.config.context;
        let mut ctx = vec![0.0; self.config.n_features()];
        let bins = spec.bins();
        for t in 0..spec.frames() {
            for k in 0..bins {
                let m = mask.get(t, k);
                let dz = d_mask[t * bins + k] * m * (1.0 - m);
                if dz == 0.0 {
                    continue;
                }
                let band = self.band_of_bin[k];
                feats.context(t, k, c, &mut ctx);
                for (g, f) in dw.row_mut(band).iter_mut().zip(&ctx) {
                    *g += dz * f;
                }
                db.as_mut_slice()[band] += dz;
            }
        }
    }

    /// Serialises weights, configuration and standardisation.
    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        store.insert(MASK_W, self.params.get(MASK_W)?.clone());
        store.insert(MASK_B, self.params.get(MASK_B)?.clone());
        let cfg = self.config;
        store.insert(
            MASK_CONFIG,
            Matrix::row_vector(&[
                cfg.stft.window_size as f64,
                cfg.stft.hop as f64,
                if cfg.stft.centered { 1.0 } else { 0.0 },
                cfg.n_bands as f64,
                cfg.context as f64,
            ]),
        );
        store.insert(MASK_NORM, Matrix::row_vector(&[self.feature_mean, self.feature_std]));
        Ok(store)
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let cfg = store.get(MASK_CONFIG)?.as_slice();
        let norm = store.get(MASK_NORM)?.as_slice();
        if cfg.len() != 5 || norm.len() != 2 {
            return Err(Error::ModelFormat("mask model header has the wrong size".into()));
        }
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::ModelFormat(format!("{v} is not a count")))
            }
        };
        let config = MaskConfig {
            stft: StftConfig::new(as_count(cfg[0])?, as_count(cfg[1])?, cfg[2] != 0.0),
            n_bands: as_count(cfg[3])?,
            context: as_count(cfg[4])?,
        };
        let mut model = MaskModel::new(config, norm[0], norm[1])?;
        for name in [MASK_W, MASK_B] {
            let v = store.get(name)?;
            if v.shape() != model.params.get(name)?.shape() {
                return Err(Error::ModelFormat(format!("{name} has shape {:?}", v.shape())));
            }
            *model.params.get_mut(name)? = v.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_store()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&ParamStore::load(path)?)
    }
}

fn masked_pair(plan: &StftPlan, spec: &Spectrogram, mask: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((
        plan.inverse(&apply_mask(spec, mask)?)?,
        plan.inverse(&apply_mask(spec, &complement(mask))?)?,
    ))
}

fn per_channel(
    clip: &AudioClip,
    mut f: impl FnMut(&[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
) -> Result<SeparationResult> {
    let mut ost = Vec::new();
    let mut bgm = Vec::new();
    for ch in clip.channels() {
        let (o, b) = f(ch)?;
        ost.push(o);
        bgm.push(b);
    }
    Ok(SeparationResult {
        ost: AudioClip::new(ost, clip.sample_rate())?,
        bgm: AudioClip::new(bgm, clip.sample_rate())?,
    })
}

fn require_analysis_rate(clip: &AudioClip) -> Result<()> {
    if clip.sample_rate() != ANALYSIS_RATE {
        return Err(Error::InvalidInput(format!(
            "expected {ANALYSIS_RATE} Hz audio, got {} Hz",
            clip.sample_rate()
        )));
    }
    Ok(())
}

/// Splits a mixed-music clip into OST and BGM with complementary masks.
pub fn separate_mixed_music(clip: &AudioClip, model: &MaskModel) -> Result<SeparationResult> {
    require_analysis_rate(clip)?;
    let plan = StftPlan::new(model.config.stft)?;
    per_channel(clip, |x| {
        let spec = plan.forward(x, clip.sample_rate())?;
        let mask = model.predict_mask(&spec)?;
        masked_pair(&plan, &spec, &mask)
    })
}

/// Separation with the ideal ratio mask computed from the true stems.
pub fn separate_with_oracle(
    mixture: &AudioClip,
    ost_ref: &AudioClip,
    bgm_ref: &AudioClip,
    stft: StftConfig,
) -> Result<SeparationResult> {
    if !mixture.same_shape(ost_ref) || !mixture.same_shape(bgm_ref) {
        return Err(Error::ShapeMismatch("oracle separation needs equally shaped clips".into()));
    }
    let plan = StftPlan::new(stft)?;
    let rate = mixture.sample_rate();
    let mut ch = 0;
    per_channel(mixture, |x| {
        let spec = plan.forward(x, rate)?;
        let so = plan.forward(ost_ref.channel(ch), rate)?;
        let sb = plan.forward(bgm_ref.channel(ch), rate)?;
        ch += 1;
        let (mask, _) = oracle_irm(&so, &sb)?;
        masked_pair(&plan, &spec, &mask)
    })
}

// ---------------------------------------------------------------------------
// Training

/// A mono mixture with its two reference stems, all at the analysis rate.
#[derive(Debug, Clone)]
pub struct SeparationExample {
    pub mixture: Vec<f64>,
    pub ost: Vec<f64>,
    pub bgm: Vec<f64>,
}

impl SeparationExample {
    pub fn from_clips(mixture: &AudioClip, ost: &AudioClip, bgm: &AudioClip) -> Result<Self> {
        for c in [mixture, ost, bgm] {
            require_analysis_rate(c)?;
        }
        if !mixture.same_shape(ost) || !mixture.same_shape(bgm) {
            return Err(Error::ShapeMismatch("example stems differ in shape".into()));
        }
        Ok(SeparationExample {
            mixture: to_mono(mixture).into_channels().remove(0),
            ost: to_mono(ost).into_channels().remove(0),
            bgm: to_mono(bgm).into_channels().remove(0),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskTrainConfig {
    pub mask: MaskConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the spectral term relative to the time-domain term.
    pub spectral_weight: f64,
    pub loss_resolutions: Vec<StftConfig>,
}

impl Default for MaskTrainConfig {
    fn default() -> Self {
        MaskTrainConfig {
            mask: MaskConfig::default(),
            epochs: 12,
            batch_size: 8,
            learning_rate: 0.05,
            spectral_weight: 1.0,
            loss_resolutions: default_multires_configs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMaskModel {
    pub model: MaskModel,
    /// Mean training loss before any update, then after each epoch.
    pub loss_curve: Vec<f64>,
}

/// Combined separation loss and `dL/d(ost_est)` for one example under the
/// current parameters. `bgm_est` is synthesised with the complementary
/// mask, so its gradient enters with a minus sign.
struct ExampleObjective<'a> {
    model: &'a MaskModel,
    plan: &'a StftPlan,
    spectral: &'a MultiResSpecLoss,
    spectral_weight: f64,
}

impl ExampleObjective<'_> {
    fn loss(&self, params: &ParamStore, ex: &SeparationExample, want_grad: bool) -> Result<(f64, Option<(Matrix, Matrix)>)> {
        let spec = self.plan.forward(&ex.mixture, ANALYSIS_RATE)?;
        let mask = self.model.mask_with(params, &spec)?;
        let (ost_est, bgm_est) = masked_pair(self.plan, &spec, &mask)?;
        let (lo, go) = time_mae_slices(&ost_est, &ex.ost)?;
        let (lb, gb) = time_mae_slices(&bgm_est, &ex.bgm)?;
        let (so, gso) = self.spectral.loss_and_grad(&ost_est, &ex.ost)?;
        let (sb, gsb) = self.spectral.loss_and_grad(&bgm_est, &ex.bgm)?;
        let loss = lo + lb + self.spectral_weight * (so + sb);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("separation loss {loss}")));
        }
        if !want_grad {
            return Ok((loss, None));
        }
        let lam = self.spectral_weight;
        let g: Vec<f64> = (0..ost_est.len())
            .map(|i| (go[i] + lam * gso[i]) - (gb[i] + lam * gsb[i]))
            .collect();
        let d_mask = self.plan.mask_gradient(&spec, &g)?;
        let cfg = self.model.config;
        let mut dw = Matrix::zeros(cfg.n_bands, cfg.n_features());
        let mut db = Matrix::zeros(1, cfg.n_bands);
        self.model.mask_backward(&spec, &mask, &d_mask, &mut dw, &mut db);
        Ok((loss, Some((dw, db))))
    }
}

/// Mean and standard deviation of `ln(1 + |S|^2)` over the mixtures.
fn feature_statistics(examples: &[SeparationExample], plan: &StftPlan) -> Result<(f64, f64)> {
    let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0usize);
    for ex in examples {
        let spec = plan.forward(&ex.mixture, ANALYSIS_RATE)?;
        for c in &spec.values.data {
            let v = (1.0 + c.norm_sqr()).ln();
            sum += v;
            sum_sq += v * v;
        }
        count += spec.values.data.len();
    }
    let mean = sum / count as f64;
    let var = (sum_sq / count as f64 - mean * mean).max(0.0);
    Ok((mean, var.sqrt().max(1e-6)))
}

/// Trains the mask estimator on in-memory examples. Single-threaded and
/// bit-reproducible for a given seed.
pub fn train_mask_estimator_on(
    examples: &[SeparationExample],
    cfg: &MaskTrainConfig,
    seed: u64,
) -> Result<TrainedMaskModel> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let plan = StftPlan::new(cfg.mask.stft)?;
    let (mean, std) = feature_statistics(examples, &plan)?;
    let mut model = MaskModel::new(cfg.mask, mean, std)?;
    let spectral = MultiResSpecLoss::new(&cfg.loss_resolutions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mean_loss = |model: &MaskModel| -> Result<f64> {
        let obj = ExampleObjective {
            model,
            plan: &plan,
            spectral: &spectral,
            spectral_weight: cfg.spectral_weight,
        };
        let mut total = 0.0;
        for ex in examples {
            total += obj.loss(&model.params, ex, false)?.0;
        }
        Ok(total / examples.len() as f64)
    };

    let mut curve = vec![mean_loss(&model)?];
    info!("separator epoch 0: loss {:.6}", curve[0]);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = Vec::with_capacity(batch.len());
            {
                let obj = ExampleObjective {
                    model: &model,
                    plan: &plan,
                    spectral: &spectral,
                    spectral_weight: cfg.spectral_weight,
                };
                for &i in batch {
                    let (_, g) = obj.loss(&model.params, &examples[i], true)?;
                    grads.push(g.expect("gradient requested"));
                }
            }
            let params = &mut model.params;
            params.zero_grads();
            for (dw, db) in &grads {
                params.accumulate_grad(MASK_W, dw)?;
                params.accumulate_grad(MASK_B, db)?;
            }
            params.scale_grads(1.0 / batch.len() as f64);
            params.adam_step(cfg.learning_rate, AdamConfig::default());
        }
        let loss = mean_loss(&model)?;
        info!("separator epoch {epoch}: loss {loss:.6}");
        curve.push(loss);
    }
    Ok(TrainedMaskModel { model, loss_curve: curve })
}

/// Loads the training split of a mixture manifest and trains on it.
pub fn train_mask_estimator(
    manifest: &MixManifest,
    root: &Path,
    cfg: &MaskTrainConfig,
    seed: u64,
) -> Result<TrainedMaskModel> {
    let examples = load_examples(manifest, root, Split::Train)?;
    if examples.is_empty() {
        return Err(Error::Manifest("training split is empty".into()));
    }
    train_mask_estimator_on(&examples, cfg, seed)
}

/// Loads every entry of `split` as a [`SeparationExample`].
pub fn load_examples(manifest: &MixManifest, root: &Path, split: Split) -> Result<Vec<SeparationExample>> {
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            SeparationExample::from_clips(
                &load_wav(root.join(&e.mixture))?,
                &load_wav(root.join(&e.ost_ref))?,
                &load_wav(root.join(&e.bgm_ref))?,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::spectral::stft;
    use rand::Rng;
    use std::f64::consts::PI;

    fn snr_db(reference: &[f64], est: &[f64]) -> f64 {
        let num: f64 = reference.iter().map(|v| v * v).sum();
        let den: f64 = reference.iter().zip(est).map(|(a, b)| (a - b).powi(2)).sum();
        10.0 * (num / den).log10()
    }

    fn tone_stack(f0: f64, secs: f64, rate: u32) -> Vec<f64> {
        let n = (secs * rate as f64) as usize;
        (0..n)
            .map(|i| {
                let t = i as f64 / rate as f64;
                (1..=5).map(|h| 0.1 / h as f64 * (2.0 * PI * f0 * h as f64 * t).sin()).sum()
            })
            .collect()
    }

    #[test]
    fn irm_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = StftConfig::new(256, 64, true);
        let sa = stft(&AudioClip::mono(a.clone(), 16_000).unwrap(), cfg).unwrap();
        let silent = stft(&AudioClip::silence(4000, 1, 16_000).unwrap(), cfg).unwrap();
        let (m, mb) = oracle_irm(&sa, &silent).unwrap();
        for (i, c) in sa.values.data.iter().enumerate() {
            if c.norm_sqr() > 1e-6 {
                assert!(m.as_slice()[i] > 0.999_999);
            }
            assert_eq!(m.as_slice()[i] + mb.as_slice()[i], 1.0);
        }
        let (half, _) = oracle_irm(&sa, &sa).unwrap();
        for (i, c) in sa.values.data.iter().enumerate() {
            if c.norm_sqr() > 1e-3 {
                assert!((half.as_slice()[i] - 0.5).abs() < 1e-9);
            }
        }
        let short = stft(&AudioClip::silence(3000, 1, 16_000).unwrap(), cfg).unwrap();
        assert!(oracle_irm(&sa, &short).is_err());
    }

    #[test]
    fn apply_mask_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..2000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = stft(&AudioClip::mono(a, 16_000).unwrap(), StftConfig::new(256, 64, false)).unwrap();
        let (r, c) = (spec.frames(), spec.bins());
        assert_eq!(apply_mask(&spec, &Matrix::from_fn(r, c, |_, _| 1.0)).unwrap(), spec);
        let zero = apply_mask(&spec, &Matrix::zeros(r, c)).unwrap();
        assert!(zero.values.data.iter().all(|v| v.norm() == 0.0));
        let m = Matrix::from_fn(r, c, |_, _| rng.gen_range(0.0..1.0));
        let a = apply_mask(&spec, &m).unwrap();
        let b = apply_mask(&spec, &complement(&m)).unwrap();
        for ((x, y), z) in a.values.data.iter().zip(&b.values.data).zip(&spec.values.data) {
            assert!((x + y - z).norm() <= 1e-12 * z.norm().max(1.0));
        }
        assert!(apply_mask(&spec, &Matrix::zeros(r + 1, c)).is_err());
    }

    #[test]
    fn two_stem_builtin_behaviour() {
        let rate = 16_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Instrumental: wide side-only noise plus a sub-bass tone.
        let n = 3 * rate as usize;
        let side: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
        let bass: Vec<f64> = (0..n).map(|i| 0.3 * (2.0 * PI * 50.0 * i as f64 / rate as f64).sin()).collect();
        let left: Vec<f64> = side.iter().zip(&bass).map(|(s, b)| s + b).collect();
        let right: Vec<f64> = side.iter().zip(&bass).map(|(s, b)| b - s).collect();
        let inst = AudioClip::new(vec![left, right], rate).unwrap();
        let out = separate_two_stem(&inst, &StemBackend::Builtin).unwrap();
        assert!(out.vocals.energy() <= 0.05 * inst.energy(), "{}", out.vocals.energy() / inst.energy());

        // Vocals: a centred harmonic stack in the voice band.
        let v = tone_stack(220.0, 3.0, rate);
        let vocal = AudioClip::new(vec![v.clone(), v], rate).unwrap();
        let out = separate_two_stem(&vocal, &StemBackend::Builtin).unwrap();
        assert!(out.accompaniment.energy() <= 0.10 * vocal.energy());

        // Stems add back up to the STFT round trip.
        let mixed = mix_clips(&inst, &vocal);
        let out = separate_two_stem(&mixed, &StemBackend::Builtin).unwrap();
        let plan = StftPlan::new(TWO_STEM_STFT).unwrap();
        for ch in 0..2 {
            let rt = plan.inverse(&plan.forward(mixed.channel(ch), rate).unwrap()).unwrap();
            let sum: Vec<f64> = out.vocals.channel(ch).iter().zip(out.accompaniment.channel(ch)).map(|(a, b)| a + b).collect();
            assert!(snr_db(&rt, &sum) >= 60.0);
        }
        assert!(matches!(
            separate_two_stem(&AudioClip::silence(8000, 1, rate).unwrap(), &StemBackend::Builtin),
            Err(Error::TooShort { .. })
        ));
    }

    fn mix_clips(a: &AudioClip, b: &AudioClip) -> AudioClip {
        crate::audio::mix(a, b).unwrap().0
    }

    #[test]
    fn external_backend_failures_are_reported() {
        let clip = AudioClip::mono(vec![0.1; 16_000], 16_000).unwrap();
        let missing = StemBackend::parse("/nonexistent/separator --fast").unwrap();
        assert!(matches!(separate_two_stem(&clip, &missing), Err(Error::Backend(_))));
        let failing = StemBackend::parse("false").unwrap();
        assert!(matches!(separate_two_stem(&clip, &failing), Err(Error::Backend(_))));
        // Exits 0 but writes nothing.
        let silent = StemBackend::parse("true").unwrap();
        assert!(matches!(separate_two_stem(&clip, &silent), Err(Error::Backend(_))));
        assert_eq!(StemBackend::parse("builtin").unwrap(), StemBackend::Builtin);
    }

    #[test]
    fn vad_cases() {
        let rate = 16_000;
        assert!(detect_speech(&AudioClip::silence(6 * rate as usize, 1, rate).unwrap()).unwrap().is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..6 * rate as usize)
            .map(|i| if (2 * rate as usize..4 * rate as usize).contains(&i) { rng.gen_range(-0.3..0.3) } else { 0.0 })
            .collect();
        let segs = detect_speech(&AudioClip::mono(x, rate).unwrap()).unwrap();
        assert_eq!(segs.intervals().len(), 1, "{segs:?}");
        let (s, e) = segs.intervals()[0];
        assert!((s - 2.0).abs() <= 0.25 && (e - 4.0).abs() <= 0.25, "{s} {e}");

        // A steady full-scale sine is stationary and tonal: not speech.
        let sine: Vec<f64> = (0..4 * rate as usize).map(|i| (2.0 * PI * 440.0 * i as f64 / rate as f64).sin()).collect();
        assert!(detect_speech(&AudioClip::mono(sine, rate).unwrap()).unwrap().is_empty());
    }

    #[test]
    fn extract_speech_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clip = AudioClip::mono((0..64_000).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16_000).unwrap();
        let none = extract_speech(&clip, &SpeechSegments::default()).unwrap();
        assert_eq!(none.len(), clip.len());
        assert_eq!(none.energy(), 0.0);
        let all = extract_speech(&clip, &SpeechSegments::new(vec![(0.0, 4.0)]).unwrap()).unwrap();
        assert_eq!(all, clip);
        let one = extract_speech(&clip, &SpeechSegments::new(vec![(1.0, 2.0)]).unwrap()).unwrap();
        let outside: f64 = one.channel(0)[..16_000].iter().chain(&one.channel(0)[32_000..]).map(|v| v * v).sum();
        assert_eq!(outside, 0.0);
        assert_eq!(&one.channel(0)[16_000..32_000], &clip.channel(0)[16_000..32_000]);
        assert!(extract_speech(&clip, &SpeechSegments::new(vec![(3.0, 5.0)]).unwrap()).is_err());
        assert!(SpeechSegments::new(vec![(1.0, 2.0), (1.5, 3.0)]).is_err());
    }

    #[test]
    fn silence_separates_to_silence() {
        let model = MaskModel::new(MaskConfig::default(), 0.0, 1.0).unwrap();
        let out = separate_mixed_music(&AudioClip::silence(64_000, 1, 16_000).unwrap(), &model).unwrap();
        assert_eq!(out.ost.energy(), 0.0);
        assert_eq!(out.bgm.energy(), 0.0);
        assert!(separate_mixed_music(&AudioClip::silence(44_100, 1, 44_100).unwrap(), &model).is_err());
    }

    #[test]
    fn separator_outputs_are_complementary() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = MaskModel::new(MaskConfig::default(), 1.0, 2.0).unwrap();
        let w = model.params_mut().get_mut(MASK_W).unwrap();
        for v in w.as_mut_slice() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..32_000).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let out = separate_mixed_music(&AudioClip::mono(x.clone(), 16_000).unwrap(), &model).unwrap();
        let plan = StftPlan::new(model.config().stft).unwrap();
        let rt = plan.inverse(&plan.forward(&x, 16_000).unwrap()).unwrap();
        let sum: Vec<f64> = out.ost.channel(0).iter().zip(out.bgm.channel(0)).map(|(a, b)| a + b).collect();
        assert!(snr_db(&rt, &sum) >= 60.0);
    }

    #[test]
    fn mask_model_round_trips_through_store() {
        let mut model = MaskModel::new(MaskConfig::default(), 0.5, 1.5).unwrap();
        model.params_mut().get_mut(MASK_B).unwrap().as_mut_slice()[3] = 0.25;
        let bytes = model.to_store().unwrap().to_bytes();
        let back = MaskModel::from_store(&ParamStore::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    /// Checks the whole chain mask -> iSTFT -> loss against finite
    /// differences, using a smooth loss so no hinge is crossed.
    #[test]
    fn mask_estimator_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = MaskConfig {
            stft: StftConfig::new(128, 32, true),
            n_bands: 3,
            context: 2,
        };
        let mut model = MaskModel::new(cfg, 0.2, 1.3).unwrap();
        for name in [MASK_W, MASK_B] {
            for v in model.params_mut().get_mut(name).unwrap().as_mut_slice() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let plan = StftPlan::new(cfg.stft).unwrap();
        let x: Vec<f64> = (0..1200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..1200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = plan.forward(&x, 16_000).unwrap();
        let report = grad_check(model.params(), 1e-6, |p| {
            let mask = model.mask_with(p, &spec)?;
            let (ost, bgm) = masked_pair(&plan, &spec, &mask)?;
            let loss: f64 = (0..ost.len()).map(|i| 0.5 * (ost[i] - target[i]).powi(2) + 0.25 * bgm[i].powi(2)).sum();
            let g: Vec<f64> = (0..ost.len()).map(|i| (ost[i] - target[i]) - 0.5 * bgm[i]).collect();
            let d_mask = plan.mask_gradient(&spec, &g)?;
            let mut dw = Matrix::zeros(cfg.n_bands, cfg.n_features());
            let mut db = Matrix::zeros(1, cfg.n_bands);
            model.mask_backward(&spec, &mask, &d_mask, &mut dw, &mut db);
            Ok((loss, [(MASK_W.to_string(), dw), (MASK_B.to_string(), db)].into()))
        })
        .unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let rate = 16_000;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let examples: Vec<SeparationExample> = (0..6)
            .map(|j| {
                let ost = tone_stack(180.0 + 40.0 * j as f64, 1.0, rate);
                let bgm: Vec<f64> = (0..rate as usize)
                    .map(|i| if i % 4000 < 300 { rng.gen_range(-0.4..0.4) } else { 0.0 })
                    .collect();
                let mixture = ost.iter().zip(&bgm).map(|(a, b)| a + b).collect();
                SeparationExample { mixture, ost, bgm }
            })
            .collect();
        let cfg = MaskTrainConfig {
            epochs: 8,
            batch_size: 3,
            ..MaskTrainConfig::default()
        };
        let a = train_mask_estimator_on(&examples, &cfg, 11).unwrap();
        let b = train_mask_estimator_on(&examples, &cfg, 11).unwrap();
        assert_eq!(a.model.to_store().unwrap().to_bytes(), b.model.to_store().unwrap().to_bytes());
        let last = *a.loss_curve.last().unwrap();
        assert!(last < 0.5 * a.loss_curve[0], "{:?}", a.loss_curve);
        assert!(train_mask_estimator_on(&[], &cfg, 0).is_err());
    }

    #[test]
    fn lowering_offset_never_shrinks_detection() {
        let rate = 16_000;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..8 {
            let x: Vec<f64> = (0..3 * rate as usize)
                .map(|i| {
                    let env = (2.0 * PI * 1.3 * i as f64 / rate as f64).sin().max(0.0).powi(3);
                    env * rng.gen_range(-0.2..0.2)
                })
                .collect();
            let clip = AudioClip::mono(x, rate).unwrap();
            let mut last = 0.0;
            for offset in [-46.0, -50.0, -55.0, -60.0, -70.0] {
                let cfg = VadConfig { offset_db: offset, ..VadConfig::default() };
                let total = detect_speech_with(&clip, &cfg).unwrap().total_duration();
                assert!(total + 1e-12 >= last, "{offset}: {total} < {last}");
                last = total;
            }
        }
    }
}
