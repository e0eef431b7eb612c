//! Short-time Fourier analysis, log-mel features, band partitioning and
//! onset envelopes.
//!
//! The analysis front end is fixed at 16 kHz with a 400-sample Hann window
//! and a 160-sample hop, uncentred. A four-second clip then yields exactly
//! 398 frames of 201 bins, reduced to 80 mel bands.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::audio::{self, AudioClip};
use crate::error::{Error, Result};

pub const ANALYSIS_RATE: u32 = 16_000;
pub const ANALYSIS_WINDOW: usize = 400;
pub const ANALYSIS_HOP: usize = 160;
pub const CLIP_SAMPLES: usize = 64_000;
pub const MEL_BANDS: usize = 80;
pub const MEL_FRAMES: usize = 398;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StftConfig {
    pub window_size: usize,
    pub hop: usize,
    /// Pads `window_size / 2` zeros on both sides so frame `t` is centred
    /// on sample `t * hop`.
    pub centered: bool,
}

impl StftConfig {
    pub const fn new(window_size: usize, hop: usize, centered: bool) -> Self {
        StftConfig {
            window_size,
            hop,
            centered,
        }
    }

    /// The fixed analysis configuration (400 / 160, uncentred).
    pub const fn analysis() -> Self {
        StftConfig::new(ANALYSIS_WINDOW, ANALYSIS_HOP, false)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size < 2 || self.hop == 0 || self.hop > self.window_size {
            return Err(Error::InvalidInput(format!(
                "invalid STFT config: window {} hop {}",
                self.window_size, self.hop
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    fn pad(&self) -> usize {
        if self.centered {
            self.window_size / 2
        } else {
            0
        }
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad();
        if padded < self.window_size {
            None
        } else {
            Some((padded - self.window_size) / self.hop + 1)
        }
    }
}

/// Multi-resolution loss configurations: windows 512, 1024 and 2048 with
/// a quarter-window hop.
pub fn default_multires_configs() -> Vec<StftConfig> {
    [512, 1024, 2048]
        .into_iter()
        .map(|w| StftConfig::new(w, w / 4, false))
        .collect()
}

/// Row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [Complex64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Complex STFT of a mono signal: `frames x bins`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: ComplexMatrix,
    pub config: StftConfig,
    pub sample_rate_hz: u32,
    /// Length of the analysed signal, needed to invert exactly.
    pub signal_len: usize,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.values.rows
    }

    pub fn bins(&self) -> usize {
        self.values.cols
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Precomputed window and FFT plans for one [`StftConfig`].
///
/// Immutable after construction and shareable across threads.
#[derive(Clone)]
pub struct StftPlan {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("config", &self.config).finish()
    }
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(StftPlan {
            config,
            window: hann(config.window_size),
            forward: planner.plan_fft_forward(config.window_size),
            inverse: planner.plan_fft_inverse(config.window_size),
        })
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn forward(&self, x: &[f64], sample_rate_hz: u32) -> Result<Spectrogram> {
        let cfg = self.config;
        let n = cfg.window_size;
        let frames = cfg.frame_count(x.len()).ok_or(Error::TooShort {
            needed: n,
            got: x.len(),
        })?;
        let pad = cfg.pad();
        let bins = cfg.bins();
        let mut values = ComplexMatrix::zeros(frames, bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..frames {
            let start = (t * cfg.hop) as isize - pad as isize;
            for (j, b) in buf.iter_mut().enumerate() {
                let idx = start + j as isize;
                let v = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize]
                } else {
                    0.0
                };
                *b = Complex64::new(v * self.window[j], 0.0);
            }
            self.forward.process(&mut buf);
            values.row_mut(t).copy_from_slice(&buf[..bins]);
        }
        Ok(Spectrogram {
            values,
            config: cfg,
            sample_rate_hz,
            signal_len: x.len(),
        })
    }

    /// Weighted overlap-add inverse, normalised by the summed squared
    /// window. Samples with no window support come back as zero.
    pub fn inverse(&self, spec: &Spectrogram) -> Result<Vec<f64>> {
        let cfg = self.config;
        if spec.config != cfg
            || spec.bins() != cfg.bins()
            || cfg.frame_count(spec.signal_len) != Some(spec.frames())
        {
            return Err(Error::InvalidInput(
                "spectrogram does not match its STFT configuration".into(),
            ));
        }
        let n = cfg.window_size;
        let pad = cfg.pad();
        let total = spec.signal_len + 2 * pad;
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..spec.frames() {
            self.frame_time_domain(spec.values.row(t), &mut buf);
            let start = t * cfg.hop;
            for j in 0..n {
                acc[start + j] += buf[j].re * self.window[j];
                norm[start + j] += self.window[j] * self.window[j];
            }
        }
        Ok((0..spec.signal_len)
            .map(|i| {
                let k = i + pad;
                if norm[k] > 1e-10 {
                    acc[k] / norm[k]
                } else {
                    0.0
                }
            })
            .collect())
    }

    /// Inverse DFT of one Hermitian half-spectrum, scaled by `1 / n`.
    fn frame_time_domain(&self, half: &[Complex64], buf: &mut [Complex64]) {
        let n = buf.len();
        let bins = half.len();
        buf.fill(Complex64::new(0.0, 0.0));
        buf[..bins].copy_from_slice(half);
        for k in 1..bins {
            if n - k >= bins {
                buf[n - k] = half[k].conj();
            }
        }
        self.inverse.process(buf);
        let scale = 1.0 / n as f64;
        for b in buf.iter_mut() {
            *b *= scale;
        }
    }

    /// Gradient of a scalar loss with respect to a real mask `m`, where the
    /// loss depends on `y = inverse(m * spec)` and `grad_out = dL/dy`.
    ///
    /// Returned row-major, `frames x bins`.
    pub fn mask_gradient(&self, spec: &Spectrogram, grad_out: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.config;
        if spec.config != cfg || grad_out.len() != spec.signal_len {
            return Err(Error::ShapeMismatch(
                "mask gradient needs the spectrogram's own configuration and length".into(),
            ));
        }
        let n = cfg.window_size;
        let pad = cfg.pad();
        let bins = spec.bins();
        let total = spec.signal_len + 2 * pad;
        let mut norm = vec![0.0; total];
        for t in 0..spec.frames() {
            for j in 0..n {
                norm[t * cfg.hop + j] += self.window[j] * self.window[j];
            }
        }
        // dL/d(frame sample j) after the 1/norm scaling of overlap-add.
        let mut scaled = vec![0.0; total];
        for i in 0..spec.signal_len {
            let k = i + pad;
            if norm[k] > 1e-10 {
                scaled[k] = grad_out[i] / norm[k];
            }
        }
        let mut out = vec![0.0; spec.frames() * bins];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for t in 0..spec.frames() {
            let start = t * cfg.hop;
            for j in 0..n {
                buf[j] = Complex64::new(self.window[j] * scaled[start + j], 0.0);
            }
            self.forward.process(&mut buf);
            let row = spec.values.row(t);
            for k in 0..bins {
                let mult = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
                out[t * bins + k] = mult / n as f64 * (row[k] * buf[k].conj()).re;
            }
        }
        Ok(out)
    }

    /// Unnormalised inverse FFT in place.
    pub(crate) fn ifft_in_place(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
    }
}

pub fn stft(clip: &AudioClip, cfg: StftConfig) -> Result<Spectrogram> {
    if clip.num_channels() != 1 {
        return Err(Error::InvalidInput("stft expects a mono clip".into()));
    }
    StftPlan::new(cfg)?.forward(clip.channel(0), clip.sample_rate())
}

pub fn istft(spec: &Spectrogram) -> Result<AudioClip> {
    let samples = StftPlan::new(spec.config)?.inverse(spec)?;
    AudioClip::mono(samples, spec.sample_rate_hz)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular, area-normalised mel filters over `[fmin, fmax]`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    bands: usize,
    bins: usize,
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(bands: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..bands + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut weights = vec![0.0; bands * bins];
        for m in 0..bands {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let area_norm = 2.0 / (right - left);
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > left && f <= centre {
                    (f - left) / (centre - left)
                } else if f > centre && f < right {
                    (right - f) / (right - centre)
                } else {
                    0.0
                };
                weights[m * bins + k] = w * area_norm;
            }
        }
        MelFilterbank {
            bands,
            bins,
            weights,
        }
    }

    /// The 80-band, 0-8 kHz bank used by [`mel_spectrogram`].
    pub fn analysis() -> Self {
        MelFilterbank::new(
            MEL_BANDS,
            ANALYSIS_WINDOW,
            ANALYSIS_RATE,
            0.0,
            ANALYSIS_RATE as f64 / 2.0,
        )
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    /// `ln(1 + sum_k w[m, k] |X_k|^2)` for each band.
    pub fn log_energies(&self, spectrum: &[Complex64], out: &mut [f64]) {
        debug_assert_eq!(spectrum.len(), self.bins);
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * self.bins..(m + 1) * self.bins];
            let e: f64 = row
                .iter()
                .zip(spectrum)
                .map(|(w, x)| w * x.norm_sqr())
                .sum();
            *o = e.ln_1p();
        }
    }
}

/// `frames x 80` log-mel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    frames: usize,
    data: Vec<f64>,
}

impl MelSpectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        MEL_BANDS
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.frames, MEL_BANDS)
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.data[t * MEL_BANDS + m]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * MEL_BANDS..(t + 1) * MEL_BANDS]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Log-mel frames of a mono 16 kHz signal of any length >= one window.
pub fn log_mel_frames(clip: &AudioClip) -> Result<MelSpectrogram> {
    if clip.sample_rate() != ANALYSIS_RATE || clip.num_channels() != 1 {
        return Err(Error::InvalidInput(format!(
            "log-mel analysis expects mono {} Hz audio",
            ANALYSIS_RATE
        )));
    }
    let spec = stft(clip, StftConfig::analysis())?;
    let bank = MelFilterbank::analysis();
    let mut data = vec![0.0; spec.frames() * MEL_BANDS];
    for t in 0..spec.frames() {
        bank.log_energies(
            spec.values.row(t),
            &mut data[t * MEL_BANDS..(t + 1) * MEL_BANDS],
        );
    }
    Ok(MelSpectrogram {
        frames: spec.frames(),
        data,
    })
}

/// The 398 x 80 log-mel matrix of a four-second mono 16 kHz clip.
pub fn mel_spectrogram(clip: &AudioClip) -> Result<MelSpectrogram> {
    if clip.sample_rate() != ANALYSIS_RATE || clip.len() != CLIP_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "mel features need exactly {CLIP_SAMPLES} samples at {ANALYSIS_RATE} Hz, got {} at {} Hz",
            clip.len(),
            clip.sample_rate()
        )));
    }
    let mel = log_mel_frames(clip)?;
    assert_eq!(mel.frames, MEL_FRAMES, "analysis framing must give 398 frames");
    Ok(mel)
}

/// Disjoint, contiguous half-open bin ranges covering `[0, bins)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandSplitScheme {
    ranges: Vec<(usize, usize)>,
}

impl BandSplitScheme {
    pub fn new(ranges: Vec<(usize, usize)>) -> Result<Self> {
        if ranges.is_empty() || ranges[0].0 != 0 {
            return Err(Error::InvalidInput("band scheme must start at bin 0".into()));
        }
        for (i, &(s, e)) in ranges.iter().enumerate() {
            if s >= e {
                return Err(Error::InvalidInput(format!("empty band {i}: [{s}, {e})")));
            }
            if i > 0 && ranges[i - 1].1 != s {
                return Err(Error::InvalidInput(format!("band {i} is not contiguous")));
            }
        }
        Ok(BandSplitScheme { ranges })
    }

    /// Builds a scheme from interior boundaries plus the total bin count.
    pub fn from_edges(edges: &[usize], bins: usize) -> Result<Self> {
        let mut ranges = Vec::with_capacity(edges.len() + 1);
        let mut start = 0;
        for &e in edges.iter().chain(std::iter::once(&bins)) {
            ranges.push((start, e));
            start = e;
        }
        Self::new(ranges)
    }

    /// `n_bands` bands with boundaries equally spaced on the mel scale.
    ///
    /// Falls back to fewer bands only when `bins < n_bands`.
    pub fn mel_spaced(n_bands: usize, bins: usize, sample_rate: u32) -> Result<Self> {
        if n_bands == 0 || bins == 0 {
            return Err(Error::InvalidInput("need at least one band and one bin".into()));
        }
        let n_bands = n_bands.min(bins);
        let nyquist = sample_rate as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let mut edges = Vec::with_capacity(n_bands - 1);
        let mut prev = 0;
        for i in 1..n_bands {
            let hz = mel_to_hz(top * i as f64 / n_bands as f64);
            let bin = ((hz / nyquist) * (bins - 1) as f64).round() as usize;
            // Keep at least one bin per band on both sides.
            let bin = bin.max(prev + 1).min(bins - (n_bands - i));
            edges.push(bin);
            prev = bin;
        }
        Self::from_edges(&edges, bins)
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn total_bins(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.1)
    }

    /// Band index of every bin.
    pub fn band_of_bins(&self) -> Vec<usize> {
        let mut out = vec![0; self.total_bins()];
        for (b, &(s, e)) in self.ranges.iter().enumerate() {
            out[s..e].fill(b);
        }
        out
    }
}

pub fn band_split(spec: &ComplexMatrix, scheme: &BandSplitScheme) -> Result<Vec<ComplexMatrix>> {
    if scheme.total_bins() != spec.cols {
        return Err(Error::ShapeMismatch(format!(
            "band scheme covers {} bins, spectrogram has {}",
            scheme.total_bins(),
            spec.cols
        )));
    }
    Ok(scheme
        .ranges()
        .iter()
        .map(|&(s, e)| {
            let mut band = ComplexMatrix::zeros(spec.rows, e - s);
            for t in 0..spec.rows {
                band.row_mut(t).copy_from_slice(&spec.row(t)[s..e]);
            }
            band
        })
        .collect())
}

pub fn band_join(bands: &[ComplexMatrix]) -> Result<ComplexMatrix> {
    let rows = bands.first().map_or(0, |b| b.rows);
    if bands.iter().any(|b| b.rows != rows) {
        return Err(Error::ShapeMismatch("sub-bands differ in frame count".into()));
    }
    let cols = bands.iter().map(|b| b.cols).sum();
    let mut out = ComplexMatrix::zeros(rows, cols);
    for t in 0..rows {
        let row = out.row_mut(t);
        let mut at = 0;
        for b in bands {
            row[at..at + b.cols].copy_from_slice(b.row(t));
            at += b.cols;
        }
    }
    Ok(out)
}

/// Half-wave rectified spectral flux of the log-mel frames.
///
/// Non-16 kHz input is resampled first. Returns `frames - 1` values; a
/// clip shorter than one analysis window yields an empty envelope.
pub fn onset_envelope(clip: &AudioClip) -> Result<Vec<f64>> {
    let mono = audio::to_mono(clip);
    let mono = if mono.sample_rate() == ANALYSIS_RATE {
        mono
    } else {
        audio::resample(&mono, ANALYSIS_RATE)?
    };
    if mono.len() < ANALYSIS_WINDOW {
        return Ok(Vec::new());
    }
    let mel = log_mel_frames(&mono)?;
    Ok((1..mel.frames())
        .map(|t| {
            mel.frame(t)
                .iter()
                .zip(mel.frame(t - 1))
                .map(|(a, b)| (a - b).max(0.0))
                .sum()
        })
        .collect())
}
