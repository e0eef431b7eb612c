//! Sampled audio, WAV file I/O, resampling, segmentation and mixing.
//!
//! Every DSP routine in the crate works on [`AudioClip`], which stores
//! planar 64-bit samples. Files are read as 16/24-bit PCM or 32-bit float
//! and written as 16-bit PCM or 32-bit float.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A multi-channel waveform with planar `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    sample_rate_hz: u32,
    channels: Vec<Vec<f64>>,
}

impl AudioClip {
    /// Builds a clip from planar channel data.
    ///
    /// Requires 1 or 2 channels of identical length and a positive rate.
    pub fn new(channels: Vec<Vec<f64>>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::InvalidInput(format!(
                "expected 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::ShapeMismatch("channels differ in length".into()));
        }
        Ok(AudioClip {
            sample_rate_hz,
            channels,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate_hz)
    }

    pub fn silence(len: usize, num_channels: usize, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![vec![0.0; len]; num_channels], sample_rate_hz)
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Duration as the exact ratio `(samples, rate)`.
    pub fn duration_ratio(&self) -> (usize, u32) {
        (self.len(), self.sample_rate_hz)
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn channel(&self, idx: usize) -> &[f64] {
        &self.channels[idx]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    /// Returns a copy with every sample transformed by `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> AudioClip {
        AudioClip {
            sample_rate_hz: self.sample_rate_hz,
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|&x| f(x)).collect())
                .collect(),
        }
    }

    pub fn scaled(&self, gain: f64) -> AudioClip {
        self.map(|x| x * gain)
    }

    pub fn peak(&self) -> f64 {
        self.channels
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.channels
            .iter()
            .flat_map(|c| c.iter())
            .map(|x| x * x)
            .sum()
    }

    /// Samples `[start, start + len)` of every channel.
    pub fn slice(&self, start: usize, len: usize) -> Result<AudioClip> {
        if start + len > self.len() {
            return Err(Error::InvalidInput(format!(
                "slice [{start}, {}) exceeds clip length {}",
                start + len,
                self.len()
            )));
        }
        Ok(AudioClip {
            sample_rate_hz: self.sample_rate_hz,
            channels: self
                .channels
                .iter()
                .map(|c| c[start..start + len].to_vec())
                .collect(),
        })
    }

    pub(crate) fn same_shape(&self, other: &AudioClip) -> bool {
        self.sample_rate_hz == other.sample_rate_hz
            && self.num_channels() == other.num_channels()
            && self.len() == other.len()
    }
}

/// Sample encoding used when writing WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Reads a RIFF/WAVE file holding 16-bit PCM, 24-bit PCM or 32-bit float.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedHeader("missing RIFF/WAVE signature".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + size > bytes.len() {
                    return Err(Error::MalformedHeader("fmt chunk too short".into()));
                }
                let mut tag = read_u16(bytes, body);
                let channels = read_u16(bytes, body + 2);
                let rate = read_u32(bytes, body + 4);
                let bits = read_u16(bytes, body + 14);
                if tag == FORMAT_EXTENSIBLE {
                    if size < 40 {
                        return Err(Error::MalformedHeader(
                            "extensible fmt chunk too short".into(),
                        ));
                    }
                    // First two bytes of the sub-format GUID carry the real tag.
                    tag = read_u16(bytes, body + 24);
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) = fmt.ok_or_else(|| {
                    Error::MalformedHeader("data chunk precedes fmt chunk".into())
                })?;
                let available = bytes.len() - body;
                if size > available {
                    return Err(Error::TruncatedData {
                        declared: size,
                        available,
                    });
                }
                return decode_samples(&bytes[body..body + size], tag, channels, rate, bits);
            }
            _ => {}
        }
        // Chunks are padded to even sizes.
        pos = body + size + (size & 1);
    }
    Err(Error::MalformedHeader(match fmt {
        None => "no fmt chunk".into(),
        Some(_) => "no data chunk".into(),
    }))
}

fn decode_samples(data: &[u8], tag: u16, channels: u16, rate: u32, bits: u16) -> Result<AudioClip> {
    if channels == 0 || channels > 2 {
        return Err(Error::MalformedHeader(format!(
            "unsupported channel count {channels}"
        )));
    }
    if rate == 0 {
        return Err(Error::MalformedHeader("zero sample rate".into()));
    }
    let width = match (tag, bits) {
        (FORMAT_PCM, 16) => 2,
        (FORMAT_PCM, 24) => 3,
        (FORMAT_FLOAT, 32) => 4,
        _ => return Err(Error::UnsupportedEncoding { format_tag: tag, bits }),
    };
    let nch = channels as usize;
    let frame_bytes = width * nch;
    let frames = data.len() / frame_bytes;
    let mut out = vec![Vec::with_capacity(frames); nch];
    for f in 0..frames {
        for (c, chan) in out.iter_mut().enumerate() {
            let at = f * frame_bytes + c * width;
            let s = &data[at..at + width];
            let v = match width {
                2 => i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0,
                3 => {
                    let raw = i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8;
                    raw as f64 / 8_388_608.0
                }
                _ => f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64,
            };
            chan.push(v);
        }
    }
    AudioClip::new(out, rate)
}

/// Writes `clip` as RIFF/WAVE.
///
/// PCM16 rounds to nearest and saturates at full scale. Float32 is exact
/// for samples representable as `f32`.
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>, encoding: WavEncoding) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav(clip, encoding)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_wav(clip: &AudioClip, encoding: WavEncoding) -> Result<Vec<u8>> {
    if clip.is_empty() {
        return Err(Error::InvalidInput("cannot write an empty clip".into()));
    }
    let (tag, width) = match encoding {
        WavEncoding::Pcm16 => (FORMAT_PCM, 2usize),
        WavEncoding::Float32 => (FORMAT_FLOAT, 4usize),
    };
    let nch = clip.num_channels();
    let data_len = clip.len() * nch * width;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(nch as u16).to_le_bytes());
    out.extend_from_slice(&clip.sample_rate().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate() * (nch * width) as u32).to_le_bytes());
    out.extend_from_slice(&((nch * width) as u16).to_le_bytes());
    out.extend_from_slice(&((width * 8) as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..clip.len() {
        for c in 0..nch {
            let x = clip.channel(c)[i];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    out.extend_from_slice(&q.to_le_bytes());
                }
                WavEncoding::Float32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
    }
    Ok(out)
}

/// Zero crossings of the interpolation sinc on each side of the centre,
/// measured at the lower of the two rates.
const RESAMPLE_ZERO_CROSSINGS: f64 = 32.0;
const RESAMPLE_CUTOFF: f64 = 0.9;
const KAISER_BETA: f64 = 9.0;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited rate conversion with a Kaiser-windowed sinc kernel.
///
/// The kernel spans 64 zero crossings of the low-pass at the lower rate
/// (so at least 64 taps) and its weights are renormalised per output
/// sample, which keeps DC exact up to rounding.
pub fn resample(clip: &AudioClip, target_rate_hz: u32) -> Result<AudioClip> {
    if target_rate_hz == 0 {
        return Err(Error::InvalidInput("target rate must be positive".into()));
    }
    let src_rate = clip.sample_rate();
    if src_rate == target_rate_hz {
        return Ok(clip.clone());
    }
    let n_in = clip.len();
    let n_out = ((n_in as u64 * target_rate_hz as u64 + src_rate as u64 / 2) / src_rate as u64) as usize;

    // Cutoff in cycles per input sample.
    let cutoff = 0.5 * RESAMPLE_CUTOFF * (target_rate_hz.min(src_rate) as f64) / src_rate as f64;
    let half_width = RESAMPLE_ZERO_CROSSINGS / (2.0 * cutoff);
    let i0_beta = bessel_i0(KAISER_BETA);

    let mut channels = vec![Vec::with_capacity(n_out); clip.num_channels()];
    let mut weights = Vec::new();
    for n in 0..n_out {
        let num = n as u64 * src_rate as u64;
        let centre = (num / target_rate_hz as u64) as f64
            + (num % target_rate_hz as u64) as f64 / target_rate_hz as f64;
        let lo = (centre - half_width).ceil().max(0.0) as usize;
        let hi = ((centre + half_width).floor() as isize).min(n_in as isize - 1);
        weights.clear();
        let mut total = 0.0;
        if hi >= lo as isize {
            for k in lo..=hi as usize {
                let tau = k as f64 - centre;
                let r = tau / half_width;
                let win = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                let w = 2.0 * cutoff * sinc(2.0 * cutoff * tau) * win;
                weights.push(w);
                total += w;
            }
        }
        for (c, out) in channels.iter_mut().enumerate() {
            let src = clip.channel(c);
            let acc: f64 = if weights.is_empty() || total == 0.0 {
                0.0
            } else {
                weights
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * src[lo + j])
                    .sum::<f64>()
                    / total
            };
            out.push(acc);
        }
    }
    AudioClip::new(channels, target_rate_hz)
}

/// Cuts consecutive, non-overlapping windows of `clip_len_s` from sample 0.
///
/// The remainder is discarded and at most `max_segments` are returned.
pub fn segment(clip: &AudioClip, clip_len_s: f64, max_segments: usize) -> Result<Vec<AudioClip>> {
    if !(clip_len_s > 0.0) {
        return Err(Error::InvalidInput("segment length must be positive".into()));
    }
    let seg_len = (clip_len_s * clip.sample_rate() as f64).round() as usize;
    if seg_len == 0 {
        return Err(Error::InvalidInput("segment shorter than one sample".into()));
    }
    let count = (clip.len() / seg_len).min(max_segments);
    (0..count).map(|i| clip.slice(i * seg_len, seg_len)).collect()
}

/// Side information produced by [`mix`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixAnnotation {
    /// Largest absolute sample of the unclamped sum.
    pub peak: f64,
}

/// Sample-wise sum of two equally shaped clips, left unclamped.
pub fn mix(a: &AudioClip, b: &AudioClip) -> Result<(AudioClip, MixAnnotation)> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "cannot mix {}ch/{}Hz/{} with {}ch/{}Hz/{}",
            a.num_channels(),
            a.sample_rate(),
            a.len(),
            b.num_channels(),
            b.sample_rate(),
            b.len()
        )));
    }
    let channels = a
        .channels
        .iter()
        .zip(&b.channels)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect();
    let out = AudioClip::new(channels, a.sample_rate())?;
    let peak = out.peak();
    Ok((out, MixAnnotation { peak }))
}

/// Channel mean.
pub fn to_mono(clip: &AudioClip) -> AudioClip {
    if clip.num_channels() == 1 {
        return clip.clone();
    }
    let n = clip.num_channels() as f64;
    let samples = (0..clip.len())
        .map(|i| clip.channels.iter().map(|c| c[i]).sum::<f64>() / n)
        .collect();
    AudioClip {
        sample_rate_hz: clip.sample_rate(),
        channels: vec![samples],
    }
}
