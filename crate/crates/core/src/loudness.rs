//! Gated integrated loudness (K-weighted, 400 ms blocks, 75 % overlap,
//! -70 LUFS absolute gate, -10 LU relative gate) and gain normalisation.

use std::f64::consts::PI;

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// The loudness target used throughout the dataset recipes.
pub const TARGET_LUFS: f64 = -23.0;

const ABSOLUTE_GATE_LUFS: f64 = -70.0;
const RELATIVE_GATE_LU: f64 = -10.0;
const BLOCK_SECS: f64 = 0.4;
const STEP_SECS: f64 = 0.1;
const MAX_NORMALIZE_PASSES: usize = 3;
const NORMALIZE_TOLERANCE_LU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoudnessReading {
    /// Only meaningful when `is_measurable` is set.
    pub integrated_lufs: f64,
    pub gated_block_count: usize,
    pub is_measurable: bool,
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2
                    - self.a[0] * y1
                    - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

/// The two K-weighting stages (shelf, then high-pass) for `rate`.
///
/// At 48 kHz the tabulated coefficients are used as-is. Other rates
/// redesign the same analog prototypes through the bilinear transform.
fn k_weighting(rate: u32) -> [Biquad; 2] {
    if rate == 48_000 {
        return [
            Biquad {
                b: [1.53512485958697, -2.69169618940638, 1.19839281085285],
                a: [-1.69065929318241, 0.73248077421585],
            },
            Biquad {
                b: [1.0, -2.0, 1.0],
                a: [-1.99004745483398, 0.99007225036621],
            },
        ];
    }
    k_weighting_redesigned(rate)
}

fn k_weighting_redesigned(rate: u32) -> [Biquad; 2] {
    let fs = rate as f64;

    let gain_db = 3.999_843_853_973_347;
    let q = 0.707_175_236_955_419_3;
    let fc = 1_681.974_450_955_531_9;
    let k = (PI * fc / fs).tan();
    let vh = 10f64.powf(gain_db / 20.0);
    let vb = vh.powf(0.499_666_774_154_541_6);
    let a0 = 1.0 + k / q + k * k;
    let shelf = Biquad {
        b: [
            (vh + vb * k / q + k * k) / a0,
            2.0 * (k * k - vh) / a0,
            (vh - vb * k / q + k * k) / a0,
        ],
        a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    };

    let q = 0.500_327_037_323_877_3;
    let fc = 38.135_470_876_139_82;
    let k = (PI * fc / fs).tan();
    let a0 = 1.0 + k / q + k * k;
    let highpass = Biquad {
        b: [1.0, -2.0, 1.0],
        a: [2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    };
    [shelf, highpass]
}

fn block_loudness(power: f64) -> f64 {
    -0.691 + 10.0 * power.log10()
}

/// Per-block channel-summed mean-square power of the K-weighted signal.
fn block_powers(clip: &AudioClip) -> Result<Vec<f64>> {
    let rate = clip.sample_rate() as f64;
    let block = (BLOCK_SECS * rate).round() as usize;
    let step = (STEP_SECS * rate).round() as usize;
    if clip.len() < block {
        return Err(Error::TooShort {
            needed: block,
            got: clip.len(),
        });
    }
    let [shelf, highpass] = k_weighting(clip.sample_rate());
    let n_blocks = (clip.len() - block) / step + 1;
    let mut powers = vec![0.0; n_blocks];
    for ch in clip.channels() {
        let y = highpass.run(&shelf.run(ch));
        // Running sum of squares makes each block O(1).
        let mut prefix = Vec::with_capacity(y.len() + 1);
        prefix.push(0.0);
        let mut acc = 0.0;
        for v in &y {
            acc += v * v;
            prefix.push(acc);
        }
        for (j, p) in powers.iter_mut().enumerate() {
            let s = j * step;
            // Channel weights are 1.0 for mono and for left/right.
            *p += (prefix[s + block] - prefix[s]) / block as f64;
        }
    }
    Ok(powers)
}

/// Gated integrated loudness of a clip at least 400 ms long.
pub fn measure_integrated_lufs(clip: &AudioClip) -> Result<LoudnessReading> {
    let powers = block_powers(clip)?;
    let above_abs: Vec<f64> = powers
        .into_iter()
        .filter(|&p| p > 0.0 && block_loudness(p) > ABSOLUTE_GATE_LUFS)
        .collect();
    if above_abs.is_empty() {
        return Ok(LoudnessReading {
            integrated_lufs: f64::NEG_INFINITY,
            gated_block_count: 0,
            is_measurable: false,
        });
    }
    let mean_abs = above_abs.iter().sum::<f64>() / above_abs.len() as f64;
    let relative_gate = block_loudness(mean_abs) + RELATIVE_GATE_LU;
    let gated: Vec<f64> = above_abs
        .into_iter()
        .filter(|&p| block_loudness(p) > relative_gate)
        .collect();
    let mean = gated.iter().sum::<f64>() / gated.len() as f64;
    Ok(LoudnessReading {
        integrated_lufs: block_loudness(mean),
        gated_block_count: gated.len(),
        is_measurable: true,
    })
}

/// Scales `clip` by one constant gain so it measures `target_lufs`.
///
/// The gain is refined by re-measuring (gating may move after scaling)
/// for at most three passes. Returns the scaled clip and the gain.
pub fn normalize_to(clip: &AudioClip, target_lufs: f64) -> Result<(AudioClip, f64)> {
    let reading = measure_integrated_lufs(clip)?;
    if !reading.is_measurable {
        return Err(Error::Unmeasurable);
    }
    let mut gain = 10f64.powf((target_lufs - reading.integrated_lufs) / 20.0);
    let mut out = clip.scaled(gain);
    for _ in 1..MAX_NORMALIZE_PASSES {
        let r = measure_integrated_lufs(&out)?;
        if !r.is_measurable {
            return Err(Error::Unmeasurable);
        }
        let miss = target_lufs - r.integrated_lufs;
        if miss.abs() <= NORMALIZE_TOLERANCE_LU / 10.0 {
            break;
        }
        gain *= 10f64.powf(miss / 20.0);
        out = clip.scaled(gain);
    }
    Ok((out, gain))
}
