//! SDR, SI-SDR and the three-scenario evaluation harness.
//!
//! A perfect estimate scores `f64::INFINITY`. Means skip those values and
//! report how many were skipped.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, AudioClip};
use crate::dataset::MixManifest;
use crate::error::{Error, Result};

fn check_pair(reference: &AudioClip, est: &AudioClip) -> Result<(Vec<f64>, Vec<f64>)> {
    if !reference.same_shape(est) {
        return Err(Error::ShapeMismatch(format!(
            "reference {}x{} @ {} Hz vs estimate {}x{} @ {} Hz",
            reference.num_channels(),
            reference.len(),
            reference.sample_rate(),
            est.num_channels(),
            est.len(),
            est.sample_rate()
        )));
    }
    let r = reference.channels().concat();
    let e = est.channels().concat();
    if r.iter().all(|&v| v == 0.0) {
        return Err(Error::SilentReference);
    }
    Ok((r, e))
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn ratio_db(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (signal / noise).log10()
    }
}

pub fn sdr_slices(reference: &[f64], est: &[f64]) -> f64 {
    let noise: f64 = reference.iter().zip(est).map(|(r, e)| (r - e).powi(2)).sum();
    ratio_db(energy(reference), noise)
}

/// `10 log10(|s|^2 / |s - s_est|^2)`.
pub fn sdr(reference: &AudioClip, est: &AudioClip) -> Result<f64> {
    let (r, e) = check_pair(reference, est)?;
    Ok(sdr_slices(&r, &e))
}

/// SI-SDR and its optimal scale `alpha = <s, s_est> / |s|^2`.
///
/// An estimate whose residual after projection is below the rounding
/// noise of the projection itself counts as exact.
pub fn si_sdr_slices(reference: &[f64], est: &[f64]) -> (f64, f64) {
    let alpha = crate::nn::dot(reference, est) / energy(reference);
    let target: Vec<f64> = reference.iter().map(|r| alpha * r).collect();
    let target_energy = energy(&target);
    let noise: f64 = est.iter().zip(&target).map(|(e, t)| (e - t).powi(2)).sum();
    let floor = (4.0 * reference.len() as f64 * f64::EPSILON).powi(2) * target_energy;
    if noise <= floor {
        return (f64::INFINITY, alpha);
    }
    (ratio_db(target_energy, noise), alpha)
}

pub fn si_sdr(reference: &AudioClip, est: &AudioClip) -> Result<f64> {
    let (r, e) = check_pair(reference, est)?;
    Ok(si_sdr_slices(&r, &e).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    #[serde(with = "db_sentinel")]
    pub sdr_db: f64,
    #[serde(with = "db_sentinel")]
    pub si_sdr_db: f64,
    pub alpha: f64,
}

/// Serialises `+inf` as the string `"inf"` since JSON has no infinity.
mod db_sentinel {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Named(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Finite(*v).serialize(s)
        } else if *v > 0.0 {
            Repr::Named("inf".into()).serialize(s)
        } else {
            Repr::Named("-inf".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Finite(v) => Ok(v),
            Repr::Named(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Named(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Repr::Named(s) => Err(serde::de::Error::custom(format!("bad dB value {s}"))),
        }
    }
}

pub fn evaluate(reference: &AudioClip, est: &AudioClip) -> Result<MetricResult> {
    let (r, e) = check_pair(reference, est)?;
    let (si, alpha) = si_sdr_slices(&r, &e);
    Ok(MetricResult {
        sdr_db: sdr_slices(&r, &e),
        si_sdr_db: si,
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Restored,
    MixedInput,
    DialogueOnly,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Restored, Scenario::MixedInput, Scenario::DialogueOnly];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Restored => "restored",
            Scenario::MixedInput => "mixed_input",
            Scenario::DialogueOnly => "dialogue_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScores {
    pub clip_id: String,
    pub scores: BTreeMap<Scenario, MetricResult>,
}

/// Mean of the finite values and the count of `+inf` sentinels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanWithSentinels {
    pub mean: Option<f64>,
    pub finite: usize,
    pub sentinels: usize,
}

impl MeanWithSentinels {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut sum, mut finite, mut sentinels) = (0.0, 0, 0);
        for v in values {
            if v.is_finite() {
                sum += v;
                finite += 1;
            } else {
                sentinels += 1;
            }
        }
        MeanWithSentinels {
            mean: (finite > 0).then(|| sum / finite as f64),
            finite,
            sentinels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub sdr: MeanWithSentinels,
    pub si_sdr: MeanWithSentinels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub clips: Vec<ClipScores>,
    pub summary: BTreeMap<Scenario, ScenarioSummary>,
}

pub const RESTORED_FILE: &str = "restored.wav";
pub const DIALOGUE_FILE: &str = "dialogue.wav";

impl ScenarioReport {
    pub fn from_clips(clips: Vec<ClipScores>) -> Self {
        let summary = Scenario::ALL
            .iter()
            .map(|&s| {
                let scores: Vec<&MetricResult> = clips.iter().filter_map(|c| c.scores.get(&s)).collect();
                (
                    s,
                    ScenarioSummary {
                        sdr: MeanWithSentinels::of(scores.iter().map(|m| m.sdr_db)),
                        si_sdr: MeanWithSentinels::of(scores.iter().map(|m| m.si_sdr_db)),
                    },
                )
            })
            .collect();
        ScenarioReport { clips, summary }
    }

    /// One record per clip, then one summary record.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for c in &self.clips {
            serde_json::to_writer(&mut out, c)?;
            writeln!(out)?;
        }
        serde_json::to_writer(&mut out, &serde_json::json!({ "summary": self.summary }))?;
        writeln!(out)
    }

    pub fn write_table(&self, mut out: impl Write) -> std::io::Result<()> {
        let fmt = |m: &MeanWithSentinels| match m.mean {
            Some(v) => format!("{v:>9.2}"),
            None => format!("{:>9}", "-"),
        };
        writeln!(out, "{:<14} {:>9} {:>9} {:>9}", "scenario", "SDR", "SI-SDR", "perfect")?;
        for (s, sum) in &self.summary {
            writeln!(
                out,
                "{:<14} {} {} {:>9}",
                s.name(),
                fmt(&sum.sdr),
                fmt(&sum.si_sdr),
                sum.si_sdr.sentinels
            )?;
        }
        Ok(())
    }
}

/// Scores every manifest clip in three scenarios against its reference:
/// the pipeline's `restored.wav`, the mixed input itself, and the
/// pipeline's `dialogue.wav`. Pipeline outputs live in
/// `outputs/<clip_id>/`.
pub fn evaluate_scenarios(manifest: &MixManifest, root: &Path, outputs: &Path) -> Result<ScenarioReport> {
    let clips: Vec<ClipScores> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let reference = load_wav(root.join(&e.ost_ref))?;
            let clip_dir = outputs.join(&e.clip_id);
            let mut scores = BTreeMap::new();
            for (scenario, path) in [
                (Scenario::Restored, clip_dir.join(RESTORED_FILE)),
                (Scenario::MixedInput, root.join(&e.mixture)),
                (Scenario::DialogueOnly, clip_dir.join(DIALOGUE_FILE)),
            ] {
                let est = load_wav(&path)?;
                scores.insert(scenario, evaluate(&reference, &est)?);
            }
            Ok(ClipScores {
                clip_id: e.clip_id.clone(),
                scores,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ScenarioReport::from_clips(clips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(v: Vec<f64>) -> AudioClip {
        AudioClip::mono(v, 16_000).unwrap()
    }

    #[test]
    fn hand_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r: Vec<f64> = (0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let half: Vec<f64> = r.iter().map(|v| 0.5 * v).collect();
        let expected = 10.0 * 4f64.log10();
        assert!((sdr(&clip(r.clone()), &clip(half)).unwrap() - expected).abs() <= 1e-6);
        assert_eq!(sdr(&clip(r.clone()), &clip(r.clone())).unwrap(), f64::INFINITY);
        assert!(sdr(&clip(r.clone()), &clip(vec![0.0; 1000])).unwrap().abs() < 1e-12);

        let v = si_sdr(&clip(vec![1.0, 0.0]), &clip(vec![1.0, 1.0])).unwrap();
        assert!(v.abs() <= 1e-9, "{v}");
        let triple: Vec<f64> = r.iter().map(|v| 3.0 * v).collect();
        assert_eq!(si_sdr(&clip(r.clone()), &clip(triple)).unwrap(), f64::INFINITY);
        let flipped: Vec<f64> = r.iter().map(|v| -v).collect();
        assert_eq!(si_sdr(&clip(r), &clip(flipped)).unwrap(), f64::INFINITY);
    }

    #[test]
    fn errors() {
        assert!(matches!(sdr(&clip(vec![0.0; 4]), &clip(vec![1.0; 4])), Err(Error::SilentReference)));
        assert!(matches!(si_sdr(&clip(vec![1.0; 4]), &clip(vec![1.0; 5])), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn closed_form_alpha_beats_any_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let r: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = r.iter().map(|v| 0.7 * v + rng.gen_range(-0.5..0.5)).collect();
            let (si, alpha) = si_sdr_slices(&r, &e);
            // Fraction of the estimate explained by beta * reference.
            let explained = |beta: f64| {
                let resid: f64 = e.iter().zip(&r).map(|(x, y)| (x - beta * y).powi(2)).sum();
                10.0 * (energy(&e) / resid).log10()
            };
            let at_alpha = explained(alpha);
            assert!((at_alpha - 10.0 * (1.0 + 10f64.powf(si / 10.0)).log10()).abs() < 1e-9);
            for i in 0..1000 {
                let beta = alpha * (0.5 + i as f64 / 1000.0);
                assert!(explained(beta) <= at_alpha + 1e-6);
            }
        }
    }

    #[test]
    fn means_skip_sentinels() {
        let m = MeanWithSentinels::of([1.0, f64::INFINITY, 3.0]);
        assert_eq!((m.mean, m.finite, m.sentinels), (Some(2.0), 2, 1));
        let none = MeanWithSentinels::of([f64::INFINITY; 3]);
        assert_eq!((none.mean, none.sentinels), (None, 3));
    }

    #[test]
    fn metric_result_json_round_trip() {
        let m = MetricResult { sdr_db: f64::INFINITY, si_sdr_db: 3.5, alpha: 1.0 };
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<MetricResult>(&s).unwrap(), m);
    }

    #[test]
    fn permuting_clips_keeps_per_clip_values() {
        let mk = |id: &str, v: f64| ClipScores {
            clip_id: id.into(),
            scores: [(Scenario::Restored, MetricResult { sdr_db: v, si_sdr_db: v, alpha: 1.0 })].into(),
        };
        let a = ScenarioReport::from_clips(vec![mk("a", 1.0), mk("b", 5.0)]);
        let b = ScenarioReport::from_clips(vec![mk("b", 5.0), mk("a", 1.0)]);
        assert_eq!(a.summary, b.summary);
    }

    proptest! {
        #[test]
        fn si_sdr_is_scale_invariant(seed in any::<u64>(), c in prop::sample::select(vec![0.01, 0.1, 3.0, 100.0])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ce: Vec<f64> = e.iter().map(|v| c * v).collect();
            let (a, _) = si_sdr_slices(&r, &e);
            let (b, _) = si_sdr_slices(&r, &ce);
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
