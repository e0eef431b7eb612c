use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use ostr::audio::{load_wav, AudioClip};
use ostr::dataset::{build_overlay_benchmark, build_separation_dataset, MixManifest};
use ostr::matching::{load_frames, train_matcher, MatcherModel, MatcherTrainConfig};
use ostr::metrics::si_sdr;
use ostr::pipeline::{Chosen, ClipStatus, Pipeline, PipelineConfig, PipelineReport, REPORT_FILE};
use ostr::separation::{train_mask_estimator, MaskModel, MaskTrainConfig};
use ostr::synth::{generate_corpus, CorpusConfig};

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    overlay: MixManifest,
    mask: PathBuf,
    matcher: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = CorpusConfig {
            ost_tracks: 4,
            bgm_tracks: 4,
            track_secs: 24.0,
            videos: 8,
            video_secs: 8.0,
            overlay_bgm_tracks: 4,
        };
        let c = generate_corpus(&root.join("corpus"), &cfg, 9).unwrap();
        let mix = build_separation_dataset(&c.ost_dir, &c.bgm_dir, 40, 9, &root.join("mix"), 4).unwrap();
        let mask_cfg = MaskTrainConfig { epochs: 6, ..Default::default() };
        let mask = train_mask_estimator(&mix, &root.join("mix"), &mask_cfg, 9).unwrap().model;
        mask.save(root.join("mask.ostr")).unwrap();
        let overlay =
            build_overlay_benchmark(&c.video_audio_dir, &c.overlay_bgm_dir, &c.frames_root, 9, &root.join("ovl"), 4)
                .unwrap();
        let m_cfg = MatcherTrainConfig { epochs: 10, ..Default::default() };
        let matcher = train_matcher(&overlay, &root.join("ovl"), &m_cfg, 9).unwrap().model;
        matcher.save(root.join("matcher.ostr")).unwrap();
        Fixture {
            mask: root.join("mask.ostr"),
            matcher: root.join("matcher.ostr"),
            root,
            overlay,
            _dir: dir,
        }
    })
}

fn pipeline(out: &Path, workers: usize, keep: bool) -> Pipeline {
    let f = fixture();
    let mut cfg = PipelineConfig::new(f.mask.clone(), f.matcher.clone(), out.to_path_buf());
    cfg.workers = workers;
    cfg.keep_intermediates = keep;
    Pipeline::load(cfg).unwrap()
}

#[test]
fn missing_models_fail_before_any_audio() {
    let out = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::new(out.path().join("none.ostr"), fixture().matcher.clone(), out.path().into());
    assert!(Pipeline::load(cfg).is_err());
    assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
}

#[test]
fn every_clip_reported_once_with_input_length() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let report = pipeline(out.path(), 2, true).run_manifest(&f.overlay, &f.root.join("ovl")).unwrap();
    assert_eq!(report.clips.len(), f.overlay.entries.len());
    for (rec, entry) in report.clips.iter().zip(&f.overlay.entries) {
        assert_eq!(rec.clip_id, entry.clip_id);
        assert_eq!(rec.status, ClipStatus::Ok);
        assert_eq!(rec.input_samples, rec.output_samples);
        assert!(matches!(rec.chosen, Some(Chosen::OstCandidate | Chosen::BgmCandidate)));
        let t = rec.timings.unwrap();
        assert!([t.two_stem_ms, t.speech_ms, t.mixed_music_ms, t.matching_ms, t.total_ms].iter().all(|v| *v >= 0.0));
        for stem in ["restored", "dialogue", "vocals", "accompaniment", "ost_candidate", "bgm_candidate"] {
            assert!(out.path().join(&rec.outputs[stem]).is_file(), "{stem}");
        }
        let restored = load_wav(out.path().join(&rec.outputs["restored"])).unwrap();
        assert_eq!(restored.len(), rec.input_samples);
    }
    let file = fs::File::open(out.path().join(REPORT_FILE)).unwrap();
    assert_eq!(PipelineReport::read_jsonl(std::io::BufReader::new(file)).unwrap(), report);
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let f = fixture();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = pipeline(a.path(), 1, false).run_manifest(&f.overlay, &f.root.join("ovl")).unwrap();
    let rb = pipeline(b.path(), 3, false).run_manifest(&f.overlay, &f.root.join("ovl")).unwrap();
    assert_eq!(ra.without_timings(), rb.without_timings());
    for rec in &ra.clips {
        for path in rec.outputs.values() {
            assert_eq!(fs::read(a.path().join(path)).unwrap(), fs::read(b.path().join(path)).unwrap());
        }
    }
}

#[test]
fn a_broken_clip_gets_a_failure_record() {
    let f = fixture();
    let mut m = f.overlay.clone();
    m.entries.truncate(3);
    m.entries[1].frames_dir = Some("frames/does_not_exist".into());
    let out = tempfile::tempdir().unwrap();
    let report = pipeline(out.path(), 2, false).run_manifest(&m, &f.root.join("ovl")).unwrap();
    let statuses: Vec<_> = report.clips.iter().map(|c| c.status.clone()).collect();
    assert_eq!(statuses, vec![ClipStatus::Ok, ClipStatus::Failed, ClipStatus::Ok]);
    assert!(report.clips[1].error.as_deref().unwrap().contains("does_not_exist"));
    assert_eq!(report.failures(), 1);
}

/// The clean video audio (OST plus dialogue, no BGM) as input. With a
/// small model the BGM candidate still carries some leakage, so only its
/// ratio to the OST candidate is bounded.
#[test]
fn pure_ost_accompaniment() {
    let f = fixture();
    let root = f.root.join("ovl");
    let out = tempfile::tempdir().unwrap();
    let p = pipeline(out.path(), 1, false);
    let mut gaps = Vec::new();
    for e in f.overlay.entries.iter().take(6) {
        let clean = load_wav(root.join(&e.ost_ref)).unwrap();
        let frames = load_frames(root.join(e.frames_dir.as_ref().unwrap())).unwrap();
        let run = p.run_clip(&clean, &frames).unwrap();
        let leak = run.bgm_candidate.energy() / run.ost_candidate.energy();
        assert!(leak < 0.5, "{}: {leak:.3}", e.clip_id);
        let restored = si_sdr(&clean, &run.restored).unwrap();
        let overlaid = load_wav(root.join(&e.mixture)).unwrap();
        let from_overlay = p.run_clip(&overlaid, &frames).unwrap();
        gaps.push((restored, si_sdr(&clean, &from_overlay.restored).unwrap()));
    }
    // Clean input restores at least as well as the overlaid version.
    let mean = |k: usize| gaps.iter().map(|g| if k == 0 { g.0 } else { g.1 }).sum::<f64>() / gaps.len() as f64;
    assert!(mean(0) > mean(1), "{gaps:?}");
}

#[test]
fn silence_gives_silence_and_a_flagged_tie() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let p = pipeline(out.path(), 1, false);
    let frames = load_frames(f.root.join("ovl").join(f.overlay.entries[0].frames_dir.as_ref().unwrap())).unwrap();
    let run = p.run_clip(&AudioClip::silence(64_000, 1, 16_000).unwrap(), &frames).unwrap();
    assert_eq!(run.restored.peak(), 0.0);
    assert!(run.outcome.tie);
    assert_eq!(run.chosen(), Chosen::OstCandidate);
    let _ = (MaskModel::load(&f.mask).unwrap(), MatcherModel::load(&f.matcher).unwrap());
}
