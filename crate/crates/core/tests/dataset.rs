use std::fs;
use std::path::Path;

use ostr::audio::{load_wav, save_wav, AudioClip, WavEncoding};
use ostr::dataset::{
    build_overlay_benchmark, build_separation_dataset, split_sizes, validate_manifest, MixManifest, Split,
    Violation, MANIFEST_FILE,
};
use ostr::matching::{save_pgm, Raster, FRAME_SIZE};
use ostr::synth::{bgm_track, ost_track};
use ostr::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn write_tracks(dir: &Path, prefix: &str, n: usize, secs: f64, ost: bool) {
    fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64 + secs as u64);
    for i in 0..n {
        let x = if ost { ost_track(secs, i, &mut rng) } else { bgm_track(secs, 90.0, &mut rng) };
        save_wav(&AudioClip::mono(x, 16_000).unwrap(), dir.join(format!("{prefix}{i}.wav")), WavEncoding::Float32)
            .unwrap();
    }
}

fn sources(root: &Path) {
    write_tracks(&root.join("ost"), "o", 2, 12.0, true);
    write_tracks(&root.join("bgm"), "b", 2, 12.0, false);
}

fn build(root: &Path, n: usize, seed: u64, out: &str, workers: usize) -> MixManifest {
    build_separation_dataset(&root.join("ost"), &root.join("bgm"), n, seed, &root.join(out), workers).unwrap()
}

#[test]
fn twenty_mixtures_split_sixteen_two_two() {
    let dir = tempfile::tempdir().unwrap();
    sources(dir.path());
    let m = build(dir.path(), 20, 1, "mix", 2);
    assert_eq!(m.split_counts(), (16, 2, 2));
    assert_eq!(split_sizes(25), (21, 2, 2));
    assert_eq!(split_sizes(9), (9, 0, 0));
}

#[test]
fn clips_are_four_seconds_and_sum_exactly() {
    let dir = tempfile::tempdir().unwrap();
    sources(dir.path());
    let m = build(dir.path(), 10, 2, "mix", 1);
    let root = dir.path().join("mix");
    for e in &m.entries {
        let mix = load_wav(root.join(&e.mixture)).unwrap();
        let ost = load_wav(root.join(&e.ost_ref)).unwrap();
        let bgm = load_wav(root.join(&e.bgm_ref)).unwrap();
        for c in [&mix, &ost, &bgm] {
            assert_eq!((c.len(), c.sample_rate()), (64_000, 16_000));
        }
        for ((x, a), b) in mix.channel(0).iter().zip(ost.channel(0)).zip(bgm.channel(0)) {
            assert_eq!(*x as f32, *a as f32 + *b as f32);
        }
    }
}

#[test]
fn same_seed_same_bytes_regardless_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    sources(dir.path());
    build(dir.path(), 12, 3, "a", 1);
    build(dir.path(), 12, 3, "b", 4);
    let read = |d: &str| fs::read(dir.path().join(d).join(MANIFEST_FILE)).unwrap();
    assert_eq!(read("a"), read("b"));
    let m = MixManifest::load(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
    for e in &m.entries {
        assert_eq!(
            fs::read(dir.path().join("a").join(&e.mixture)).unwrap(),
            fs::read(dir.path().join("b").join(&e.mixture)).unwrap()
        );
    }
    build(dir.path(), 12, 4, "c", 1);
    assert_ne!(read("a"), read("c"));
}

#[test]
fn silent_tracks_are_skipped_and_empty_sources_fail() {
    let dir = tempfile::tempdir().unwrap();
    sources(dir.path());
    save_wav(
        &AudioClip::silence(16_000 * 8, 1, 16_000).unwrap(),
        dir.path().join("ost").join("quiet.wav"),
        WavEncoding::Float32,
    )
    .unwrap();
    let m = build(dir.path(), 30, 5, "mix", 2);
    assert!(m.entries.iter().all(|e| e.ost_track_id != "quiet"));

    fs::create_dir_all(dir.path().join("empty")).unwrap();
    let err = build_separation_dataset(
        &dir.path().join("empty"),
        &dir.path().join("bgm"),
        4,
        1,
        &dir.path().join("never"),
        1,
    );
    assert!(err.is_err());
    let missing = build_separation_dataset(
        &dir.path().join("absent"),
        &dir.path().join("bgm"),
        4,
        1,
        &dir.path().join("never"),
        1,
    );
    assert!(matches!(missing, Err(Error::MissingFile(_))));
}

#[test]
fn validation_reports_deleted_files_and_bad_splits() {
    let dir = tempfile::tempdir().unwrap();
    sources(dir.path());
    let mut m = build(dir.path(), 20, 6, "mix", 2);
    let root = dir.path().join("mix");
    let fresh = validate_manifest(&m, &root);
    assert!(fresh.is_ok(), "{:?}", fresh.violations);
    assert!(!fresh.warnings.is_empty(), "split leakage warning expected");

    fs::remove_file(root.join(&m.entries[3].bgm_ref)).unwrap();
    let r = validate_manifest(&m, &root);
    assert_eq!(r.violations.len(), 1);
    assert!(matches!(r.violations[0], Violation::MissingFile { .. }));

    let mut m2 = build(dir.path(), 20, 6, "mix2", 2);
    for (i, e) in m2.entries.iter_mut().enumerate() {
        e.split = if i < 18 { Split::Train } else { Split::Val };
    }
    let r = validate_manifest(&m2, &dir.path().join("mix2"));
    assert!(r.violations.iter().any(|v| matches!(v, Violation::SplitRatio { .. })));

    m.entries[1].clip_id = m.entries[0].clip_id.clone();
    let r = validate_manifest(&m, &root);
    assert!(r.violations.iter().any(|v| matches!(v, Violation::DuplicateClipId(_))));
}

#[test]
fn manifest_round_trips_as_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    sources(dir.path());
    let m = build(dir.path(), 10, 7, "mix", 1);
    let text = m.to_jsonl();
    assert_eq!(text.lines().count(), 11);
    assert_eq!(MixManifest::from_reader(text.as_bytes()).unwrap(), m);
    assert!(MixManifest::from_reader("{\"not\": \"a header\"}\n".as_bytes()).is_err());
}

fn write_frames(dir: &Path, n: usize) {
    fs::create_dir_all(dir).unwrap();
    for k in 0..n {
        let r = Raster::new(FRAME_SIZE, FRAME_SIZE, vec![(k % 5) as f64 / 5.0; FRAME_SIZE * FRAME_SIZE]).unwrap();
        save_pgm(&r, dir.join(format!("frame_{k:04}.pgm"))).unwrap();
    }
}

#[test]
fn overlay_rejects_short_bgm_and_pairs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tracks(&d.join("video"), "v", 1, 60.0, true);
    write_frames(&d.join("frames").join("v0"), 60);
    write_tracks(&d.join("short_bgm"), "b", 1, 30.0, false);
    let err = build_overlay_benchmark(&d.join("video"), &d.join("short_bgm"), &d.join("frames"), 1, &d.join("o"), 1);
    assert!(matches!(err, Err(Error::InvalidInput(_))), "{err:?}");

    write_tracks(&d.join("long_bgm"), "b", 3, 62.0, false);
    let a = build_overlay_benchmark(&d.join("video"), &d.join("long_bgm"), &d.join("frames"), 1, &d.join("a"), 1)
        .unwrap();
    let b = build_overlay_benchmark(&d.join("video"), &d.join("long_bgm"), &d.join("frames"), 1, &d.join("b"), 3)
        .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.entries.len(), 15);
    assert!(a.entries.iter().all(|e| e.split == Split::Test && e.bgm_track_id == a.entries[0].bgm_track_id));
    let frames = d.join("a").join(a.entries[2].frames_dir.as_ref().unwrap());
    assert_eq!(fs::read_dir(frames).unwrap().count(), 4);
    assert!(validate_manifest(&a, &d.join("a")).is_ok());
}

#[test]
fn overlay_needs_frame_directories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_tracks(&d.join("video"), "v", 1, 8.0, true);
    write_tracks(&d.join("bgm"), "b", 1, 10.0, false);
    fs::create_dir_all(d.join("frames")).unwrap();
    let err = build_overlay_benchmark(&d.join("video"), &d.join("bgm"), &d.join("frames"), 1, &d.join("o"), 1);
    assert!(matches!(err, Err(Error::MissingFile(_))), "{err:?}");
}
