use std::path::Path;
use std::process::{Command, Output};

fn ostr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ostr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ostr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let out = ostr(&["pipeline", "run", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("--matcher-model"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = ostr(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_model_without_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ostr(&["pipeline", "run", "--manifest", "m.jsonl", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_directory_gives_one_line_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = ostr(&[
        "dataset", "build-mix", "--ost-dir", s(&missing), "--bgm-dir", s(&missing), "--out", s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("nope"));
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ostr.toml");
    std::fs::write(&cfg, "sede = 1\n").unwrap();
    let out = ostr(&["--config", s(&cfg), "dataset", "validate", "--manifest", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
}

#[test]
fn full_desk_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = |rel: &str| dir.path().join(rel);
    ok(&["--seed", "5", "dataset", "synth", "--out", s(&d("corpus")), "--tracks", "3", "--videos", "2"]);
    let out = ok(&[
        "--seed", "5", "--workers", "2", "dataset", "build-mix",
        "--ost-dir", s(&d("corpus/ost")), "--bgm-dir", s(&d("corpus/bgm")), "--count", "20", "--out", s(&d("mix")),
    ]);
    assert!(out.contains("16 train / 2 val / 2 test"), "{out}");
    ok(&["dataset", "validate", "--manifest", s(&d("mix/manifest.jsonl"))]);

    let cfg = d("ostr.toml");
    std::fs::write(
        &cfg,
        format!(
            "seed = 5\nworkers = 2\n[train.separator]\nepochs = 2\n[train.matcher]\nepochs = 3\n\
             [pipeline]\nmask_model = \"{}\"\nmatcher_model = \"{}\"\n",
            s(&d("mask.ostr")),
            s(&d("matcher.ostr"))
        ),
    )
    .unwrap();
    let c = s(&cfg);
    ok(&["--config", c, "train", "separator", "--manifest", s(&d("mix/manifest.jsonl")), "--out", s(&d("mask.ostr"))]);
    ok(&[
        "--config", c, "dataset", "build-overlay",
        "--video-audio-dir", s(&d("corpus/video_audio")), "--bgm-dir", s(&d("corpus/overlay_bgm")),
        "--frames-dir", s(&d("corpus/frames")), "--out", s(&d("overlay")),
    ]);
    let curve = ok(&[
        "--config", c, "train", "matcher", "--manifest", s(&d("overlay/manifest.jsonl")), "--out", s(&d("matcher.ostr")),
    ]);
    assert_eq!(curve.lines().filter(|l| l.starts_with("epoch")).count(), 4);

    ok(&["--config", c, "pipeline", "run", "--manifest", s(&d("overlay/manifest.jsonl")), "--out", s(&d("out"))]);
    assert!(d("out/report.jsonl").is_file());
    assert!(d("out/ovl00000/restored.wav").is_file());
    let table = ok(&[
        "eval", "scenarios", "--manifest", s(&d("overlay/manifest.jsonl")), "--outputs", s(&d("out")),
        "--out", s(&d("scores.jsonl")),
    ]);
    for name in ["restored", "mixed_input", "dialogue_only"] {
        assert!(table.contains(name), "{table}");
    }
    assert!(std::fs::read_to_string(d("scores.jsonl")).unwrap().lines().count() >= 8);

    let m = ok(&[
        "match", "--frames", s(&d("overlay/frames/ovl00000")), "--model", s(&d("matcher.ostr")),
        "--audio-a", s(&d("overlay/ost/ovl00000.wav")), "--audio-b", s(&d("overlay/bgm/ovl00000.wav")),
    ]);
    assert!(m.contains("\"choice\""), "{m}");
    ok(&[
        "separate", "--input", s(&d("overlay/mixtures/ovl00000.wav")), "--out-dir", s(&d("sep")),
        "--mask-model", s(&d("mask.ostr")),
    ]);
    for stem in ["vocals", "dialogue", "accompaniment", "ost_candidate", "bgm_candidate"] {
        assert!(d(&format!("sep/{stem}.wav")).is_file(), "{stem}");
    }
}
