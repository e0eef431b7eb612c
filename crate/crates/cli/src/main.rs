mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use config::FileConfig;
use ostr::audio::{load_wav, resample, save_wav, to_mono, WavEncoding};
use ostr::dataset::{
    build_overlay_benchmark, build_separation_dataset, validate_manifest, write_report, MixManifest,
};
use ostr::matching::{
    load_frames, match_clips, motion_features, train_matcher, MatcherConfig, MatcherModel, MatcherTrainConfig,
};
use ostr::metrics::evaluate_scenarios;
use ostr::pipeline::{Pipeline, PipelineConfig, PipelineReport};
use ostr::separation::{
    detect_speech, extract_speech, separate_mixed_music, separate_two_stem, train_mask_estimator, MaskModel,
    MaskTrainConfig, StemBackend,
};
use ostr::spectral::ANALYSIS_RATE;
use ostr::synth::{generate_corpus, CorpusConfig};

/// Removes inserted background music from short-video audio and restores
/// the original soundtrack.
#[derive(Debug, Parser)]
#[command(name = "ostr", version)]
struct Cli {
    /// Seed for every random choice (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default 1).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// TOML settings file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build, synthesise and validate datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train the mask separator or the video-music matcher.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Split one audio file into vocals, dialogue and music stems.
    Separate(SeparateArgs),
    /// Pick which of two audio clips fits a frame sequence.
    Match(MatchArgs),
    /// Score pipeline outputs.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the full restoration pipeline.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Mix random OST and BGM segments into a separation dataset.
    BuildMix {
        #[arg(long)]
        ost_dir: PathBuf,
        #[arg(long)]
        bgm_dir: PathBuf,
        /// Number of mixtures (default 200).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay BGM on video audio to build a restoration benchmark.
    BuildOverlay {
        #[arg(long)]
        video_audio_dir: PathBuf,
        #[arg(long)]
        bgm_dir: PathBuf,
        /// Directory holding one frame folder per video.
        #[arg(long)]
        frames_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a manifest against its files.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Generate a small synthetic corpus to try the tools on.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        tracks: usize,
        #[arg(long, default_value_t = 8)]
        videos: usize,
    },
}

#[derive(Debug, Args)]
struct OptimArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum TrainCommand {
    /// Train the band-mask separator on a mixture manifest's train split.
    Separator {
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the model.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        optim: OptimArgs,
    },
    /// Train the matcher on every entry of a manifest with frames.
    Matcher {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        optim: OptimArgs,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        margin: Option<f64>,
        #[arg(long)]
        levels: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct SeparateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// `builtin` or an external separator command line.
    #[arg(long)]
    backend: Option<String>,
    /// Also split the accompaniment into OST and BGM candidates.
    #[arg(long)]
    mask_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MatchArgs {
    /// Directory of frame PGMs.
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    audio_a: PathBuf,
    #[arg(long)]
    audio_b: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// SDR and SI-SDR for restored, mixed-input and dialogue-only audio.
    Scenarios {
        #[arg(long)]
        manifest: PathBuf,
        /// Pipeline output directory.
        #[arg(long)]
        outputs: PathBuf,
        /// Also write per-clip scores as JSON lines here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum PipelineCommand {
    /// Restore every clip of an overlay manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mask_model: Option<PathBuf>,
        #[arg(long)]
        matcher_model: Option<PathBuf>,
        #[arg(long)]
        backend: Option<String>,
        /// Also write vocals, accompaniment and both music candidates.
        #[arg(long)]
        keep_intermediates: bool,
    },
}

/// Missing required values that could have come from the config file.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A run that completed but found problems (invalid dataset, failed clips).
#[derive(Debug)]
struct ValidationFailure(String);

impl std::fmt::Display for ValidationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ValidationFailure {}

fn required<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| UsageError(format!("missing {what} (pass it as a flag or in the config file)")).into())
}

struct Ctx {
    seed: u64,
    workers: usize,
    file: FileConfig,
}

fn manifest_root(path: &Path) -> Result<(MixManifest, PathBuf)> {
    MixManifest::open(path).with_context(|| format!("cannot open manifest {}", path.display()))
}

fn backend(flag: Option<String>, file: &Option<String>) -> Result<StemBackend> {
    let spec = flag.or_else(|| file.clone()).unwrap_or_else(|| "builtin".into());
    Ok(StemBackend::parse(&spec)?)
}

fn dataset(ctx: &Ctx, cmd: DatasetCommand) -> Result<()> {
    match cmd {
        DatasetCommand::BuildMix { ost_dir, bgm_dir, count, out } => {
            let n = count.or(ctx.file.dataset.count).unwrap_or(200);
            for d in [&ost_dir, &bgm_dir] {
                if !d.is_dir() {
                    bail!("directory not found: {}", d.display());
                }
            }
            let m = build_separation_dataset(&ost_dir, &bgm_dir, n, ctx.seed, &out, ctx.workers)?;
            let (tr, va, te) = m.split_counts();
            println!("{} mixtures ({tr} train / {va} val / {te} test) in {}", m.entries.len(), out.display());
        }
        DatasetCommand::BuildOverlay { video_audio_dir, bgm_dir, frames_dir, out } => {
            for d in [&video_audio_dir, &bgm_dir, &frames_dir] {
                if !d.is_dir() {
                    bail!("directory not found: {}", d.display());
                }
            }
            let m = build_overlay_benchmark(&video_audio_dir, &bgm_dir, &frames_dir, ctx.seed, &out, ctx.workers)?;
            println!("{} overlay clips in {}", m.entries.len(), out.display());
        }
        DatasetCommand::Validate { manifest } => {
            let (m, root) = manifest_root(&manifest)?;
            let report = validate_manifest(&m, &root);
            write_report(&report, io::stdout().lock())?;
            if !report.is_ok() {
                return Err(ValidationFailure(format!("{} violation(s)", report.violations.len())).into());
            }
        }
        DatasetCommand::Synth { out, tracks, videos } => {
            let cfg = CorpusConfig {
                ost_tracks: tracks,
                bgm_tracks: tracks,
                videos,
                overlay_bgm_tracks: tracks,
                ..CorpusConfig::default()
            };
            let layout = generate_corpus(&out, &cfg, ctx.seed)?;
            println!("ost: {}", layout.ost_dir.display());
            println!("bgm: {}", layout.bgm_dir.display());
            println!("video audio: {}", layout.video_audio_dir.display());
            println!("overlay bgm: {}", layout.overlay_bgm_dir.display());
            println!("frames: {}", layout.frames_root.display());
        }
    }
    Ok(())
}

fn print_curve(curve: &[f64]) {
    for (epoch, loss) in curve.iter().enumerate() {
        println!("epoch {epoch:>3}  loss {loss:.6}");
    }
}

fn train(ctx: &Ctx, cmd: TrainCommand) -> Result<()> {
    match cmd {
        TrainCommand::Separator { manifest, out, optim } => {
            let (m, root) = manifest_root(&manifest)?;
            let file = &ctx.file.train.separator;
            let d = MaskTrainConfig::default();
            let cfg = MaskTrainConfig {
                epochs: optim.epochs.or(file.epochs).unwrap_or(d.epochs),
                batch_size: optim.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
                learning_rate: optim.learning_rate.or(file.learning_rate).unwrap_or(d.learning_rate),
                ..d
            };
            let trained = train_mask_estimator(&m, &root, &cfg, ctx.seed)?;
            trained.model.save(&out)?;
            print_curve(&trained.loss_curve);
            println!("separator written to {}", out.display());
        }
        TrainCommand::Matcher { manifest, out, optim, dim, margin, levels } => {
            let (m, root) = manifest_root(&manifest)?;
            let file = &ctx.file.train.matcher;
            let d = MatcherTrainConfig::default();
            let cfg = MatcherTrainConfig {
                model: MatcherConfig {
                    dim: dim.or(file.dim).unwrap_or(d.model.dim),
                    margin: margin.or(file.margin).unwrap_or(d.model.margin),
                    levels: levels.or(file.levels).unwrap_or(d.model.levels),
                },
                epochs: optim.epochs.or(file.epochs).unwrap_or(d.epochs),
                batch_size: optim.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
                learning_rate: optim.learning_rate.or(file.learning_rate).unwrap_or(d.learning_rate),
            };
            let trained = train_matcher(&m, &root, &cfg, ctx.seed)?;
            trained.model.save(&out)?;
            print_curve(&trained.loss_curve);
            println!("matcher written to {}", out.display());
        }
    }
    Ok(())
}

fn separate(ctx: &Ctx, args: SeparateArgs) -> Result<()> {
    let backend = backend(args.backend, &ctx.file.pipeline.backend)?;
    let mask = args.mask_model.or_else(|| ctx.file.pipeline.mask_model.clone());
    let mask = mask.map(MaskModel::load).transpose()?;
    let input = resample(&load_wav(&args.input)?, ANALYSIS_RATE)?;
    let stems = separate_two_stem(&input, &backend)?;
    let segments = detect_speech(&stems.vocals)?;
    let dialogue = extract_speech(&stems.vocals, &segments)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    let mut outputs = vec![("vocals", stems.vocals), ("dialogue", dialogue)];
    if let Some(model) = &mask {
        let music = separate_mixed_music(&to_mono(&stems.accompaniment), model)?;
        outputs.push(("ost_candidate", music.ost));
        outputs.push(("bgm_candidate", music.bgm));
    }
    outputs.push(("accompaniment", stems.accompaniment));
    for (name, clip) in &outputs {
        save_wav(clip, args.out_dir.join(format!("{name}.wav")), WavEncoding::Float32)?;
    }
    for (start, end) in segments.intervals() {
        println!("speech {start:.2}-{end:.2} s");
    }
    println!("stems written to {}", args.out_dir.display());
    Ok(())
}

fn match_cmd(ctx: &Ctx, args: MatchArgs) -> Result<()> {
    let path = required(args.model.or_else(|| ctx.file.pipeline.matcher_model.clone()), "--model")?;
    let model = MatcherModel::load(path)?;
    let frames = load_frames(&args.frames)?;
    let a = resample(&load_wav(&args.audio_a)?, ANALYSIS_RATE)?;
    let b = resample(&load_wav(&args.audio_b)?, ANALYSIS_RATE)?;
    let outcome = match_clips(&frames, &motion_features(&frames), &a, &b, &model)?;
    let choice = match outcome.choice {
        ostr::matching::Choice::A => "a",
        ostr::matching::Choice::B => "b",
    };
    println!(
        "{}",
        serde_json::json!({
            "choice": choice,
            "distance_a": outcome.distance_a,
            "distance_b": outcome.distance_b,
            "tie": outcome.tie,
        })
    );
    Ok(())
}

fn eval(cmd: EvalCommand) -> Result<()> {
    let EvalCommand::Scenarios { manifest, outputs, out } = cmd;
    let (m, root) = manifest_root(&manifest)?;
    let report = evaluate_scenarios(&m, &root, &outputs)?;
    if let Some(path) = out {
        let f = fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
        let mut w = io::BufWriter::new(f);
        report.write_jsonl(&mut w)?;
        w.flush()?;
    }
    report.write_table(io::stdout().lock())?;
    Ok(())
}

fn pipeline(ctx: &Ctx, cmd: PipelineCommand) -> Result<()> {
    let PipelineCommand::Run { manifest, out, mask_model, matcher_model, backend: b, keep_intermediates } = cmd;
    let file = &ctx.file.pipeline;
    let mask_model = required(mask_model.or_else(|| file.mask_model.clone()), "--mask-model")?;
    let matcher_model = required(matcher_model.or_else(|| file.matcher_model.clone()), "--matcher-model")?;
    let mut cfg = PipelineConfig::new(mask_model, matcher_model, out.clone());
    cfg.backend = backend(b, &file.backend)?;
    cfg.workers = ctx.workers;
    cfg.seed = ctx.seed;
    cfg.keep_intermediates = keep_intermediates || file.keep_intermediates.unwrap_or(false);
    let (m, root) = manifest_root(&manifest)?;
    let pipeline = Pipeline::load(cfg)?;
    info!("running {} clips on {} worker(s)", m.entries.len(), ctx.workers);
    let report: PipelineReport = pipeline.run_manifest(&m, &root)?;
    let t = report.aggregate;
    println!(
        "{} clips, {} failed; stage time (ms): two-stem {:.0}, speech {:.0}, mixed-music {:.0}, matching {:.0}, total {:.0}",
        report.clips.len(),
        report.failures(),
        t.two_stem_ms,
        t.speech_ms,
        t.mixed_music_ms,
        t.matching_ms,
        t.total_ms
    );
    println!("outputs and report in {}", out.display());
    if report.failures() > 0 {
        return Err(ValidationFailure(format!("{} clip(s) failed; see the report", report.failures())).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        workers: cli.workers.or(file.workers).unwrap_or(1).max(1),
        file,
    };
    match cli.command {
        Command::Dataset(c) => dataset(&ctx, c),
        Command::Train(c) => train(&ctx, c),
        Command::Separate(a) => separate(&ctx, a),
        Command::Match(a) => match_cmd(&ctx, a),
        Command::Eval(c) => eval(c),
        Command::Pipeline(c) => pipeline(&ctx, c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // Help and version exit 0, usage errors 2.
        Err(e) => e.exit(),
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("error: {line}; run with --help for usage");
                ExitCode::from(2)
            } else {
                eprintln!("error: {line}");
                ExitCode::from(1)
            }
        }
    }
}
