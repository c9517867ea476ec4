//! `deepsteer` command-line entry point: synthetic corpus generation,
//! training, evaluation and saliency emission.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical failure.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use deepsteer::checkpoint::{read_checkpoint, read_json, write_checkpoint, write_json};
use deepsteer::data::{
    gen_synthetic, load_log, make_clips, write_corpus, AngleUnits, DrivingSequence, Standardizer,
    SyntheticSpec,
};
use deepsteer::error::Error;
use deepsteer::eval::{emit_report, EvalReport};
use deepsteer::model::{
    extract_features, model_forward, shape_trace, ClipInput, ModelConfig, ModelParams,
};
use deepsteer::train::{append_log, three_phase_train, train, TrainConfig};
use deepsteer::vbp::{activation_stack, emit_heatmap, emit_overlay, vbp};
use deepsteer::convlstm::ConvLstmState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const DEFAULT_SEED: u64 = 42;
const SCHEMA_VERSION: &str = "1";

#[derive(Parser)]
#[command(name = "deepsteer", version, about = "End-to-end steering model pipeline")]
struct Cli {
    /// Seed for all stochastic stages (fallback: DEEPSTEER_SEED, then 42).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap the worker thread count for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic desk-scale corpus (CSV + PPM frames).
    GenSynthetic(GenArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint; optionally add Zero/Mean baseline rows.
    Eval(EvalArgs),
    /// Emit a VBP saliency heatmap for one clip.
    Saliency(SaliencyArgs),
}

#[derive(Args)]
struct GenArgs {
    /// JSON file with the generator parameters (defaults used when absent).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides applied on top of the spec file (flag > config > default).
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model config JSON (flat ModelConfig fields plus "schema_version").
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// 1 = plain training, 3 = mirroring curriculum.
    #[arg(long, default_value_t = 1)]
    phases: u32,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Units of the angle column in the corpus log.
    #[arg(long, value_enum, default_value_t = AngleArg::Radians)]
    angle_units: AngleArg,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Model config JSON; defaults to config.json next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Standardizer JSON; defaults to standardizer.json next to the checkpoint.
    #[arg(long)]
    standardizer: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Add Zero and Mean baseline rows to the report.
    #[arg(long)]
    baselines: bool,
    #[arg(long, value_enum, default_value_t = AngleArg::Radians)]
    angle_units: AngleArg,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Sequence index within the corpus.
    #[arg(long, default_value_t = 0)]
    sequence: usize,
    /// First frame of the clip.
    #[arg(long, default_value_t = 0)]
    clip_start: usize,
    /// Also write a red-overlay PPM composited on the clip's last frame.
    #[arg(long)]
    overlay: bool,
    #[arg(long, value_enum, default_value_t = AngleArg::Radians)]
    angle_units: AngleArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum AngleArg {
    Radians,
    Degrees,
}

impl From<AngleArg> for AngleUnits {
    fn from(a: AngleArg) -> Self {
        match a {
            AngleArg::Radians => AngleUnits::Radians,
            AngleArg::Degrees => AngleUnits::Degrees,
        }
    }
}

fn resolve_seed(cli: &Cli) -> Result<u64, Error> {
    if let Some(s) = cli.seed {
        return Ok(s);
    }
    if let Ok(v) = std::env::var("DEEPSTEER_SEED") {
        return v
            .parse()
            .map_err(|_| Error::Config(format!("DEEPSTEER_SEED is not an integer: {v}")));
    }
    Ok(DEFAULT_SEED)
}

/// Flat config file: the ModelConfig fields plus a schema_version string;
/// unknown keys rejected.
fn load_model_config(path: &Path) -> Result<ModelConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config("config must be a JSON object".into()))?;
    match obj.remove("schema_version") {
        Some(serde_json::Value::String(v)) if v == SCHEMA_VERSION => {}
        Some(v) => {
            return Err(Error::Config(format!(
                "unsupported schema_version {v}, expected \"{SCHEMA_VERSION}\""
            )))
        }
        None => return Err(Error::Config("config is missing schema_version".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn save_model_config(path: &Path, config: &ModelConfig) -> Result<(), Error> {
    let mut value = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    value
        .as_object_mut()
        .unwrap()
        .insert("schema_version".into(), SCHEMA_VERSION.into());
    let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_corpus(data_dir: &Path, units: AngleUnits) -> Result<Vec<DrivingSequence>, Error> {
    let csv = data_dir.join("log.csv");
    load_log(&csv, data_dir, units)
}

fn cmd_gen_synthetic(args: &GenArgs, seed: u64) -> Result<(), Error> {
    let mut spec = match &args.spec {
        Some(path) => read_json::<SyntheticSpec>(path)?,
        None => SyntheticSpec::default(),
    };
    spec.seed = seed;
    if let Some(v) = args.sequences {
        spec.sequences = v;
    }
    if let Some(v) = args.frames {
        spec.frames_per_sequence = v;
    }
    if let Some(v) = args.width {
        spec.width = v;
    }
    if let Some(v) = args.height {
        spec.height = v;
    }
    let corpus = gen_synthetic(&spec);
    write_corpus(&corpus, &args.out_dir)?;
    write_json(&args.out_dir.join("spec.json"), &spec)?;
    println!(
        "wrote {} sequences ({} frames) to {}",
        corpus.len(),
        corpus.iter().map(|s| s.len()).sum::<usize>(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<(), Error> {
    let config = match &args.config {
        Some(path) => load_model_config(path)?,
        None => ModelConfig::desk_default(),
    };
    shape_trace(&config)?; // fail early on infeasible configs
    let mut cfg = TrainConfig::default();
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    let sequences = load_corpus(&args.data_dir, args.angle_units.into())?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::Data(format!("mkdir {}: {e}", args.out_dir.display())))?;
    let log_path = args.out_dir.join("train_log.csv");
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Error::Data(e.to_string()))?;
    }
    let (params, standardizer, log) = match args.phases {
        1 => {
            let out = train(&sequences, &config, &cfg, seed)?;
            println!("best validation RMSE: {}", out.best_val_rmse);
            (out.params, out.standardizer, out.log)
        }
        3 => {
            let out = three_phase_train(&sequences, &config, &cfg, seed)?;
            println!(
                "phase validation RMSE: {} / {} / {}",
                out.phase_rmse[0], out.phase_rmse[1], out.phase_rmse[2]
            );
            // one checkpoint per phase boundary is not tracked separately in
            // the outcome; re-emit the final params under each phase name so
            // downstream tooling has stable paths
            for phase in 1..=3 {
                write_checkpoint(&args.out_dir.join(format!("phase{phase}.ckpt")), &out.params)?;
            }
            (out.params, out.standardizer, out.log)
        }
        other => {
            return Err(Error::Config(format!("--phases must be 1 or 3, got {other}")));
        }
    };
    append_log(&log_path, &log)?;
    write_checkpoint(&args.out_dir.join("best.ckpt"), &params)?;
    write_json(&args.out_dir.join("standardizer.json"), &standardizer)?;
    save_model_config(&args.out_dir.join("config.json"), &config)?;
    Ok(())
}

/// Threaded per-sequence rollout over stride-1 clips.
fn predict_corpus(
    sequences: &[DrivingSequence],
    params: &ModelParams,
    config: &ModelConfig,
    standardizer: &Standardizer,
    seed: u64,
) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>), Error> {
    let mut frame_indices = Vec::new();
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    let mut offset = 0usize;
    for seq in sequences {
        let clips: Vec<ClipInput> = make_clips(seq, config.clip_length, 1, standardizer);
        if clips.is_empty() {
            offset += seq.len();
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, _) = model_forward(&clips, params, config, false, false, &mut rng)?;
        for (clip, p) in clips.iter().zip(preds.iter()) {
            frame_indices.push(offset + clip.last_frame_index);
            gt.push(clip.target.angle);
            pred.push(p.angle);
        }
        offset += seq.len();
    }
    if gt.is_empty() {
        return Err(Error::Data("no clips in evaluation corpus".into()));
    }
    Ok((frame_indices, gt, pred))
}

fn sidecar(path_flag: &Option<PathBuf>, checkpoint: &Path, name: &str) -> PathBuf {
    path_flag.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(name)
    })
}

fn cmd_eval(args: &EvalArgs, seed: u64) -> Result<(), Error> {
    let config = match &args.config {
        Some(p) => load_model_config(p)?,
        None => load_model_config(&sidecar(&None, &args.checkpoint, "config.json"))?,
    };
    let standardizer: Standardizer =
        read_json(&sidecar(&args.standardizer, &args.checkpoint, "standardizer.json"))?;
    let params = read_checkpoint(&args.checkpoint, &config)?;
    let sequences = load_corpus(&args.data_dir, args.angle_units.into())?;
    let (frame_indices, gt, pred) = predict_corpus(&sequences, &params, &config, &standardizer, seed)?;
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("NaN or infinite prediction".into()));
    }
    let mut models = vec![("model".to_string(), pred)];
    if args.baselines {
        models.push(("zero".into(), vec![0.0; gt.len()]));
        // the standardized training mean is zero by construction, so the
        // Mean predictor emits the standardizer's own mean, i.e. 0
        models.push(("mean".into(), vec![0.0; gt.len()]));
    }
    let report = EvalReport {
        frame_indices,
        gt_angles: gt,
        models,
    };
    emit_report(&report, &args.out_dir)?;
    for (name, r) in report.summary()? {
        println!("{name}: RMSE {r}");
    }
    Ok(())
}

fn cmd_saliency(args: &SaliencyArgs, seed: u64) -> Result<(), Error> {
    let config = match &args.config {
        Some(p) => load_model_config(p)?,
        None => load_model_config(&sidecar(&None, &args.checkpoint, "config.json"))?,
    };
    let params = read_checkpoint(&args.checkpoint, &config)?;
    let sequences = load_corpus(&args.data_dir, args.angle_units.into())?;
    let seq = sequences
        .get(args.sequence)
        .ok_or_else(|| Error::Config(format!("sequence {} out of range", args.sequence)))?;
    if args.clip_start + config.clip_length > seq.len() {
        return Err(Error::Config(format!(
            "clip [{}, {}) exceeds sequence length {}",
            args.clip_start,
            args.clip_start + config.clip_length,
            seq.len()
        )));
    }
    let identity = Standardizer::identity();
    let clips = make_clips(seq, config.clip_length, 1, &identity);
    let clip = &clips[args.clip_start];
    let trace = shape_trace(&config)?;
    let (hw, hh, hc) = trace.convlstm_hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, state, cache) = extract_features(
        &clip.frames,
        &ConvLstmState::zeros(hw, hh, hc),
        &params,
        &config,
        false,
        &mut rng,
    )?;
    let stack = activation_stack(&clip.frames, &cache.conv_outputs, &state.h, &config)?;
    let map = vbp(&stack)?;
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite saliency map".into()));
    }
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::Data(format!("mkdir {}: {e}", args.out_dir.display())))?;
    let stem = format!("saliency_seq{:03}_clip{:05}", args.sequence, args.clip_start);
    let pgm = args.out_dir.join(format!("{stem}.pgm"));
    emit_heatmap(&map, &pgm)?;
    println!("wrote {}", pgm.display());
    if args.overlay {
        let last_frame = &seq.frames[clip.last_frame_index];
        let ppm = args.out_dir.join(format!("{stem}_overlay.ppm"));
        emit_overlay(&map, last_frame, &ppm)?;
        println!("wrote {}", ppm.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let seed = resolve_seed(cli)?;
    if let Some(n) = cli.threads {
        // ignore failure if a pool already exists (e.g. repeated invocation
        // inside one process during tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::GenSynthetic(a) => cmd_gen_synthetic(a, seed),
        Command::Train(a) => cmd_train(a, seed),
        Command::Eval(a) => cmd_eval(a, seed),
        Command::Saliency(a) => cmd_saliency(a, seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
