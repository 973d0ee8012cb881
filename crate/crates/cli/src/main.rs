//! Command-line front end: dataset synthesis, training, inference, tube
//! linking, evaluation, and the gradient-check battery. Every command reads
//! and writes plain files so runs are diffable and scriptable.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use actdet_core::detector::{DecodeConfig, DetectorModel};
use actdet_core::formats::{
    load_checkpoint, read_jsonl, save_checkpoint, write_jsonl, write_metrics, KvReader,
};
use actdet_core::formats::{DetectionRecord, GtRecord, TubeRecord};
use actdet_core::gradcheck::{standard_suite, GradCheckConfig};
use actdet_core::graph::GradFault;
use actdet_core::loss::{LossMode, MiningRule};
use actdet_core::pipeline::{
    evaluate_detections, evaluate_tubes, fuse_detections, infer_dataset, link_detections,
};
use actdet_core::synth::{generate_dataset, load_dataset, write_dataset, SynthConfig};
use actdet_core::train::{train, TrainConfig};
use actdet_core::tubes::LinkConfig;
use actdet_core::DetectorConfig;

#[derive(Parser)]
#[command(name = "actdet", version, about = "Action detection in untrimmed video, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic untrimmed-video dataset
    Synth(SynthArgs),
    /// Train a detector on a dataset directory
    Train(TrainArgs),
    /// Run a checkpoint over a dataset and write per-frame detections
    Infer(InferArgs),
    /// Link detections into trimmed, scored tubes
    Link(LinkArgs),
    /// Score tubes and/or detections against ground truth
    Eval(EvalArgs),
    /// Finite-difference check of every backward formula
    Gradcheck(GradcheckArgs),
    /// Average the action scores of two detection files
    Fuse(FuseArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// key=value config file; defaults apply for absent keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of episodes to generate
    #[arg(long)]
    episodes: usize,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `synth`
    #[arg(long)]
    data: PathBuf,
    /// key=value config file for optimizer and model overrides
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss ablation
    #[arg(long, value_enum, default_value_t = Mode::Tac)]
    mode: Mode,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint from `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to run over
    #[arg(long)]
    data: PathBuf,
    /// key=value config file for decode settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Detections JSONL to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LinkArgs {
    /// Detections JSONL from `infer`
    #[arg(long)]
    dets: PathBuf,
    /// key=value config file for linking and trimming settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-estimate frame scores over a short centered window
    #[arg(long)]
    refine: bool,
    /// Tubes JSONL to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Tubes JSONL; tube metrics are zero without it
    #[arg(long)]
    tubes: Option<PathBuf>,
    /// Detections JSONL; frame metrics fall back to tube frames without it
    #[arg(long)]
    dets: Option<PathBuf>,
    /// Ground-truth JSONL
    #[arg(long)]
    gt: PathBuf,
    /// Metrics JSON to write; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Largest acceptable relative error
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Elements checked per input tensor; 0 checks all
    #[arg(long, default_value_t = 8)]
    max_checks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one backward formula to prove the check catches it
    #[arg(long, hide = true)]
    inject_bug: bool,
}

#[derive(Args)]
struct FuseArgs {
    /// First detections JSONL
    #[arg(long)]
    a: PathBuf,
    /// Second detections JSONL, same videos and boxes
    #[arg(long)]
    b: PathBuf,
    /// Fused detections JSONL to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Transition-aware loss with mined transitional anchors
    Tac,
    /// Mined transitional anchors trained as background instead
    BgBaseline,
    /// No transitional mining at all
    NoTac,
}

impl Mode {
    fn loss_mode(self) -> LossMode {
        match self {
            Mode::Tac => LossMode::TransitionAware,
            Mode::BgBaseline => LossMode::TransitionAsBackground,
            Mode::NoTac => LossMode::NoMining,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Link(args) => cmd_link(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Fuse(args) => cmd_fuse(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn kv_for(path: &Option<PathBuf>) -> Result<KvReader> {
    match path {
        Some(p) => Ok(KvReader::load(p)?),
        None => Ok(KvReader::parse("", "<defaults>")?),
    }
}

fn take_pair(kv: &mut KvReader, key: &str) -> Result<Option<(usize, usize)>> {
    let Some(list) = kv.take_list::<usize>(key)? else { return Ok(None) };
    match list[..] {
        [lo, hi] => Ok(Some((lo, hi))),
        _ => bail!("{key} wants two comma-separated values"),
    }
}

fn synth_config(kv: &mut KvReader) -> Result<SynthConfig> {
    let mut cfg = SynthConfig::default();
    if let Some(v) = kv.take("frame_size")? {
        cfg.frame_size = v;
    }
    if let Some(v) = kv.take("video_len")? {
        cfg.video_len = v;
    }
    if let Some(v) = kv.take("num_classes")? {
        cfg.num_classes = v;
    }
    if let Some(v) = take_pair(kv, "actor_size")? {
        cfg.actor_size = v;
    }
    if let Some(v) = take_pair(kv, "transition_len")? {
        cfg.transition_len = v;
    }
    if let Some(v) = take_pair(kv, "active_len")? {
        cfg.active_len = v;
    }
    if let Some(v) = kv.take("distractors")? {
        cfg.distractors = v;
    }
    if let Some(v) = kv.take("noise_amp")? {
        cfg.noise_amp = v;
    }
    if let Some(v) = kv.take("seed")? {
        cfg.seed = v;
    }
    Ok(cfg)
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode> {
    let mut kv = kv_for(&args.config)?;
    let cfg = synth_config(&mut kv)?;
    kv.finish()?;
    let episodes = generate_dataset(&cfg, args.episodes)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_dataset(&cfg, &episodes, &args.out)?;
    let manifest = std::fs::read(args.out.join("manifest.json"))?;
    println!("wrote {} episodes to {}", episodes.len(), args.out.display());
    println!("manifest sha256 {}", actdet_core::formats::sha256_hex(&manifest));
    Ok(ExitCode::SUCCESS)
}

fn train_configs(
    kv: &mut KvReader,
    synth: &SynthConfig,
    mode: Mode,
) -> Result<(TrainConfig, DetectorConfig, u64)> {
    let mut tc = TrainConfig::default();
    tc.loss.mode = mode.loss_mode();
    if let Some(v) = kv.take("lr")? {
        tc.lr = v;
    }
    if let Some(v) = kv.take("momentum")? {
        tc.momentum = v;
    }
    if let Some(v) = kv.take("warmup_steps")? {
        tc.warmup_steps = v;
    }
    if let Some(v) = kv.take("warmup_lr")? {
        tc.warmup_lr = v;
    }
    if let Some(v) = kv.take("epochs")? {
        tc.epochs = v;
    }
    if let Some(v) = kv.take("batch_clips")? {
        tc.batch_clips = v;
    }
    if let Some(v) = kv.take_list("decay_at")? {
        tc.decay_at = v;
    }
    if let Some(v) = kv.take("seed")? {
        tc.seed = v;
    }
    if let Some(v) = kv.take("match_iou")? {
        tc.loss.match_iou = v;
    }
    if let Some(v) = kv.take::<String>("mining")? {
        tc.loss.mining = match v.as_str() {
            "raw-action" => MiningRule::RawAction,
            "decoupled" => MiningRule::DecoupledCategory,
            other => bail!("unknown mining rule {other:?} (raw-action or decoupled)"),
        };
    }

    let mut dc = DetectorConfig {
        input_size: synth.frame_size,
        input_channels: 1,
        num_classes: synth.num_classes,
        ..DetectorConfig::default()
    };
    if let Some(v) = kv.take("clip_len")? {
        dc.clip_len = v;
    }
    if let Some(v) = kv.take("stem_channels")? {
        dc.stem_channels = v;
    }
    if let Some(v) = kv.take("trunk_channels")? {
        dc.trunk_channels = v;
    }
    if let Some(v) = kv.take("hidden_channels")? {
        dc.hidden_channels = v;
    }
    if let Some(v) = kv.take("lstm_kernel")? {
        dc.lstm_kernel = v;
    }
    if let Some(v) = kv.take("dropout")? {
        dc.dropout = v;
    }
    if let Some(v) = kv.take_list("scales")? {
        dc.scales = v;
    }
    if let Some(v) = kv.take_list("aspect_ratios")? {
        dc.aspect_ratios = v;
    }
    let model_seed = kv.take("model_seed")?.unwrap_or(1);
    Ok((tc, dc, model_seed))
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let (synth, episodes) = load_dataset(&args.data)?;
    let mut kv = kv_for(&args.config)?;
    let (tc, dc, model_seed) = train_configs(&mut kv, &synth, args.mode)?;
    kv.finish()?;
    let mut model = DetectorModel::init(dc, model_seed)?;
    train(&mut model, &episodes, &tc, |s| {
        println!(
            "epoch {:>3}  lr {:.6}  cls {:.6}  reg {:.6}  trans {:.6}  total {:.6}",
            s.epoch, s.lr, s.cls, s.reg, s.trans, s.total
        );
    })?;
    save_checkpoint(&args.out, &model)?;
    let bytes = std::fs::read(&args.out)?;
    println!("checkpoint sha256 {}", actdet_core::formats::sha256_hex(&bytes));
    Ok(ExitCode::SUCCESS)
}

fn cmd_infer(args: InferArgs) -> Result<ExitCode> {
    let model = load_checkpoint(&args.checkpoint)?;
    let (_, episodes) = load_dataset(&args.data)?;
    let mut kv = kv_for(&args.config)?;
    let mut decode = DecodeConfig::default();
    if let Some(v) = kv.take("score_floor")? {
        decode.score_floor = v;
    }
    if let Some(v) = kv.take("nms_iou")? {
        decode.nms_iou = v;
    }
    if let Some(v) = kv.take("top_k")? {
        decode.top_k = v;
    }
    kv.finish()?;
    let dets = infer_dataset(&model, &episodes, &decode)?;
    write_jsonl(&args.out, &dets)?;
    println!("wrote {} detections to {}", dets.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn link_config(kv: &mut KvReader) -> Result<LinkConfig> {
    let mut cfg = LinkConfig::default();
    if let Some(v) = kv.take("link_iou")? {
        cfg.link_iou = v;
    }
    if let Some(v) = kv.take("patience")? {
        cfg.patience = v;
    }
    if let Some(v) = kv.take("per_frame_top")? {
        cfg.per_frame_top = v;
    }
    if let Some(v) = kv.take("nms_iou")? {
        cfg.nms_iou = v;
    }
    if let Some(v) = kv.take("start_floor")? {
        cfg.start_floor = v;
    }
    if let Some(v) = kv.take("smooth_window")? {
        cfg.smooth_window = v;
    }
    if let Some(v) = kv.take_list("thresholds")? {
        cfg.thresholds = v;
    }
    if let Some(v) = kv.take("temporal_nms")? {
        cfg.temporal_nms = v;
    }
    if let Some(v) = kv.take("microtube")? {
        cfg.microtube = v;
    }
    Ok(cfg)
}

fn cmd_link(args: LinkArgs) -> Result<ExitCode> {
    let dets: Vec<DetectionRecord> = read_jsonl(&args.dets)?;
    let mut kv = kv_for(&args.config)?;
    let cfg = link_config(&mut kv)?;
    kv.finish()?;
    let tubes = link_detections(&dets, &cfg, args.refine)?;
    write_jsonl(&args.out, &tubes)?;
    println!("wrote {} tubes to {}", tubes.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    if args.tubes.is_none() && args.dets.is_none() {
        bail!("eval wants --tubes and/or --dets");
    }
    let gts: Vec<GtRecord> = read_jsonl(&args.gt)?;
    let tubes: Vec<TubeRecord> =
        args.tubes.as_deref().map(read_jsonl).transpose()?.unwrap_or_default();
    let metrics = match &args.dets {
        Some(path) => {
            let dets: Vec<DetectionRecord> = read_jsonl(path)?;
            evaluate_detections(&dets, &tubes, &gts)?
        }
        None => evaluate_tubes(&tubes, &gts)?,
    };
    match &args.out {
        Some(path) => write_metrics(path, &metrics)?,
        None => println!("{}", serde_json::to_string_pretty(&metrics)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let cfg = GradCheckConfig {
        step: args.step,
        tolerance: args.tolerance,
        max_checks_per_input: args.max_checks,
        seed: args.seed,
        fault: args.inject_bug.then_some(GradFault { scale: 1.02 }),
        ..GradCheckConfig::default()
    };
    let outcomes = standard_suite(&cfg)?;
    let mut failures = 0;
    for o in &outcomes {
        let verdict = if o.report.pass() { "ok" } else { "FAIL" };
        println!(
            "{:<22} max_rel_error {:>12.4e}  checked {:>4}  skipped {:>3}  {}",
            o.name, o.report.max_rel_error, o.report.checked, o.report.skipped, verdict
        );
        if !o.report.pass() {
            failures += 1;
        }
    }
    if failures > 0 {
        eprintln!("error: {failures} of {} checks failed", outcomes.len());
        return Ok(ExitCode::FAILURE);
    }
    println!("all {} checks passed", outcomes.len());
    Ok(ExitCode::SUCCESS)
}

fn cmd_fuse(args: FuseArgs) -> Result<ExitCode> {
    let a: Vec<DetectionRecord> = read_jsonl(&args.a)?;
    let b: Vec<DetectionRecord> = read_jsonl(&args.b)?;
    let fused = fuse_detections(&a, &b)?;
    write_jsonl(&args.out, &fused)?;
    println!("wrote {} fused detections to {}", fused.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}
