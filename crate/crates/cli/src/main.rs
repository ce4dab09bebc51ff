use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eit::engine::{detect, evaluate_on, run_adapt};
use eit::eval::{load_detections, save_detections, write_pr_csv};
use eit::stream::{read_stream, write_stream, SynthConfig, SyntheticStream};
use eit::{EngineConfig, Error, EvalSplit, Mode, ModelFile, Result};

#[derive(Parser)]
#[command(name = "eit", version, about = "Learn a category detector online from an ensemble of instance trackers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic stream with ground truth.
    Generate(GenerateArgs),
    /// Adapt a category model on a stream and score it.
    Adapt(AdaptArgs),
    /// Run a saved model over a stream and write detections.csv.
    Detect(DetectArgs),
    /// Score a detections file against a stream's ground truth.
    Eval(EvalArgs),
    /// Print a summary of a model file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator settings (TOML). Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output stream; gzip-compressed when the name ends in `.gz`.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long)]
    frames: Option<u64>,
    /// Feature dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
    /// Cosine between hard negatives and the category direction.
    #[arg(long)]
    hard_negative_similarity: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Eit,
    IEit,
    SeedsOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Half,
    Same,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    stream: PathBuf,
    /// Engine settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory for models, checkpoints and report.json.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    rng_seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Save the category model every N frames (0 disables).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long, value_enum)]
    eval_split: Option<SplitArg>,
    /// Stop adapting after this many frames.
    #[arg(long)]
    max_frames: Option<u64>,
    /// Also run independent trackers on the same stream and report their AP.
    #[arg(long)]
    compare_i_eit: bool,
}

#[derive(Args)]
struct DetectArgs {
    /// Category or instance model file (binary or text).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Destination CSV.
    #[arg(long, default_value = "detections.csv")]
    output: PathBuf,
    /// Engine settings; only the NMS threshold is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nms_threshold: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Directory for pr.csv and eval.json.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iou_threshold: Option<f64>,
}

#[derive(Args)]
struct InspectArgs {
    model: PathBuf,
    /// Also print the full text form.
    #[arg(long)]
    text: bool,
}

fn engine_config(path: Option<&Path>) -> Result<EngineConfig> {
    match path {
        Some(p) => EngineConfig::load(p),
        None => Ok(EngineConfig::default()),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.rng_seed {
        cfg.rng_seed = v;
    }
    if let Some(v) = a.frames {
        cfg.n_frames = v;
    }
    if let Some(v) = a.dim {
        cfg.d = v;
    }
    if let Some(v) = a.instances {
        cfg.n_instances = v;
    }
    if let Some(v) = a.hard_negative_similarity {
        cfg.hard_negative_similarity = v;
    }
    let s = SyntheticStream::new(cfg)?;
    let header = s.header();
    let frames: Vec<_> = s.collect();
    write_stream(&a.output, &header, &frames)?;
    println!("wrote {} frames (d = {}) to {}", frames.len(), header.d, a.output.display());
    Ok(())
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let mut cfg = engine_config(a.config.as_deref())?;
    if let Some(v) = a.rng_seed {
        cfg.rng_seed = v;
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::Eit => Mode::Eit,
            ModeArg::IEit => Mode::IEit,
            ModeArg::SeedsOnly => Mode::SeedsOnly,
        };
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(s) = a.eval_split {
        cfg.eval_split = match s {
            SplitArg::Half => EvalSplit::Half,
            SplitArg::Same => EvalSplit::Same,
        };
    }
    if a.max_frames.is_some() {
        cfg.max_frames = a.max_frames;
    }
    cfg.compare_i_eit |= a.compare_i_eit;

    let r = run_adapt(&a.stream, &cfg, &a.output)?;
    println!(
        "frames: {} total, {} adapted, {} evaluated",
        r.frames_total, r.frames_adapted, r.frames_evaluated
    );
    println!(
        "trackers: {} spawned, {} alive, {} lost; category mass {}",
        r.census.spawned, r.census.alive, r.census.lost, r.category_mass
    );
    let show = |name: &str, v: Option<f64>| {
        if let Some(ap) = v {
            println!("{name:<12} AP {ap:.4}");
        }
    };
    show("adapted", r.scores.adapted);
    show("oracle-only", r.scores.oracle_only);
    show("i-eit", r.scores.i_eit);
    println!("report: {}", a.output.join("report.json").display());
    Ok(())
}

fn detect_cmd(a: DetectArgs) -> Result<()> {
    let cfg = engine_config(a.config.as_deref())?;
    let nms = a.nms_threshold.unwrap_or(cfg.nms_threshold);
    if !(0.0..=1.0).contains(&nms) {
        return Err(Error::Config(format!("nms threshold {nms} outside [0, 1]")));
    }
    let model = ModelFile::load(&a.model)?;
    let (header, frames) = read_stream(&a.stream)?;
    if header.d != model.feature_dim() {
        return Err(Error::Config(format!(
            "model has feature dimension {}, stream has {}",
            model.feature_dim(),
            header.d
        )));
    }
    let dets = detect(model.detector(), &frames, nms)?;
    save_detections(&a.output, &dets)?;
    println!("wrote {} detections over {} frames to {}", dets.len(), frames.len(), a.output.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let cfg = engine_config(a.config.as_deref())?;
    let thr = a.iou_threshold.unwrap_or(cfg.eval_iou_threshold);
    if !(thr > 0.0 && thr <= 1.0) {
        return Err(Error::Config(format!("iou threshold {thr} outside (0, 1]")));
    }
    let dets = load_detections(&a.detections)?;
    let (_, frames) = read_stream(&a.stream)?;
    let curve = evaluate_on(&dets, &frames, thr)?;
    fs::create_dir_all(&a.output)?;
    write_pr_csv(BufWriter::new(File::create(a.output.join("pr.csv"))?), &curve)?;
    let n_gt: usize = frames.iter().filter_map(|f| f.ground_truth.as_ref()).map(Vec::len).sum();
    let report = serde_json::json!({
        "ap": curve.ap,
        "iou_threshold": thr,
        "detections": dets.len(),
        "ground_truth": n_gt,
        "frames": frames.len(),
    });
    let json = serde_json::to_string_pretty(&report).map_err(std::io::Error::from)?;
    fs::write(a.output.join("eval.json"), json + "\n")?;
    println!("AP {:.4} ({} detections, {} objects)", curve.ap, dets.len(), n_gt);
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let model = ModelFile::load(&a.model)?;
    let w = model.detector();
    let norm = w.weights().iter().map(|x| x * x).sum::<f64>().sqrt();
    match &model {
        ModelFile::Category(c) => println!("category model: d = {}, mass = {}", w.feature_dim(), c.mass()),
        ModelFile::Instance(m) => println!(
            "instance model {}: d = {}, steps = {}, samples = {}",
            m.instance_id(),
            w.feature_dim(),
            m.steps_total(),
            m.samples_seen()
        ),
    }
    println!("detector: |w| = {norm:.6}, bias = {:.6}", w.bias());
    if a.text {
        print!("{}", model.to_text());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Adapt(a) => adapt(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
