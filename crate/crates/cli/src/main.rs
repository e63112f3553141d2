use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use convformer::data::{rest_bone_lengths, synth_motion, synthesize, MotionClip};
use convformer::gradcheck::{self, DEFAULT_STEP, DEFAULT_TOLERANCE};
use convformer::model::{flops_table, param_table, write_atomic, ConvFormerModel, Item, ModelConfig, Variant};
use convformer::trainer::{evaluate, train, OutputDir, TrainConfig};
use convformer::Tensor;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "convformer", version, about = "Lift 2D joint sequences to 3D poses with a convolutional transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its log and checkpoint to --out
    Train(TrainArgs),
    /// Evaluate a checkpoint
    Eval(EvalArgs),
    /// Itemized parameter count of a configuration
    CountParams(ModelArgs),
    /// Itemized multiply-accumulate estimate for one window
    Flops(ModelArgs),
    /// Write every attention head's map for one window as CSV
    DumpAttention(DumpArgs),
    /// Finite-difference check of every differentiable op and the tiny model
    Gradcheck(GradcheckArgs),
    /// Write a synthetic motion clip
    Synth(SynthArgs),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Receptive field in frames (odd)
    #[arg(long, default_value_t = 9)]
    frames: usize,
    /// Spatial embedding width
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    blocks_spatial: usize,
    #[arg(long, default_value_t = 2)]
    blocks_temporal: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Odd Q/K/V kernel sizes, one per scale
    #[arg(long, value_delimiter = ',', default_value = "7,7,7")]
    kernels: Vec<usize>,
    /// dynamic, single_filter or linear_baseline
    #[arg(long, default_value = "dynamic")]
    variant: Variant,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            frames: self.frames,
            dim: self.dim,
            blocks_spatial: self.blocks_spatial,
            blocks_temporal: self.blocks_temporal,
            heads: self.heads,
            kernels: self.kernels.clone(),
            variant: self.variant,
            ..ModelConfig::default()
        }
    }
}

/// Where clips come from when no files are given: one synthetic clip whose
/// head trains and whose tail evaluates.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Length of the synthetic clip
    #[arg(long, default_value_t = 2500)]
    synth_frames: usize,
    /// Leading synthetic frames used for training; the rest evaluate
    #[arg(long, default_value_t = 2000)]
    train_frames: usize,
}

impl DataArgs {
    fn split(&self) -> Result<(MotionClip, MotionClip), convformer::Error> {
        let clip = synth_motion(self.data_seed, self.synth_frames)?;
        Ok((clip.slice(0, self.train_frames)?, clip.slice(self.train_frames, self.synth_frames)?))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Training clip files; synthetic data when absent
    #[arg(long = "train-clip")]
    train_clips: Vec<PathBuf>,
    /// Evaluation clip files; synthetic data when absent
    #[arg(long = "eval-clip")]
    eval_clips: Vec<PathBuf>,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Learning-rate factor applied after every epoch
    #[arg(long, default_value_t = 0.95)]
    decay: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    eval_every: usize,
    /// Disable horizontal-flip augmentation
    #[arg(long)]
    no_flip: bool,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    /// Residual-branch survival probability
    #[arg(long, default_value_t = 0.8)]
    survival: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the log and checkpoint
    #[arg(long, default_value = "convformer-run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip files; the synthetic evaluation split when absent
    #[arg(long = "clip")]
    clips: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Clip file; the synthetic evaluation split when absent
    #[arg(long)]
    clip: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Center frame of the window
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long, default_value = "attention")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    #[arg(long, hide = true)]
    inject_faulty_op: bool,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2500)]
    frames: usize,
    #[arg(long, default_value = "synth.clip")]
    out: PathBuf,
}

enum Failure {
    Core(convformer::Error),
    Gradcheck(Vec<String>),
}

impl From<convformer::Error> for Failure {
    fn from(e: convformer::Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn print_config(value: serde_json::Value) {
    println!("config {value}");
}

fn load_clips(paths: &[PathBuf]) -> Result<Vec<MotionClip>, convformer::Error> {
    paths.iter().map(MotionClip::load).collect()
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let model_cfg = ModelConfig {
        dropout: a.dropout,
        survival: a.survival,
        ..a.model.config()
    };
    let train_cfg = TrainConfig {
        epochs: a.epochs,
        lr0: a.lr,
        decay: a.decay,
        batch_size: a.batch_size,
        seed: a.seed,
        augment_flip: !a.no_flip,
        eval_every: a.eval_every,
    };
    print_config(json!({
        "model": model_cfg,
        "train": train_cfg,
        "train_clips": a.train_clips,
        "eval_clips": a.eval_clips,
        "data_seed": a.data.data_seed,
        "synth_frames": a.data.synth_frames,
        "train_frames": a.data.train_frames,
        "out": a.out,
    }));
    let (train_clips, eval_clips) = if a.train_clips.is_empty() {
        let (tr, ev) = a.data.split()?;
        let ev = if a.eval_clips.is_empty() { vec![ev] } else { load_clips(&a.eval_clips)? };
        (vec![tr], ev)
    } else {
        (load_clips(&a.train_clips)?, load_clips(&a.eval_clips)?)
    };
    std::fs::create_dir_all(&a.out).map_err(|e| convformer::Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut model = ConvFormerModel::new(model_cfg, a.seed)?;
    let out = OutputDir(a.out);
    let log = train(&mut model, &train_clips, &eval_clips, &train_cfg, Some(&out))?;
    print!("{}", log.to_csv());
    println!("checkpoint {}", out.checkpoint().display());
    println!("log {}", out.log().display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let model = ConvFormerModel::load(&a.checkpoint)?;
    print_config(json!({ "checkpoint": a.checkpoint, "model": model.config(), "clips": a.clips, "data_seed": a.data.data_seed }));
    let clips = if a.clips.is_empty() { vec![a.data.split()?.1] } else { load_clips(&a.clips)? };
    let r = evaluate(&model, &clips)?;
    println!("frames {}", r.frames);
    println!("mpjpe {:.16e}", r.mpjpe);
    println!("p_mpjpe {:.16e}", r.p_mpjpe);
    match r.mpjve {
        Some(v) => println!("mpjve {v:.16e}"),
        None => println!("mpjve none"),
    }
    println!("pck {:.16e}", r.pck);
    println!("auc {:.16e}", r.auc);
    Ok(())
}

fn print_table(cfg: &ModelConfig, items: &[Item], unit: &str) -> CmdResult {
    cfg.validate()?;
    print_config(json!({ "model": cfg }));
    let width = items.iter().map(|i| i.name.len()).max().unwrap_or(0);
    for i in items {
        println!("{:<width$}  {:>14}", i.name, i.count);
    }
    let total: u64 = items.iter().map(|i| i.count).sum();
    println!("{:<width$}  {:>14}", "total", total);
    println!("{unit} {:.2}M", total as f64 / 1e6);
    Ok(())
}

fn csv_matrix(m: &Tensor) -> String {
    let n = m.shape()[1];
    m.data()
        .chunks(n)
        .map(|row| row.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

fn cmd_dump_attention(a: DumpArgs) -> CmdResult {
    let model = ConvFormerModel::load(&a.checkpoint)?;
    let cfg = model.config().clone();
    print_config(json!({ "checkpoint": a.checkpoint, "model": cfg, "clip": a.clip, "frame": a.frame, "out": a.out }));
    let clip = match &a.clip {
        Some(p) => MotionClip::load(p)?,
        None => a.data.split()?.1,
    };
    if clip.num_joints() != cfg.joints {
        return Err(convformer::Error::Config(format!("clip has {} joints, checkpoint expects {}", clip.num_joints(), cfg.joints)).into());
    }
    if a.frame >= clip.len() {
        return Err(convformer::Error::Config(format!("frame {} outside a clip of {} frames", a.frame, clip.len())).into());
    }
    let windows = convformer::data::sliding_windows(&clip, cfg.frames)?;
    let w = windows.window_at(a.frame);
    let input = Tensor::new([cfg.frames, cfg.joints, 2], w.input)?;
    let (_, records) = model.forward_with_attention(&input)?;
    std::fs::create_dir_all(&a.out).map_err(|e| convformer::Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    // spatial maps of the window's own frame
    let center = cfg.frames / 2;
    for r in records.iter().filter(|r| r.axis == convformer::attention::AttentionAxis::Temporal || r.sample == center) {
        let path = a.out.join(format!("{}_block{}_head{}.csv", r.axis, r.block, r.head));
        write_atomic(&path, csv_matrix(&r.matrix).as_bytes())?;
        println!("{} {}x{}", path.display(), r.matrix.shape()[0], r.matrix.shape()[1]);
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    print_config(json!({ "seeds": a.seeds, "step": a.step, "tolerance": a.tolerance }));
    let mut cases = gradcheck::full_suite();
    if a.inject_faulty_op {
        cases.push(gradcheck::faulty_case());
    }
    let reports = gradcheck::run(&cases, a.seeds, a.step)?;
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(a.tolerance);
        println!("{} {:.3e} {}", r.name, r.max_rel_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradcheck(failed))
    }
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    print_config(json!({ "seed": a.seed, "frames": a.frames, "out": a.out }));
    let motion = synthesize(a.seed, a.frames)?;
    let rest = rest_bone_lengths();
    let drift = (0..a.frames)
        .flat_map(|f| motion.bone_lengths(f).into_iter().zip(&rest).map(|(b, r)| (b - r).abs()).collect::<Vec<_>>())
        .fold(0.0f64, f64::max);
    motion.to_clip().save(&a.out)?;
    println!("bone_length_drift_mm {drift:.16e}");
    println!("clip {}", a.out.display());
    Ok(())
}

fn report(failure: &Failure) -> ExitCode {
    match failure {
        Failure::Core(e) => {
            let path = match e {
                convformer::Error::Io { path, .. } => format!(" path={}", path.display()),
                _ => String::new(),
            };
            eprintln!("error: kind={}{path} message={:?}", e.kind(), e.to_string());
            ExitCode::from(2)
        }
        Failure::Gradcheck(names) => {
            eprintln!("error: kind=gradcheck failed={}", names.join(","));
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<(), convformer::Error> {
    let Ok(v) = std::env::var("CONVFORMER_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| convformer::Error::Config(format!("CONVFORMER_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| convformer::Error::Config(e.to_string()))
}

#[cfg(target_env = "gnu")]
fn tune_allocator() {
    // training churns through large short-lived buffers; keep them mapped
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

#[cfg(not(target_env = "gnu"))]
fn tune_allocator() {}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CountParams(a) => {
            let cfg = a.config();
            print_table(&cfg, &param_table(&cfg), "params")
        }
        Command::Flops(a) => {
            let cfg = a.config();
            print_table(&cfg, &flops_table(&cfg), "flops")
        }
        Command::DumpAttention(a) => cmd_dump_attention(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    tune_allocator();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}
