use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lightstereo::analysis::{count_flops, profile, Stage};
use lightstereo::backbone::BackboneConfig;
use lightstereo::gradcheck::{run_suite, TOLERANCE};
use lightstereo::io::{
    crop_disparity, load_checkpoint, normalize, read_image, read_kitti_disparity, read_pfm, reflect_pad,
    save_checkpoint, write_false_color_png, write_pfm, Pfm,
};
use lightstereo::metrics::compute_metrics;
use lightstereo::model::{Model, ModelConfig, Variant};
use lightstereo::regression::DisparityMap;
use lightstereo::training::{train_loop, TrainConfig};
use lightstereo::Error;

#[derive(Parser)]
#[command(name = "lightstereo", version, about = "Lightweight stereo matching: inference, toy training, analysis")]
struct Cli {
    /// Worker threads for the compute kernels (default: hardware parallelism)
    #[arg(long, global = true, env = "LIGHTSTEREO_THREADS")]
    threads: Option<usize>,

    /// Seed for weight initialization and any other randomness
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Predict a disparity map for a rectified stereo pair
    Infer(InferArgs),
    /// Train a small model on synthetic random-dot stereograms
    TrainToy(TrainArgs),
    /// Print analytic parameter and FLOP counts per pipeline stage
    Analyze(AnalyzeArgs),
    /// Compare a predicted disparity map against ground truth
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite
    Gradcheck,
    /// Time the four pipeline stages
    Profile(ProfileArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    S,
    M,
    L,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::S => Variant::S,
            VariantArg::M => Variant::M,
            VariantArg::L => Variant::L,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneArg {
    /// Full-size feature extractor used for the published variants
    Standard,
    /// Reduced extractor for quick experiments
    Compact,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "m")]
    variant: VariantArg,

    /// Maximum disparity D in full-resolution pixels (multiple of 4)
    #[arg(long = "max-disp", default_value_t = 192)]
    max_disp: usize,

    #[arg(long, value_enum, default_value = "standard")]
    backbone: BackboneArg,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let backbone = match self.backbone {
            BackboneArg::Standard => BackboneConfig::default(),
            BackboneArg::Compact => BackboneConfig::compact(),
        };
        ModelConfig::new(self.variant.into(), self.max_disp).with_backbone(backbone)
    }
}

#[derive(Args)]
struct InferArgs {
    /// Left image (PNG or binary PPM/PGM)
    #[arg(long)]
    left: PathBuf,
    /// Right image (PNG or binary PPM/PGM)
    #[arg(long)]
    right: PathBuf,
    /// Checkpoint; without it weights are randomly initialized from --seed
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Output disparity (PFM)
    #[arg(long)]
    out: PathBuf,
    /// Optional false-color PNG of the disparity
    #[arg(long = "out-vis")]
    out_vis: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Learning rate (default: 1e-4 × batch)
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "weight-decay", default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long = "max-disp", default_value_t = 32)]
    max_disp: usize,
    #[arg(long = "train-samples", default_value_t = 32)]
    train_samples: usize,
    #[arg(long = "val-samples", default_value_t = 8)]
    val_samples: usize,
    /// Held-out evaluation interval in steps
    #[arg(long = "eval-every", default_value_t = 50)]
    eval_every: usize,
    /// Cosine learning-rate decay instead of a constant rate
    #[arg(long)]
    cosine: bool,
    #[arg(long, value_enum, default_value = "s")]
    variant: VariantArg,
    #[arg(long, value_enum, default_value = "compact")]
    backbone: BackboneArg,
    /// Write the step,loss,epe history as CSV
    #[arg(long)]
    history: Option<PathBuf>,
    /// Save the trained weights
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 544)]
    height: usize,
    #[arg(long, default_value_t = 960)]
    width: usize,
    /// Write per-layer records (name,stage,params,macs,flops)
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DispFormat {
    Pfm,
    Kitti,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "pfm")]
    format: DispFormat,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
}

/// Exit 1 for bad arguments or inputs, 2 for failures while running.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let usage = match &e {
            Error::Config(_) => true,
            Error::File { source, .. } => matches!(**source, Error::Config(_)),
            _ => false,
        };
        if usage {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn build(config: &ModelConfig, seed: u64, weights: Option<&Path>) -> Result<Model<f32>, Failure> {
    let mut model = Model::new(config, seed)?;
    match weights {
        Some(path) => load_checkpoint(&mut model, path)?,
        None => eprintln!("note: no --weights given, using random weights from seed {seed}"),
    }
    Ok(model)
}

fn infer(args: &InferArgs, seed: u64) -> CmdResult {
    let left = read_image(&args.left)?;
    let right = read_image(&args.right)?;
    let (ls, rs) = (left.shape(), right.shape());
    if (ls.h, ls.w) != (rs.h, rs.w) {
        return Err(Failure::Usage(format!(
            "left image {} is {}x{} but right image {} is {}x{}",
            args.left.display(),
            ls.w,
            ls.h,
            args.right.display(),
            rs.w,
            rs.h
        )));
    }
    let config = args.model.config();
    let model = build(&config, seed, args.weights.as_deref())?;
    let l = normalize(&reflect_pad(&left, 32));
    let r = normalize(&reflect_pad(&right, 32));
    let disp = crop_disparity(&model.infer(&l, &r)?, ls.w, ls.h)?;
    write_pfm(&args.out, &Pfm::from(&disp))?;
    if let Some(vis) = &args.out_vis {
        write_false_color_png(vis, &disp, config.max_disparity)?;
    }
    println!("wrote {}x{} disparity to {}", ls.w, ls.h, args.out.display());
    Ok(())
}

fn train(args: &TrainArgs, seed: u64) -> CmdResult {
    let cfg = TrainConfig {
        steps: args.steps,
        batch: args.batch,
        lr: args.lr.unwrap_or(1e-4 * args.batch as f64),
        weight_decay: args.weight_decay,
        crop: (args.height, args.width),
        seed,
        max_disparity: args.max_disp,
        train_samples: args.train_samples,
        val_samples: args.val_samples,
        eval_every: args.eval_every,
        cosine: args.cosine,
    };
    cfg.validate()?;
    let backbone = match args.backbone {
        BackboneArg::Standard => BackboneConfig::default(),
        BackboneArg::Compact => BackboneConfig::compact(),
    };
    let mconf = ModelConfig::new(args.variant.into(), args.max_disp).with_backbone(backbone);
    let mut model: Model<f32> = Model::new(&mconf, seed)?;
    let history = train_loop(&mut model, &cfg, |r| {
        if let Some(epe) = r.epe {
            match r.loss {
                Some(loss) => println!("step {:>5}  loss {loss:.4}  held-out EPE {epe:.3}", r.step),
                None => println!("step {:>5}  final held-out EPE {epe:.3}", r.step),
            }
        }
    })?;
    if let Some(path) = &args.history {
        let io_err = |e: csv::Error| Failure::Runtime(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        w.write_record(["step", "loss", "epe"]).map_err(io_err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &history.records {
            w.write_record([r.step.to_string(), opt(r.loss), opt(r.epe)]).map_err(io_err)?;
        }
        w.flush().map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    if let Some(path) = &args.save {
        save_checkpoint(&model, path)?;
    }
    if let (Some(a), Some(b)) = (history.initial_epe(), history.final_epe()) {
        println!("held-out EPE {a:.3} -> {b:.3}");
    }
    Ok(())
}

fn analyze(args: &AnalyzeArgs, seed: u64) -> CmdResult {
    let model: Model<f32> = Model::new(&args.model.config(), seed)?;
    let report = count_flops(&model, args.height, args.width)?;
    println!("variant {}", model.config.variant);
    println!("{report}");
    if let Some(path) = &args.csv {
        let io_err = |e: csv::Error| Failure::Runtime(format!("{}: {e}", path.display()));
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        w.write_record(["name", "stage", "params", "macs", "flops"]).map_err(io_err)?;
        for r in &report.records {
            w.write_record([
                r.name.clone(),
                r.stage.to_string(),
                r.params.to_string(),
                r.macs.to_string(),
                r.flops().to_string(),
            ])
            .map_err(io_err)?;
        }
        w.flush().map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn read_disparity(path: &Path, format: DispFormat) -> Result<DisparityMap, Failure> {
    Ok(match format {
        DispFormat::Pfm => read_pfm(path)?.into_disparity()?,
        DispFormat::Kitti => read_kitti_disparity(path)?,
    })
}

fn eval(args: &EvalArgs) -> CmdResult {
    let pred = read_disparity(&args.pred, args.format)?;
    let gt = read_disparity(&args.gt, args.format)?;
    let m = compute_metrics(&pred, &gt)?;
    println!("epe {:.4}", m.epe);
    println!("bad1 {:.4}", m.bad1);
    println!("bad2 {:.4}", m.bad2);
    println!("bad3 {:.4}", m.bad3);
    println!("d1 {:.4}", m.d1);
    println!("valid_pixels {}", m.valid_pixels);
    Ok(())
}

fn gradcheck(seed: u64) -> CmdResult {
    let results = run_suite(seed)?;
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:<4} {:<28} max rel err {:.3e}  ({} entries, worst {})",
            r.name, r.max_rel_error, r.entries, r.worst
        );
        failed += !r.passed() as usize;
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient checks exceeded {TOLERANCE:e}")));
    }
    Ok(())
}

fn run_profile(args: &ProfileArgs, seed: u64) -> CmdResult {
    let model: Model<f32> = Model::new(&args.model.config(), seed)?;
    let t = profile(&model, args.height, args.width, args.warmup, args.repeats)?;
    println!(
        "variant {} at {}x{}, {} warmup + {} timed runs, {} thread(s)",
        model.config.variant, args.height, args.width, args.warmup, t.repeats, t.threads
    );
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    for s in Stage::ALL {
        println!("{:<22} {:>10.3} ms", s.name(), ms(t.stage(s)));
    }
    println!("{:<22} {:>10.3} ms", "stage sum", ms(t.stage_sum()));
    println!("{:<22} {:>10.3} ms", "end-to-end", ms(t.total));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Infer(a) => infer(a, cli.seed),
        Command::TrainToy(a) => train(a, cli.seed),
        Command::Analyze(a) => analyze(a, cli.seed),
        Command::Eval(a) => eval(a),
        Command::Gradcheck => gradcheck(cli.seed),
        Command::Profile(a) => run_profile(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
