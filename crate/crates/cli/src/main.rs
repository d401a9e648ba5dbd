//! `mflow`: drives the full pipeline from the shell. Exit code 0 on
//! success, 1 on user errors (flags, paths, malformed inputs), 2 when an
//! internal stage fails. `MFLOW_THREADS` caps dataset-generation workers.

mod heatmap;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use mflow_core::dataset::{self, DatasetError, FieldSample};
use mflow_core::flowsolve::{solve, SolveError, SolveMode, SolverConfig};
use mflow_core::geometry::{sample_params, ParamRanges, WmParams};
use mflow_core::metrics::{MetricsConfig, Variant};
use mflow_core::models::{Arch, Model, ModelError, ModelSpec};
use mflow_core::train::{evaluate, fit, TrainConfig, TrainError};
use mflow_core::{Mode, TargetMode};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "mflow",
    version,
    about = "Microchannel flow fields: generate data, solve, train, evaluate, plot"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Duct,
    Channel,
}

impl From<ModeArg> for SolveMode {
    fn from(m: ModeArg) -> SolveMode {
        match m {
            ModeArg::Duct => SolveMode::Duct,
            ModeArg::Channel => SolveMode::Channel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Unet,
    Tnet,
    #[value(name = "attn_unet")]
    AttnUnet,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Arch {
        match a {
            ArchArg::Unet => Arch::Unet,
            ArchArg::Tnet => Arch::Tnet,
            ArchArg::AttnUnet => Arch::AttnUnet,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    /// Velocity magnitude, one channel.
    Mag,
    /// u and v components, two channels.
    Uv,
}

impl From<TargetArg> for TargetMode {
    fn from(t: TargetArg) -> TargetMode {
        match t {
            TargetArg::Mag => TargetMode::Magnitude,
            TargetArg::Uv => TargetMode::Components,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    #[value(name = "soft_squared")]
    SoftSquared,
    #[value(name = "paper_literal")]
    PaperLiteral,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    U,
    V,
    Mag,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset of solved random geometries.
    Generate {
        /// Sample count.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Output directory; writes dataset.mflo plus its manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one geometry and dump the field with heatmaps.
    Solve {
        /// Draw geometry parameters from this seed.
        #[arg(long, conflicts_with = "params")]
        seed: Option<u64>,
        /// Explicit parameters D,gamma,A,N,base_radius,amplitude.
        #[arg(long)]
        params: Option<String>,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated container.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        model: ArchArg,
        #[arg(long, value_enum)]
        target: TargetArg,
        /// Defaults to 100 for uv targets, 75 for mag.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 4e-4)]
        lr: f64,
        /// Seeds weight init, the train/validation split, and shuffling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// First encoder width; 64 matches the reference networks.
        #[arg(long, default_value_t = 16)]
        base_width: usize,
        /// Output directory; writes history.txt and model.mfck.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the train/validation split it was built from.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "soft_squared")]
        variant: VariantArg,
    },
    /// Predict one sample and render prediction + error maps.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample_id: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one stored channel of one sample to a PPM heatmap.
    Plot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sample_id: u64,
        #[arg(long, value_enum)]
        channel: ChannelArg,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the solver against model inference on the same samples.
    Bench {
        #[arg(long)]
        data: PathBuf,
        /// One or more checkpoints to time.
        #[arg(long, num_args = 1.., required = true)]
        ckpts: Vec<PathBuf>,
    },
}

enum AppError {
    User(String),
    Internal(String),
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::User(m) => write!(f, "{}", m),
            AppError::Internal(m) => write!(f, "{}", m),
        }
    }
}

fn user(e: impl fmt::Display) -> AppError {
    AppError::User(e.to_string())
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> AppError {
        AppError::User(e.to_string())
    }
}

impl From<DatasetError> for AppError {
    fn from(e: DatasetError) -> AppError {
        match &e {
            DatasetError::ExhaustedRetries { .. } => AppError::Internal(e.to_string()),
            DatasetError::Solve(s) => classify_solve(s, e.to_string()),
            _ => AppError::User(e.to_string()),
        }
    }
}

fn classify_solve(e: &SolveError, msg: String) -> AppError {
    match e {
        SolveError::NotConverged { .. } | SolveError::UnstableTimestep { .. } => {
            AppError::Internal(msg)
        }
        _ => AppError::User(msg),
    }
}

impl From<SolveError> for AppError {
    fn from(e: SolveError) -> AppError {
        let msg = e.to_string();
        classify_solve(&e, msg)
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> AppError {
        match &e {
            ModelError::Tensor(_) => AppError::Internal(e.to_string()),
            _ => AppError::User(e.to_string()),
        }
    }
}

impl From<TrainError> for AppError {
    fn from(e: TrainError) -> AppError {
        match &e {
            TrainError::BadConfig(_)
            | TrainError::EmptyDataset(_)
            | TrainError::ShapeMismatch { .. } => AppError::User(e.to_string()),
            _ => AppError::Internal(e.to_string()),
        }
    }
}

impl From<heatmap::NonFiniteValues> for AppError {
    fn from(e: heatmap::NonFiniteValues) -> AppError {
        AppError::Internal(e.to_string())
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{}", e);
                std::process::exit(0);
            }
            let line = e.to_string();
            eprintln!("{}", line.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments"));
            std::process::exit(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => {}
        Err(AppError::User(m)) => {
            eprintln!("error: {}", m);
            std::process::exit(1);
        }
        Err(AppError::Internal(m)) => {
            eprintln!("internal error: {}", m);
            std::process::exit(2);
        }
    }
}

fn run(cmd: Cmd) -> Result<(), AppError> {
    match cmd {
        Cmd::Generate { n, seed, mode, out } => cmd_generate(n, seed, mode.into(), &out),
        Cmd::Solve { seed, params, mode, out } => cmd_solve(seed, params, mode.into(), &out),
        Cmd::Train { data, model, target, epochs, batch, lr, seed, base_width, out } => {
            cmd_train(&data, model.into(), target.into(), epochs, batch, lr, seed, base_width, &out)
        }
        Cmd::Eval { data, ckpt, variant } => cmd_eval(&data, &ckpt, variant),
        Cmd::Predict { data, ckpt, sample_id, out } => cmd_predict(&data, &ckpt, sample_id, &out),
        Cmd::Plot { data, sample_id, channel, out } => cmd_plot(&data, sample_id, channel, &out),
        Cmd::Bench { data, ckpts } => cmd_bench(&data, &ckpts),
    }
}

fn cmd_generate(n: usize, seed: u64, mode: SolveMode, out: &Path) -> Result<(), AppError> {
    if n < 1 {
        return Err(AppError::User("--n must be at least 1".into()));
    }
    std::fs::create_dir_all(out)?;
    let path = out.join("dataset.mflo");
    let c = dataset::generate(n, seed, mode, &SolverConfig::default(), &path)?;
    for (id, extra) in &c.retries {
        println!("sample {} needed {} extra seed(s)", id, extra);
    }
    println!("wrote {} samples to {}", c.samples.len(), path.display());
    Ok(())
}

fn parse_params(text: &str) -> Result<WmParams, AppError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 6 {
        return Err(AppError::User(format!(
            "--params needs 6 comma-separated values D,gamma,A,N,base_radius,amplitude; got {}",
            parts.len()
        )));
    }
    let f = |i: usize, name: &str| -> Result<f64, AppError> {
        parts[i].parse().map_err(|_| AppError::User(format!("unreadable {}: {:?}", name, parts[i])))
    };
    let terms: u32 = parts[3]
        .parse()
        .map_err(|_| AppError::User(format!("unreadable N: {:?}", parts[3])))?;
    WmParams::new(f(0, "D")?, f(1, "gamma")?, f(2, "A")?, terms, f(4, "base_radius")?, f(5, "amplitude")?)
        .map_err(user)
}

fn cmd_solve(
    seed: Option<u64>,
    params: Option<String>,
    mode: SolveMode,
    out: &Path,
) -> Result<(), AppError> {
    let (seed, params) = match (seed, params) {
        (Some(s), None) => (s, sample_params(s, &ParamRanges::default()).map_err(user)?),
        (None, Some(p)) => (0, parse_params(&p)?),
        (None, None) => return Err(AppError::User("pass --seed or --params".into())),
        (Some(_), Some(_)) => unreachable!("clap rejects the conflict"),
    };
    std::fs::create_dir_all(out)?;
    let cfg = SolverConfig::default();
    let sample = dataset::sample_from_params(0, seed, &params, mode, &cfg)?;

    let field_path = out.join("field.mflo");
    dataset::write_container(&field_path, mode, std::slice::from_ref(&sample))?;
    std::fs::write(out.join("mask.pgm"), sample.mask.to_pgm_bytes())?;

    let (h, w) = (sample.mask.h, sample.mask.w);
    let as_f64 = |ch: &[f32]| ch.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mag = sample.channels.last().expect("at least one channel");
    let ppm = heatmap::render(&as_f64(mag), Some(sample.mask.bytes()), h, w, heatmap::Ramp::Sequential)?;
    std::fs::write(out.join("magnitude.ppm"), ppm)?;
    if mode == SolveMode::Channel {
        for (ix, name) in [(0, "u"), (1, "v")] {
            let ppm = heatmap::render(
                &as_f64(&sample.channels[ix]),
                Some(sample.mask.bytes()),
                h,
                w,
                heatmap::Ramp::Diverging,
            )?;
            std::fs::write(out.join(format!("{}.ppm", name)), ppm)?;
        }
    }
    println!(
        "solved: residual {:.3e}, {} fluid pixels; wrote {}",
        sample.residual,
        sample.mask.fluid_count(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    arch: Arch,
    target: TargetMode,
    epochs: Option<usize>,
    batch: usize,
    lr: f64,
    seed: u64,
    base_width: usize,
    out: &Path,
) -> Result<(), AppError> {
    let container = dataset::load(data)?;
    let (train_s, val_s) = dataset::split(container.samples, seed)?;
    let train_ex = dataset::to_examples(&train_s, target)?;
    let val_ex = dataset::to_examples(&val_s, target)?;

    let spec = ModelSpec::new(arch, target.channel_count(), base_width, seed)
        .with_input_hw(container.h, container.w);
    let mut model = Model::build(spec)?;

    let mut cfg = TrainConfig::new(target);
    cfg.initial_lr = lr;
    cfg.batch_size = batch;
    cfg.seed = seed;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }

    let t0 = Instant::now();
    let history = fit(&mut model, &train_ex, &val_ex, &cfg)?;
    let mins = t0.elapsed().as_secs_f64() / 60.0;

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("history.txt"), history.table())?;
    model.save(&out.join("model.mfck"))?;
    let (best_epoch, best_loss) = history.best_val_loss().expect("epochs ran");
    println!(
        "trained {} epochs in {:.1} min; best validation loss {:.6e} at epoch {}",
        history.epochs.len(),
        mins,
        best_loss,
        best_epoch
    );
    println!("wrote {} and {}", out.join("history.txt").display(), out.join("model.mfck").display());
    Ok(())
}

fn target_of(model: &Model) -> Result<TargetMode, AppError> {
    match model.spec.out_channels {
        1 => Ok(TargetMode::Magnitude),
        2 => Ok(TargetMode::Components),
        c => Err(AppError::Internal(format!("checkpoint emits {} channels", c))),
    }
}

fn cmd_eval(data: &Path, ckpt: &Path, variant: VariantArg) -> Result<(), AppError> {
    let model = Model::load(ckpt)?;
    let container = dataset::load(data)?;
    if (container.h, container.w) != model.spec.input_hw {
        return Err(AppError::User(format!(
            "container is {}x{} but the checkpoint expects {}x{}",
            container.h, container.w, model.spec.input_hw.0, model.spec.input_hw.1
        )));
    }
    let target = target_of(&model)?;
    // The split is keyed by the seed embedded in the checkpoint, so the
    // rows below mirror the training run without extra flags.
    let (train_s, val_s) = dataset::split(container.samples, model.spec.seed)?;
    let mcfg = MetricsConfig {
        eps: 1e-6,
        variant: match variant {
            VariantArg::SoftSquared => Variant::SoftSquared,
            VariantArg::PaperLiteral => Variant::PaperLiteral,
        },
    };
    let mut rows = Vec::new();
    for (name, set) in [("train", &train_s), ("validation", &val_s)] {
        let ex = dataset::to_examples(set, target)?;
        let stats = evaluate(&model, &ex, 16, target, &mcfg)?;
        rows.push((name, stats));
    }
    println!("{:<12} {:>12} {:>12} {:>12} {:>12}", "set", "Loss", "MRE", "DICE", "IOU");
    for (name, s) in rows {
        println!(
            "{:<12} {:>12.6e} {:>12.6e} {:>12.5} {:>12.5}",
            name, s.loss, s.mre, s.dice, s.iou
        );
    }
    Ok(())
}

fn find_sample(samples: &[FieldSample], id: u64) -> Result<&FieldSample, AppError> {
    samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| AppError::User(format!("no sample with id {}", id)))
}

fn cmd_predict(data: &Path, ckpt: &Path, sample_id: u64, out: &Path) -> Result<(), AppError> {
    let model = Model::load(ckpt)?;
    let container = dataset::load(data)?;
    if (container.h, container.w) != model.spec.input_hw {
        return Err(AppError::User(format!(
            "container is {}x{} but the checkpoint expects {}x{}",
            container.h, container.w, model.spec.input_hw.0, model.spec.input_hw.1
        )));
    }
    let sample = find_sample(&container.samples, sample_id)?;
    let target = target_of(&model)?;
    let truth = sample.target(target)?;
    let pred = model.infer(&sample.mask_f32(), 1, Mode::Eval)?;

    std::fs::create_dir_all(out)?;
    let (h, w) = (container.h, container.w);
    let names: &[(&str, heatmap::Ramp)] = match target {
        TargetMode::Magnitude => &[("mag", heatmap::Ramp::Sequential)],
        TargetMode::Components => {
            &[("u", heatmap::Ramp::Diverging), ("v", heatmap::Ramp::Diverging)]
        }
    };
    for (ch, (name, ramp)) in names.iter().enumerate() {
        let plane = &pred[ch * h * w..(ch + 1) * h * w];
        let tplane = &truth[ch * h * w..(ch + 1) * h * w];
        let ppm = heatmap::render(
            &plane.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            Some(sample.mask.bytes()),
            h,
            w,
            *ramp,
        )?;
        std::fs::write(out.join(format!("pred_{}.ppm", name)), ppm)?;
        let err: Vec<f64> =
            plane.iter().zip(tplane).map(|(&p, &t)| (p as f64 - t as f64).abs()).collect();
        let ppm =
            heatmap::render(&err, Some(sample.mask.bytes()), h, w, heatmap::Ramp::Sequential)?;
        std::fs::write(out.join(format!("err_{}.ppm", name)), ppm)?;
    }
    let mre = mflow_core::metrics::mre(&pred, &truth, 1)
        .map_err(|e| AppError::Internal(e.to_string()))?;
    println!("sample {}: relative error {:.4}; wrote maps to {}", sample_id, mre, out.display());
    Ok(())
}

fn cmd_plot(data: &Path, sample_id: u64, channel: ChannelArg, out: &Path) -> Result<(), AppError> {
    let container = dataset::load(data)?;
    let sample = find_sample(&container.samples, sample_id)?;
    let (ix, ramp) = match (channel, sample.channels.len()) {
        (ChannelArg::Mag, k) => (k - 1, heatmap::Ramp::Sequential),
        (ChannelArg::U, 3) => (0, heatmap::Ramp::Diverging),
        (ChannelArg::V, 3) => (1, heatmap::Ramp::Diverging),
        (ChannelArg::U, _) | (ChannelArg::V, _) => {
            return Err(AppError::User(
                "container stores magnitude only; u/v need channel-mode data".into(),
            ));
        }
    };
    let plane: Vec<f64> = sample.channels[ix].iter().map(|&v| v as f64).collect();
    let ppm =
        heatmap::render(&plane, Some(sample.mask.bytes()), container.h, container.w, ramp)?;
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, ppm)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn median_ms(times: &mut [f64]) -> f64 {
    times.sort_by(|a, b| a.total_cmp(b));
    times[times.len() / 2]
}

const BENCH_REPEATS: usize = 5;

fn cmd_bench(data: &Path, ckpts: &[PathBuf]) -> Result<(), AppError> {
    let container = dataset::load(data)?;
    let samples = &container.samples;
    let mut cfg = SolverConfig::default();
    cfg.mode = container.mode;

    // Solver side: median over repeats per sample, mean across samples.
    let mut solver_ms = 0.0;
    for s in samples {
        let mut times = Vec::with_capacity(BENCH_REPEATS);
        for _ in 0..BENCH_REPEATS {
            let t0 = Instant::now();
            solve(&s.mask, &cfg)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        solver_ms += median_ms(&mut times);
    }
    solver_ms /= samples.len() as f64;

    let mut rows: Vec<(String, f64)> = Vec::new();
    for path in ckpts {
        let model = Model::load(path)?;
        if (container.h, container.w) != model.spec.input_hw {
            return Err(AppError::User(format!(
                "{}: checkpoint expects {}x{} input",
                path.display(),
                model.spec.input_hw.0,
                model.spec.input_hw.1
            )));
        }
        let label = format!(
            "{} ({})",
            model.spec.arch.as_str(),
            path.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt")
        );
        let mut mean = 0.0;
        for s in samples {
            let mask = s.mask_f32();
            let mut times = Vec::with_capacity(BENCH_REPEATS);
            for _ in 0..BENCH_REPEATS {
                let t0 = Instant::now();
                model.infer(&mask, 1, Mode::Eval)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            mean += median_ms(&mut times);
        }
        rows.push((label, mean / samples.len() as f64));
    }

    println!("{:<28} {:>14} {:>12}", "target", "ms/sample", "speedup");
    println!("{:<28} {:>14.3} {:>12}", "solver", solver_ms, "1.0");
    for (label, ms) in rows {
        println!("{:<28} {:>14.3} {:>12.1}", label, ms, solver_ms / ms);
    }
    Ok(())
}
