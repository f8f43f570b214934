//! Command-line front end tying the library together: synthetic scene
//! generation, one-pass network inference, iterative mean-field runs,
//! tensor comparison, incremental training, segmentation metrics, and
//! operation-count tables.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpn::config::RunConfig;
use dpn::io;
use dpn::links::TemporalLinks;
use dpn::meanfield::{run_mf, Schedule};
use dpn::metrics::{evaluate, DEFAULT_BOUNDARY_TOL};
use dpn::network::{approx_count, complexity_report, dpn_forward_trace};
use dpn::synth::synth_scene;
use dpn::tensor::{ImageVolume, LabelMap, ProbTensor, VolumeShape, IGNORE_LABEL};
use dpn::train::{train_incremental, Stage, TrainConfig, TrainSample};
use dpn::{DpnError, Result};

#[derive(Parser)]
#[command(
    name = "dpn",
    about = "Label-map smoothing over image and video volumes: a one-pass \
             convolutional approximation of mean-field inference on a \
             high-order Markov random field, with an iterative oracle, \
             training, synthetic data, and evaluation tools.",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene (image, ground truth, noisy unary, flow).
    Synth(SynthArgs),
    /// One-pass network inference producing a posterior and an argmax map.
    Infer(InferArgs),
    /// Iterative mean-field inference with a per-iteration trace.
    Oracle(OracleArgs),
    /// Compare two tensor files; exit 0 iff they agree within 1e-5.
    Compare(CompareArgs),
    /// Incrementally train pairwise parameters on a directory of samples.
    Train(TrainArgs),
    /// Score a predicted label map against ground truth.
    Eval(EvalArgs),
    /// Print per-layer operation counts for a model configuration.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// RNG seed; every output is a pure function of the seed and flags.
    #[arg(long)]
    seed: u64,
    /// Volume shape as TxHxW, e.g. 2x64x64.
    #[arg(long, value_parser = parse_shape)]
    shape: VolumeShape,
    /// Number of labels (1..=8); label 0 is background.
    #[arg(long)]
    labels: usize,
    /// Fraction of voxels whose unary row is replaced by random noise [0,1).
    #[arg(long)]
    noise: f32,
    /// Per-frame region translation as "u,v" (u = x shift, v = y shift).
    #[arg(long, value_parser = parse_motion, default_value = "0,0")]
    motion: (f32, f32),
    /// Output directory; receives image.ppm, gt.pgm, unary.dpt, flow.flo.
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by `infer` and `oracle`.
#[derive(Args)]
struct ModelInputs {
    /// Per-voxel label probabilities (DPT tensor).
    #[arg(long)]
    unary: PathBuf,
    /// RGB volume the intensity distance is computed from.
    #[arg(long)]
    image: PathBuf,
    /// Optical flow (.flo) defining cross-frame links; rigid links if absent.
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output posterior (DPT tensor).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    /// Output argmax label map (PGM).
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    inputs: ModelInputs,
    /// Output argmax label map (PGM).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Iteration cap; overrides the config's max_iters.
    #[arg(long)]
    iters: Option<usize>,
    /// Update schedule, sync or seq; overrides the config's schedule.
    #[arg(long)]
    schedule: Option<String>,
    /// Trace CSV path (iter, free_energy, max_change); defaults next to --out.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Parameter group to update: triple_penalty, label_contexts, or joint.
    #[arg(long)]
    stage: String,
    /// Directory of samples; each subdirectory (or the directory itself)
    /// holds unary.dpt + gt.pgm and optionally image.ppm and flow.flo.
    #[arg(long)]
    data: PathBuf,
    /// Starting run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Where the updated configuration is written (JSON).
    #[arg(long)]
    out: PathBuf,
    /// SGD step size.
    #[arg(long, default_value_t = 1e-3)]
    lr: f32,
    /// Number of single-sample SGD steps.
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Seed for the sample visit order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loss history CSV; defaults next to --out.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label map (PGM).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label map (PGM; 255 = ignore).
    #[arg(long)]
    gt: PathBuf,
    /// Ground-truth boxes (JSON); derived from --gt when absent.
    #[arg(long = "gt-boxes")]
    gt_boxes: Option<PathBuf>,
    /// Boundary tolerance in pixels (Chebyshev distance).
    #[arg(long, default_value_t = DEFAULT_BOUNDARY_TOL)]
    tol: usize,
    /// Label count; defaults to 1 + the largest label present.
    #[arg(long)]
    labels: Option<usize>,
    /// Also write the JSON report to this path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Use the published configuration: 512x512 frames, 21 labels,
    /// 5 mixtures, 50-tap local window, 9-tap context window, batch 10.
    #[arg(long)]
    paper_config: bool,
    /// Volume shape as TxHxW.
    #[arg(long, value_parser = parse_shape, default_value = "1x512x512")]
    shape: VolumeShape,
    #[arg(long, default_value_t = 21)]
    labels: usize,
    #[arg(long, default_value_t = 5)]
    mixtures: usize,
    /// Local (triple-penalty) window side in pixels.
    #[arg(long, default_value_t = 50)]
    local: usize,
    /// Context window side in pixels.
    #[arg(long, default_value_t = 9)]
    context: usize,
    #[arg(long, default_value_t = 10)]
    batch: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::Oracle(a) => cmd_oracle(a),
        Cmd::Compare(a) => cmd_compare(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn parse_shape(text: &str) -> std::result::Result<VolumeShape, String> {
    let dims: Vec<&str> = text.split('x').collect();
    if dims.len() != 3 {
        return Err(format!("expected TxHxW, got {text:?}"));
    }
    let mut parsed = [0usize; 3];
    for (slot, raw) in parsed.iter_mut().zip(&dims) {
        *slot = raw
            .parse()
            .map_err(|_| format!("{raw:?} is not a dimension"))?;
    }
    VolumeShape::new(parsed[0], parsed[1], parsed[2]).map_err(|e| e.to_string())
}

fn parse_motion(text: &str) -> std::result::Result<(f32, f32), String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected u,v, got {text:?}"));
    }
    let u: f32 = parts[0]
        .parse()
        .map_err(|_| format!("{:?} is not a number", parts[0]))?;
    let v: f32 = parts[1]
        .parse()
        .map_err(|_| format!("{:?} is not a number", parts[1]))?;
    Ok((u, v))
}

/// Pin rayon's global pool to the configured worker count. Results are
/// bit-identical at any worker count; the pin keeps timing reproducible.
fn init_workers(workers: usize) {
    // Ignore the error from a second initialization (pool size is set once
    // per process; every subcommand configures it before first use).
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global();
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let scene = synth_scene(a.seed, a.shape, a.labels, a.noise, a.motion)?;
    std::fs::create_dir_all(&a.out).map_err(|e| DpnError::io(&a.out, e))?;
    io::write_ppm(a.out.join("image.ppm"), &scene.image)?;
    io::write_pgm_labels(a.out.join("gt.pgm"), &scene.truth)?;
    io::write_prob(a.out.join("unary.dpt"), &scene.unary)?;
    let mut files = vec!["image.ppm", "gt.pgm", "unary.dpt"];
    // A single-frame scene has no cross-frame flow planes to store.
    if a.shape.frames > 1 {
        io::write_flo(a.out.join("flow.flo"), &scene.flow)?;
        files.push("flow.flo");
    }
    println!("wrote {} under {}", files.join(", "), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Load the tensor, image, links, and pairwise parameters shared by the
/// network and oracle paths, and pin the worker pool from the config.
fn load_model_inputs(
    inputs: &ModelInputs,
) -> Result<(ProbTensor, ImageVolume, TemporalLinks, RunConfig, dpn::energy::PairwiseConfig)> {
    let run = RunConfig::load(&inputs.config)?;
    init_workers(run.workers);
    let prob = io::read_prob(&inputs.unary)?;
    let image = io::read_ppm(&inputs.image)?;
    let shape = prob.shape();
    if image.shape != shape {
        return Err(DpnError::ShapeMismatch {
            context: "image versus unary geometry",
            expected: shape.to_string(),
            found: image.shape.to_string(),
        });
    }
    let links = match &inputs.flow {
        Some(path) => {
            let flow = io::read_flo(path, shape.frames - 1, shape.height, shape.width)?;
            TemporalLinks::from_flow(&flow, shape)?
        }
        None => TemporalLinks::rigid(shape),
    };
    let cfg = run.to_pairwise(prob.labels())?;
    Ok((prob, image, links, run, cfg))
}

fn cmd_infer(a: InferArgs) -> Result<ExitCode> {
    let (prob, image, links, run, cfg) = load_model_inputs(&a.inputs)?;
    let trace = dpn_forward_trace(&prob, Some(&image), &cfg, &links, run.epsilon)?;
    io::write_prob(&a.inputs.out, &trace.o15)?;
    io::write_pgm_labels(&a.labels, &trace.o15.argmax_map())?;
    println!(
        "wrote posterior {} and labels {}",
        a.inputs.out.display(),
        a.labels.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(a: OracleArgs) -> Result<ExitCode> {
    let (prob, image, links, run, cfg) = load_model_inputs(&a.inputs)?;
    let schedule = match &a.schedule {
        Some(text) => match text.as_str() {
            "sync" => Schedule::Synchronous,
            "seq" => Schedule::Sequential,
            other => {
                return Err(DpnError::InvalidConfig {
                    field: "schedule",
                    reason: format!("must be \"sync\" or \"seq\", got \"{other}\""),
                })
            }
        },
        None => run.schedule()?,
    };
    let iters = a.iters.unwrap_or(run.max_iters);
    let (posterior, trace) = run_mf(
        &prob,
        Some(&image),
        &cfg,
        &links,
        schedule,
        run.epsilon,
        iters,
        run.tol,
    )?;
    io::write_prob(&a.inputs.out, &posterior)?;
    if let Some(path) = &a.labels {
        io::write_pgm_labels(path, &posterior.argmax_map())?;
    }
    let trace_path = a
        .trace
        .unwrap_or_else(|| a.inputs.out.with_extension("trace.csv"));
    io::write_text(&trace_path, &io::trace_csv(&trace))?;
    let last = trace
        .iterations
        .last()
        .expect("run_mf always records at least one iteration");
    println!(
        "{} iterations, final free energy {:.6e}, trace {}",
        trace.iterations.len(),
        last.free_energy,
        trace_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(a: CompareArgs) -> Result<ExitCode> {
    let ta = io::read_tensor(&a.a)?;
    let tb = io::read_tensor(&a.b)?;
    if ta.shape != tb.shape || ta.channels != tb.channels {
        return Err(DpnError::ShapeMismatch {
            context: "tensor comparison",
            expected: format!("{} x{}", ta.shape, ta.channels),
            found: format!("{} x{}", tb.shape, tb.channels),
        });
    }
    let mut linf = 0f64;
    let mut total = 0f64;
    for (&x, &y) in ta.data().iter().zip(tb.data().iter()) {
        let d = (x as f64 - y as f64).abs();
        linf = linf.max(d);
        total += d;
    }
    let mean = total / ta.data().len() as f64;
    println!("l_inf {linf:.6e}");
    println!("mean_abs {mean:.6e}");
    if linf < 1e-5 {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}

/// A sample directory holds unary.dpt + gt.pgm, optionally image.ppm and
/// flow.flo. `--data` may be one such directory or a directory of them.
fn sample_dirs(data: &Path) -> Result<Vec<PathBuf>> {
    if data.join("unary.dpt").is_file() {
        return Ok(vec![data.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = Vec::new();
    let entries = std::fs::read_dir(data).map_err(|e| DpnError::io(data, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| DpnError::io(data, e))?;
        let path = entry.path();
        if path.is_dir() && path.join("unary.dpt").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(DpnError::EmptyInput {
            context: "training data",
            detail: format!("no sample directories with unary.dpt under {}", data.display()),
        });
    }
    Ok(dirs)
}

fn load_sample(dir: &Path) -> Result<TrainSample> {
    let probs = io::read_prob(dir.join("unary.dpt"))?;
    let target = io::read_pgm_labels(dir.join("gt.pgm"))?;
    let shape = probs.shape();
    let image_path = dir.join("image.ppm");
    let image = if image_path.is_file() {
        Some(io::read_ppm(&image_path)?)
    } else {
        None
    };
    let flow_path = dir.join("flow.flo");
    let links = if shape.frames > 1 && flow_path.is_file() {
        let flow = io::read_flo(&flow_path, shape.frames - 1, shape.height, shape.width)?;
        TemporalLinks::from_flow(&flow, shape)?
    } else {
        TemporalLinks::rigid(shape)
    };
    Ok(TrainSample {
        probs,
        image,
        links,
        target,
    })
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let stage = match a.stage.as_str() {
        "triple_penalty" => Stage::TriplePenalty,
        "label_contexts" => Stage::LabelContexts,
        "joint" => Stage::Joint,
        other => {
            return Err(DpnError::InvalidConfig {
                field: "stage",
                reason: format!(
                    "must be triple_penalty, label_contexts, or joint, got \"{other}\""
                ),
            })
        }
    };
    let run = RunConfig::load(&a.config)?;
    init_workers(run.workers);
    let dirs = sample_dirs(&a.data)?;
    let mut dataset = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        dataset.push(load_sample(dir)?);
    }
    let labels = dataset[0].probs.labels();
    for (dir, sample) in dirs.iter().zip(&dataset) {
        if sample.probs.labels() != labels {
            return Err(DpnError::ShapeMismatch {
                context: "training data label count",
                expected: format!("{labels} labels"),
                found: format!("{} labels in {}", sample.probs.labels(), dir.display()),
            });
        }
    }
    let cfg0 = run.to_pairwise(labels)?;
    let tc = TrainConfig {
        learning_rate: a.lr,
        iterations: a.iters,
        stage,
        seed: a.seed,
    };
    let (trained, report) = train_incremental(&dataset, &cfg0, &tc)?;
    RunConfig::from_pairwise(
        &trained,
        run.epsilon,
        &run.schedule,
        run.max_iters,
        run.tol,
        run.workers,
    )
    .save(&a.out)?;
    let losses_path = a
        .losses
        .unwrap_or_else(|| a.out.with_extension("losses.csv"));
    io::write_text(&losses_path, &io::loss_csv(&report.losses))?;
    let first = report.losses.first().copied().unwrap_or(f64::NAN);
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "{} samples, {} steps, loss {first:.6} -> {last:.6}; config {}, losses {}",
        dataset.len(),
        report.losses.len(),
        a.out.display(),
        losses_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn largest_label(map: &LabelMap) -> Option<u16> {
    map.data()
        .iter()
        .copied()
        .filter(|&v| v != IGNORE_LABEL)
        .max()
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let pred = io::read_pgm_labels(&a.pred)?;
    let gt = io::read_pgm_labels(&a.gt)?;
    let labels = match a.labels {
        Some(l) => l,
        None => {
            let top = largest_label(&pred).max(largest_label(&gt)).unwrap_or(0);
            top as usize + 1
        }
    };
    let boxes = match &a.gt_boxes {
        Some(path) => Some(io::read_boxes(path)?),
        None => None,
    };
    let report = evaluate(&pred, &gt, boxes.as_deref(), labels, a.tol)?;
    print!("{}", report.text_table());
    let json = io::metrics_json(&report);
    println!("{json}");
    if let Some(path) = &a.json {
        io::write_text(path, &json)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    // --paper-config pins every dimension to the published setting even if
    // override flags are also present.
    let (shape, labels, mixtures, local, context, batch) = if a.paper_config {
        (VolumeShape::new(1, 512, 512)?, 21, 5, 50, 9, 10)
    } else {
        (a.shape, a.labels, a.mixtures, a.local, a.context, a.batch)
    };
    let report = complexity_report(shape, labels, mixtures, local, context, batch);
    println!(
        "config: {shape} labels {labels} mixtures {mixtures} local {local} \
         context {context} batch {batch}"
    );
    println!("{:<12} {:>20} {:>8}", "layer", "operations", "approx");
    for (name, count) in report.rows() {
        println!("{name:<12} {count:>20} {:>8}", approx_count(count));
    }
    Ok(ExitCode::SUCCESS)
}
