//! `coordquant`: calibrate, quantize, evaluate and benchmark weight matrices.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or configuration,
//! 3 I/O, 4 shape mismatch, 5 enumeration guard, 6 malformed data.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use coordquant::bench::{self, SuiteConfig};
use coordquant::calibration::{self, build_hessian, clip_hessian_eigenvalues, CalibrationMatrix, Hessian, SynthSpec};
use coordquant::descent::{cd_quantize, DescentConfig, StepRecord};
use coordquant::group::ClipStep;
use coordquant::oracle::{self, MAX_ENUMERATION_BITS};
use coordquant::pipeline::{quantize_matrix, Method, PipelineConfig};
use coordquant::quant::{self, Bits, ChannelProblem, CodeVector};
use coordquant::tensorio::{self, BenchRecord, ReportFormat, TensorContainer};
use coordquant::{Error, QuantizedLayer};

use config::{load_flat, QuantizeFile};

const THREADS_ENV: &str = "COORDQUANT_THREADS";

#[derive(Parser)]
#[command(name = "coordquant", version, about = "Coordinate-descent post-training weight quantization")]
struct Cli {
    /// Worker threads (default: $COORDQUANT_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic calibration matrix (and optionally weights).
    GenCalib(GenCalibArgs),
    /// Quantize a weight matrix against calibration data.
    Quantize(QuantizeArgs),
    /// Recompute objectives of a stored quantized layer.
    Eval(EvalArgs),
    /// Run a method comparison suite.
    Bench(BenchArgs),
    /// Exhaustively solve a small instance and compare against greedy descent.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct GenCalibArgs {
    #[arg(long)]
    d_in: usize,
    /// Calibration rows.
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    spectrum_exponent: f64,
    #[arg(long, default_value_t = 0)]
    outlier_directions: usize,
    #[arg(long, default_value_t = 1.0)]
    outlier_gain: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Calibration container (n × d_in, f32).
    #[arg(long)]
    out: PathBuf,
    /// Also write a d_in × d_out standard normal weight container here.
    #[arg(long, requires = "d_out")]
    weights_out: Option<PathBuf>,
    #[arg(long)]
    d_out: Option<usize>,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Flat JSON file with any of the options below; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// d_in × d_out weight container.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// n × d_in calibration container.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Output directory for the quantized layer.
    #[arg(long)]
    out: Option<PathBuf>,
    /// rtn, owc, cyclic, cd or bcd (default cd).
    #[arg(long)]
    method: Option<Method>,
    /// Bits per weight, 1..=8 (default 3).
    #[arg(long)]
    bits: Option<u32>,
    /// Inputs per scale group; 0 for one scale per output channel.
    #[arg(long)]
    group_size: Option<usize>,
    /// Coordinates per block (bcd only; default 2).
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Steps per epoch (default d_in).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Clipping-descent steps with groups (default d_in / group_size).
    #[arg(long)]
    clip_steps: Option<usize>,
    /// Damping relative to the mean diagonal of XᵀX (default 0.01).
    #[arg(long)]
    lambda_rel: Option<f64>,
    /// Fraction of top Hessian eigenvalues to clip (default 0).
    #[arg(long)]
    clip_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Per-channel report, CSV or JSON lines by extension (default <out>/report.csv).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write every descent step as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Store codes one byte each instead of bit-packed.
    #[arg(long)]
    unpacked_codes: bool,
    /// Record wall-clock times in the report (makes it non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    layer: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    /// Per-column report, CSV or JSON lines by extension.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the damping recorded in the layer.
    #[arg(long)]
    lambda_rel: Option<f64>,
    /// Override the eigenvalue clipping recorded in the layer.
    #[arg(long)]
    clip_fraction: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Flat JSON suite description (default suite when absent).
    #[arg(long)]
    suite: Option<PathBuf>,
    /// Per-channel records, CSV or JSON lines by extension.
    #[arg(long)]
    out: PathBuf,
    /// Aggregate table, CSV or JSON lines by extension (default: stdout).
    #[arg(long)]
    aggregate: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// The fixed two-coordinate regression instance.
    #[arg(long, conflicts_with_all = ["weights", "d_in"])]
    canonical: bool,
    #[arg(long, requires_all = ["calib", "column"])]
    weights: Option<PathBuf>,
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    column: Option<usize>,
    /// Random synthetic instance of this size.
    #[arg(long, conflicts_with = "weights")]
    d_in: Option<usize>,
    #[arg(long, default_value_t = 2)]
    bits: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    lambda_rel: f64,
    #[arg(long, default_value_t = 50)]
    grid_size: usize,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Core(e) => match e {
                Error::InvalidConfig(_) | Error::InvalidBits(_) => 2,
                Error::Io { .. } => 3,
                Error::Shape(_) => 4,
                Error::Guard { .. } => 5,
                Error::MalformedHeader(_)
                | Error::PayloadLengthMismatch { .. }
                | Error::NonFinite { .. }
                | Error::CodeOutOfRange { .. }
                | Error::TraceMismatch(_)
                | Error::Json(_)
                | Error::Csv(_) => 6,
                _ => 1,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Usage(m) => f.write_str(m),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code());
    }
    let result = match cli.command {
        Command::GenCalib(a) => gen_calib(a),
        Command::Quantize(a) => quantize(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => run_bench(a),
        Command::Oracle(a) => run_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn configure_threads(flag: Option<usize>) -> CmdResult {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot start worker pool: {e}")))?;
    }
    Ok(())
}

fn print_json(value: &impl Serialize) -> CmdResult {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn gen_calib(a: GenCalibArgs) -> CmdResult {
    let synth = SynthSpec {
        d_in: a.d_in,
        n: a.n,
        spectrum_exponent: a.spectrum_exponent,
        outlier_directions: a.outlier_directions,
        outlier_gain: a.outlier_gain,
        seed: a.seed,
    };
    let x = calibration::gen_calibration(&synth)?;
    tensorio::write_container(&a.out, &TensorContainer::from_matrix_f32(x.matrix())?)?;
    if let (Some(path), Some(d_out)) = (&a.weights_out, a.d_out) {
        let w = calibration::synth_weights(a.d_in, d_out, a.seed);
        tensorio::write_container(path, &TensorContainer::from_matrix_f32(&w)?)?;
    }
    Ok(())
}

fn load_calibration(path: &Path) -> Result<CalibrationMatrix, Failure> {
    let c = tensorio::read_container(path)?;
    if c.shape.len() != 2 {
        return Err(Error::Shape(format!("calibration must be 2-D, got shape {:?}", c.shape)).into());
    }
    Ok(CalibrationMatrix::new(c.to_matrix()?)?)
}

fn load_weights(path: &Path) -> Result<coordquant::nalgebra::DMatrix<f64>, Failure> {
    let c = tensorio::read_container(path)?;
    if c.shape.len() != 2 {
        return Err(Error::Shape(format!("weights must be 2-D (d_in × d_out), got shape {:?}", c.shape)).into());
    }
    Ok(c.to_matrix()?)
}

fn hessian_for(x: &CalibrationMatrix, lambda_rel: f64, clip_fraction: f64) -> Result<Hessian, Failure> {
    let h = build_hessian(x, lambda_rel)?;
    Ok(if clip_fraction > 0.0 {
        clip_hessian_eigenvalues(&h, clip_fraction)?
    } else {
        h
    })
}

#[derive(Serialize)]
struct TraceLine<'a> {
    column: usize,
    stage: &'a str,
    #[serde(flatten)]
    step: &'a StepRecord,
}

#[derive(Serialize)]
struct ClipLine<'a> {
    column: usize,
    stage: &'a str,
    #[serde(flatten)]
    step: &'a ClipStep,
}

fn quantize(a: QuantizeArgs) -> CmdResult {
    let file = match &a.config {
        Some(p) => load_flat::<QuantizeFile>(p)?,
        None => QuantizeFile::default(),
    };
    let need = |flag: Option<PathBuf>, from_file: Option<PathBuf>, name: &str| {
        flag.or(from_file)
            .ok_or_else(|| Failure::Usage(format!("missing --{name} (flag or config file)")))
    };
    let weights = need(a.weights, file.weights, "weights")?;
    let calib = need(a.calib, file.calib, "calib")?;
    let out = need(a.out, file.out, "out")?;
    let method = a.method.or(file.method).unwrap_or(Method::Cd);
    let bits = Bits::new(a.bits.or(file.bits).unwrap_or(3))?;
    let block_size = a.block_size.or(file.block_size);
    if block_size.is_some() && method != Method::Bcd {
        return Err(Failure::Usage(format!("--block-size applies only to bcd, not {method}")));
    }
    let lambda_rel = a.lambda_rel.or(file.lambda_rel).unwrap_or(0.01);
    let clip_fraction = a.clip_fraction.or(file.clip_fraction).unwrap_or(0.0);

    let mut cfg = PipelineConfig::new(method, bits);
    cfg.group_size = a.group_size.or(file.group_size).unwrap_or(0);
    cfg.grid_size = a.grid_size.or(file.grid_size).unwrap_or(50);
    cfg.clip_steps = a.clip_steps.or(file.clip_steps);
    cfg.keep_traces = a.trace.is_some();
    cfg.descent = DescentConfig {
        steps: a.steps.or(file.steps),
        epochs: a.epochs.or(file.epochs).unwrap_or(1),
        block_size: if method == Method::Bcd { block_size.unwrap_or(2) } else { 1 },
        seed: a.seed.or(file.seed).unwrap_or(0),
        early_stop: true,
    };

    let w = load_weights(&weights)?;
    let x = load_calibration(&calib)?;
    if x.d_in() != w.nrows() {
        return Err(Error::Shape(format!(
            "calibration has d_in = {}, weights have {} rows",
            x.d_in(),
            w.nrows()
        ))
        .into());
    }
    cfg.validate(w.nrows())?;
    let h = hessian_for(&x, lambda_rel, clip_fraction)?;
    let result = quantize_matrix(&w, &h, &cfg, cfg.provenance(lambda_rel, clip_fraction))?;
    result.layer.save(&out, !a.unpacked_codes)?;

    let instance = weights
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let records: Vec<BenchRecord> = result
        .channels
        .iter()
        .map(|ch| BenchRecord {
            instance: instance.clone(),
            method: method.to_string(),
            bits: bits.get(),
            group_size: cfg.group_size,
            block_size: cfg.descent.block_size,
            epochs: cfg.descent.epochs,
            column: ch.column,
            objective: ch.objective,
            relative_objective: ch.relative_objective.unwrap_or(f64::NAN),
            steps: ch.steps,
            wall_millis: if a.timing { ch.wall_millis } else { 0.0 },
        })
        .collect();
    let report = a
        .report
        .or(file.report)
        .unwrap_or_else(|| out.join("report.csv"));
    tensorio::emit_report(&records, ReportFormat::from_path(&report), &report)?;

    if let Some(path) = &a.trace {
        let mut buf = Vec::new();
        let stages: &[&str] = match method {
            Method::Bcd => &["cd", "bcd"],
            Method::Cd => &["cd"],
            Method::Cyclic => &["cyclic"],
            Method::Rtn | Method::Owc => &[],
        };
        for ch in &result.channels {
            for step in &ch.clip_steps {
                serde_json::to_writer(&mut buf, &ClipLine { column: ch.column, stage: "clip", step })?;
                buf.push(b'\n');
            }
            for (trace, stage) in ch.traces.iter().zip(stages) {
                for step in &trace.records {
                    serde_json::to_writer(&mut buf, &TraceLine { column: ch.column, stage, step })?;
                    buf.push(b'\n');
                }
            }
        }
        write_bytes(path, &buf)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    column: usize,
    objective: f64,
    relative_objective: Option<f64>,
    zero_denominator: bool,
}

#[derive(Serialize)]
struct EvalSummary {
    channels: usize,
    evaluated: usize,
    zero_denominator_columns: Vec<usize>,
    mean_objective: f64,
    median_objective: f64,
    mean_relative_objective: Option<f64>,
    median_relative_objective: Option<f64>,
}

fn eval(a: EvalArgs) -> CmdResult {
    let layer = QuantizedLayer::load(&a.layer)?;
    let w = load_weights(&a.weights)?;
    let x = load_calibration(&a.calib)?;
    if w.shape() != (layer.d_in, layer.d_out) || x.d_in() != layer.d_in {
        return Err(Error::Shape(format!(
            "layer is {}×{}, weights {}×{}, calibration d_in {}",
            layer.d_in,
            layer.d_out,
            w.nrows(),
            w.ncols(),
            x.d_in()
        ))
        .into());
    }
    let p = &layer.provenance;
    let h = hessian_for(
        &x,
        a.lambda_rel.unwrap_or(p.lambda_rel),
        a.clip_fraction.unwrap_or(p.clip_fraction),
    )?;
    let mut records = Vec::with_capacity(layer.d_out);
    for j in 0..layer.d_out {
        let col: Vec<f64> = w.column(j).iter().copied().collect();
        let objective = layer.channel_objective(j, &col, &h)?;
        let relative_objective = match quant::relative_to_zero(objective, &col, &h) {
            Ok(r) => Some(r),
            Err(Error::ZeroDenominator) => None,
            Err(e) => return Err(e.into()),
        };
        records.push(EvalRecord {
            column: j,
            objective,
            relative_objective,
            zero_denominator: relative_objective.is_none(),
        });
    }
    let kept: Vec<&EvalRecord> = records.iter().filter(|r| !r.zero_denominator).collect();
    let mut obj: Vec<f64> = kept.iter().map(|r| r.objective).collect();
    let mut rel: Vec<f64> = kept.iter().filter_map(|r| r.relative_objective).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let summary = EvalSummary {
        channels: records.len(),
        evaluated: kept.len(),
        zero_denominator_columns: records.iter().filter(|r| r.zero_denominator).map(|r| r.column).collect(),
        mean_objective: if obj.is_empty() { f64::NAN } else { mean(&obj) },
        median_objective: bench::median(&mut obj),
        mean_relative_objective: (!rel.is_empty()).then(|| mean(&rel)),
        median_relative_objective: (!rel.is_empty()).then(|| bench::median(&mut rel)),
    };
    if let Some(path) = &a.out {
        tensorio::emit_report(&records, ReportFormat::from_path(path), path)?;
    }
    print_json(&summary)
}

fn run_bench(a: BenchArgs) -> CmdResult {
    let suite = match &a.suite {
        Some(p) => load_flat::<SuiteConfig>(p)?,
        None => SuiteConfig::default(),
    };
    if suite.methods.is_empty() {
        return Err(Failure::Usage("suite lists no methods".into()));
    }
    let records = bench::run_suite(&suite)?;
    tensorio::emit_report(&records, ReportFormat::from_path(&a.out), &a.out)?;
    let agg = bench::aggregate(&records);
    match &a.aggregate {
        Some(path) => tensorio::emit_report(&agg, ReportFormat::from_path(path), path)?,
        None => {
            let bytes = tensorio::render_report(&agg, ReportFormat::Jsonl)?;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| Error::io("<stdout>", e))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    instance: String,
    d_in: usize,
    bits: u8,
    enumeration_count: u64,
    optimum_codes: CodeVector,
    optimum_objective: f64,
    cd_codes: CodeVector,
    cd_objective: f64,
    gap: f64,
}

fn guard(d_in: usize, bits: Bits) -> CmdResult {
    let width = d_in * bits.get() as usize;
    if width > MAX_ENUMERATION_BITS {
        return Err(Error::Guard {
            what: "bits * d_in",
            value: width,
            limit: MAX_ENUMERATION_BITS,
        }
        .into());
    }
    Ok(())
}

fn run_oracle(a: OracleArgs) -> CmdResult {
    let bits = Bits::new(a.bits)?;
    let (instance, w, h, start) = if a.canonical {
        let h = bench::canonical_hessian();
        (bench::CANONICAL_INSTANCE.to_string(), vec![0.4, 0.6], h, Start::Zeros)
    } else if let Some(path) = &a.weights {
        let wm = load_weights(path)?;
        let j = a.column.expect("clap enforces --column");
        if j >= wm.ncols() {
            return Err(Error::Shape(format!("column {j} out of range for {} columns", wm.ncols())).into());
        }
        guard(wm.nrows(), bits)?;
        let x = load_calibration(a.calib.as_deref().expect("clap enforces --calib"))?;
        if x.d_in() != wm.nrows() {
            return Err(Error::Shape(format!("calibration has d_in = {}, weights have {} rows", x.d_in(), wm.nrows())).into());
        }
        let h = build_hessian(&x, a.lambda_rel)?;
        let name = format!("{}:{j}", path.display());
        (name, wm.column(j).iter().copied().collect(), h, Start::Clipped)
    } else if let Some(d) = a.d_in {
        guard(d, bits)?;
        let synth = SynthSpec {
            d_in: d,
            n: 4 * d,
            spectrum_exponent: 1.0,
            outlier_directions: 0,
            outlier_gain: 1.0,
            seed: a.seed,
        };
        let h = build_hessian(&calibration::gen_calibration(&synth)?, a.lambda_rel)?;
        let w = calibration::synth_weights(d, 1, a.seed);
        (format!("synth-{}", a.seed), w.column(0).iter().copied().collect(), h, Start::Clipped)
    } else {
        return Err(Failure::Usage("give one of --canonical, --weights/--calib/--column, or --d-in".into()));
    };

    let (prob, q0) = match start {
        Start::Zeros => {
            let prob = ChannelProblem::new(w, &h, coordquant::QuantParams::unit(Bits::new(1)?))?;
            (prob, CodeVector::zeros(2))
        }
        Start::Clipped => {
            let (params, q0) = quant::owc_quantize(&w, &h, bits, a.grid_size)?;
            (ChannelProblem::new(w, &h, params)?, q0)
        }
    };
    let best = oracle::brute_force(&prob)?;
    let (q, _) = if prob.target().is_some() {
        cd_quantize(&prob, &q0, &DescentConfig::default())?
    } else {
        (q0, Default::default())
    };
    let cd_objective = prob.objective(&q)?;
    print_json(&OracleReport {
        instance,
        d_in: prob.dim(),
        bits: prob.params().bits.get(),
        enumeration_count: best.enumeration_count,
        optimum_codes: best.codes,
        optimum_objective: best.objective,
        cd_codes: q,
        cd_objective,
        gap: cd_objective - best.objective,
    })
}

enum Start {
    Zeros,
    Clipped,
}
