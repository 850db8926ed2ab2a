//! The `pokebnn` command line.
//!
//! Exit codes: 0 success, 1 a check failed or a command could not complete,
//! 2 usage error (bad flags, unknown model, unreadable input).

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cost::{analyze, render_report, render_reports, AceOptions, AnalyzeOptions, FusionPolicy, ReportFormat, SizeConfig};
use crate::graphir::{builtin, builtin_names, graph_to_json, load_graph, GraphSpec};
use crate::kernels::{verify_kernels, FaultInjection};
use crate::nn::gradcheck::{run_suite, SUITES};
use crate::nn::save_checkpoint;
use crate::train::{eval_averaged_top1, ToyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "pokebnn", version, about = "Cost analysis, kernel checks and toy training for binary networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print MAC buckets, ACE, CPU64 and model size.
    Analyze(AnalyzeArgs),
    /// Compare packed kernels against their oracles on random cases.
    VerifyKernels(VerifyArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Train the toy model on a synthetic memorization set.
    TrainToy(TrainToyArgs),
    /// List builtin models with a one-line cost summary each.
    ListBuiltins,
    /// Write a model graph as JSON.
    ExportGraph(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fusion {
    /// 16-bit fixed point, only BatchNorm multiplies kept.
    Fused,
    /// 16-bit fixed point, nothing fused.
    FixedPoint,
    /// bfloat16, nothing fused.
    Bf16,
}

impl From<Fusion> for FusionPolicy {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::Fused => FusionPolicy::FixedPointFused,
            Fusion::FixedPoint => FusionPolicy::FixedPointUnfused,
            Fusion::Bf16 => FusionPolicy::Bf16Unfused,
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Builtin model name or path to a graph JSON file; repeat for a multi-row table.
    #[arg(long, required = true)]
    pub model: Vec<String>,
    #[arg(long, value_enum, default_value = "table")]
    pub format: Format,
    /// Charge FP32 MACs as BF16.
    #[arg(long)]
    pub fp32_as_bf16: bool,
    /// Add the elementwise-op breakdown and its ACE.
    #[arg(long)]
    pub elementwise: bool,
    /// Cost rules for the elementwise ACE.
    #[arg(long, value_enum, default_value = "fused", requires = "elementwise")]
    pub fusion: Fusion,
    /// Storage bits of each non-weight parameter.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..=64))]
    pub non_weight_bits: u32,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub cases: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Flip one activation bit in the given binary-conv case.
    #[arg(long, hide = true)]
    pub inject_fault: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per op.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub instances: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict to these ops (repeatable).
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
    pub op: Vec<String>,
    /// Largest accepted normwise relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    /// JSON config: training keys at the top level plus `model` and `data` objects.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override `total_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override the training seed (batch order).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write newline-delimited JSON metrics here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Save the trained model here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 100)]
    pub log_every: usize,
    /// Exit with status 1 unless final accuracy exceeds this.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Builtin model name.
    pub model: String,
    /// Output file; standard output when absent.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Check(String),
}

type Outcome = Result<(), Failure>;

fn check<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Check(e.to_string())
}

fn io(e: std::io::Error) -> Failure {
    Failure::Check(format!("write failed: {e}"))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => cmd_analyze(&a, out),
        Command::VerifyKernels(a) => cmd_verify(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::TrainToy(a) => cmd_train(&a, out),
        Command::ListBuiltins => cmd_list(out),
        Command::ExportGraph(a) => cmd_export(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Check(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_FAILURE
        }
    }
}

/// Builtin name first, then a graph file.
pub fn resolve_model(name: &str) -> Result<GraphSpec, String> {
    if let Some(g) = builtin(name) {
        return Ok(g);
    }
    let path = Path::new(name);
    if path.exists() {
        return load_graph(path).map_err(|e| format!("{name}: {e}"));
    }
    Err(format!("unknown model `{name}`; builtins are: {}", builtin_names().join(", ")))
}

fn cmd_analyze(a: &AnalyzeArgs, out: &mut dyn Write) -> Outcome {
    let opts = AnalyzeOptions {
        ace: AceOptions {
            fp32_as_bf16: a.fp32_as_bf16,
        },
        size: SizeConfig {
            non_weight_bits: a.non_weight_bits,
        },
        elementwise: a.elementwise.then_some(a.fusion.into()),
    };
    let mut reports = Vec::with_capacity(a.model.len());
    for name in &a.model {
        let g = resolve_model(name).map_err(Failure::Usage)?;
        reports.push(analyze(&g, opts).map_err(|e| Failure::Check(format!("{name}: {e}")))?);
    }
    let text = match reports.as_slice() {
        [one] => render_report(one, a.format.into()),
        many => render_reports(many, a.format.into()),
    };
    out.write_all(text.as_bytes()).map_err(io)
}

fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> Outcome {
    let fault = a.inject_fault.map(|case| FaultInjection { case });
    let report = verify_kernels(a.cases as usize, a.seed, fault);
    write!(out, "{report}").map_err(io)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check("kernel mismatch".into()))
    }
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Outcome {
    let mut failed = Vec::new();
    writeln!(out, "{:<20} {:>9} {:>12}", "op", "instances", "max rel err").map_err(io)?;
    for op in SUITES.iter().filter(|s| a.op.is_empty() || a.op.iter().any(|o| o == *s)) {
        let r = run_suite(op, a.instances as usize, a.seed).map_err(check)?;
        let ok = r.max_rel_err < a.tolerance;
        if !ok {
            failed.push(r.op);
        }
        writeln!(
            out,
            "{:<20} {:>9} {:>12.3e} {}",
            r.op,
            r.instances,
            r.max_rel_err,
            if ok { "PASS" } else { "FAIL" }
        )
        .map_err(io)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_train(a: &TrainToyArgs, out: &mut dyn Write) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => ToyConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ToyConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let mut metrics = match &a.metrics {
        Some(p) => Some(BufWriter::new(
            File::create(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        )),
        None => None,
    };
    let (model, data, summary) = cfg
        .run(metrics.as_mut().map(|w| w as &mut dyn Write))
        .map_err(check)?;
    if let Some(w) = metrics.as_mut() {
        w.flush().map_err(io)?;
    }
    if a.log_every > 0 {
        for r in summary.records.iter().filter(|r| r.step % a.log_every == 0) {
            writeln!(
                out,
                "step {:>6}  phase {}  lr {:.3e}  loss {:.6}  batch top1 {:.4}",
                r.step, r.phase, r.lr, r.loss, r.top1
            )
            .map_err(io)?;
        }
    }
    for s in &summary.freeze_steps {
        writeln!(out, "activation bounds frozen at step {s}").map_err(io)?;
    }
    if !summary.tail_checkpoints.is_empty() {
        let avg = eval_averaged_top1(&model, &data, &summary.tail_checkpoints).map_err(check)?;
        writeln!(
            out,
            "averaged top1 over {} tail checkpoints: {avg:.4}",
            summary.tail_checkpoints.len()
        )
        .map_err(io)?;
    }
    writeln!(out, "final top1: {:.4}", summary.final_top1).map_err(io)?;
    if let Some(p) = &a.checkpoint {
        save_checkpoint(&model, p).map_err(check)?;
    }
    match a.min_accuracy {
        Some(min) if summary.final_top1 <= min => Err(Failure::Check(format!(
            "final top1 {:.4} does not exceed {min}",
            summary.final_top1
        ))),
        _ => Ok(()),
    }
}

fn cmd_list(out: &mut dyn Write) -> Outcome {
    let mut reports = Vec::new();
    for name in builtin_names() {
        let g = builtin(&name).ok_or_else(|| Failure::Check(format!("builtin `{name}` failed to build")))?;
        let mut r = analyze(&g, AnalyzeOptions::default()).map_err(check)?;
        r.model = name;
        reports.push(r);
    }
    out.write_all(render_reports(&reports, ReportFormat::Table).as_bytes()).map_err(io)
}

fn cmd_export(a: &ExportArgs, out: &mut dyn Write) -> Outcome {
    let g = builtin(&a.model).ok_or_else(|| {
        Failure::Usage(format!("unknown model `{}`; builtins are: {}", a.model, builtin_names().join(", ")))
    })?;
    let json = graph_to_json(&g);
    match &a.output {
        Some(p) => std::fs::write(p, json + "\n").map_err(|e| Failure::Check(format!("{}: {e}", p.display()))),
        None => writeln!(out, "{json}").map_err(io),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run(std::iter::once("pokebnn").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run_args(&["analyze", "--model", "pokebnn-1.0x", "--bogus"]).0, EXIT_USAGE);
    }

    #[test]
    fn unknown_model_is_usage_error() {
        let (code, _, err) = run_args(&["analyze", "--model", "no-such-model"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("unknown model"));
    }

    #[test]
    fn zero_cases_rejected() {
        assert_eq!(run_args(&["verify-kernels", "--cases", "0"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run_args(&["--help"]).0, EXIT_OK);
    }
}
