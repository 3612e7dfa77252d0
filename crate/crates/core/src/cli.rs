//! `lru-online train | align | gradcheck`.
//!
//! Exit codes: 0 success, 1 check failed or I/O error, 2 bad config or
//! arguments, 3 training diverged (partial metrics are kept).

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::diagnostics::{alignment_sweep, compare_gradients, finite_difference_gradient, GradCheckReport};
use crate::error::{io_err, Error, Result};
use crate::learning::{bptt_gradient, exact_online_params, online_sequence_gradient, GradientOptions, RuleKind};
use crate::network::block_of;
use crate::tasks::CopyDataset;
use crate::train::{init_network, train, EpochMetrics, TrainObserver};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// Relative-error floor for gradient comparisons.
pub const REL_FLOOR: f64 = 1e-10;

#[derive(Debug, Parser)]
#[command(name = "lru-online", version, about = "Online learning for deep linear recurrent networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the copy task; writes metrics.csv, a checkpoint and config.ini.
    Train(RunArgs),
    /// Train while measuring gradient alignment with BPTT; writes alignment.csv.
    Align(RunArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `[run] seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `[run] rule`.
    #[arg(long)]
    pub rule: Option<RuleKind>,
    /// Overrides `[run] output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: Cli) -> i32 {
    let (args, cmd): (&RunArgs, fn(&RunConfig) -> Result<i32>) = match &cli.command {
        Command::Train(a) => (a, cmd_train),
        Command::Align(a) => (a, cmd_align),
        Command::Gradcheck(a) => (a, cmd_gradcheck),
    };
    let cfg = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match cmd(&cfg) {
        Ok(code) => code,
        Err(e @ Error::InvalidModel(_)) | Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILED
        }
    }
}

pub fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(rule) = args.rule {
        cfg.rule = rule;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.resolve()?;
    Ok(cfg)
}

/// Fixed-width scientific notation with 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), fmt_float)
}

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join("config.ini");
    std::fs::write(&path, cfg.to_ini()).map_err(io_err(&path))
}

struct CsvFile {
    path: PathBuf,
    file: File,
}

impl CsvFile {
    fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = File::create(path).map_err(io_err(path))?;
        writeln!(file, "{header}").map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(",")).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

pub const METRICS_HEADER: &str = "epoch,step,train_loss,train_accuracy,lr,wall_seconds";

impl TrainObserver for CsvFile {
    fn on_epoch(&mut self, m: &EpochMetrics) -> Result<()> {
        self.row(&[
            m.epoch.to_string(),
            m.step.to_string(),
            fmt_float(m.train_loss),
            fmt_float(m.train_accuracy),
            fmt_float(m.lr),
            fmt_float(m.wall_seconds),
        ])
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<i32> {
    prepare_output(cfg)?;
    let mut metrics = CsvFile::create(&cfg.output_dir.join("metrics.csv"), METRICS_HEADER)?;
    let outcome = train(cfg, &mut metrics)?;
    checkpoint::save(&outcome.net, &cfg.output_dir.join("checkpoint"))?;
    if outcome.diverged {
        eprintln!("error: loss became non-finite in epoch {}", outcome.epochs.len());
        return Ok(EXIT_DIVERGED);
    }
    if let Some(last) = outcome.epochs.last() {
        println!(
            "rule={} epochs={} final_loss={} final_accuracy={}",
            cfg.rule,
            last.epoch,
            fmt_float(last.train_loss),
            fmt_float(last.train_accuracy)
        );
    }
    Ok(EXIT_OK)
}

pub const ALIGNMENT_HEADER: &str = "depth,lambda_min,step,layer,cosine,mean_cosine,loss";

pub fn cmd_align(cfg: &RunConfig) -> Result<i32> {
    prepare_output(cfg)?;
    let cells = alignment_sweep(cfg)?;
    let mut csv = CsvFile::create(&cfg.output_dir.join("alignment.csv"), ALIGNMENT_HEADER)?;
    for cell in &cells {
        for p in &cell.curve.points {
            for (layer, c) in p.per_layer.iter().enumerate() {
                csv.row(&[
                    cell.depth.to_string(),
                    fmt_float(cell.lambda_min),
                    p.step.to_string(),
                    (layer + 1).to_string(),
                    fmt_opt(*c),
                    fmt_opt(p.mean_cosine),
                    fmt_float(p.loss),
                ])?;
            }
        }
        let last = cell.curve.points.last();
        println!(
            "depth={} lambda_min={} final_mean_cosine={} final_train_loss={}",
            cell.depth,
            cell.lambda_min,
            fmt_opt(last.and_then(|p| p.mean_cosine)),
            fmt_opt(cell.final_train_loss)
        );
    }
    Ok(EXIT_OK)
}

fn print_report(title: &str, report: &GradCheckReport) {
    println!("{title}: max_rel_err={:.3e}", report.max_rel());
    for p in &report.params {
        println!(
            "  {:<28} max={:.3e} mean={:.3e} worst[{}]",
            p.name, p.max_rel, p.mean_rel, p.worst_index
        );
    }
}

fn describe_worst(report: &GradCheckReport) -> String {
    report.worst().map_or_else(String::new, |w| {
        format!(
            "{}[{}]: analytic {} vs finite-difference {} (rel err {:.3e})",
            w.name, w.worst_index, w.candidate, w.reference, w.max_rel
        )
    })
}

/// BPTT against finite differences on every parameter, and the online rule
/// against finite differences on the parameters it computes exactly. For
/// deeper nets the remaining online mismatch is reported as a warning.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<i32> {
    let g = &cfg.gradcheck;
    let net = init_network(cfg)?;
    let data = CopyDataset::generate(&crate::tasks::CopyTaskConfig {
        num_samples: g.batch_size,
        ..cfg.task.clone()
    })?;
    let batch = data.batch(&(0..g.batch_size).collect::<Vec<_>>());
    let opts = GradientOptions::default();
    let fd = finite_difference_gradient(&net, &batch, g.eps, g.stencil, &opts)?;

    let bptt = bptt_gradient(&net, &batch, &opts)?;
    let bptt_report = compare_gradients(&bptt, &fd, None, REL_FLOOR)?;
    print_report("bptt vs finite differences", &bptt_report);

    let online_opts = GradientOptions {
        corrupt_traces: g.corrupt_traces,
        ..opts
    };
    let online = online_sequence_gradient(&net, &batch, RuleKind::OnlineTraces, &online_opts)?;
    let exact = exact_online_params(&online);
    let online_report = compare_gradients(&online, &fd, Some(&exact), REL_FLOOR)?;
    print_report("online (exact part) vs finite differences", &online_report);

    if net.num_layers() > 1 {
        let rest: Vec<String> = online
            .entries
            .keys()
            .filter(|k| !exact.contains(k) && block_of(k).is_some())
            .cloned()
            .collect();
        let approx = compare_gradients(&online, &fd, Some(&rest), REL_FLOOR)?;
        println!(
            "warning: online rule is approximate below the last layer (expected); max_rel_err={:.3e} at {}",
            approx.max_rel(),
            describe_worst(&approx)
        );
    }

    let mut ok = true;
    for (name, report) in [("bptt", &bptt_report), ("online", &online_report)] {
        if report.max_rel() > g.tolerance {
            ok = false;
            eprintln!("FAIL {name}: worst coordinate {}", describe_worst(report));
        }
    }
    if ok {
        println!("gradcheck passed (tolerance {:e})", g.tolerance);
        Ok(EXIT_OK)
    } else {
        Ok(EXIT_FAILED)
    }
}
