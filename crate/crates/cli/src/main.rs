//! `canvi`: simulate, train, calibrate and select posterior approximators.
//!
//! Exit codes: 0 success, 1 IO failure, 2 usage or config error, 3 numeric or
//! training failure.

mod config;
mod svg;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use canvi_core::conformal::CoverageCurve;
use canvi_core::efficiency::{counterexample_lengths, counterexample_monte_carlo};
use canvi_core::models::{MdnArchitecture, PosteriorModel};
use canvi_core::pipeline::{
    coverage_sweep, efficiency_trace, gaussian_length_sweep, gaussian_sweep_csv, phi_grid, run_canvi, train_mdn,
    CandidateSpec, GaussianSweep,
};
use canvi_core::{CanviError, DatasetRole, RngStream, Task, TaskName};
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use svg::{Plot, Series};

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<CanviError> for CliError {
    fn from(e: CanviError) -> Self {
        let code = match e {
            CanviError::Io(_) => 1,
            CanviError::Domain(_)
            | CanviError::Argument(_)
            | CanviError::Parse(_)
            | CanviError::UnsupportedDimension(_) => 2,
            CanviError::Simulation { .. } | CanviError::Training { .. } | CanviError::AllCandidatesFailed(_) => 3,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "canvi", version, about = "Conformalized amortized posterior approximators")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw joint (theta, x) pairs and write them as CSV.
    Simulate {
        #[arg(long)]
        task: TaskName,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        stream_id: u64,
        #[arg(long, default_value = "train")]
        role: DatasetRole,
        /// Correlation for the gaussian task.
        #[arg(long, default_value_t = 0.3)]
        rho: f64,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a mixture density network and write checkpoints and the loss trace.
    Train(ConfigArgs),
    /// Calibrate every candidate, select the most efficient and recalibrate it.
    Canvi(ConfigArgs),
    /// Conformal and HDR coverage curves of one candidate.
    Coverage {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        candidate: usize,
    },
    /// Region size at each training checkpoint.
    EfficiencyTrace(ConfigArgs),
    /// Interval length against candidate slope on the bivariate Gaussian.
    GaussianVerify {
        #[arg(long, default_value_t = 0.3)]
        rho: f64,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = -0.5, allow_hyphen_values = true)]
        phi_min: f64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        phi_max: f64,
        #[arg(long, default_value_t = 0.01)]
        phi_step: f64,
        #[arg(long, default_value_t = 10_000)]
        n_calibration: usize,
        #[arg(long, default_value_t = 100)]
        n_test: usize,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 20)]
        batches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expected region lengths for the discrete counterexample.
    Counterexample {
        #[arg(long)]
        b: f64,
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Flags shared by the config-driven commands; each overrides the file.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_calibration: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

impl ConfigArgs {
    fn load(&self, command: &str) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.out {
            cfg.output.dir = Some(v.clone());
        }
        if let Some(v) = self.alpha {
            cfg.conformal.alpha = v;
        }
        if let Some(v) = self.n_calibration {
            cfg.conformal.n_calibration = v;
        }
        if let Some(v) = self.n_test {
            cfg.conformal.n_test = v;
        }
        if let Some(v) = self.draws {
            cfg.conformal.draws = v;
        }
        if let Some(v) = self.steps {
            cfg.train.steps = v;
        }
        cfg.resolve_output(command);
        cfg.pipeline().validate().or_else(|e| match command {
            // training alone does not need conformal candidates
            "train" if cfg.candidates.is_empty() => Ok(()),
            _ => Err(e),
        })?;
        prepare_dir(cfg.output_dir())?;
        write_file(cfg.output_dir(), "config.toml", &cfg.echo())?;
        Ok(cfg)
    }
}

fn prepare_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}: {e}", dir.display())))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))
}

fn mdn_architecture(cfg: &ExperimentConfig) -> MdnArchitecture {
    cfg.candidates
        .iter()
        .find_map(|c| match c {
            CandidateSpec::Mdn { components, hidden, .. } => Some(MdnArchitecture {
                components: *components,
                hidden: hidden.clone(),
            }),
            _ => None,
        })
        .unwrap_or_default()
}

fn cmd_simulate(
    task: TaskName,
    n: usize,
    seed: u64,
    stream_id: u64,
    role: DatasetRole,
    rho: f64,
    out: Option<PathBuf>,
) -> CliResult {
    let task = match task {
        TaskName::Gaussian => Task::gaussian(rho)?,
        name => Task::new(name),
    };
    let data = task.sample_joint(n, &RngStream::new(seed, stream_id), role)?;
    let text = data.to_csv_string();
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                prepare_dir(parent)?;
            }
            std::fs::write(&path, text).map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(args: &ConfigArgs) -> CliResult {
    let cfg = args.load("train")?;
    let dir = cfg.output_dir().to_path_buf();
    let ckpt_dir = dir.join("checkpoints");
    prepare_dir(&ckpt_dir)?;
    let task = cfg.task.build()?;
    let (_, losses) = train_mdn(&task, mdn_architecture(&cfg), cfg.seed, &cfg.train, |step, model| {
        let json = model.checkpoint().expect("networks checkpoint").to_json();
        std::fs::write(ckpt_dir.join(format!("step_{step:06}.json")), json)?;
        eprintln!("checkpoint at step {step}");
        Ok(())
    })?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{},{l:?}", i + 1).unwrap();
    }
    write_file(&dir, "losses.csv", &csv)
}

fn cmd_canvi(args: &ConfigArgs) -> CliResult {
    let cfg = args.load("canvi")?;
    let dir = cfg.output_dir().to_path_buf();
    let run = run_canvi(&cfg.pipeline())?;
    let report = &run.report;
    write_file(&dir, "report.json", &report.to_json())?;
    let table = report.summary_table();
    write_file(&dir, "summary.txt", &table)?;
    let mut csv = String::from("index,label,threshold,l_hat,l_hat_se,failed,selected\n");
    for c in &report.candidates {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(
            csv,
            "{},\"{}\",{},{},{},{},{}",
            c.index,
            c.label.replace('"', "'"),
            c.threshold.map(|t| t.to_string()).unwrap_or_default(),
            opt(c.l_hat),
            opt(c.l_hat_se),
            c.failed,
            c.index == report.selected
        )
        .unwrap();
    }
    write_file(&dir, "candidates.csv", &csv)?;
    if let Some(ckpt) = run.models[report.selected].as_ref().and_then(|m| m.checkpoint()) {
        write_file(&dir, "selected_model.json", &ckpt.to_json())?;
    }
    if cfg.output.save_datasets {
        for (name, data) in [
            ("calibration.csv", &run.calibration),
            ("test.csv", &run.test),
            ("recalibration.csv", &run.recalibration),
        ] {
            write_file(&dir, name, &data.to_csv_string())?;
        }
    }
    print!("{table}");
    Ok(())
}

fn coverage_series(curve: &CoverageCurve, color: &'static str) -> Series {
    Series {
        name: curve.kind.as_str().to_string(),
        color,
        points: curve
            .levels
            .iter()
            .zip(&curve.coverage_mean)
            .zip(&curve.coverage_se)
            .map(|((&l, &c), &s)| (l, c, s))
            .collect(),
    }
}

fn cmd_coverage(args: &ConfigArgs, candidate: usize) -> CliResult {
    let cfg = args.load("coverage")?;
    let dir = cfg.output_dir().to_path_buf();
    let (conformal, hdr) = coverage_sweep(&cfg.pipeline(), candidate)?;
    write_file(&dir, "coverage_conformal.csv", &conformal.to_csv_string())?;
    write_file(&dir, "coverage_hdr.csv", &hdr.to_csv_string())?;
    let plot = Plot {
        title: format!("coverage on {}", conformal.task),
        x_label: "nominal level".into(),
        y_label: "empirical coverage".into(),
        series: vec![coverage_series(&conformal, "#1f77b4"), coverage_series(&hdr, "#d62728")],
        diagonal: true,
    };
    write_file(&dir, "coverage.svg", &plot.render())?;
    eprintln!(
        "max |coverage - level|: conformal {:.4}, hdr {:.4}",
        conformal.max_abs_deviation(),
        hdr.max_abs_deviation()
    );
    Ok(())
}

fn cmd_efficiency_trace(args: &ConfigArgs) -> CliResult {
    let cfg = args.load("efficiency-trace")?;
    let dir = cfg.output_dir().to_path_buf();
    let (trace, losses) = efficiency_trace(&cfg.pipeline())?;
    write_file(&dir, "efficiency_trace.csv", &trace.to_csv_string())?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{},{l:?}", i + 1).unwrap();
    }
    write_file(&dir, "losses.csv", &csv)?;
    let plot = Plot {
        title: format!("region size during training on {}", trace.task),
        x_label: "training step".into(),
        y_label: "mean region size".into(),
        series: vec![Series {
            name: format!("alpha = {}", trace.alpha),
            color: "#1f77b4",
            points: trace.rows.iter().map(|&(s, m, se)| (s as f64, m, se)).collect(),
        }],
        diagonal: false,
    };
    write_file(&dir, "efficiency_trace.svg", &plot.render())
}

fn default_dir(command: &str, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        std::env::var_os(config::OUTPUT_ROOT_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("canvi-out"))
            .join(command)
    })
}

fn cmd_gaussian_verify(sweep: GaussianSweep, out: Option<PathBuf>) -> CliResult {
    let dir = default_dir("gaussian-verify", out);
    let rows = gaussian_length_sweep(&sweep)?;
    prepare_dir(&dir)?;
    write_file(&dir, "gaussian_verify.csv", &gaussian_sweep_csv(&rows))?;
    let plot = Plot {
        title: format!("interval length, rho = {}, alpha = {}", sweep.rho, sweep.alpha),
        x_label: "phi".into(),
        y_label: "length".into(),
        series: vec![
            Series {
                name: "analytic".into(),
                color: "#333333",
                points: rows.iter().map(|r| (r.phi, r.analytic, 0.0)).collect(),
            },
            Series {
                name: "monte carlo".into(),
                color: "#1f77b4",
                points: rows.iter().map(|r| (r.phi, r.mc_mean, r.mc_se)).collect(),
            },
        ],
        diagonal: false,
    };
    write_file(&dir, "gaussian_verify.svg", &plot.render())?;
    if let Some(best) = rows.iter().min_by(|a, b| a.mc_mean.total_cmp(&b.mc_mean)) {
        eprintln!("monte carlo argmin phi = {:.2}", best.phi);
    }
    Ok(())
}

fn cmd_counterexample(b: f64, alpha: f64, draws: usize, seed: u64) -> CliResult {
    let exact = counterexample_lengths(b, alpha)?;
    let mc = counterexample_monte_carlo(b, alpha, draws, &mut RngStream::new(seed, 0))?;
    println!("quantity,analytic,mc_mean,mc_se");
    println!(
        "l_true,{:?},{:?},{:?}",
        exact.true_posterior, mc.true_posterior.value, mc.true_posterior.se
    );
    println!("l_qb,{:?},{:?},{:?}", exact.truncated, mc.truncated.value, mc.truncated.se);
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::usage("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate {
            task,
            n,
            seed,
            stream_id,
            role,
            rho,
            out,
        } => cmd_simulate(task, n, seed, stream_id, role, rho, out),
        Command::Train(args) => cmd_train(&args),
        Command::Canvi(args) => cmd_canvi(&args),
        Command::Coverage { args, candidate } => cmd_coverage(&args, candidate),
        Command::EfficiencyTrace(args) => cmd_efficiency_trace(&args),
        Command::GaussianVerify {
            rho,
            alpha,
            phi_min,
            phi_max,
            phi_step,
            n_calibration,
            n_test,
            draws,
            batches,
            seed,
            out,
        } => {
            let mut sweep = GaussianSweep::new(rho, alpha, phi_grid(phi_min, phi_max, phi_step)?, seed);
            sweep.n_calibration = n_calibration;
            sweep.n_test = n_test;
            sweep.draws = draws;
            sweep.batches = batches;
            cmd_gaussian_verify(sweep, out)
        }
        Command::Counterexample { b, alpha, draws, seed } => cmd_counterexample(b, alpha, draws, seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
