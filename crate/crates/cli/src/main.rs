use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wedgeheat::experiments::{
    det_estimate_ratio_scan, green_bound_report, main_estimate_ratio_scan, parse_config, sharpness_scan,
    solution_norm_check, BoundConfig, ExperimentReport,
};
use wedgeheat::suites::{kernel_suite, mc_report, proof_integrals_report, KernelSuite, McConfig};
use wedgeheat::{heat_kernel, AngularDomain, Error, KernelConfig, PolarPoint};

/// Dirichlet heat kernel on planar wedges: evaluation, identity checks and
/// weighted-estimate experiments.
///
/// Exit status: 0 all verdicts pass, 1 a verdict fails, 2 usage or config
/// error, 3 numerical failure.
#[derive(Parser, Debug)]
#[command(name = "wedgeheat", version)]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "WEDGEHEAT_JOBS", default_value_t = 0, global = true)]
    jobs: usize,
    /// Directory for report files.
    #[arg(long, default_value = "reports", global = true)]
    out: PathBuf,
    /// RNG seed; overrides the seed of a config file when given.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Kernel evaluation.
    #[command(subcommand)]
    Kernel(KernelCmd),
    /// Identity checks, bound fits and auxiliary integrals.
    #[command(subcommand)]
    Verify(VerifyCmd),
    /// Run an experiment from a JSON config.
    Experiment {
        kind: ExperimentKind,
        /// JSON config with a `schema_version` field.
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum KernelCmd {
    /// Print G(t, x, y).
    Eval {
        /// Opening angle in radians.
        #[arg(long)]
        kappa0: f64,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        x_r: f64,
        #[arg(long)]
        x_theta: f64,
        #[arg(long)]
        y_r: f64,
        #[arg(long)]
        y_theta: f64,
    },
}

#[derive(Subcommand, Debug)]
enum VerifyCmd {
    /// Kernel identity suite.
    Kernel {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        /// Opening angle in radians.
        #[arg(long, default_value_t = PI)]
        kappa0: f64,
    },
    /// Kozlov bound fit and vertex decay.
    Bound {
        /// Exponent λ; required without --config.
        #[arg(long)]
        lambda: Option<f64>,
        /// Opening angle in radians; required without --config.
        #[arg(long)]
        kappa0: Option<f64>,
        /// JSON bound config; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Sup integral I_b and the time-tail integral.
    ProofIntegrals {
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        b: f64,
        #[arg(long, default_value_t = 4.0)]
        exponent: f64,
    },
    /// Monte Carlo check of the Gaussian moment formula.
    Mc {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SuiteArg {
    Symmetry,
    Scaling,
    Ck,
    Images,
    Mass,
    Decay,
}

impl From<SuiteArg> for KernelSuite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Symmetry => KernelSuite::Symmetry,
            SuiteArg::Scaling => KernelSuite::Scaling,
            SuiteArg::Ck => KernelSuite::Ck,
            SuiteArg::Images => KernelSuite::Images,
            SuiteArg::Mass => KernelSuite::Mass,
            SuiteArg::Decay => KernelSuite::Decay,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ExperimentKind {
    Sharpness,
    StochRatio,
    DetRatio,
    SolutionNorm,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

/// `κ₀/π`, snapped to the nearest multiple of 1/8 when within 1e-8.
fn over_pi(kappa0: f64) -> f64 {
    let m = kappa0 / PI;
    let s = (m * 8.0).round() / 8.0;
    if (m - s).abs() < 1e-8 {
        s
    } else {
        m
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn finish(report: &ExperimentReport, out: &Path) -> Result<bool, Failure> {
    let (json, _) = report.write(out)?;
    let passed = report.passed();
    let summary: Vec<String> = report
        .verdicts
        .iter()
        .map(|v| format!("{}{}: {}", if v.passed { "" } else { "FAILED " }, v.criterion, v.detail))
        .collect();
    println!(
        "{} {}: {} [{}]",
        if passed { "PASS" } else { "FAIL" },
        report.kind,
        summary.join("; "),
        json.display()
    );
    Ok(passed)
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.cmd {
        Cmd::Kernel(KernelCmd::Eval { kappa0, t, x_r, x_theta, y_r, y_theta }) => {
            let domain = AngularDomain::new(kappa0)?;
            let x = PolarPoint::in_domain(&domain, x_r, x_theta)?;
            let y = PolarPoint::in_domain(&domain, y_r, y_theta)?;
            let g = heat_kernel(&KernelConfig::new(domain), t, x, y)?;
            println!("{g:.12}");
            Ok(true)
        }
        Cmd::Verify(VerifyCmd::Kernel { suite, kappa0 }) => {
            let seed = cli.seed.unwrap_or(0);
            finish(&kernel_suite(over_pi(kappa0), suite.into(), seed)?, &cli.out)
        }
        Cmd::Verify(VerifyCmd::Bound { lambda, kappa0, config }) => {
            let mut c = match &config {
                Some(p) => parse_config::<BoundConfig>(&read(p)?)?,
                None => {
                    let (Some(l), Some(k)) = (lambda, kappa0) else {
                        return Err(Failure::Usage("--lambda and --kappa0 are required without --config".into()));
                    };
                    BoundConfig::new(over_pi(k), l)
                }
            };
            if let Some(l) = lambda {
                c.lambda = l;
            }
            if let Some(k) = kappa0 {
                c.kappa0_over_pi = over_pi(k);
            }
            finish(&green_bound_report(&c)?, &cli.out)
        }
        Cmd::Verify(VerifyCmd::ProofIntegrals { b, exponent }) => {
            let r = proof_integrals_report(b, exponent)?;
            if let Some(t) = r.table("sup_integral") {
                if let Some(Some(v)) = t.column("max").and_then(|c| c.last().copied()) {
                    println!("{v:.10}");
                }
            }
            finish(&r, &cli.out)
        }
        Cmd::Verify(VerifyCmd::Mc { config }) => {
            let mut c = parse_config::<McConfig>(&read(&config)?)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            finish(&mc_report(&c)?, &cli.out)
        }
        Cmd::Experiment { kind, config } => {
            let text = read(&config)?;
            let report = match kind {
                ExperimentKind::Sharpness => sharpness_scan(&parse_config(&text)?)?,
                ExperimentKind::StochRatio => main_estimate_ratio_scan(&parse_config(&text)?)?,
                ExperimentKind::DetRatio => det_estimate_ratio_scan(&parse_config(&text)?)?,
                ExperimentKind::SolutionNorm => solution_norm_check(&parse_config(&text)?)?,
            };
            finish(&report, &cli.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
    }
}
