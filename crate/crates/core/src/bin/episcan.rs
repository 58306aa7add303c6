//! Command-line front end: `detect`, `simulate`, `quantiles`, `experiment`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use episcan::bridge::{self, QuantileEntry, QuantileTable, TableMeta};
use episcan::experiment::{run_experiment, ExperimentConfig};
use episcan::io;
use episcan::scan::{self, ScanConfig};
use episcan::simulate::{self, EpidemicDesign, SeedSpec, DEFAULT_BURNIN};
use episcan::{Error, Family, ModelSpec, Noise, Result, Theta};

#[derive(Parser)]
#[command(name = "episcan", version, about = "Epidemic change-point test for count time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseArg {
    Poisson,
    Nb,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a count series for an epidemic change.
    Detect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "inarch1")]
        model: Family,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Head/tail window of the covariance estimate [default: ⌊(log n)^2.5⌋].
        #[arg(long)]
        un: Option<usize>,
        /// Minimum segment length [default: ⌊(log n)²⌋].
        #[arg(long)]
        vn: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Write the `(k1, k2, Q)` surface as CSV.
        #[arg(long)]
        surface: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Critical-value table (JSON) replacing the published one.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Simulate a null or epidemic trajectory.
    Simulate {
        #[arg(long, default_value = "ingarch11")]
        model: Family,
        #[arg(long, value_enum, default_value = "poisson")]
        noise: NoiseArg,
        /// NB dispersion (number of successes).
        #[arg(long, default_value_t = 5)]
        r: u32,
        #[arg(long)]
        theta: Theta,
        #[arg(long)]
        theta1: Option<Theta>,
        #[arg(long, default_value_t = 0.3)]
        tau1: f64,
        #[arg(long, default_value_t = 0.7)]
        tau2: f64,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_BURNIN)]
        burnin: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        stream: u64,
        /// CSV output; the design is echoed to `<out>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo critical values of the limiting distribution.
    Quantiles {
        #[arg(long, value_delimiter = ',', required = true)]
        d: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0.05")]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = 5000)]
        reps: usize,
        #[arg(long, default_value_t = 1000)]
        grid: usize,
        #[arg(long, default_value_t = 20210101)]
        seed: u64,
        /// Table file reused for present entries and extended with new ones.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Size/power experiment from a JSON configuration.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

#[derive(Serialize)]
struct SimulationSidecar {
    family: Family,
    noise: Noise,
    theta0: Theta,
    theta1: Option<Theta>,
    tau1: Option<f64>,
    tau2: Option<f64>,
    breaks: Option<(usize, usize)>,
    n: usize,
    burnin: usize,
    seed: SeedSpec,
}

#[derive(Serialize)]
struct QuantileLine {
    d: usize,
    alpha: f64,
    c: f64,
    /// Bootstrap standard error; absent for entries read from the cache.
    se: Option<f64>,
    cached: bool,
}

fn load_table(path: Option<&Path>) -> Result<QuantileTable> {
    match path {
        Some(p) => QuantileTable::load(p),
        None => Ok(QuantileTable::published()),
    }
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn detect(
    input: &Path,
    model: Family,
    alpha: f64,
    un: Option<usize>,
    vn: Option<usize>,
    stride: Option<usize>,
    surface: Option<&Path>,
    report: Option<&Path>,
    table: Option<&Path>,
) -> Result<()> {
    let series = io::ingest_csv_path(input)?;
    let spec = ModelSpec::poisson(model);
    let mut config = ScanConfig::detect(series.len(), alpha);
    if let Some(u) = un {
        config.u_n = u;
    }
    if let Some(v) = vn {
        config.v_n = v;
    }
    if let Some(s) = stride {
        config.stride = s;
    }
    let table = load_table(table)?;
    let (rep, result) = io::run_detect(&series, &spec, &config, &table)?;
    if let Some(path) = surface {
        scan::write_surface_csv(BufWriter::new(File::create(path)?), &result.surface)?;
    }
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    write_json(report, &rep)
}

#[allow(clippy::too_many_arguments)]
fn simulate_cmd(
    model: Family,
    noise: NoiseArg,
    r: u32,
    theta: Theta,
    theta1: Option<Theta>,
    tau1: f64,
    tau2: f64,
    n: usize,
    burnin: usize,
    seed: SeedSpec,
    out: &Path,
) -> Result<()> {
    let noise = match noise {
        NoiseArg::Poisson => Noise::Poisson,
        NoiseArg::Nb => Noise::NegBinomial { r },
    };
    let spec = ModelSpec::new(model, noise);
    spec.validate()?;
    let (series, breaks) = match &theta1 {
        None => (simulate::simulate_null(&spec, &theta, n, burnin, seed)?, None),
        Some(t1) => {
            let design = EpidemicDesign {
                theta0: theta.clone(),
                theta1: t1.clone(),
                tau1,
                tau2,
            };
            let e = simulate::simulate_epidemic(&spec, &design, n, burnin, seed)?;
            (e.series, Some(e.breaks))
        }
    };
    io::write_series_csv(BufWriter::new(File::create(out)?), &series)?;
    let epidemic = theta1.is_some();
    let sidecar = SimulationSidecar {
        family: model,
        noise,
        theta0: theta,
        theta1,
        tau1: epidemic.then_some(tau1),
        tau2: epidemic.then_some(tau2),
        breaks,
        n,
        burnin,
        seed,
    };
    let mut side = out.as_os_str().to_owned();
    side.push(".json");
    write_json(Some(Path::new(&side)), &sidecar)
}

fn quantiles(
    dims: &[usize],
    alphas: &[f64],
    params: bridge::BuildParams,
    cache: Option<&Path>,
) -> Result<()> {
    let mut table = match cache {
        Some(p) if p.exists() => {
            let t = QuantileTable::load(p)?;
            let same = t.meta.reps == params.reps && t.meta.grid == params.grid && t.meta.seed == Some(params.seed);
            if !same {
                return Err(Error::InvalidConfig(format!(
                    "cache {} was built with reps = {}, grid = {}, seed = {:?}",
                    p.display(),
                    t.meta.reps,
                    t.meta.grid,
                    t.meta.seed
                )));
            }
            t
        }
        _ => QuantileTable {
            meta: TableMeta {
                reps: params.reps,
                grid: params.grid,
                seed: Some(params.seed),
                source: None,
            },
            entries: Vec::new(),
        },
    };
    let mut lines = Vec::new();
    for &d in dims {
        let missing: Vec<f64> = alphas.iter().copied().filter(|&a| table.get(d, a).is_none()).collect();
        for &a in alphas {
            if let Some(c) = table.get(d, a) {
                lines.push(QuantileLine { d, alpha: a, c, se: None, cached: true });
            }
        }
        if missing.is_empty() {
            continue;
        }
        params.validate(&[d], &missing)?;
        let samples = bridge::sup_samples(d, params.reps, params.grid, params.seed);
        for a in missing {
            let c = bridge::empirical_quantile(&samples, a);
            let se = bridge::bootstrap_se(&samples, a, 500, params.seed);
            table.insert(QuantileEntry { d, alpha: a, c });
            lines.push(QuantileLine { d, alpha: a, c, se: Some(se), cached: false });
        }
    }
    if let Some(p) = cache {
        table.save(p)?;
    }
    write_json(None, &lines)
}

fn experiment(config: &Path, out: &Path, table: Option<&Path>) -> Result<()> {
    let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(config)?)?;
    let table = load_table(table)?;
    let result = run_experiment(&cfg, &table)?;
    write_json(Some(out), &result)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "frequency {:.3} ({} rejections in {} completed replications, {} failed)",
        result.frequency, result.rejections, result.completed, result.failed
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Detect { input, model, alpha, un, vn, stride, surface, report, table } => detect(
            &input,
            model,
            alpha,
            un,
            vn,
            stride,
            surface.as_deref(),
            report.as_deref(),
            table.as_deref(),
        ),
        Command::Simulate { model, noise, r, theta, theta1, tau1, tau2, n, burnin, seed, stream, out } => {
            simulate_cmd(model, noise, r, theta, theta1, tau1, tau2, n, burnin, SeedSpec::new(seed, stream), &out)
        }
        Command::Quantiles { d, alpha, reps, grid, seed, cache } => {
            quantiles(&d, &alpha, bridge::BuildParams { reps, grid, seed }, cache.as_deref())
        }
        Command::Experiment { config, out, table } => experiment(&config, &out, table.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let report = ErrorReport {
                error: e.kind(),
                message: e.to_string(),
                exit_code: code,
            };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(code as u8)
        }
    }
}
