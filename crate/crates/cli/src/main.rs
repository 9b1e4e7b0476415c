//! `cmflow`: copula-flow benchmarks, marginal training, sampling, tail-bound
//! verification and SVG rendering.
//!
//! Exit codes: 0 success, 1 run completed but its criteria were not met,
//! 2 invalid usage or configuration, 3 numerical failure.
//! `CMFLOW_THREADS` caps the number of worker threads.

mod benchmark;
mod error;
mod model;
mod output;
mod svg;
mod tail;
mod train_marginal;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use cmflow::metrics::Thresholds;
use cmflow::ref_copulas::Family;

use crate::error::CliError;
use crate::output::{read_text, OutDir, Timing};

#[derive(Parser)]
#[command(name = "cmflow", version, about = "Copula and marginal flows with exact tails")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a copula flow on a reference copula and report JSD, T, M and NLL.
    Benchmark(BenchmarkArgs),
    /// Check tail and moment bounds on random Lipschitz networks.
    TailVerify(TailArgs),
    /// Fit a univariate marginal flow to one column of data.
    TrainMarginal(MarginalArgs),
    /// Draw samples from a saved model.
    Sample(SampleArgs),
    /// Render a grid CSV as a heatmap or a curve CSV as a line plot.
    Render(RenderArgs),
}

#[derive(clap::Args)]
struct BenchmarkArgs {
    #[arg(long, value_parser = parse_family)]
    copula: Family,
    /// Copula parameter; not needed for the independence copula.
    #[arg(long)]
    theta: Option<f64>,
    /// Pin the second coordinate to the identity.
    #[arg(long)]
    constrained: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training batch size.
    #[arg(long, default_value_t = 3000)]
    batch: usize,
    /// Samples for the uniformity metrics.
    #[arg(long, default_value_t = 500_000)]
    eval_batch: usize,
    /// Held-out target samples for the NLL.
    #[arg(long, default_value_t = cmflow::metrics::DEFAULT_NLL_SAMPLES)]
    nll_samples: usize,
    #[arg(long, default_value_t = 300)]
    mesh: usize,
    #[arg(long, default_value_t = 25)]
    bins: usize,
    #[arg(long, default_value_t = 50_000)]
    max_steps: usize,
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = Thresholds::default().jsd)]
    jsd_threshold: f64,
    #[arg(long, default_value_t = Thresholds::default().t)]
    t_threshold: f64,
    #[arg(long, default_value_t = Thresholds::default().m)]
    m_threshold: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Suppress per-evaluation progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(clap::Args)]
struct TailArgs {
    #[arg(long, value_enum, default_value_t = tail::PriorKind::Gaussian)]
    prior: tail::PriorKind,
    #[arg(long, default_value_t = 2)]
    d0: usize,
    /// Moment orders to check.
    #[arg(long, value_delimiter = ',', default_values_t = [1u32, 2, 4])]
    p: Vec<u32>,
    /// Samples per survival curve.
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long, default_value_t = 200_000)]
    moment_n: usize,
    #[arg(long, default_value_t = 20)]
    nets: usize,
    #[arg(long, default_value_t = 41)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct MarginalArgs {
    /// One float per line.
    #[arg(long)]
    data: PathBuf,
    /// Tail belief JSON.
    #[arg(long)]
    belief: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 500)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving `samples.csv`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Style {
    /// Heatmap for `x,y,value` files, log-scale curves otherwise.
    Auto,
    Heatmap,
    /// Line plot with a logarithmic y axis.
    Survival,
    /// Line plot with a linear y axis.
    Line,
}

#[derive(clap::Args)]
struct RenderArgs {
    input: PathBuf,
    /// SVG file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Style::Auto)]
    style: Style,
    #[arg(long, default_value = "")]
    title: String,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse::<Family>().map_err(|e| e.to_string())
}

fn write_timing(out: &mut OutDir, command: &'static str, start: Instant) -> Result<(), CliError> {
    out.write_json(
        "timing.json",
        &Timing {
            command,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    )
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<bool, CliError> {
    let start = Instant::now();
    let theta = match (a.theta, a.copula) {
        (Some(t), _) => t,
        (None, Family::Independence) => 0.0,
        (None, f) => return Err(CliError::Usage(format!("--theta is required for {f}"))),
    };
    let cfg = benchmark::RunConfig {
        copula: a.copula,
        theta,
        constrained: a.constrained,
        seed: a.seed,
        batch: a.batch,
        eval_batch: a.eval_batch,
        nll_samples: a.nll_samples,
        mesh: a.mesh,
        bins: a.bins,
        max_steps: a.max_steps,
        eval_every: a.eval_every,
        lr: a.lr,
        thresholds: Thresholds {
            jsd: a.jsd_threshold,
            t: a.t_threshold,
            m: a.m_threshold,
        },
    };
    cfg.validate()?;
    let mut out = OutDir::create(&a.out)?;
    let quiet = a.quiet;
    let report = benchmark::run(&cfg, &mut out, |h| {
        if quiet {
            return;
        }
        match &h.report {
            Some(r) => eprintln!(
                "step {:>6}  train nll {:.4}  jsd {:.3e}  T {:.2e}/{:.2e}  M {:.2e}/{:.2e}  nll {:.4}",
                h.step, h.train_nll, r.jsd, r.t[0], r.t[1], r.m[0], r.m[1], r.nll
            ),
            None => eprintln!("step {:>6}  train nll {:.4}", h.step, h.train_nll),
        }
    })?;
    out.write_json("report.json", &report)?;
    write_timing(&mut out, "benchmark", start)?;
    let m = &report.metrics;
    println!(
        "{} theta={} steps={} jsd={:.3e} T=({:.3e}, {:.3e}) M=({:.3e}, {:.3e}) nll={:.4} thresholds_met={}",
        cfg.copula, cfg.theta, report.steps, m.jsd, m.t[0], m.t[1], m.m[0], m.m[1], m.nll, report.thresholds_met
    );
    Ok(report.thresholds_met)
}

fn cmd_tail(a: TailArgs) -> Result<bool, CliError> {
    let start = Instant::now();
    let cfg = tail::TailConfig {
        prior: a.prior,
        d0: a.d0,
        moments: a.p,
        samples: a.n,
        moment_samples: a.moment_n,
        nets: a.nets,
        grid_points: a.points,
        seed: a.seed,
        ..tail::TailConfig::default()
    };
    let mut out = OutDir::create(&a.out)?;
    let report = tail::run(&cfg, &mut out)?;
    out.write_json("tail_report.json", &report)?;
    write_timing(&mut out, "tail-verify", start)?;
    println!(
        "violations={} moment_failures={} premise_violations={} passed={}",
        report.violations, report.moment_failures, report.premise_violations, report.passed
    );
    Ok(report.passed)
}

fn cmd_train_marginal(a: MarginalArgs) -> Result<bool, CliError> {
    let start = Instant::now();
    let data = train_marginal::read_column(&a.data)?;
    let belief = train_marginal::read_belief(&a.belief)?;
    let cfg = train_marginal::MarginalRunConfig {
        data: a.data,
        belief,
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        seed: a.seed,
    };
    let mut out = OutDir::create(&a.out)?;
    let report = train_marginal::run(&cfg, &data, &mut out)?;
    out.write_json("train_report.json", &report)?;
    write_timing(&mut out, "train-marginal", start)?;
    println!("rows={} final_nll={:.6}", report.rows, report.final_nll);
    Ok(true)
}

fn cmd_sample(a: SampleArgs) -> Result<bool, CliError> {
    let model = model::ModelFile::load(&a.model)?;
    let csv = model.sample_csv(a.n, a.seed)?;
    let mut out = OutDir::create(&a.out)?;
    out.write("samples.csv", csv)?;
    Ok(true)
}

fn cmd_render(a: RenderArgs) -> Result<bool, CliError> {
    let text = read_text(&a.input)?;
    let heat = || -> Result<String, CliError> { Ok(svg::render_heatmap(&svg::heatmap_from_csv(&text)?, &a.title)) };
    let curve = |log| -> Result<String, CliError> { Ok(svg::render_curves(&svg::curves_from_csv(&text)?, &a.title, log)) };
    let doc = match a.style {
        Style::Auto if svg::is_grid_csv(&text) => heat()?,
        Style::Auto | Style::Survival => curve(true)?,
        Style::Heatmap => heat()?,
        Style::Line => curve(false)?,
    };
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = a
        .out
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| CliError::usage("--out must name a file"))?;
    OutDir::create(dir)?.write(name, doc)?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::TailVerify(a) => cmd_tail(a),
        Command::TrainMarginal(a) => cmd_train_marginal(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Render(a) => cmd_render(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
