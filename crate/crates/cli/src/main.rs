mod config;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ivpretest::analysis::{analyze, FirstStage, TestChoice};
use ivpretest::distributions::ks_two_sample;
use ivpretest::inference::Method;
use ivpretest::io::ingest;
use ivpretest::model::estimates_from_moments;
use ivpretest::pretest::{default_randomization_scale, run_pretest, RandomizationLaw};
use ivpretest::report::write_curves_csv;
use ivpretest::rng::{child_seed, tag};
use ivpretest::sampler::{build_law_tsls, gibbs_sample, tsls_conditional_pvalue, RandomizationDensity, SamplerConfig};
use ivpretest::sim::{coverage_experiment, generate_rep, rejection_oracle, write_coverage_csv, write_pvalue_cdf_csv, Branch, DGPConfig, OracleNeighborhood};
use ivpretest::Moments;

use config::FileConfig;

/// Inference on the treatment effect of a linear IV model that accounts for
/// an instrument-strength pre-test.
#[derive(Parser)]
#[command(name = "ivpretest", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-test a dataset and report naive and conditional inference as JSON.
    Analyze(AnalyzeArgs),
    /// Run the randomized F pre-test only.
    Pretest(PretestArgs),
    /// Coverage and p-value uniformity experiments on simulated data.
    Simulate(SimulateArgs),
    /// Compare sampler draws against brute-force rejection sampling.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pre-test threshold on the F statistic.
    #[arg(long)]
    c0: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Post-burn-in sampler draws, pooled over chains.
    #[arg(long)]
    samples: Option<usize>,
    /// Burn-in iterations per chain.
    #[arg(long)]
    burn_in: Option<usize>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn sampler(&self, base: SamplerConfig) -> SamplerConfig {
        SamplerConfig {
            n_samples: self.samples.unwrap_or(base.n_samples),
            burn_in: self.burn_in.unwrap_or(base.burn_in),
            ..base
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TestArg {
    Auto,
    Tsls,
    Ar,
    Clr,
}

impl From<TestArg> for TestChoice {
    fn from(t: TestArg) -> Self {
        match t {
            TestArg::Auto => TestChoice::Auto,
            TestArg::Tsls => TestChoice::Tsls,
            TestArg::Ar => TestChoice::Ar,
            TestArg::Clr => TestChoice::Clr,
        }
    }
}

#[derive(Args)]
struct Columns {
    /// Outcome column.
    #[arg(long)]
    outcome: Option<String>,
    /// Treatment column.
    #[arg(long)]
    treatment: Option<String>,
    /// Comma-separated instrument columns; default is every unassigned column.
    #[arg(long, value_delimiter = ',')]
    instruments: Option<Vec<String>>,
    /// Comma-separated exogenous covariates, projected out before analysis.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// CSV file with a header row.
    data: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    columns: Columns,
    #[arg(long, value_enum)]
    test: Option<TestArg>,
    /// Null value at which p-values are reported.
    #[arg(long)]
    beta0: Option<f64>,
    /// Report a forced test naively when its conditional law is undefined.
    #[arg(long)]
    allow_branch_override: bool,
    /// Select instruments with the randomized lasso instead of the F-test.
    #[arg(long)]
    lasso: bool,
    /// Write the naive and conditional p-value curves as CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Write the sampler draws at `beta0` as CSV (TSLS branch only).
    #[arg(long)]
    draws: Option<PathBuf>,
}

#[derive(Args)]
struct PretestArgs {
    data: PathBuf,
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    columns: Columns,
    /// Standard deviation of the randomization; the default is data-driven.
    #[arg(long)]
    scale: Option<f64>,
    /// Plain F-test, no randomization.
    #[arg(long)]
    no_randomization: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    TslsPass,
    ClrFail,
    LassoSelected,
}

impl From<BranchArg> for Branch {
    fn from(b: BranchArg) -> Self {
        match b {
            BranchArg::TslsPass => Branch::TslsPass,
            BranchArg::ClrFail => Branch::ClrFail,
            BranchArg::LassoSelected => Branch::LassoSelected,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    branch: Option<BranchArg>,
    /// Replications per grid cell.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    /// Comma-separated instrument strengths.
    #[arg(long, value_delimiter = ',')]
    r: Option<Vec<f64>>,
    /// Comma-separated endogeneity levels.
    #[arg(long, value_delimiter = ',')]
    sigma12: Option<Vec<f64>>,
    /// Directory receiving one conditional p-value CDF file per cell.
    #[arg(long)]
    pvalues: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    /// Simulated datasets for the rejection sampler.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    r: Option<f64>,
    #[arg(long)]
    sigma12: Option<f64>,
    /// Write the retained oracle statistics as CSV.
    #[arg(long)]
    dump: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn apply_columns(map: &mut ivpretest::io::ColumnMap, c: &Columns) {
    if let Some(v) = &c.outcome {
        map.outcome = v.clone();
    }
    if let Some(v) = &c.treatment {
        map.treatment = v.clone();
    }
    if let Some(v) = &c.instruments {
        map.instruments = v.clone();
    }
    if let Some(v) = &c.covariates {
        map.covariates = v.clone();
    }
}

fn run_analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut cfg = file.analysis;
    let c = &args.common;
    cfg.c0 = c.c0.unwrap_or(cfg.c0);
    cfg.alpha = c.alpha.unwrap_or(cfg.alpha);
    cfg.seed = c.seed.unwrap_or(cfg.seed);
    cfg.sampler = c.sampler(cfg.sampler);
    cfg.beta0 = args.beta0.unwrap_or(cfg.beta0);
    if let Some(t) = args.test {
        cfg.test = t.into();
    }
    cfg.allow_branch_override |= args.allow_branch_override;
    if args.lasso {
        cfg.first_stage = FirstStage::Lasso;
    }
    apply_columns(&mut cfg.columns, &args.columns);

    let data = ingest(&args.data, &cfg.columns).with_context(|| format!("reading {}", args.data.display()))?;
    let report = analyze(&data, &cfg)?;
    if let Some(path) = &args.curves {
        let inf = &report.inference;
        write_curves_csv(&inf.naive_curve, &inf.conditional_curve, output(Some(path))?)?;
    }
    if let Some(path) = &args.draws {
        if report.branch != Method::TslsConditional {
            bail!("--draws needs the conditional TSLS branch; this analysis took {:?}", report.branch);
        }
        let m = Moments::from_data(&data)?;
        let sampler = SamplerConfig { seed: child_seed(cfg.seed, &[tag::SAMPLER]), ..cfg.sampler };
        let res = tsls_conditional_pvalue(&m, cfg.beta0, &report.pretest, None, &sampler)?;
        res.draws.write_csv(output(Some(path))?)?;
    }
    let mut out = output(c.out.as_deref())?;
    writeln!(out, "{}", report.to_json()?)?;
    Ok(())
}

fn run_pretest_cmd(args: PretestArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut cfg = file.analysis;
    cfg.c0 = args.common.c0.unwrap_or(cfg.c0);
    cfg.seed = args.common.seed.unwrap_or(cfg.seed);
    apply_columns(&mut cfg.columns, &args.columns);
    let data = ingest(&args.data, &cfg.columns).with_context(|| format!("reading {}", args.data.display()))?;
    let m = Moments::from_data(&data)?;
    let scale = args.scale.or(cfg.randomization_scale).unwrap_or_else(|| default_randomization_scale(&m));
    let law = RandomizationLaw::new(scale, cfg.seed)?;
    let pre = run_pretest(&m, cfg.c0, (!args.no_randomization).then_some(&law))?;
    let doc = serde_json::json!({
        "schema_version": ivpretest::report::SCHEMA_VERSION,
        "n": m.n,
        "p": m.p,
        "c0": cfg.c0,
        "randomized": !args.no_randomization,
        "pretest": pre,
    });
    let mut out = output(args.common.out.as_deref())?;
    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut sim = file.simulation;
    let c = &args.common;
    sim.c0 = c.c0.unwrap_or(sim.c0);
    sim.alpha = c.alpha.unwrap_or(sim.alpha);
    sim.grid.seed = c.seed.unwrap_or(sim.grid.seed);
    sim.options.sampler = c.sampler(sim.options.sampler);
    sim.reps = args.reps.unwrap_or(sim.reps);
    sim.grid.n = args.n.unwrap_or(sim.grid.n);
    sim.grid.p = args.p.unwrap_or(sim.grid.p);
    if let Some(b) = args.branch {
        sim.branch = b.into();
    }
    if let Some(r) = args.r {
        sim.grid.r_values = r;
    }
    if let Some(s) = args.sigma12 {
        sim.grid.sigma12_values = s;
    }

    let cells = coverage_experiment(&sim.grid, sim.c0, sim.alpha, sim.reps, sim.branch, &sim.options)?;
    for cell in &cells {
        let res = &cell.result;
        eprintln!(
            "r={} sigma12={}: {} of {} on branch, conditional coverage {:.3}, naive {:.3}, KS p-value {:.4}",
            cell.r, cell.sigma12, res.branch_count, res.reps, res.conditional_coverage, res.naive_coverage, res.ks_pvalue
        );
    }
    if let Some(dir) = &args.pvalues {
        std::fs::create_dir_all(dir)?;
        for cell in &cells {
            let path = dir.join(format!("pvalues_r{}_sigma12_{}.csv", cell.r, cell.sigma12));
            write_pvalue_cdf_csv(&cell.result.pvalue_samples, output(Some(&path))?)?;
        }
    }
    write_coverage_csv(&cells, output(c.out.as_deref())?)?;
    Ok(())
}

fn run_oracle(args: OracleArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut o = file.oracle;
    let c = &args.common;
    o.c0 = c.c0.unwrap_or(o.c0);
    o.seed = c.seed.unwrap_or(o.seed);
    o.samples = c.samples.unwrap_or(o.samples);
    o.reps = args.reps.unwrap_or(o.reps);
    o.r = args.r.unwrap_or(o.r);
    o.sigma12 = args.sigma12.unwrap_or(o.sigma12);

    let design = DGPConfig::equal_strength(o.n, o.p, o.beta0, o.r, o.sigma12, child_seed(o.seed, &[tag::ORACLE]));
    let reference = DGPConfig { seed: child_seed(o.seed, &[tag::DGP]), ..design.clone() };
    let mut found = None;
    for rep in 0..10_000u64 {
        let m = Moments::from_data(&generate_rep(&reference, rep)?)?;
        let scale = default_randomization_scale(&m);
        let pre = run_pretest(&m, o.c0, Some(&RandomizationLaw::new(scale, child_seed(o.seed, &[tag::PRETEST, rep]))?))?;
        if pre.passed {
            found = Some((m, pre, scale));
            break;
        }
    }
    let Some((m, pre, scale)) = found else {
        bail!("no replication of the design passed the pre-test at C0 = {}", o.c0)
    };
    let est = estimates_from_moments(&m, o.beta0)?;
    let law = build_law_tsls(&m, o.beta0, &pre, &est, RandomizationDensity::Gaussian { scale })?;
    let sampler = c.sampler(SamplerConfig { n_samples: o.samples, seed: child_seed(o.seed, &[tag::SAMPLER]), ..SamplerConfig::default() });
    let draws = gibbs_sample(&law, &sampler, law.t_obs, law.d_obs)?;
    let nb = OracleNeighborhood::around(&law, o.min_cosine, o.o_radius, o.margin_tol, o.slope_tol);
    let oracle_law = RandomizationLaw::new(scale, o.seed)?;
    let sample = rejection_oracle(&design, o.beta0, o.c0, &oracle_law, o.reps, Some(&nb), o.min_retained)?;
    if let Some(path) = &args.dump {
        let mut w = csv::Writer::from_writer(output(Some(path))?);
        w.write_record(["t"])?;
        for t in &sample.t {
            w.write_record([t.to_string()])?;
        }
        w.flush()?;
    }
    let doc = serde_json::json!({
        "config": o,
        "randomization_scale": scale,
        "t_obs": law.t_obs,
        "tried": sample.tried,
        "passed": sample.passed,
        "retained": sample.t.len(),
        "ks_distance": ks_two_sample(&draws.t, &sample.t),
    });
    let mut out = output(c.out.as_deref())?;
    writeln!(out, "{}", serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let res = match Cli::parse().command {
        Command::Analyze(a) => run_analyze(a),
        Command::Pretest(a) => run_pretest_cmd(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Oracle(a) => run_oracle(a),
    };
    // a closed downstream pipe is not a failure
    match res {
        Err(e) if e.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe) => Ok(()),
        other => other,
    }
}
