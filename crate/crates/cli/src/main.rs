//! `smnreg` command-line tool.
//!
//! Exit status: 0 success, 1 a check or verification failed, 2 error.

mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use smnreg::diagnostics::{self, Functional};
use smnreg::ergodicity::verify::{self, Level};
use smnreg::gibbs;
use smnreg::io::{write_json, write_matrix_csv};
use smnreg::rng::{substream, SIMULATE};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "smnreg", version, about = "Gibbs samplers for multivariate regression with scale-mixture-of-normal errors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `[sampler] seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the chains and write traces, a posterior summary and the ergodicity report.
    Fit(Common),
    /// Report which ergodicity conditions hold for the configured model and data.
    Check(Common),
    /// Run the identity checks and Monte-Carlo verifiers.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
        level: LevelArg,
    },
    /// Geweke joint-distribution test of the proper sampler.
    Geweke(Common),
    /// Simulate a dataset from the generative model.
    Simulate(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

enum Status {
    Ok,
    CheckFailed,
}

struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let cfg = RunConfig::load(&c.config)?;
        let seed = c.seed.unwrap_or(cfg.sampler.seed);
        let out = cfg.output_dir(c.out.as_deref());
        Ok(Self { cfg, seed, out })
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating output directory {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn fit(ctx: &Ctx) -> Result<Status> {
    let data = ctx.cfg.dataset()?;
    let spec = ctx.cfg.spec(data.p(), data.d())?;
    spec.validate(&data)?;
    let settings = ctx.cfg.settings()?;
    let traces = gibbs::run_chains(&spec, &data, None, settings, ctx.seed, ctx.cfg.sampler.chains)?;
    let out = ctx.out_dir()?;
    for t in &traces {
        t.write_csv(out.join(format!("chain_{}.csv", t.meta.chain)), ctx.cfg.output.emit_u)?;
        t.write_meta_json(out.join(format!("chain_{}.meta.json", t.meta.chain)))?;
    }
    let summary = diagnostics::summarize_chains(&traces, &Functional::summary_set(data.p(), data.d()))?;
    write_json(out.join("summary.json"), &summary)?;
    write_text(out.join("summary.txt"), &summary.to_text())?;
    let check = report::build(&data, &spec)?;
    write_json(out.join("check.json"), &check)?;
    write_text(out.join("check.txt"), &check.to_text())?;
    print!("{}", summary.to_text());
    println!();
    print!("{}", check.to_text());
    Ok(Status::Ok)
}

fn check(ctx: &Ctx) -> Result<Status> {
    let data = ctx.cfg.dataset()?;
    let spec = ctx.cfg.spec(data.p(), data.d())?;
    let check = report::build(&data, &spec)?;
    let out = ctx.out_dir()?;
    write_json(out.join("check.json"), &check)?;
    write_text(out.join("check.txt"), &check.to_text())?;
    print!("{}", check.to_text());
    Ok(if check.guaranteed() { Status::Ok } else { Status::CheckFailed })
}

fn verify(ctx: &Ctx, level: LevelArg) -> Result<Status> {
    let data = ctx.cfg.dataset()?;
    let spec = ctx.cfg.spec(data.p(), data.d())?;
    let level = match level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    };
    let suite = verify::run_suite(&data, &spec, level, ctx.seed, &verify::default_psi)?;
    let out = ctx.out_dir()?;
    write_json(out.join("verify.json"), &suite)?;
    write_text(out.join("verify.txt"), &suite.to_text())?;
    print!("{}", suite.to_text());
    Ok(if suite.passed { Status::Ok } else { Status::CheckFailed })
}

fn geweke(ctx: &Ctx) -> Result<Status> {
    let Some(g) = &ctx.cfg.geweke else { anyhow::bail!("geweke needs a [geweke] section with n, p, d, iterations") };
    let prior = ctx.cfg.prior(g.p, g.d)?;
    let h = ctx.cfg.mixing()?;
    let rep = diagnostics::geweke_joint_test((g.n, g.p, g.d), &prior, &h, g.iterations, ctx.seed)?;
    let out = ctx.out_dir()?;
    write_json(out.join("geweke.json"), &rep)?;
    write_text(out.join("geweke.txt"), &rep.to_text())?;
    print!("{}", rep.to_text());
    let pass = rep.passes(g.z_limit);
    println!("max |z| = {:.3} ({} limit {})", rep.max_abs_z, if pass { "within" } else { "EXCEEDS" }, g.z_limit);
    Ok(if pass { Status::Ok } else { Status::CheckFailed })
}

#[derive(Serialize)]
struct Truth<'a> {
    n: usize,
    p: usize,
    d: usize,
    seed: u64,
    intercept: bool,
    beta: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    mixing: &'a smnreg::MixingDensity,
    u: Vec<f64>,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn simulate(ctx: &Ctx) -> Result<Status> {
    let Some(s) = &ctx.cfg.simulate else { anyhow::bail!("simulate needs a [simulate] section with n, beta, sigma") };
    let beta = ctx.cfg.matrix(&s.beta, "simulate beta")?;
    let sigma = ctx.cfg.matrix(&s.sigma, "simulate sigma")?;
    let h = ctx.cfg.mixing()?;
    let mut rng = substream(ctx.seed, SIMULATE);
    let (data, u) = gibbs::simulate_dataset(s.n, &beta, &sigma, &h, s.intercept, &mut rng)?;
    let out = ctx.out_dir()?;
    let header = |prefix: &str, k: usize| (1..=k).map(|j| format!("{prefix}{j}")).collect::<Vec<_>>();
    write_matrix_csv(out.join("X.csv"), data.x(), Some(&header("x", data.p())))?;
    write_matrix_csv(out.join("Y.csv"), data.y(), Some(&header("y", data.d())))?;
    let truth = Truth {
        n: data.n(),
        p: data.p(),
        d: data.d(),
        seed: ctx.seed,
        intercept: s.intercept,
        beta: rows(&beta),
        sigma: rows(&sigma),
        mixing: &h,
        u: u.iter().copied().collect(),
    };
    write_json(out.join("truth.json"), &truth)?;
    println!("wrote X.csv, Y.csv and truth.json to {}", out.display());
    Ok(Status::Ok)
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Fit(c) => fit(&Ctx::new(&c)?),
        Command::Check(c) => check(&Ctx::new(&c)?),
        Command::Verify { common, level } => verify(&Ctx::new(&common)?, level),
        Command::Geweke(c) => geweke(&Ctx::new(&c)?),
        Command::Simulate(c) => simulate(&Ctx::new(&c)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

