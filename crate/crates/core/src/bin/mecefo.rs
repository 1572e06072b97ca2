use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use mecefo::costmodel::{block_cost, BlockMode, CostInputs, SimulationConfig};
use mecefo::harness::{check_assumption, check_gradients, run_training_with, GradCheckConfig, RunConfig};
use mecefo::{Error, Result};

#[derive(Parser)]
#[command(name = "mecefo", version, about = "Fault-tolerant training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model under a failure scenario.
    Train(Common),
    /// Train with the gradient-error probe and summarize it.
    CheckAssumption(Common),
    /// Finite-difference and detached-oracle gradient checks.
    CheckGrad(Common),
    /// Per-block FLOP and activation accounting.
    Cost(Common),
    /// Cost-only throughput timeline under failures.
    Simulate(Common),
}

fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(dir: Option<&Path>, name: &str, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            fs::write(d.join(name), text)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn train(c: &Common) -> Result<()> {
    let cfg = run_config(c)?;
    let every = (cfg.iterations / 20).max(1);
    let quiet = c.quiet;
    let out = run_training_with(cfg, |r| {
        if !quiet && r.iteration % every == 0 {
            eprintln!("iter {:>6}  loss {:.4}  lr {:.2e}  affected {}", r.iteration, r.loss, r.lr, r.affected_ranks);
        }
    })?;
    if !quiet {
        eprintln!(
            "done: final loss {:.4}, eval loss {:.4}, {} events",
            out.final_loss(),
            out.eval_loss,
            out.events.len()
        );
    }
    Ok(())
}

fn probe(c: &Common) -> Result<()> {
    let cfg = run_config(c)?;
    let dir = cfg.output_dir.clone();
    let report = check_assumption(cfg)?;
    let summary = serde_json::json!({
        "probed_iterations": report.probed_iterations,
        "max_rho1": report.max_rho1,
        "mean_rho1": report.mean_rho1,
        "max_rho2": report.max_rho2,
    });
    write_json(dir.as_deref(), "assumption.json", &summary)?;
    if !c.quiet && dir.is_some() {
        eprintln!("{summary}");
    }
    Ok(())
}

fn check_grad(c: &Common) -> Result<bool> {
    let mut cfg: GradCheckConfig = load(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    let report = check_gradients(&cfg)?;
    if !c.quiet {
        for g in &report.groups {
            eprintln!(
                "{:<18} {:<12} {:>10.3e} (tol {:.0e}) {}",
                g.check,
                g.group,
                g.max_rel_err,
                g.tolerance,
                if g.passed() { "ok" } else { "FAIL" }
            );
        }
    }
    write_json(c.out.as_deref(), "gradcheck.json", &report)?;
    Ok(report.passed())
}

fn cost(c: &Common) -> Result<()> {
    let inputs: CostInputs = load(c.config.as_deref())?;
    inputs.validate()?;
    let mut rows = serde_json::Map::new();
    for (name, mode) in [
        ("standard", BlockMode::Standard),
        ("neighbor_mecefo", BlockMode::NeighborMecefo),
        ("neighbor_naive", BlockMode::NeighborNaive),
    ] {
        let b = block_cost(&inputs.model, mode, inputs.rank, inputs.tau, inputs.tokens_per_rank)?;
        rows.insert(
            name.into(),
            serde_json::json!({
                "mha": b.mha,
                "ffn": b.ffn,
                "total_flops": b.flops().total(),
                "activation_bytes": b.activation_bytes,
            }),
        );
    }
    write_json(c.out.as_deref(), "block_cost.json", &rows)
}

fn simulate(c: &Common) -> Result<()> {
    let mut cfg: SimulationConfig = load(c.config.as_deref())?;
    if let Some(seed) = c.seed {
        cfg.scenario.seed = seed;
    }
    let reports = cfg.run()?;
    for r in &reports {
        if !c.quiet {
            eprintln!(
                "{:<20} {:>12.1} tokens/s  degradation {:>6.2}%  failures {}",
                format!("{:?}", r.policy),
                r.tokens_per_s,
                r.degradation_pct,
                r.failures
            );
        }
        if let Some(dir) = &c.out {
            fs::create_dir_all(dir)?;
            let stem = serde_json::to_value(r.policy)?.as_str().unwrap_or("policy").to_string();
            r.write_csv(fs::File::create(dir.join(format!("cost_{stem}.csv")))?)?;
            r.write_json(fs::File::create(dir.join(format!("cost_{stem}.json")))?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c).map(|_| true),
        Command::CheckAssumption(c) => probe(c).map(|_| true),
        Command::CheckGrad(c) => check_grad(c),
        Command::Cost(c) => cost(c).map(|_| true),
        Command::Simulate(c) => simulate(c).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check exceeded tolerance");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
