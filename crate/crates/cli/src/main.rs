use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use peel::checkpoint::{load_policy, save_policy};
use peel::config::{Method, RunConfig};
use peel::harness::run::{
    base_success, collect_suite, create_run_dir, lifelong_suite, pretrain_base, pretrain_suite, report, run_lifelong,
    write_inputs,
};
use peel::world::{write_demos, write_suite};

#[derive(Parser)]
#[command(name = "peel", version, about = "Lifelong imitation learning with a growing expert library")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the lifelong suite and its demonstrations.
    GenSuite {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a base policy on the mixed pretraining suite.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Report base success on the pretraining and lifelong suites.
        #[arg(long)]
        eval: bool,
    },
    /// Run one method over the lifelong suite.
    Lifelong {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pretrained base checkpoint; pretrains from scratch when absent.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Run directory, which must not exist yet.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate metrics.csv files of finished runs.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run the gradient, synthesis and metric self-checks.
    Verify,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn gen_suite(config: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let tasks = lifelong_suite(config)?;
    write_suite(&out.join("suite.json"), &tasks)?;
    write_suite(&out.join("pretrain_suite.json"), &pretrain_suite(config, &tasks)?)?;
    let demos = collect_suite(&tasks, config.demos_per_task, config.suite_seed, config.policy.grid)?;
    for (k, d) in demos.iter().enumerate() {
        write_demos(&out.join(format!("task{}.bin", k + 1)), &d.demos)?;
        println!("task {} {}: {} demos, {} steps", k + 1, d.task.name, d.demos.len(), d.steps());
    }
    Ok(())
}

fn pretrain(config: &RunConfig, out: &Path, eval: bool) -> Result<()> {
    let tasks = lifelong_suite(config)?;
    let (policy, store, demos) = pretrain_base(config, &tasks)?;
    save_policy(out, &policy, &store, config.suite_seed)?;
    println!("wrote {}", out.display());
    if eval {
        let n = config.pretrain.eval_episodes;
        let pre: Vec<_> = demos.iter().map(|d| d.task.clone()).collect();
        let rates = base_success(&policy, &store, &pre, n, config.suite_seed)?;
        println!("pretrain suite success {:.3}", rates.iter().sum::<f64>() / rates.len() as f64);
        let zero = base_success(&policy, &store, &tasks, n, config.suite_seed)?;
        println!("lifelong suite zero-shot {zero:?}");
    }
    Ok(())
}

fn lifelong(config: RunConfig, base: Option<&Path>, out: &Path) -> Result<()> {
    config.validate()?;
    let tasks = lifelong_suite(&config)?;
    create_run_dir(out)?;
    let suite = collect_suite(&tasks, config.demos_per_task, config.suite_seed, config.policy.grid)?;
    write_inputs(out, &config, &suite)?;
    let (policy, store) = match base {
        Some(p) => {
            let (policy, store, _) = load_policy(p)?;
            (policy, store)
        }
        None => {
            let (policy, store, _) = pretrain_base(&config, &tasks)?;
            (policy, store)
        }
    };
    let result = run_lifelong(config, (policy, store), &suite, Some(out))?;
    let m = result.metrics_row();
    println!(
        "{} seed {}: FWT {:.3} NBT {:.3} AUC {:.3}, {} trainable params, {} CR bytes",
        m.method, m.seed, m.fwt, m.nbt, m.auc, m.trainable_params, m.cr_bytes
    );
    Ok(())
}

fn verify() -> Result<()> {
    let checks = peel::verify::run_all();
    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSuite { config, out } => gen_suite(&load_config(config.as_deref())?, &out),
        Command::Pretrain { config, out, eval } => pretrain(&load_config(config.as_deref())?, &out, eval),
        Command::Lifelong {
            config,
            method,
            seed,
            base,
            out,
        } => {
            let mut c = load_config(config.as_deref())?;
            if let Some(m) = method {
                c.method = Method::parse(&m)?;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            lifelong(c, base.as_deref(), &out)
        }
        Command::Report { out, runs } => {
            let rows = report(&runs, &out)?;
            for r in rows {
                println!(
                    "{} {} ({} runs): FWT {:.3}±{:.3} NBT {:.3}±{:.3} AUC {:.3}±{:.3}",
                    r.method, r.suite, r.runs, r.fwt_mean, r.fwt_std, r.nbt_mean, r.nbt_std, r.auc_mean, r.auc_std
                );
            }
            Ok(())
        }
        Command::Verify => verify(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
