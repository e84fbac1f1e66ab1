use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nettailor::experiment::{Experiment, ExperimentConfig, ReportRow, REPORT_CSV_HEADER};
use nettailor::verify::{run_verify, VerifyOptions};

#[derive(Parser, Debug)]
#[command(
    name = "nettailor",
    version,
    about = "Tailor a frozen backbone to target tasks and prune it"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// fp64 everywhere and a single thread, for bit-reproducible runs.
    #[arg(long, global = true)]
    strict_fp: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective config as JSON.
    Config,
    /// Render or ingest the source and target datasets.
    GenData,
    /// Train the backbone on the source task.
    Pretrain,
    /// Fine-tune a teacher per target task.
    Teach(TaskArg),
    /// Train gates and proxies against the teacher.
    Tailor(TaskArg),
    /// Remove `n` pre-trained blocks and fine-tune.
    Prune {
        #[command(flatten)]
        task: TaskArg,
        #[arg(long)]
        n: usize,
    },
    /// Prune for every configured `n` and select the leanest accurate model.
    Sweep(TaskArg),
    /// Summarize finished sweeps.
    Report,
    /// Every phase in order.
    Run,
    /// Fast self-checks; exits non-zero on any failure.
    Verify {
        /// Injects a sign error into the complexity group.
        #[arg(long, hide = true)]
        inject_sign_error: bool,
    },
}

#[derive(Args, Debug)]
struct TaskArg {
    /// Target task name; all targets when omitted.
    #[arg(long)]
    task: Option<String>,
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    if g.strict_fp {
        cfg.force_fp64();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn tasks(exp: &Experiment, arg: &TaskArg) -> Vec<String> {
    match &arg.task {
        Some(t) => vec![t.clone()],
        None => exp.cfg.targets.iter().map(|t| t.name.clone()).collect(),
    }
}

fn print_report(rows: &[ReportRow]) {
    println!("{REPORT_CSV_HEADER}");
    for r in rows {
        println!("{}", r.csv_row());
    }
}

fn run(cli: Cli) -> Result<bool> {
    let threads = if cli.global.strict_fp {
        Some(1)
    } else {
        cli.global.threads
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    if let Command::Verify { inject_sign_error } = cli.command {
        let opts = VerifyOptions {
            flip_output_sign: inject_sign_error,
            seed: cli.global.seed.unwrap_or(0),
            ..VerifyOptions::default()
        };
        let mut ok = true;
        for group in run_verify(&opts) {
            let status = if group.passed() { "PASS" } else { "FAIL" };
            println!(
                "{status} {} ({} checks, {:.1}s)",
                group.name, group.checks, group.seconds
            );
            for note in &group.notes {
                println!("    {note}");
            }
            for f in group.failures.iter().take(10) {
                println!("    failure: {f}");
            }
            ok &= group.passed();
        }
        return Ok(ok);
    }

    let exp = Experiment::new(load_config(&cli.global)?)?;
    match &cli.command {
        Command::Config => println!("{}", exp.cfg.to_json()?),
        Command::GenData => {
            for m in exp.gen_data()? {
                println!(
                    "{}: {} classes, {} train, {} test",
                    m.provenance, m.num_classes, m.n_train, m.n_test
                );
            }
        }
        Command::Pretrain => {
            let m = exp.pretrain()?;
            println!(
                "pretrain: train acc {:.4}, test acc {:.4}",
                m.train_acc, m.test_acc
            );
        }
        Command::Teach(arg) => {
            for t in tasks(&exp, arg) {
                let m = exp.teach(&t)?;
                println!("{t}: teacher acc {:.4}", m.acc_teacher);
            }
        }
        Command::Tailor(arg) => {
            for t in tasks(&exp, arg) {
                let m = exp.tailor(&t)?;
                println!(
                    "{t}: student acc {:.4}, E[C] {:.4}, task-specific params {:.2}% of backbone",
                    m.test_acc, m.expected_complexity, m.task_specific_pct
                );
            }
        }
        Command::Prune { task, n } => {
            for t in tasks(&exp, task) {
                let r = exp.prune(&t, *n)?;
                println!("{t}: {}", r.csv_row());
            }
        }
        Command::Sweep(arg) => {
            for t in tasks(&exp, arg) {
                let s = exp.sweep(&t)?;
                println!(
                    "{t}: selected n = {} (fallback {}), acc {:.4} vs teacher {:.4}",
                    s.selected_n, s.fallback, s.report.acc_finetuned, s.acc_teacher
                );
            }
        }
        Command::Report => print_report(&exp.report()?),
        Command::Run => print_report(&exp.run_all()?),
        Command::Verify { .. } => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
