use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use safe_sysid_cli::config::RunConfig;
use safe_sysid_cli::pipeline::{self, exit};

#[derive(Parser)]
#[command(name = "safe-sysid", version, about = "Safe ELM system identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set risk.p_k=0.95`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,

    /// Model file for verify/export; defaults to `<output_dir>/model.json`.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Produce the training dataset.
    Generate,
    /// Fit the constrained model.
    Train,
    /// Monte Carlo rollouts and one-step audit.
    Verify,
    /// Plot-ready CSV files.
    Export,
    /// generate, train, verify and export.
    All,
}

fn run(cli: &Cli) -> safe_sysid::Result<i32> {
    let Some(path) = &cli.config else {
        return Err(safe_sysid::Error::InvalidInput("--config is required".into()));
    };
    let config = RunConfig::load(path, &cli.overrides)?;
    let model = cli.model.as_deref();
    Ok(match cli.command {
        Command::Generate => {
            let r = pipeline::cmd_generate(&config)?;
            println!("{} demonstration(s), {} samples -> {}", r.demonstrations, r.samples, r.manifest.display());
            exit::OK
        }
        Command::Train => {
            let r = pipeline::cmd_train(&config)?;
            print_train(&r);
            r.exit_code()
        }
        Command::Verify => {
            let s = pipeline::cmd_verify(&config, model)?;
            print_verify(&s);
            s.exit_code()
        }
        Command::Export => {
            let files = pipeline::cmd_export(&config, model)?;
            println!("{} file(s) written", files.len());
            exit::OK
        }
        Command::All => {
            let r = pipeline::cmd_all(&config)?;
            println!("{} demonstration(s), {} samples", r.generate.demonstrations, r.generate.samples);
            print_train(&r.train);
            if let Some(s) = &r.verify {
                print_verify(s);
            }
            r.exit_code()
        }
    })
}

fn print_train(r: &pipeline::TrainReport) {
    match r.status {
        Some(status) => println!(
            "status {status}, objective {:.6e}, max violation {:.3e}, {} constraints at {} points, {:.2} s",
            r.objective, r.max_violation, r.constraints, r.sample_points, r.seconds
        ),
        None => println!("unconstrained fit, {:.2} s", r.seconds),
    }
}

fn print_verify(s: &pipeline::VerifySummary) {
    println!(
        "{} run(s): {} violation(s), {} converged, max final distance {:.3e}, audit {}/{} failures",
        s.runs, s.violation_count, s.converged_count, s.max_final_distance, s.audit_failures, s.audit_points
    );
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(threads) = std::env::var("SAFE_SYSID_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            pipeline::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
