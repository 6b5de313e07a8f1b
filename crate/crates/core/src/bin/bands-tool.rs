use std::path::PathBuf;
use std::process::ExitCode;

use bands_core::cli::{parse_stages, run_pipeline, RunConfig};
use clap::Parser;

#[derive(Parser)]
#[command(version, about = "Band gaps and defect modes of high-contrast periodic media")]
struct Args {
    /// `all` or a comma-separated list of limit, bands, gaps, interface, xdefect, verify.
    stage: String,
    #[arg(long)]
    config: PathBuf,
    /// Worker threads for the parameter sweeps.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the eigensolver start blocks; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let stages = match parse_stages(&args.stage) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let mut config = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = args.out.unwrap_or_else(|| config.out.clone());
    if let Some(n) = args.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run_pipeline(&config, &stages, &out) {
        Ok(outcome) => {
            for v in &outcome.verdicts {
                println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
