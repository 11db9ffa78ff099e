use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use milda_harness::config::{parse_method_list, parse_seed_list, SuiteConfig};
use milda_harness::data::{build_data, dataset_hash, save_datasets};
use milda_harness::methods::MethodName;
use milda_harness::report::rerender;
use milda_harness::suite::run_suite;
use milda_harness::HarnessError;

#[derive(Parser)]
#[command(name = "milda", version, about = "MIL domain adaptation experiments on synthetic bags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "MILDA_OUT", default_value = "milda-out")]
    out: PathBuf,
    /// Model seeds, `0,1,2` or `0..3`.
    #[arg(long)]
    seed_list: Option<String>,
    /// Comma-separated method names.
    #[arg(long)]
    methods: Option<String>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the datasets and write them as containers.
    Generate(Common),
    /// Train and evaluate a single method.
    Train {
        #[arg(long)]
        method: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the comparison methods over all seeds.
    Suite(Common),
    /// Run the ablations (with the full pipeline as reference).
    Ablate(Common),
    /// Re-render summaries and plots from the CSVs in `--out`.
    Report {
        #[arg(long, env = "MILDA_OUT", default_value = "milda-out")]
        out: PathBuf,
    },
}

fn load(common: &Common) -> Result<SuiteConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => SuiteConfig::load(p)?,
        None => SuiteConfig::default(),
    };
    if let Some(s) = &common.seed_list {
        cfg.methods.seeds = parse_seed_list(s)?;
    }
    if let Some(m) = &common.methods {
        cfg.methods.run = parse_method_list(m)?;
    }
    if common.jobs == 0 {
        return Err(HarnessError::Config("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn matrix(common: &Common, cfg: &SuiteConfig, methods: &[MethodName]) -> Result<i32, HarnessError> {
    let report = run_suite(cfg, methods, &cfg.methods.seeds, common.jobs, Some(&common.out))?;
    print!("{}", std::fs::read_to_string(common.out.join("summary.txt"))?);
    println!("outputs in {}", common.out.display());
    for f in &report.failures {
        eprintln!("failed: {} seed {}: {}", f.method, f.seed, f.error);
    }
    Ok(if report.failures.is_empty() { 0 } else { 1 })
}

fn run(cli: Cli) -> Result<i32, HarnessError> {
    match cli.command {
        Command::Generate(common) => {
            let cfg = load(&common)?;
            let data = build_data(&cfg)?;
            let dir = common.out.join("data");
            for (split, hash) in save_datasets(&dir, &data, &cfg)? {
                println!("{split:<13} {hash}");
            }
            println!("dataset hash {}", dataset_hash(&data)?);
            println!("written to {}", dir.display());
            Ok(0)
        }
        Command::Train { method, common } => {
            let cfg = load(&common)?;
            let m = MethodName::parse(&method)
                .ok_or_else(|| HarnessError::Config(format!("unknown method {method:?}")))?;
            matrix(&common, &cfg, &[m])
        }
        Command::Suite(common) => {
            let cfg = load(&common)?;
            let methods = cfg.methods.run.clone();
            matrix(&common, &cfg, &methods)
        }
        Command::Ablate(common) => {
            let cfg = load(&common)?;
            let methods = match &common.methods {
                Some(_) => cfg.methods.run.clone(),
                None => MethodName::ABLATION.to_vec(),
            };
            matrix(&common, &cfg, &methods)
        }
        Command::Report { out } => {
            for p in rerender(&out)? {
                println!("{}", p.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
