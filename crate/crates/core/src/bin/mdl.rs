use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdl_core::audit;
use mdl_core::error::exit;
use mdl_core::experiment::{self, ExperimentConfig};
use mdl_core::gradsuite;
use mdl_core::tensor::GradCheckOptions;
use mdl_core::Error;

/// Multi-domain adapters: training runs, parameter audits and reports.
///
/// Outputs go under $MDL_OUTPUT_ROOT (default ./runs).
#[derive(Parser)]
#[command(name = "mdl", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every variant and seed of a config file or built-in template.
    Train {
        /// TOML/JSON config path, or one of table1-sweep, table2-fixvstrain,
        /// table3-placement, table4-domains.
        config: String,
        /// Validate and print the resolved variants without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Parameter budgets for a channel spec (`x3d-m` or a TOML file).
    Audit {
        spec: String,
        /// Print CSV instead of the text report.
        #[arg(long)]
        csv: bool,
    },
    /// Aggregate run directories of one config across seeds.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op, the adapter block and the network loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a built-in template as TOML.
    Template { name: String },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> mdl_core::Result<u8> {
    let root = experiment::output_root();
    match cli.cmd {
        Cmd::Train { config, dry_run } => {
            let cfg = ExperimentConfig::load(&config)?;
            let variants = cfg.variants();
            eprintln!(
                "{}: {} variant(s) x {} seed(s), config {}",
                cfg.name,
                variants.len(),
                cfg.seeds.len(),
                &cfg.config_hash()[..12]
            );
            if dry_run {
                for (name, v) in &variants {
                    println!("{name}\t{}", &v.config_hash()[..12]);
                }
                return Ok(0);
            }
            let runs = experiment::run_experiment(&cfg, &root, |a| {
                let accs: Vec<String> = a
                    .metrics
                    .domains
                    .iter()
                    .map(|d| format!("{} {:.1}%", d.name, 100.0 * d.top1))
                    .collect();
                eprintln!("  {} seed {}: {}  ({})", a.metrics.variant, a.metrics.seed, accs.join(", "), a.dir.display());
            })?;
            print!("{}", experiment::summary_table(&experiment::sweep_summary(&runs)));
            Ok(0)
        }
        Cmd::Audit { spec, csv } => {
            let (name, rows) = audit::audit_command(&spec)?;
            let dir = root.join("audit");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join(format!("{name}.csv"));
            fs::write(&path, audit::render_csv(&rows)).map_err(|e| Error::io(&path, e))?;
            if csv {
                print!("{}", audit::render_csv(&rows));
            } else {
                print!("{}", audit::render_text(&rows));
                eprintln!("csv written to {}", path.display());
            }
            Ok(if audit::all_pass(&rows) { 0 } else { exit::AUDIT })
        }
        Cmd::Report { dirs, out } => {
            let report = experiment::report_command(&dirs, out.as_deref())?;
            for (dir, why) in &report.skipped {
                eprintln!("warning: skipped {}: {why}", dir.display());
            }
            println!("config {} over {} run(s)", &report.config_hash[..12], report.runs.len());
            for d in &report.domains {
                println!(
                    "{:<16} top-1 mean {:5.1}%  min {:5.1}%  max {:5.1}%",
                    d.name,
                    100.0 * d.top1.mean,
                    100.0 * d.top1.min,
                    100.0 * d.top1.max
                );
            }
            println!("written to {}", report.out_dir.display());
            Ok(0)
        }
        Cmd::Gradcheck { seed } => {
            let result = gradsuite::run(&GradCheckOptions {
                seed,
                ..Default::default()
            })?;
            for c in &result.cases {
                println!(
                    "{:<34} {:<18} max rel err {:.2e}  {}",
                    c.name,
                    format!("{:?}", c.shape),
                    c.report.max_rel_err,
                    if c.report.passed { "ok" } else { "FAIL" }
                );
            }
            println!("{} checks in {:.1} s", result.cases.len(), result.seconds);
            Ok(if result.passed() { 0 } else { exit::FAILURE })
        }
        Cmd::Template { name } => {
            let cfg = experiment::template(&name).ok_or_else(|| {
                Error::Config(format!("unknown template `{name}` (expected one of {})", experiment::TEMPLATES.join(", ")))
            })?;
            print!("{}", cfg.to_toml());
            Ok(0)
        }
    }
}
