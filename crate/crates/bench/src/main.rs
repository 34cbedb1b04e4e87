use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spdhss_bench::{emit_error_curve, emit_scaling_table, run_sweep, BenchError, ExperimentConfig, System};

#[derive(Parser)]
#[command(name = "bench", about = "SPD HSS preconditioner experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment file with `key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// Replaces one config value, e.g. `--override n=4000`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the PCG sweep and write results.csv and table.txt.
    Run(Common),
    /// Relative matvec error of the SPD HSS approximation for each rank.
    ErrorCurve(Common),
    /// Timing and storage across problem sizes.
    Scaling(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, BenchError> {
    let text = fs::read_to_string(&c.config)?;
    ExperimentConfig::parse(&text, &c.overrides)
}

fn run(cli: Cli) -> Result<bool, BenchError> {
    match cli.cmd {
        Cmd::Run(c) => {
            let cfg = load(&c)?;
            let out = run_sweep(&cfg)?;
            print!("{}", out.table);
            Ok(!out.any_hard_failure())
        }
        Cmd::ErrorCurve(c) => {
            let cfg = load(&c)?;
            fs::create_dir_all(&cfg.output)?;
            let mut csv = String::from("param,N,rank,mean_rel_error\n");
            for &n in &cfg.sizes {
                for &param in &cfg.params {
                    let sys = System::build(&cfg, param, n)?;
                    for &r in &cfg.ranks {
                        let h = sys.spdhss(&cfg, r)?;
                        let curve = emit_error_curve(&sys.h2, &h, cfg.error_probes, cfg.seed)?;
                        csv.push_str(&format!("{param},{n},{r},{:e}\n", curve.mean));
                    }
                }
            }
            fs::write(cfg.output.join("error_curve.csv"), &csv)?;
            print!("{csv}");
            Ok(true)
        }
        Cmd::Scaling(c) => {
            let cfg = load(&c)?;
            fs::create_dir_all(&cfg.output)?;
            let csv = emit_scaling_table(&cfg)?.to_csv();
            fs::write(cfg.output.join("scaling.csv"), &csv)?;
            print!("{csv}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
