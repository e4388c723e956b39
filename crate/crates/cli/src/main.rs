mod config;
mod pipeline;
mod theory;

use clap::{Parser, Subcommand};
use config::LabConfig;
use pipeline::SweepAxis;
use std::path::PathBuf;
use tmslab_core::LabError;

/// Desk-scale post-training laboratory: trains SFT, distillation, RL, and
/// trajectory-mixed supervision baselines on synthetic tasks and reports
/// drift, forgetting, and diversity diagnostics.
#[derive(Parser)]
#[command(name = "tmslab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Emit machine-readable summaries instead of human-readable text.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the full pipeline for every configured method and seed.
    Run { config: PathBuf },
    /// Generate the datasets into the working directory and exit.
    GenData { config: PathBuf },
    /// Check the score-drift bound and Pinsker's inequality on random
    /// enumerable instances.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trials: usize,
    },
    /// Sweep one mixture axis (T | alpha | ckpt_dist) at a fixed budget.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(dispatch(cli));
}

fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Cmd::Run { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match pipeline::cmd_run(&cfg) {
                Ok(summary) => {
                    print_run_summary(&summary, cli.json);
                    0
                }
                Err(e) => lab_error_code(e),
            }
        }
        Cmd::GenData { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            match pipeline::cmd_gen_data(&cfg) {
                Ok(dir) => {
                    if cli.json {
                        println!("{{\"data_dir\": {:?}}}", dir.display().to_string());
                    } else {
                        println!("datasets written to {}", dir.display());
                    }
                    0
                }
                Err(e) => lab_error_code(e),
            }
        }
        Cmd::VerifyTheory { seed, trials } => {
            if trials == 0 {
                eprintln!("usage error: --trials must be >= 1");
                return 2;
            }
            match theory::verify_theory(seed, trials) {
                Ok(out) => {
                    if cli.json {
                        println!(
                            "{{\"trials\": {}, \"violations\": {}, \"max_bound_gap\": {:e}, \"max_jensen_gap\": {:e}, \"max_pinsker_gap\": {:e}}}",
                            out.trials, out.violations, out.max_bound_gap, out.max_jensen_gap, out.max_pinsker_gap
                        );
                    } else {
                        println!("trials: {}", out.trials);
                        println!("max(lhs - rhs):            {:.6e}", out.max_bound_gap);
                        println!("max(rhs - corollary_rhs):  {:.6e}", out.max_jensen_gap);
                        println!("max(tv - pinsker bound):   {:.6e}", out.max_pinsker_gap);
                        println!("violations: {}", out.violations);
                    }
                    if out.violations > 0 {
                        if let Some(v) = out.first_violation {
                            eprintln!("{v}");
                        }
                        1
                    } else {
                        0
                    }
                }
                Err(e) => lab_error_code(e),
            }
        }
        Cmd::Sweep { config, axis, values } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let Some(axis) = SweepAxis::from_id(&axis) else {
                eprintln!("usage error: axis must be one of T | alpha | ckpt_dist");
                return 2;
            };
            match pipeline::cmd_sweep(&cfg, axis, &values) {
                Ok((path, rows)) => {
                    if cli.json {
                        let items: Vec<String> = rows
                            .iter()
                            .map(|r| {
                                format!(
                                    "{{\"axis_value\": {:?}, \"target_avg\": {}, \"xfer\": {}, \"forgetting\": {}, \"kl_to_base\": {}}}",
                                    r.axis_value,
                                    r.target_avg,
                                    r.xfer,
                                    r.forgetting,
                                    if r.kl_to_base.is_finite() { r.kl_to_base.to_string() } else { "null".into() }
                                )
                            })
                            .collect();
                        println!("[{}]", items.join(","));
                    } else {
                        println!("{}", pipeline::SWEEP_HEADER);
                        for r in &rows {
                            println!(
                                "{},{},{},{},{}",
                                r.axis_value, r.target_avg, r.xfer, r.forgetting, r.kl_to_base
                            );
                        }
                        println!("sweep written to {}", path.display());
                    }
                    0
                }
                Err(e) => lab_error_code(e),
            }
        }
    }
}

fn load(path: &PathBuf) -> Result<LabConfig, i32> {
    LabConfig::load(path).map_err(|e| {
        eprintln!("{e}");
        2
    })
}

fn print_run_summary(summary: &pipeline::RunSummary, json: bool) {
    if json {
        let items: Vec<String> = summary
            .cells
            .iter()
            .map(|c| {
                format!(
                    "{{\"method\": {:?}, \"seed\": {}, \"target_avg\": {}, \"forgetting\": {}, \"kl_to_base\": {}}}",
                    c.method,
                    c.seed,
                    c.report.target_avg(),
                    c.report.forgetting,
                    if c.report.kl_to_base.is_finite() {
                        c.report.kl_to_base.to_string()
                    } else {
                        "null".into()
                    }
                )
            })
            .collect();
        println!("[{}]", items.join(","));
    } else {
        println!(
            "{:<10} {:>6} {:>12} {:>12} {:>12} {:>12}",
            "method", "seed", "target_avg", "forgetting", "kl_to_base", "pld_val"
        );
        for c in &summary.cells {
            println!(
                "{:<10} {:>6} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
                c.method,
                c.seed,
                c.report.target_avg(),
                c.report.forgetting,
                c.report.kl_to_base,
                c.report.pld_val
            );
        }
        println!("artifacts in {}", summary.workdir.display());
    }
}

fn lab_error_code(e: LabError) -> i32 {
    let code = match &e {
        LabError::TrainingDiverged { .. } => 3,
        LabError::IncompleteBuffer { .. } => 4,
        _ => 1,
    };
    eprintln!("error: {e}");
    code
}
