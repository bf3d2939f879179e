use std::process::ExitCode;

use clap::Parser;

use core_unlearn::cli::{eval_checkpoint, gradcheck_suite, parse_config, run, Cli, Command, RunConfig, RunPlan};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn execute(command: Command) -> core_unlearn::Result<ExitCode> {
    match command {
        Command::Run { config, seed, out, ablate, dump_activations, no_checkpoints } => {
            let cfg = match config {
                Some(path) => parse_config(&path)?,
                None => RunConfig::default(),
            };
            let plan = RunPlan::new(cfg, seed, out, &ablate)?;
            let result = run(&plan, !no_checkpoints, dump_activations)?;
            let last = &result.report.last;
            println!(
                "last: crr {:.4} rr {:.4} delta_rr {:.4} ar {:.4} specificity {:.2}",
                last.crr, last.rr, last.delta_rr, last.ar, last.specificity
            );
            println!("wrote {}", plan.output_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { corrupt } => {
            let results = gradcheck_suite(corrupt.as_deref())?;
            let mut ok = true;
            for r in &results {
                let status = if r.report.passed { "ok" } else { "FAIL" };
                println!(
                    "{:<18} max_rel_error {:.3e}  params {:>5}  {status}",
                    r.loss, r.report.max_rel_error, r.report.num_params
                );
                if !r.report.passed {
                    ok = false;
                    eprintln!("gradient check failed for {} at parameter index {}", r.loss, r.report.worst_index);
                }
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Eval { checkpoint, out } => {
            let report = eval_checkpoint(&checkpoint, &out)?;
            let s = &report.last;
            println!(
                "step {}: crr {:.4} rr {:.4} ar {:.4} specificity {:.2}",
                s.step, s.crr, s.rr, s.ar, s.specificity
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
