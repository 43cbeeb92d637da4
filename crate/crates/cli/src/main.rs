mod args;
mod commands;
mod inputs;
mod output;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, MetricsCommand};
use output::{Failure, Run};

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let run = Run::start();
    macro_rules! go {
        ($name:expr, $f:path, $a:expr) => {{
            let report = $f($a)?;
            run.finish(&$a.common.out_dir, $name, $a.common.seed, $a, report.outputs)?;
            match report.shortfall {
                Some(msg) => Err(Failure::NotConverged(msg)),
                None => Ok(()),
            }
        }};
    }
    match &cli.command {
        Command::Solve(a) => go!("solve", commands::solve, a),
        Command::Sweep(a) => go!("sweep", commands::sweep, a),
        Command::Calibrate(a) => go!("calibrate", commands::calibrate, a),
        Command::Synth(a) => go!("synth", commands::synth, a),
        Command::Metrics(MetricsCommand::Evaluate(a)) => go!("metrics evaluate", commands::evaluate, a),
        Command::Metrics(MetricsCommand::Summarize(a)) => go!("metrics summarize", commands::summarize, a),
        Command::Continuous(a) => go!("continuous", commands::continuous, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("qre: {f}");
            f.exit_code()
        }
    }
}
