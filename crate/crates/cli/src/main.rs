use std::process::ExitCode;

use clap::Parser;
use dynmf_cli::args::{Cli, Command};
use dynmf_cli::commands::{self, Report};

fn run(cli: &Cli) -> anyhow::Result<Report> {
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Synth { spec, out: dir } => commands::synth(spec, dir.as_deref().unwrap_or(&cfg.out_dir)),
        Command::Train { out: o, holdout, .. } => commands::train(&cfg, o.as_deref(), *holdout),
        Command::Eval { metric, out: o, .. } => commands::eval(&cfg, *metric, o.as_deref()),
        Command::Infer { out: o, .. } => commands::infer(&cfg, o.as_deref()),
        Command::Coldstart { demographics, store, m, out: o, .. } => {
            commands::coldstart(&cfg, demographics, store.as_deref(), *m, o.as_deref())
        }
        Command::Intrude { out: o, responses, .. } => commands::intrude(&cfg, o.as_deref(), responses.as_deref()),
        Command::Trajectories { out: o, .. } => commands::trajectories(&cfg, o.as_deref()),
        Command::Gradcheck { dims, out: o } => commands::gradcheck(&cfg, dims, o.as_deref()),
        Command::Ablate { out: o, .. } => commands::ablate_cmd(&cfg, o.as_deref()),
        Command::Sweep { out: o, .. } => commands::sweep(&cfg, o.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(report) => {
            println!("{}", report.summary);
            if report.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            if e.downcast_ref::<dynmf_cli::config::ConfigError>().is_some() {
                eprintln!("usage error: {e}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        }
    }
}
