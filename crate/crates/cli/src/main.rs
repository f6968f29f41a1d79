use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pcrlb_design_cli::{parse_config, run, Command, Overrides, Preset};

#[derive(Parser)]
#[command(name = "pcrlb-design", version, about = "Input design for Bayesian identification of nonlinear state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Sub,

    /// Configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Scale preset for N, M, M_u and runs not set in the file.
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,

    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Sub {
    /// Optimize each configured case and report objectives, histories and bound traces.
    Design,
    /// Bound trace for fixed policies (`[params]` or `policy_file`).
    Bound,
    /// Particle-filter MSE experiment against the bound for fixed policies.
    Validate,
    /// Cross-check the bound machinery against independent oracles.
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let Some(path) = cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(1);
    };
    let overrides = Overrides {
        seed: cli.seed,
        output_dir: cli.output_dir,
        preset: cli.preset.map(|p| match p {
            PresetArg::Paper => Preset::Paper,
            PresetArg::Desk => Preset::Desk,
        }),
        threads: cli.threads,
    };
    let cfg = match parse_config(&path, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let cmd = match cli.command {
        Sub::Design => Command::Design,
        Sub::Bound => Command::Bound,
        Sub::Validate => Command::Validate,
        Sub::Oracle => Command::Oracle,
    };
    match run(cmd, &cfg) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == 2 {
                let diag = cfg.output_dir.join("diagnostic.txt");
                let mut text = format!("{}\n{e}\n", cfg.metadata());
                let mut source = std::error::Error::source(&e);
                while let Some(s) = source {
                    text.push_str(&format!("caused by: {s}\n"));
                    source = s.source();
                }
                if std::fs::write(&diag, text).is_ok() {
                    eprintln!("diagnostics written to {}", diag.display());
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
