use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use refcolor::pipeline::{self, ErrorKind, Overrides, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "refcolor", version, about = "Reference-based colorization of medical slices and volume rendering")]
struct Cli {
    /// Print the default configuration as JSON and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Weight container (VGWC).
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of recommendations.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Edge-preserving filter: fgs, wls, gf or dt.
    #[arg(long, global = true)]
    filter: Option<String>,
    /// Disable lightness gamma encoding around the filter.
    #[arg(long, global = true)]
    no_gamma: bool,
    /// Fixed reference image (skips retrieval).
    #[arg(long, global = true)]
    reference: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reference corpus directory.
    #[arg(long, global = true)]
    references: Option<PathBuf>,
    /// Gray target stack directory.
    #[arg(long, global = true)]
    targets: Option<PathBuf>,
    /// Descriptor index file.
    #[arg(long, global = true)]
    index: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Embed the reference corpus and write the descriptor index.
    BuildIndex,
    /// Rank references for one target image.
    Recommend { target: PathBuf },
    /// Colorize one target with the reference given by --reference.
    Colorize { target: PathBuf },
    /// Colorize every slice of the target stack.
    ColorizeStack,
    /// Render the colorized (or gray) stack and write sections.
    Render,
}

fn config(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.apply(&Overrides {
        weights: common.weights.clone(),
        references: common.references.clone(),
        targets: common.targets.clone(),
        index: common.index.clone(),
        out_dir: common.out.clone(),
        seed: common.seed,
        k: common.k,
        filter: common.filter.clone(),
        no_gamma: common.no_gamma,
        reference: common.reference.clone(),
    })?;
    cfg.seed()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(report: &T) {
    println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let Some(command) = cli.command else {
        return Err(PipelineError::new(ErrorKind::Config, "usage", "no subcommand given (see --help)"));
    };
    let cfg = config(&cli.common)?;
    match command {
        Command::BuildIndex => print_json(&pipeline::cmd_build_index(&cfg)?),
        Command::Recommend { target } => {
            let report = pipeline::cmd_recommend(&cfg, &target)?;
            for (rank, m) in report.matches.iter().enumerate() {
                eprintln!("{}. {} ({:.6})", rank + 1, m.path.display(), m.score);
            }
            print_json(&report);
        }
        Command::Colorize { target } => print_json(&pipeline::cmd_colorize(&cfg, &target)?),
        Command::ColorizeStack => print_json(&pipeline::cmd_colorize_stack(&cfg)?),
        Command::Render => print_json(&pipeline::cmd_render(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.print_defaults {
        println!("{}", PipelineConfig::default().to_json());
        return ExitCode::SUCCESS;
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
