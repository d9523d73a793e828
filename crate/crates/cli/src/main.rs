use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alignlab::pipeline::{self, RunConfig, RunManifest, Study};
use clap::{Args, Parser, Subcommand};

/// Localize preference-tuning effects in a small transformer.
#[derive(Parser)]
#[command(name = "alignlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory. Defaults to `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the preference dataset.
    GenData(Common),
    /// Pretrain the base model and preference-tune it.
    Train(Common),
    /// Run patching and attribution studies on trained checkpoints.
    Study {
        #[command(flatten)]
        common: Common,
        /// Studies to run, overriding the config. Repeatable.
        #[arg(long = "study", value_parser = parse_study)]
        studies: Vec<Study>,
    },
    /// Render report.html from the output directory.
    Report(Common),
    /// gen-data, train, study and report in one go.
    Run(Common),
    /// Print the default configuration.
    DefaultConfig,
}

fn parse_study(s: &str) -> Result<Study, String> {
    Study::parse(s).map_err(|e| e.to_string())
}

fn load(c: &Common) -> alignlab::Result<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(&c.config)?;
    let out = c.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn summarize(out: &Path, m: &RunManifest) {
    let n: usize = m.files.values().map(Vec::len).sum();
    eprintln!("{} files recorded in {}", n, out.join(pipeline::MANIFEST).display());
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
}

fn run(cmd: Command) -> alignlab::Result<()> {
    let (common, f): (Common, Box<dyn Fn(&RunConfig, &Path) -> alignlab::Result<RunManifest>>) = match cmd {
        Command::DefaultConfig => {
            let text = serde_json::to_string_pretty(&RunConfig::default())?;
            println!("{text}");
            return Ok(());
        }
        Command::GenData(c) => (c, Box::new(pipeline::cmd_gen_data)),
        Command::Train(c) => (c, Box::new(pipeline::cmd_train)),
        Command::Report(c) => (c, Box::new(pipeline::cmd_report)),
        Command::Run(c) => (c, Box::new(pipeline::cmd_run)),
        Command::Study { common, studies } => (
            common,
            Box::new(move |cfg: &RunConfig, out: &Path| {
                let sel = if studies.is_empty() { cfg.studies.clone() } else { studies.clone() };
                pipeline::cmd_study(cfg, out, &sel)
            }),
        ),
    };
    let (cfg, out) = load(&common)?;
    let m = f(&cfg, &out)?;
    summarize(&out, &m);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}
