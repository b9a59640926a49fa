use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vgcl_cli::{
    cmd_ablate, cmd_evaluate, cmd_gradcheck, cmd_prepare, cmd_train, CliResult, EvaluateArgs, PrepareArgs,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "vgcl", version, about = "Train and evaluate variational graph contrastive recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter and split a raw `user item [rating]` file.
    Prepare {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep rows with rating at or above this value (needs a third column).
        #[arg(long)]
        min_rating: Option<f64>,
        #[arg(long, default_value_t = 10)]
        min_count: usize,
        #[arg(long, default_value_t = 0.2)]
        test_ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one variant, optionally repeated over consecutive seeds.
    Train(RunArgs),
    /// Score a checkpoint on a prepared split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "10,20")]
        cutoffs: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        groups: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every variant with shared seeds and tabulate them.
    Ablate(RunArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        instances: usize,
    },
    /// List every configuration key with its default.
    Keys,
}

#[derive(Args)]
struct RunArgs {
    /// `key=value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeat: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| vgcl_core::Error::Io {
                path: path.clone(),
                source: e,
            })?;
            cfg.apply_text(&text)?;
        }
        let mut lines: Vec<String> = self.overrides.clone();
        let flags = [
            ("data", self.data.as_ref().map(|p| p.display().to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("variant", self.variant.clone()),
            ("seed", self.seed.map(|s| s.to_string())),
            ("repeat", self.repeat.map(|r| r.to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                lines.push(format!("{key}={v}"));
            }
        }
        cfg.apply_text(&lines.join("\n"))?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Prepare {
            input,
            out,
            min_rating,
            min_count,
            test_ratio,
            seed,
        } => {
            let manifest = cmd_prepare(&PrepareArgs {
                input,
                out,
                min_rating,
                min_count,
                test_ratio,
                seed,
            })?;
            print!("{}", manifest.render());
        }
        Command::Train(args) => {
            for r in cmd_train(&args.resolve()?)? {
                println!("[{}] seed={} variant={} -> {}", r.run_id, r.seed, r.variant, r.dir.display());
                print!("{}", r.report.table());
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            cutoffs,
            groups,
            out,
        } => {
            let report = cmd_evaluate(&EvaluateArgs {
                checkpoint,
                data,
                cutoffs,
                groups,
                out,
            })?;
            print!("{}", report.table());
        }
        Command::Ablate(args) => print!("{}", cmd_ablate(&args.resolve()?)?.render()),
        Command::Gradcheck { seed, instances } => print!("{}", cmd_gradcheck(seed, instances)?),
        Command::Keys => print!("{}", RunConfig::describe()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
