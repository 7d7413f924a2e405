use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hmr_harness::ablate::ablate;
use hmr_harness::bench::{bench, DEFAULT_SIZES};
use hmr_harness::commands::{cmd_eval, cmd_gen_data, cmd_train, experiment};
use hmr_harness::config::DEFAULT_CONFIG_TOML;
use hmr_harness::report::{canonical_json, write_report, Format};
use hmr_harness::verify::{self, Sabotage};
use hmr_harness::{HarnessError, Result, RunConfig, Stage};

#[derive(Parser, Debug)]
#[command(name = "hmr", version, about = "Desk-scale HMR-Mamba: verify, generate data, train, evaluate, ablate, benchmark")]
struct Cli {
    /// Run configuration (TOML). Defaults apply to every missing key.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Directory for reports, checkpoints, and datasets.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    /// Restrict `verify` to one suite or module.
    #[arg(long, global = true, value_name = "SUITE")]
    only: Option<String>,
    /// Report encoding.
    #[arg(long, global = true, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OutFormat {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the invariant suites; exit 1 if any fails.
    Verify {
        /// Negate the discrete state matrix on the recurrent route (suite self-test).
        #[arg(long, hide = true)]
        sabotage_a_bar: bool,
    },
    /// Generate the configured train/eval split into --out.
    GenData,
    /// Train per the config's stage and write a checkpoint.
    Train {
        /// Directory holding train.hmrd and eval.hmrd; generated when absent.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Starting weights; overrides the config's init_checkpoint.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
        /// Override the config's stage.
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
    },
    /// Evaluate a checkpoint on both splits.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Stage whose joint source to score (lift: lifted joints; otherwise mesh joints).
        #[arg(long, value_enum)]
        stage: Option<StageArg>,
    },
    /// Train and evaluate the five component combinations.
    Ablate {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Parameter counts and scan timings.
    Bench {
        /// Sequence lengths, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SIZES)]
        sizes: Vec<usize>,
    },
    /// Print the commented default configuration.
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Lift,
    Mesh,
    End2end,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Lift => Stage::Lift,
            StageArg::Mesh => Stage::Mesh,
            StageArg::End2end => Stage::End2end,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Print the report in the chosen format and save it as `out/{stem}.*`.
fn emit(cli: &Cli, stem: &str, json: &str, csv: &str) -> Result<()> {
    let format = match cli.format {
        OutFormat::Json => Format::Json,
        OutFormat::Csv => Format::Csv,
    };
    let path = write_report(&cli.out, stem, format, json, csv)?;
    print!("{}", if matches!(format, Format::Json) { json } else { csv });
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    if cli.only.is_some() && !matches!(cli.command, Command::Verify { .. }) {
        return Err(HarnessError::Usage("--only applies to verify".into()));
    }
    match &cli.command {
        Command::Verify { sabotage_a_bar } => {
            let report = verify::run(cli.only.as_deref(), Sabotage { flip_a_bar_sign: *sabotage_a_bar })?;
            emit(cli, "verify", &canonical_json(&report), &report.to_csv()?)?;
            for s in &report.suites {
                eprintln!("{:<18} {:<4} {} cases, max error {:e}", s.suite, if s.passed { "pass" } else { "FAIL" }, s.cases, s.max_err);
                for f in &s.failures {
                    eprintln!("    {f}");
                }
            }
            Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::GenData => {
            let cfg = load_config(cli)?;
            let report = cmd_gen_data(&cfg, &cli.out)?;
            let mut csv = String::from("split,seed\n");
            for (split, seeds) in [("train", &report.train_seeds), ("eval", &report.eval_seeds)] {
                seeds.iter().for_each(|s| csv.push_str(&format!("{split},{s}\n")));
            }
            emit(cli, "gen-data", &canonical_json(&report), &csv)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { data, init, stage } => {
            let mut cfg = load_config(cli)?;
            if let Some(s) = stage {
                cfg.stage = (*s).into();
            }
            if let Some(p) = init {
                cfg.init_checkpoint = p.display().to_string();
            }
            let exp = experiment(&cfg, data.as_deref())?;
            let (outcome, ckpt) = cmd_train(&exp, &cli.out)?;
            emit(cli, "train", &outcome.report.to_json(), &outcome.report.to_csv()?)?;
            eprintln!("wrote {}", ckpt.display());
            match outcome.error {
                None => Ok(ExitCode::SUCCESS),
                Some(e) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::from(e.exit_code() as u8))
                }
            }
        }
        Command::Eval { checkpoint, data, stage } => {
            let mut cfg = load_config(cli)?;
            if let Some(s) = stage {
                cfg.stage = (*s).into();
            }
            let exp = experiment(&cfg, data.as_deref())?;
            let report = cmd_eval(&exp, checkpoint)?;
            emit(cli, "eval", &report.to_json(), &report.to_csv()?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate { data } => {
            let cfg = load_config(cli)?;
            let exp = experiment(&cfg, data.as_deref())?;
            let report = ablate(&cfg, &exp)?;
            emit(cli, "ablate", &canonical_json(&report), &report.to_csv()?)?;
            if !report.full_model_best {
                eprintln!("note: the full model is not best on every metric in this run");
            }
            Ok(if report.flags_non_invasive { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Bench { sizes } => {
            let cfg = load_config(cli)?;
            let report = bench(&cfg, sizes)?;
            emit(cli, "bench", &canonical_json(&report), &report.to_csv()?)?;
            Ok(if report.outputs_agree { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Config => {
            print!("{DEFAULT_CONFIG_TOML}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
