mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use heta_core::heta::Variant;

use commands::*;
use config::{read_config_file, resolve, BaselineFlags, FlagMap, HetaFlags, RunConfig};
use error::CliError;
use io::Run;

/// Token attribution for small transformer language models.
#[derive(Parser)]
#[command(name = "heta", version)]
struct Cli {
    /// Directory receiving every output file of the run
    #[arg(long, global = true, env = "HETA_RUN_DIR", default_value = "heta-run")]
    run_dir: PathBuf,
    /// JSON configuration; flags given on the command line take precedence.
    /// A `config.json` written by an earlier run is accepted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct InputFlags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Vocabulary of the corpus; defaults to a vocab.json next to it
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Records taken from the head of the corpus
    #[arg(long)]
    limit: Option<usize>,
}

impl InputFlags {
    fn map(&self) -> FlagMap {
        FlagMap::default()
            .put("checkpoint", &self.checkpoint)
            .put("corpus", &self.corpus)
            .put("vocab", &self.vocab)
            .put("limit", &self.limit)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-evidence corpus
    GenCorpus {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        num_keys: Option<usize>,
        #[arg(long)]
        num_values: Option<usize>,
        #[arg(long)]
        num_fillers: Option<usize>,
    },
    /// Train the planted-task model
    Train {
        /// Training corpus; generated when absent
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        model_seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Attribute targets to context tokens
    Attribute {
        #[command(flatten)]
        input: InputFlags,
        /// Whitespace-separated tokens whose last one is the target
        #[arg(long)]
        text: Option<String>,
        /// heta, heta/<variant>, grad, input-x-grad, ig, attn-rollout
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Additional HETA variants, one report each
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[command(flatten)]
        heta: HetaFlags,
        #[command(flatten)]
        baseline: BaselineFlags,
    },
    /// Score methods against planted evidence and faithfulness metrics
    Evaluate {
        #[command(flatten)]
        input: InputFlags,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        #[arg(long)]
        deletion_k: Option<usize>,
        /// Noise scale of the sensitivity metric
        #[arg(long)]
        sensitivity_delta: Option<f64>,
        #[arg(long)]
        sensitivity_samples: Option<usize>,
        /// Compare against attributions of rephrased records
        #[arg(long, num_args = 0..=1, default_missing_value = "true")]
        rephrase: Option<bool>,
        #[command(flatten)]
        heta: HetaFlags,
        #[command(flatten)]
        baseline: BaselineFlags,
    },
    /// Ablate HETA components and compare efficiency variants
    Ablate {
        #[command(flatten)]
        input: InputFlags,
        #[arg(long)]
        resamples: Option<usize>,
        #[command(flatten)]
        heta: HetaFlags,
        #[command(flatten)]
        baseline: BaselineFlags,
    },
    /// Sweep mixing weights or decoding settings
    Sweep {
        #[command(flatten)]
        input: InputFlags,
        #[arg(long, value_enum)]
        kind: Option<SweepKind>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[command(flatten)]
        heta: HetaFlags,
        #[command(flatten)]
        baseline: BaselineFlags,
    },
    /// Check the attribution inequalities numerically
    CheckTheory {
        #[command(flatten)]
        input: InputFlags,
        #[arg(long)]
        oracle_instances: Option<usize>,
        #[arg(long)]
        lrwin_instances: Option<usize>,
        #[arg(long)]
        taylor_instances: Option<usize>,
        #[command(flatten)]
        heta: HetaFlags,
        #[command(flatten)]
        baseline: BaselineFlags,
    },
}

struct Global {
    run_dir: PathBuf,
    config: Option<Value>,
    jobs: Option<usize>,
}

impl Global {
    fn run<A, F>(&self, command: &str, heta: &HetaFlags, baseline: &BaselineFlags, args: Value, body: F) -> Result<(), CliError>
    where
        A: Serialize + DeserializeOwned + Default,
        F: FnOnce(&RunConfig<A>, Run) -> Result<(), CliError>,
    {
        let cfg: RunConfig<A> = resolve(command, self.config.as_ref(), self.jobs, heta, baseline, args)?;
        let run = Run::new(&self.run_dir, &cfg)?;
        body(&cfg, run)
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let g = Global {
        config: cli.config.as_deref().map(read_config_file).transpose()?,
        run_dir: cli.run_dir,
        jobs: cli.jobs,
    };
    match cli.command {
        Command::GenCorpus {
            count,
            seed,
            num_keys,
            num_values,
            num_fillers,
        } => {
            let spec = FlagMap::default()
                .put("num_keys", &num_keys)
                .put("num_values", &num_values)
                .put("num_fillers", &num_fillers);
            let args = FlagMap::default().put("count", &count).put("seed", &seed).nest("spec", spec);
            g.run::<GenCorpusArgs, _>("gen-corpus", &HetaFlags::default(), &BaselineFlags::default(), args.value(), gen_corpus)
        }
        Command::Train {
            corpus,
            records,
            model_seed,
            steps,
            lr,
            batch_size,
        } => {
            let train = FlagMap::default().put("steps", &steps).put("lr", &lr).put("batch_size", &batch_size);
            let args = FlagMap::default()
                .put("corpus", &corpus)
                .put("records", &records)
                .nest("model", FlagMap::default().put("seed", &model_seed))
                .nest("train", train);
            g.run::<TrainArgs, _>("train", &HetaFlags::default(), &BaselineFlags::default(), args.value(), train_cmd)
        }
        Command::Attribute {
            input,
            text,
            methods,
            variants,
            heta,
            baseline,
        } => {
            let args = FlagMap::default()
                .nest("input", input.map())
                .put("text", &text)
                .put("methods", &methods)
                .put("variants", &variants);
            g.run::<AttributeArgs, _>("attribute", &heta, &baseline, args.value(), attribute)
        }
        Command::Evaluate {
            input,
            methods,
            deletion_k,
            sensitivity_delta,
            sensitivity_samples,
            rephrase,
            heta,
            baseline,
        } => {
            let args = FlagMap::default()
                .nest("input", input.map())
                .put("methods", &methods)
                .put("deletion_k", &deletion_k)
                .put("sensitivity_delta", &sensitivity_delta)
                .put("sensitivity_samples", &sensitivity_samples)
                .put("rephrase", &rephrase);
            g.run::<EvaluateArgs, _>("evaluate", &heta, &baseline, args.value(), evaluate)
        }
        Command::Ablate {
            input,
            resamples,
            heta,
            baseline,
        } => {
            let args = FlagMap::default().nest("input", input.map()).put("resamples", &resamples);
            g.run::<AblateArgs, _>("ablate", &heta, &baseline, args.value(), ablate)
        }
        Command::Sweep {
            input,
            kind,
            seeds,
            heta,
            baseline,
        } => {
            let args = FlagMap::default()
                .nest("input", input.map())
                .put("kind", &kind)
                .put("seeds", &seeds);
            g.run::<SweepArgs, _>("sweep", &heta, &baseline, args.value(), sweep)
        }
        Command::CheckTheory {
            input,
            oracle_instances,
            lrwin_instances,
            taylor_instances,
            heta,
            baseline,
        } => {
            let args = FlagMap::default()
                .nest("input", input.map())
                .put("oracle_instances", &oracle_instances)
                .put("lrwin_instances", &lrwin_instances)
                .put("taylor_instances", &taylor_instances);
            g.run::<CheckTheoryArgs, _>("check-theory", &heta, &baseline, args.value(), check_theory)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = CliError::Usage(e.render().to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code());
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
