use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use w2s_cli::commands::{self, EmitOpts, EvalOpts, QueryOpts, ScoreOpts, TrainOpts, VariateOpts};
use w2s_cli::simulate::{default_templates, run_simulate, SimulateOpts};
use w2s_core::corpus::{EmitMode, Split};
use w2s_core::supervisor::{run_mock_server_on, EndpointConfig, MockBehavior, DEFAULT_API_KEY_ENV};
use w2s_core::variation::ParaphraseSource;

#[derive(Parser)]
#[command(name = "w2s", version, about = "Reliability-aware weak supervision pipeline")]
struct Cli {
    /// Directory holding the stage files and manifest of one run
    #[arg(long, global = true, default_value = "w2s-run")]
    run_dir: PathBuf,
    /// Master seed for every seeded stage
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(value: SplitArg) -> Self {
        match value {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    RuleBased,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Naive,
    Filtered,
    Reweighted,
}

impl From<ModeArg> for EmitMode {
    fn from(value: ModeArg) -> Self {
        match value {
            ModeArg::Naive => EmitMode::Naive,
            ModeArg::Filtered => EmitMode::Filtered,
            ModeArg::Reweighted => EmitMode::Reweighted,
        }
    }
}

#[derive(clap::Args, Clone)]
struct EndpointArgs {
    /// Chat-completion endpoint base URL, e.g. http://127.0.0.1:8000
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long, default_value = "weak-supervisor")]
    model: String,
    /// Environment variable holding the API key
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    #[arg(long, default_value_t = 8)]
    max_parallel: usize,
    #[arg(long, default_value_t = 60.0)]
    timeout_secs: f64,
    #[arg(long, default_value_t = 3)]
    retries: u32,
}

impl EndpointArgs {
    fn to_config(&self) -> Option<EndpointConfig> {
        self.base_url.as_ref().map(|url| EndpointConfig {
            base_url: url.clone(),
            model_name: self.model.clone(),
            api_key_source: self.api_key_env.clone(),
            max_parallel_requests: self.max_parallel,
            timeout_secs: self.timeout_secs,
            retries: self.retries,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate prompt variants for one split of a question corpus
    Variate {
        /// Path to the source questions.jsonl
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, default_value_t = 5)]
        n_variants: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = SourceArg::RuleBased)]
        paraphrase_source: SourceArg,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Query the weak supervisor endpoint for every variant
    Query {
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Serve the scripted chat-completion mock in the foreground
    ServeMock {
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// JSON array of behaviors, e.g.
        /// [{"reply":{"text":"B"}},{"fail":{"status":500}}]
        #[arg(long, default_value = r#"[{"reply":{"text":"A"}}]"#)]
        script: String,
    },
    /// Canonicalize answers and compute entropy, threshold and weights
    Score {
        #[arg(long, default_value_t = 50.0)]
        percentile: f64,
        #[arg(long, default_value_t = 0.2)]
        temperature: f64,
    },
    /// Emit the weighted SFT dataset
    Emit {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Sample the emitted dataset down to this many examples
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Train the toy model on the emitted dataset
    Train {
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Evaluate the trained model and write the report
    Eval {
        /// Weak supervisor accuracy, enables PGR
        #[arg(long)]
        weak_acc: Option<f64>,
        /// Strong ceiling accuracy, enables PGR
        #[arg(long)]
        ceiling_acc: Option<f64>,
        #[arg(long, default_value_t = 5)]
        buckets: usize,
    },
    /// One-shot synthetic end-to-end run comparing all modes
    Simulate {
        #[arg(long, default_value_t = 2000)]
        questions: usize,
        #[arg(long, default_value_t = 4)]
        choices: usize,
        /// Stem templates shared across splits (default: questions / 13)
        #[arg(long)]
        templates: Option<usize>,
        #[arg(long, default_value_t = 5)]
        n_variants: usize,
        #[arg(long, default_value_t = 50.0)]
        percentile: f64,
        #[arg(long, default_value_t = 0.2)]
        temperature: f64,
        #[arg(long, default_value_t = 4.0)]
        alpha: f64,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
        #[arg(long, default_value_t = 0.1)]
        sensitivity: f64,
        /// Force every question's competence instead of drawing from Beta
        #[arg(long)]
        fixed_competence: Option<f64>,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 5)]
        buckets: usize,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({
                "error": error_kind(&err),
                "message": format!("{err:#}"),
            });
            eprintln!("{record}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let run_dir = cli.run_dir;
    let seed = cli.seed;
    match cli.command {
        Command::Variate {
            questions,
            n_variants,
            split,
            paraphrase_source,
            endpoint,
        } => commands::run_variate(
            &run_dir,
            &VariateOpts {
                questions,
                n_variants,
                split: split.into(),
                paraphrase_source: match paraphrase_source {
                    SourceArg::RuleBased => ParaphraseSource::RuleBased,
                    SourceArg::External => ParaphraseSource::ExternalProvider,
                },
                endpoint: endpoint.to_config(),
                seed,
            },
        ),
        Command::Query { endpoint } => {
            let endpoint = endpoint
                .to_config()
                .ok_or_else(|| anyhow::anyhow!("query requires --base-url"))?;
            commands::run_query(&run_dir, &QueryOpts { endpoint, seed })
        }
        Command::ServeMock { port, script } => {
            let script: Vec<MockBehavior> =
                serde_json::from_str(&script).map_err(|e| anyhow::anyhow!("bad --script: {e}"))?;
            let handle = run_mock_server_on(port, script)?;
            println!("{}", handle.base_url());
            handle.join();
            Ok(())
        }
        Command::Score {
            percentile,
            temperature,
        } => commands::run_score(
            &run_dir,
            &ScoreOpts {
                percentile,
                temperature,
                seed,
            },
        ),
        Command::Emit { mode, budget } => commands::run_emit(
            &run_dir,
            &EmitOpts {
                mode: mode.into(),
                budget,
                seed,
            },
        ),
        Command::Train {
            learning_rate,
            epochs,
            batch_size,
        } => commands::run_train(
            &run_dir,
            &TrainOpts {
                learning_rate,
                epochs,
                batch_size,
                seed,
            },
        ),
        Command::Eval {
            weak_acc,
            ceiling_acc,
            buckets,
        } => commands::run_eval(
            &run_dir,
            &EvalOpts {
                weak_acc,
                ceiling_acc,
                buckets,
                seed,
            },
        ),
        Command::Simulate {
            questions,
            choices,
            templates,
            n_variants,
            percentile,
            temperature,
            alpha,
            beta,
            sensitivity,
            fixed_competence,
            epochs,
            learning_rate,
            buckets,
        } => {
            let opts = SimulateOpts {
                n_questions: questions,
                n_choices: choices,
                n_templates: templates.unwrap_or_else(|| default_templates(questions)),
                n_variants,
                percentile,
                temperature,
                competence_alpha: alpha,
                competence_beta: beta,
                variant_sensitivity: sensitivity,
                fixed_competence,
                epochs,
                learning_rate,
                buckets,
                seed,
            };
            let report = run_simulate(&run_dir, &opts)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<w2s_core::scoring::ScoringError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<w2s_core::variation::VariationError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<w2s_core::supervisor::SupervisorError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<w2s_core::corpus::CorpusError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<w2s_core::trainer::TrainError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<w2s_core::evalsuite::EvalError>() {
            return e.kind();
        }
        if let Some(e) = cause.downcast_ref::<w2s_cli::manifest::ManifestError>() {
            return e.kind();
        }
    }
    "Error"
}
