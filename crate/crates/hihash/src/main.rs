use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use hihash::cli::{
    cmd_encode, cmd_eval, cmd_gen_data, cmd_search, cmd_train, CliError, RunConfig,
};

/// Hierarchy-preserving learning to hash: generate data, train an encoder,
/// pack binary codes, and evaluate flat and hierarchical retrieval.
#[derive(Parser, Debug)]
#[command(name = "hihash", version, about)]
struct Args {
    /// TOML config file (flat key-value with dotted sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Code length L in bits.
    #[arg(long, global = true)]
    bits: Option<usize>,

    /// Generic K: metric cut-offs (eval) and result count (search).
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Force deterministic reduction orders (always on; accepted for
    /// interface stability).
    #[arg(long, global = true)]
    deterministic: Option<bool>,

    /// Print machine-readable JSON to stdout.
    #[arg(long, global = true)]
    json: bool,

    /// Override any config key, e.g. --set train.lr_start=0.05 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic hierarchical dataset and write it to disk.
    GenData,
    /// Train the encoder: alternating center estimation and SGD, with a
    /// two-stage box-penalty schedule.
    Train {
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Embed a dataset with a trained encoder and pack sign codes.
    Encode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate query codes against database codes (mAP, mAHP, nDCG).
    Eval {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        database: Option<PathBuf>,
        /// Write per-query metric values to this CSV.
        #[arg(long)]
        per_query_csv: Option<PathBuf>,
        /// Exclude each query's own id from the database side.
        #[arg(long)]
        exclude_self: bool,
    },
    /// Rank a database against one query (by item id or raw feature).
    Search {
        #[arg(long)]
        database: Option<PathBuf>,
        /// Query by database item id.
        #[arg(long)]
        id: Option<u64>,
        /// Query by raw feature vector, comma-separated floats.
        #[arg(long)]
        feature: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn toml_path(p: &std::path::Path) -> String {
    format!("{:?}", p.display().to_string())
}

fn collect_overrides(args: &Args) -> Result<Vec<(String, String)>, CliError> {
    let mut overrides = Vec::new();
    for pair in &args.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            CliError::Config(format!("--set expects KEY=VALUE, got {pair:?}"))
        })?;
        overrides.push((key.trim().to_string(), value.trim().to_string()));
    }
    if let Some(seed) = args.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &args.out {
        overrides.push(("out".into(), toml_path(out)));
    }
    if let Some(bits) = args.bits {
        overrides.push(("encoder.bits".into(), bits.to_string()));
    }
    if let Some(k) = args.k {
        overrides.push(("eval.mahp_k".into(), k.to_string()));
        overrides.push(("eval.ndcg_k".into(), k.to_string()));
        overrides.push(("search.k".into(), k.to_string()));
    }
    if let Some(det) = args.deterministic {
        overrides.push(("deterministic".into(), det.to_string()));
    }
    match &args.command {
        Command::GenData => {}
        Command::Train { resume } => {
            if let Some(p) = resume {
                overrides.push(("train.resume".into(), toml_path(p)));
            }
        }
        Command::Encode {
            checkpoint,
            features,
            labels,
            output,
        } => {
            for (key, value) in [
                ("encode.checkpoint", checkpoint),
                ("encode.features", features),
                ("encode.labels", labels),
                ("encode.output", output),
            ] {
                if let Some(p) = value {
                    overrides.push((key.into(), toml_path(p)));
                }
            }
        }
        Command::Eval {
            queries,
            database,
            per_query_csv,
            exclude_self,
        } => {
            for (key, value) in [
                ("eval.queries", queries),
                ("eval.database", database),
                ("eval.per_query_csv", per_query_csv),
            ] {
                if let Some(p) = value {
                    overrides.push((key.into(), toml_path(p)));
                }
            }
            if *exclude_self {
                overrides.push(("eval.exclude_self".into(), "true".into()));
            }
        }
        Command::Search {
            database,
            id,
            feature,
            checkpoint,
        } => {
            if let Some(p) = database {
                overrides.push(("search.database".into(), toml_path(p)));
            }
            if let Some(p) = checkpoint {
                overrides.push(("search.checkpoint".into(), toml_path(p)));
            }
            if let Some(id) = id {
                overrides.push(("search.id".into(), id.to_string()));
            }
            if let Some(feature) = feature {
                let floats: Result<Vec<f64>, _> =
                    feature.split(',').map(|t| t.trim().parse::<f64>()).collect();
                let floats = floats.map_err(|e| {
                    CliError::Config(format!("bad --feature value {feature:?}: {e}"))
                })?;
                let rendered: Vec<String> = floats.iter().map(|v| format!("{v:?}")).collect();
                overrides.push(("search.feature".into(), format!("[{}]", rendered.join(","))));
            }
        }
    }
    Ok(overrides)
}

fn emit<T: serde::Serialize>(json: bool, summary: &T, human: String) {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(summary).expect("summary serializes")
        );
    } else {
        println!("{human}");
    }
}

fn run(args: &Args) -> Result<(), CliError> {
    let overrides = collect_overrides(args)?;
    let cfg = RunConfig::load(args.config.as_deref(), &overrides)?;
    match &args.command {
        Command::GenData => {
            let summary = cmd_gen_data(&cfg)?;
            emit(args.json, &summary, summary.human());
        }
        Command::Train { .. } => {
            let summary = cmd_train(&cfg)?;
            emit(args.json, &summary, summary.human());
        }
        Command::Encode { .. } => {
            let summary = cmd_encode(&cfg)?;
            emit(args.json, &summary, summary.human());
        }
        Command::Eval { .. } => {
            let summary = cmd_eval(&cfg)?;
            emit(args.json, &summary, summary.human());
        }
        Command::Search { .. } => {
            let summary = cmd_search(&cfg)?;
            emit(args.json, &summary, summary.human());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(args) => args,
        Err(e) => {
            use clap::error::ErrorKind;
            // help/version are success paths; anything else is a usage error
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

// keep clap's derive checked even when only building the lib
#[allow(dead_code)]
fn assert_cli() {
    Args::command().debug_assert();
}
