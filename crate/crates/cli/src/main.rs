//! `textstyle`: train, index, evaluate, retrieve, stylize and serve.

mod commands;
mod config;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{set, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "textstyle", version, about = "Text-driven style retrieval and neural style transfer")]
struct Cli {
    /// JSON run configuration; flags take precedence over its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Artifact directory [default: $TEXTSTYLE_DATA_DIR, else ./data]
    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,

    /// Seed for the split, initialization and batch order [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Longest image side after loading; larger images are downscaled [default: 128]
    #[arg(long, global = true)]
    max_side: Option<usize>,

    /// Feature extractor weights file [default: seeded initialization]
    #[arg(long, global = true, value_name = "FILE")]
    weights: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ManifestArg {
    /// Corpus manifest (JSON lines) [default: <data-dir>/manifest.jsonl]
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ArtifactArgs {
    /// Vocabulary file [default: <data-dir>/vocab.json]
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,

    /// Projection heads file [default: <data-dir>/heads.bin]
    #[arg(long, value_name = "FILE")]
    heads: Option<PathBuf>,

    /// Embedding index file [default: <data-dir>/index.bin]
    #[arg(long, value_name = "FILE")]
    index: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,

    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    learning_rate: Option<f64>,

    /// Pairs per batch [default: 28]
    #[arg(long)]
    batch_size: Option<usize>,

    /// Joint embedding size [default: 128]
    #[arg(long)]
    embedding_size: Option<usize>,

    /// Margin for mismatched pairs [default: 0.1]
    #[arg(long)]
    margin: Option<f64>,

    /// Minimum total occurrences for a vocabulary token [default: 10]
    #[arg(long)]
    min_count: Option<usize>,
}

#[derive(Debug, Args)]
struct StyleArgs {
    /// Optimization iterations [default: 200]
    #[arg(long)]
    iterations: Option<usize>,

    /// Content layers, comma separated [default: 3]
    #[arg(long, value_delimiter = ',')]
    content_layers: Option<Vec<usize>>,

    /// Content loss weight [default: 0.001]
    #[arg(long)]
    content_weight: Option<f64>,

    /// Style layers, comma separated [default: 2,4,6,7]
    #[arg(long, value_delimiter = ',')]
    style_layers: Option<Vec<usize>>,

    /// Style layer weights, comma separated [default: 400,50,10,5]
    #[arg(long, value_delimiter = ',')]
    style_weights: Option<Vec<f64>>,

    /// Total variation weight [default: 0.005]
    #[arg(long)]
    tv_weight: Option<f64>,

    /// Learning rate before the decay iteration [default: 3]
    #[arg(long)]
    lr_initial: Option<f64>,

    /// Learning rate from the decay iteration on [default: 0.1]
    #[arg(long)]
    lr_after: Option<f64>,

    /// First iteration using the lower learning rate [default: 180]
    #[arg(long)]
    decay_at: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the vocabulary from the training split and train the projection heads
    TrainRetrieval {
        #[command(flatten)]
        manifest: ManifestArg,
        /// Vocabulary output [default: <data-dir>/vocab.json]
        #[arg(long, value_name = "FILE")]
        vocab_out: Option<PathBuf>,
        /// Heads output [default: <data-dir>/heads.bin]
        #[arg(long, value_name = "FILE")]
        heads_out: Option<PathBuf>,
        /// Per-epoch mean batch loss as CSV
        #[arg(long, value_name = "FILE")]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Build the vocabulary, train (or load) the heads and index every corpus image
    BuildIndex {
        #[command(flatten)]
        manifest: ManifestArg,
        /// Vocabulary output [default: <data-dir>/vocab.json]
        #[arg(long, value_name = "FILE")]
        vocab_out: Option<PathBuf>,
        /// Index output [default: <data-dir>/index.bin]
        #[arg(long, value_name = "FILE")]
        index_out: Option<PathBuf>,
        /// Use these trained heads instead of training new ones
        #[arg(long, value_name = "FILE")]
        heads: Option<PathBuf>,
        /// Where newly trained heads are written [default: <data-dir>/heads.bin]
        #[arg(long, value_name = "FILE")]
        heads_out: Option<PathBuf>,
        /// Also write the feature extractor weights used
        #[arg(long, value_name = "FILE")]
        weights_out: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Print MR, R@1, R@5 and R@10 for one split of the corpus
    EvalRetrieval {
        #[command(flatten)]
        manifest: ManifestArg,
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Queries to evaluate; the index is restricted to their images
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Rank indexed images for a style title and description
    Retrieve {
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Style title
        #[arg(long, default_value = "")]
        title: String,
        /// Freeform style description
        #[arg(long, default_value = "")]
        description: String,
        /// Number of results
        #[arg(short, long, default_value_t = 5)]
        k: usize,
    },
    /// Stylize a content image with a given style image
    Transfer {
        /// Content image (PNG or PPM)
        #[arg(long, value_name = "FILE")]
        content: PathBuf,
        /// Style image (PNG or PPM)
        #[arg(long, value_name = "FILE")]
        style: PathBuf,
        /// Output PNG
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Per-iteration losses as CSV
        #[arg(long, value_name = "FILE")]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        style_args: StyleArgs,
    },
    /// Retrieve a style image for the text, then stylize the content image with it
    Pipeline {
        #[command(flatten)]
        manifest: ManifestArg,
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Content image (PNG or PPM)
        #[arg(long, value_name = "FILE")]
        content: PathBuf,
        /// Style title
        #[arg(long, default_value = "")]
        title: String,
        /// Freeform style description
        #[arg(long, default_value = "")]
        description: String,
        /// Use this corpus image instead of the top-ranked one
        #[arg(long)]
        style_id: Option<String>,
        /// Output PNG
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Per-iteration losses as CSV
        #[arg(long, value_name = "FILE")]
        loss_csv: Option<PathBuf>,
        #[command(flatten)]
        style_args: StyleArgs,
    },
    /// Serve the HTTP API
    Serve {
        #[command(flatten)]
        manifest: ManifestArg,
        #[command(flatten)]
        artifacts: ArtifactArgs,
        /// Listen address
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Worker threads running transfer jobs
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Job records and results [default: <data-dir>/jobs]
        #[arg(long, value_name = "DIR")]
        jobs_dir: Option<PathBuf>,
        /// Built UI bundle served under /app
        #[arg(long, value_name = "DIR")]
        static_dir: Option<PathBuf>,
        /// Allowed CORS origin [default: any]
        #[arg(long)]
        cors_origin: Option<String>,
        #[command(flatten)]
        style_args: StyleArgs,
    },
}

impl ManifestArg {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.manifest, self.manifest.map(Some));
    }
}

impl ArtifactArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.vocab, self.vocab.map(Some));
        set(&mut cfg.heads, self.heads.map(Some));
        set(&mut cfg.index, self.index.map(Some));
    }
}

impl TrainArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.train.epochs, self.epochs);
        set(&mut cfg.train.learning_rate, self.learning_rate);
        set(&mut cfg.train.batch_size, self.batch_size);
        set(&mut cfg.train.embedding_size, self.embedding_size);
        set(&mut cfg.train.margin, self.margin);
        set(&mut cfg.min_count, self.min_count);
    }
}

impl StyleArgs {
    fn apply(self, cfg: &mut RunConfig) {
        let s = &mut cfg.style;
        set(&mut s.iterations, self.iterations);
        set(&mut s.content_layers, self.content_layers);
        set(&mut s.content_weight, self.content_weight);
        set(&mut s.style_layers, self.style_layers);
        set(&mut s.style_weights, self.style_weights);
        set(&mut s.tv_weight, self.tv_weight);
        set(&mut s.lr_initial, self.lr_initial);
        set(&mut s.lr_after, self.lr_after);
        set(&mut s.decay_at_iteration, self.decay_at);
    }
}

fn run(cli: Cli) -> textstyle::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.data_dir, cli.data_dir.map(Some));
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.max_side, cli.max_side);
    set(&mut cfg.weights, cli.weights.map(Some));

    match cli.command {
        Command::TrainRetrieval { manifest, vocab_out, heads_out, loss_csv, train } => {
            manifest.apply(&mut cfg);
            train.apply(&mut cfg);
            set(&mut cfg.vocab, vocab_out.map(Some));
            set(&mut cfg.heads, heads_out.map(Some));
            commands::train_retrieval(&cfg, loss_csv.as_deref())
        }
        Command::BuildIndex { manifest, vocab_out, index_out, heads, heads_out, weights_out, train } => {
            manifest.apply(&mut cfg);
            train.apply(&mut cfg);
            set(&mut cfg.vocab, vocab_out.map(Some));
            set(&mut cfg.index, index_out.map(Some));
            set(&mut cfg.heads, heads_out.map(Some));
            commands::build_index(&cfg, heads.as_deref(), weights_out.as_deref())
        }
        Command::EvalRetrieval { manifest, artifacts, split } => {
            manifest.apply(&mut cfg);
            artifacts.apply(&mut cfg);
            commands::eval_retrieval(&cfg, split)
        }
        Command::Retrieve { artifacts, title, description, k } => {
            artifacts.apply(&mut cfg);
            commands::retrieve(&cfg, &title, &description, k)
        }
        Command::Transfer { content, style, out, loss_csv, style_args } => {
            style_args.apply(&mut cfg);
            commands::transfer(&cfg, &content, &style, &out, loss_csv.as_deref())
        }
        Command::Pipeline {
            manifest,
            artifacts,
            content,
            title,
            description,
            style_id,
            out,
            loss_csv,
            style_args,
        } => {
            manifest.apply(&mut cfg);
            artifacts.apply(&mut cfg);
            style_args.apply(&mut cfg);
            commands::pipeline(
                &cfg,
                &content,
                &title,
                &description,
                style_id.as_deref(),
                &out,
                loss_csv.as_deref(),
            )
        }
        Command::Serve {
            manifest,
            artifacts,
            addr,
            workers,
            jobs_dir,
            static_dir,
            cors_origin,
            style_args,
        } => {
            manifest.apply(&mut cfg);
            artifacts.apply(&mut cfg);
            style_args.apply(&mut cfg);
            let mut service = textstyle_service::ServiceConfig::new(
                jobs_dir.unwrap_or_else(|| cfg.data_dir().join("jobs")),
            );
            service.workers = workers;
            service.static_dir = static_dir;
            service.cors_origin = cors_origin;
            service.style_defaults = cfg.style_config();
            commands::serve(&cfg, addr, service)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"seed": 4, "style": {"iterations": 9, "tv_weight": 0.5}}"#).unwrap();
        let cli = Cli::parse_from([
            "textstyle", "--config", path.to_str().unwrap(), "transfer", "--content", "c.png",
            "--style", "s.png", "--out", "o.png", "--iterations", "3",
        ]);
        let mut cfg = RunConfig::load(cli.config.as_deref().unwrap()).unwrap();
        let Command::Transfer { style_args, .. } = cli.command else { panic!() };
        style_args.apply(&mut cfg);
        assert_eq!(cfg.style.iterations, 3);
        assert_eq!(cfg.style.tv_weight, 0.5);
        assert_eq!(cfg.style_config().seed, 4);
    }
}
