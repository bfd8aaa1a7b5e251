//! Command-line grammar. Settings that also live in config files are taken
//! as strings and validated by [`RunConfig::set`], so a bad flag and a bad
//! file entry produce the same error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Metric;
use crate::config::{ConfigError, RunConfig};

/// Default neighbor count for cold start.
pub const DEFAULT_COLDSTART_M: usize = 10;

#[derive(Debug, Parser)]
#[command(name = "dynmf", version, about = "Dynamic neural matrix factorization of user content consumption")]
pub struct Cli {
    /// Config file with flat `key = value` lines or a JSON object.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for machine-readable results (default: $DYNMF_OUT_DIR or .).
    #[arg(long, global = true)]
    pub out_dir: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// Raise log verbosity; repeat for more.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub events: Option<String>,
    /// GloVe-format word embeddings.
    #[arg(long)]
    pub embeddings: Option<String>,
    /// Number of latent attributes.
    #[arg(long)]
    pub k: Option<String>,
    /// Embedding dimensionality (default: the embedding file's).
    #[arg(long)]
    pub d: Option<String>,
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    /// `uniform` or `zero`.
    #[arg(long)]
    pub initial_state: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub weight_decay: Option<String>,
    /// Independent initialisations; the lowest final loss is kept.
    #[arg(long)]
    pub restarts: Option<String>,
    #[arg(long)]
    pub min_active: Option<String>,
    #[arg(long)]
    pub min_count: Option<String>,
    /// Stopword list, one word per line (default: built-in English list).
    #[arg(long)]
    pub stopwords: Option<String>,
}

impl ModelArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        collect(&[
            ("events", &self.events),
            ("embeddings", &self.embeddings),
            ("k", &self.k),
            ("d", &self.d),
            ("alpha", &self.alpha),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("initial_state", &self.initial_state),
            ("batch_size", &self.batch_size),
            ("weight_decay", &self.weight_decay),
            ("restarts", &self.restarts),
            ("min_active", &self.min_active),
            ("min_count", &self.min_count),
            ("stopwords", &self.stopwords),
        ])
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic panel with ground truth.
    Synth {
        /// JSON generator settings.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (default: --out-dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on events and write a checkpoint with its sidecar files.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Checkpoint path (default: <out-dir>/model.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Drop each user's final N active periods before training.
        #[arg(long)]
        holdout: Option<usize>,
    },
    /// Held-out retrieval of each user's last period.
    Eval {
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        events: Option<String>,
        /// Holdout horizon in active periods.
        #[arg(long)]
        a: Option<String>,
        /// Comma-separated neighbor counts for MP@k.
        #[arg(long)]
        k: Option<String>,
        #[arg(long, value_enum, default_value = "both")]
        metric: Metric,
        #[arg(long)]
        fit_epochs: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit trajectories for the users in an event file with the model frozen.
    Infer {
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        events: Option<String>,
        #[arg(long)]
        fit_epochs: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interest weighting for a user with demographics but no history.
    Coldstart {
        #[arg(long)]
        ckpt: Option<String>,
        /// JSON object of demographic attributes.
        #[arg(long)]
        demographics: PathBuf,
        /// Trajectory store written by `trajectories` or `infer`; without
        /// it, trajectories are computed from --ckpt and --events.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        events: Option<String>,
        /// Number of demographic neighbors to average.
        #[arg(long, default_value_t = DEFAULT_COLDSTART_M)]
        m: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Word-intrusion items for every attribute, optionally scoring responses.
    Intrude {
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV with columns subject_id, attribute_index, chosen_token.
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    /// Per-user, per-period attribute weights as CSV.
    Trajectories {
        #[arg(long)]
        ckpt: Option<String>,
        #[arg(long)]
        events: Option<String>,
        #[arg(long)]
        fit_epochs: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// `small` (n=3, τ=4, d=5, K=3) or `medium`.
        #[arg(long, default_value = "small")]
        dims: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Held-out retrieval of the full model against one ablated variant.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        /// nonlin, dynamics or smoothing.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        a: Option<String>,
        /// Comma-separated neighbor counts for MP@k.
        #[arg(long)]
        eval_k: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validation MP@1 over a grid of K and α.
    Sweep {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated K values.
        #[arg(long)]
        grid_k: Option<String>,
        /// Comma-separated α values.
        #[arg(long)]
        grid_alpha: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn collect(items: &[(&'static str, &Option<String>)]) -> Vec<(&'static str, String)> {
    items.iter().filter_map(|(k, v)| v.as_ref().map(|v| (*k, v.clone()))).collect()
}

impl Cli {
    /// Flag overrides in the order they are applied to the configuration.
    pub fn flag_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = collect(&[("out_dir", &self.out_dir), ("seed", &self.seed)]);
        pairs.extend(match &self.command {
            Command::Synth { .. } | Command::Gradcheck { .. } => vec![],
            Command::Train { model, .. } => model.pairs(),
            Command::Eval { ckpt, events, a, k, fit_epochs, .. } => collect(&[
                ("checkpoint", ckpt),
                ("events", events),
                ("a", a),
                ("eval_k", k),
                ("fit_epochs", fit_epochs),
            ]),
            Command::Infer { ckpt, events, fit_epochs, .. } | Command::Trajectories { ckpt, events, fit_epochs, .. } => {
                collect(&[("checkpoint", ckpt), ("events", events), ("fit_epochs", fit_epochs)])
            }
            Command::Coldstart { ckpt, events, .. } => collect(&[("checkpoint", ckpt), ("events", events)]),
            Command::Intrude { ckpt, .. } => collect(&[("checkpoint", ckpt)]),
            Command::Ablate { model, mode, a, eval_k, .. } => {
                let mut p = model.pairs();
                p.push(("ablation", mode.clone()));
                p.extend(collect(&[("a", a), ("eval_k", eval_k)]));
                p
            }
            Command::Sweep { model, grid_k, grid_alpha, .. } => {
                let mut p = model.pairs();
                p.extend(collect(&[("grid_k", grid_k), ("grid_alpha", grid_alpha)]));
                p
            }
        });
        pairs
    }

    pub fn run_config(&self) -> Result<RunConfig, ConfigError> {
        RunConfig::resolve(self.config.as_deref(), &self.flag_pairs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("dynmf").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_reach_the_config() {
        let cli = parse(&["train", "--alpha", "0.75", "--k", "12", "--seed", "9"]);
        let cfg = cli.run_config().unwrap();
        assert_eq!((cfg.alpha, cfg.k, cfg.seed), (0.75, 12, 9));
    }

    #[test]
    fn out_of_range_flag_names_its_key() {
        let err = parse(&["train", "--alpha", "1.5"]).run_config().unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref key, .. } if key == "alpha"));
    }

    #[test]
    fn eval_k_is_a_neighbor_list() {
        let cfg = parse(&["eval", "--k", "1,5", "--a", "2"]).run_config().unwrap();
        assert_eq!(cfg.eval_k, [1, 5]);
        assert_eq!(cfg.a, 2);
        assert_eq!(cfg.k, 30);
    }

    #[test]
    fn ablate_mode_is_validated() {
        assert!(parse(&["ablate", "--mode", "dynamics"]).run_config().is_ok());
        assert!(parse(&["ablate", "--mode", "everything"]).run_config().is_err());
    }
}
