//! Command-line pipeline: synthesize data, train, generate, evaluate, and
//! run ablations from a JSON configuration with flag overrides.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use interformer::model::Setup;
use serde_json::{json, Value};

pub use config::{resolve, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "interformer",
    version,
    about = "Reaction generation for two-person skeleton interactions"
)]
pub struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed; also sets the synth, train, gen and classifier seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set train.adam.alpha=3e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train and test datasets.
    Synth(SynthArgs),
    /// Train a model on the training split.
    Train(TrainArgs),
    /// Generate reactions for an action.
    Generate(GenerateArgs),
    /// Evaluate a trained model on the test split.
    Eval(EvalArgs),
    /// Train and evaluate the ablation variants over several seeds.
    Ablate(AblateArgs),
}

fn parse_setup(s: &str) -> Result<Setup, String> {
    match s.to_ascii_uppercase().as_str() {
        "S1" => Ok(Setup::S1),
        "S2" => Ok(Setup::S2),
        "S3" => Ok(Setup::S3),
        "S4" => Ok(Setup::S4),
        _ => Err(format!("unknown setup `{s}` (expected S1, S2, S3 or S4)")),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub test_samples_per_class: Option<usize>,
    #[arg(long)]
    pub joints: Option<usize>,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    /// Minimum and maximum length, e.g. `20,30`.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub t_range: Option<Vec<usize>>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
}

/// Model and optimisation flags shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, value_name = "PATH")]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam step size.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda_ff: Option<f64>,
    #[arg(long)]
    pub input_noise_sd: Option<f64>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub temporal_heads: Option<usize>,
    #[arg(long)]
    pub spatial_heads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Ablation setup applied to the model switches.
    #[arg(long, value_parser = parse_setup)]
    pub setup: Option<Setup>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Continue from a training state written by an earlier run.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenFlags {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub chunk_len: Option<usize>,
    #[arg(long)]
    pub eos_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub gen: GenFlags,
    /// Action sequence file.
    #[arg(long, value_name = "PATH")]
    pub action: Option<PathBuf>,
    /// Sequence file whose first frame seeds the reaction.
    #[arg(long, value_name = "PATH")]
    pub first_frame: Option<PathBuf>,
    /// Take action and first frame from sample N of the test split instead.
    #[arg(long, value_name = "N", conflicts_with = "action")]
    pub sample: Option<usize>,
    #[arg(long, value_name = "PATH")]
    pub test_data: Option<PathBuf>,
    /// Number of noisy samples to draw (needs a positive noise sd).
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Generate in chunks of `chunk_len` frames.
    #[arg(long)]
    pub long: bool,
    /// Also write a per-frame CSV next to each sequence file.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub gen: GenFlags,
    #[arg(long, value_name = "PATH")]
    pub train_data: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub test_data: Option<PathBuf>,
    /// Classifier checkpoint to load instead of training one.
    #[arg(long, value_name = "PATH")]
    pub classifier: Option<PathBuf>,
    /// Classifier training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, value_name = "PATH")]
    pub test_data: Option<PathBuf>,
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Comma-separated setups to compare.
    #[arg(long, value_delimiter = ',', value_parser = parse_setup)]
    pub setups: Option<Vec<Setup>>,
    /// Skip the single-head variants of the full setup.
    #[arg(long)]
    pub no_multihead_grid: bool,
    /// Classifier training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn put<T: serde::Serialize>(&mut self, key: &str, v: &Option<T>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), json!(v)));
        }
    }

    fn train(&mut self, f: &TrainFlags) {
        self.put("paths.train_data", &f.train_data);
        self.put("train.steps", &f.steps);
        self.put("train.batch_size", &f.batch_size);
        self.put("train.adam.alpha", &f.alpha);
        self.put("train.lambda_ff", &f.lambda_ff);
        self.put("train.input_noise_sd", &f.input_noise_sd);
        self.put("model.n_layers", &f.n_layers);
        self.put("model.temporal_heads", &f.temporal_heads);
        self.put("model.spatial_heads", &f.spatial_heads);
    }

    fn gen(&mut self, f: &GenFlags) {
        self.put("paths.checkpoint", &f.checkpoint);
        self.put("gen.noise_sd", &f.noise_sd);
        self.put("gen.max_len", &f.max_len);
        self.put("gen.chunk_len", &f.chunk_len);
        self.put("gen.eos_threshold", &f.eos_threshold);
    }
}

impl Cli {
    /// Resolves the configuration: defaults, then `--config`, then
    /// `--set`, then the dedicated flags.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut o = Overrides(Vec::new());
        for s in &self.set {
            o.0.push(config::parse_assignment(s)?);
        }
        if let Some(seed) = self.seed {
            for key in [
                "seed",
                "synth.seed",
                "train.seed",
                "gen.seed",
                "classifier.seed",
            ] {
                o.0.push((key.into(), json!(seed)));
            }
        }
        o.put("out", &self.out);
        match &self.command {
            Command::Synth(a) => {
                o.put("synth.samples_per_class", &a.samples_per_class);
                o.put("data.test_samples_per_class", &a.test_samples_per_class);
                o.put("synth.joints", &a.joints);
                o.put("synth.classes", &a.classes);
                o.put("synth.t_range", &a.t_range);
                o.put("synth.noise_sd", &a.noise_sd);
            }
            Command::Train(a) => {
                o.train(&a.flags);
                o.put("train.checkpoint_every", &a.checkpoint_every);
                if let Some(setup) = a.setup {
                    let m = interformer::model::ModelConfig::default().with_setup(setup);
                    o.put("model.use_spatial", &Some(m.use_spatial));
                    o.put("model.use_adjacency", &Some(m.use_adjacency));
                    o.put("model.use_distance", &Some(m.use_distance));
                }
            }
            Command::Generate(a) => {
                o.gen(&a.gen);
                o.put("paths.action", &a.action);
                o.put("paths.first_frame", &a.first_frame);
                o.put("paths.test_data", &a.test_data);
            }
            Command::Eval(a) => {
                o.gen(&a.gen);
                o.put("paths.train_data", &a.train_data);
                o.put("paths.test_data", &a.test_data);
                o.put("paths.classifier", &a.classifier);
                o.put("classifier.epochs", &a.epochs);
            }
            Command::Ablate(a) => {
                o.train(&a.flags);
                o.put("paths.test_data", &a.test_data);
                o.put("ablate.seeds", &a.seeds);
                o.put("ablate.setups", &a.setups);
                if a.no_multihead_grid {
                    o.put("ablate.multihead_grid", &Some(false));
                }
                o.put("classifier.epochs", &a.epochs);
            }
        }
        config::resolve(self.config.as_deref(), &o.0)
    }
}

/// Parses nothing; runs an already parsed command line.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.run_config()?;
    match &cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Train(a) => commands::train(&cfg, a.resume.as_deref()).map(|_| ()),
        Command::Generate(a) => commands::generate(&cfg, a.sample, a.samples, a.long, a.csv),
        Command::Eval(_) => commands::eval(&cfg).map(|_| ()),
        Command::Ablate(_) => commands::ablate(&cfg).map(|_| ()),
    }
}
