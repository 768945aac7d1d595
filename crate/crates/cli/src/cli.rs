//! Command-line grammar.

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "posedir", version, about = "Latent pose and expression directions on a toy face generator")]
pub struct Cli {
    /// Workspace root holding checkpoints, corpora and manifests.
    #[arg(long, global = true, env = crate::workspace::ROOT_ENV, default_value = ".")]
    pub workspace: PathBuf,
    /// Seed for every random draw the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the manifest (default `manifests/<command>.json`).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Synthetic,
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "self")]
    SelfReenactment,
    Cross,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the toy generator, its shape model and the frozen embedder.
    Init,
    /// Train the image-to-pose regressor.
    TrainRegressor(TrainRegressorArgs),
    /// Estimate pose quantiles for rescaling.
    Calibrate(CalibrateArgs),
    /// Train a direction matrix.
    TrainDirections(TrainDirectionsArgs),
    /// Continue training a direction matrix on paired frames.
    FinetunePaired(FinetuneArgs),
    /// Render a real-analog corpus.
    BuildCorpus(BuildCorpusArgs),
    /// Train the inversion encoder.
    TrainEncoder(TrainEncoderArgs),
    /// Invert an image to a layered code.
    Invert(InvertArgs),
    /// Transfer pose and expression from a target image onto a source image.
    Reenact(ReenactArgs),
    /// Set one attribute of an image to an absolute value.
    Edit(EditArgs),
    /// Set yaw, pitch and roll to zero.
    Frontalize(FrontalizeArgs),
    /// Score reenactment over a set of pairs.
    Eval(EvalArgs),
    /// Linearity or disentanglement analysis of a direction matrix.
    Analyze(AnalyzeArgs),
    /// Serve the editing API over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainRegressorArgs {
    /// JSON file with regressor settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
}

#[derive(Debug, Args)]
pub struct TrainDirectionsArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    pub scheme: SchemeArg,
    /// Name of the saved matrix (default: the scheme name).
    #[arg(long)]
    pub name: Option<String>,
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub init_std: Option<f64>,
    /// Prior codes drawn into the synthetic pool.
    #[arg(long, default_value_t = 1000)]
    pub pool_size: usize,
    /// Corpus whose inverted images form the real pool (mixed scheme).
    #[arg(long, default_value = "train")]
    pub corpus: String,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Matrix to start from.
    #[arg(long, default_value = "mixed")]
    pub from: String,
    #[arg(long, default_value = "paired")]
    pub name: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Same-identity frame pairs in the pool.
    #[arg(long, default_value_t = 400)]
    pub pairs: usize,
}

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value = "train")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct TrainEncoderArgs {
    /// Corpus used for the held-out reconstruction check.
    #[arg(long, default_value = "train")]
    pub corpus: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Output code checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional PNG of the inverted render.
    #[arg(long)]
    pub preview: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("mode").args(["self_reenactment", "cross"])))]
pub struct ReenactArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Source and target show the same person; CSIM is taken against the target.
    #[arg(long = "self")]
    pub self_reenactment: bool,
    /// Different people; CSIM is taken against the source (default).
    #[arg(long)]
    pub cross: bool,
    #[arg(long, default_value = "synthetic")]
    pub directions: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Pivotal-tuning steps on the source before rendering.
    #[arg(long, default_value_t = 0)]
    pub tune_steps: usize,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Attribute name, e.g. yaw, pitch, roll, smile, open_mouth, exp2.
    #[arg(long)]
    pub attr: String,
    /// Absolute target in the attribute's raw units (degrees for angles).
    #[arg(long, allow_hyphen_values = true)]
    pub value: f64,
    #[arg(long, default_value = "synthetic")]
    pub directions: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FrontalizeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub directions: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    #[arg(long, default_value = "synthetic")]
    pub directions: String,
    /// Cross mode only: draw pairs from this corpus, inverted by the encoder.
    #[arg(long)]
    pub corpus: Option<String>,
    /// Report directory (default `reports/eval-<mode>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("analysis").required(true).args(["linearity", "disentanglement"])))]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub linearity: bool,
    #[arg(long)]
    pub disentanglement: bool,
    /// Attribute edited by the disentanglement analysis.
    #[arg(long, default_value = "yaw")]
    pub attr: String,
    /// Edits per attribute (linearity) or pairs (disentanglement).
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value = "synthetic")]
    pub directions: String,
    /// Output directory (default `reports`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    #[arg(long, default_value = "synthetic")]
    pub directions: String,
    /// Idle seconds before a session expires.
    #[arg(long, default_value_t = 1800)]
    pub session_ttl_secs: u64,
    #[arg(long, default_value_t = 64)]
    pub max_sessions: usize,
    /// Sessions allowed to hold a tuned generator copy at once.
    #[arg(long, default_value_t = 8)]
    pub max_tuned: usize,
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn grammar_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn negative_values_parse() {
        let cli = Cli::parse_from(["posedir", "edit", "--image", "a.png", "--attr", "yaw", "--value", "-20", "--out", "b.png"]);
        match cli.command {
            Command::Edit(a) => assert_eq!(a.value, -20.0),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn defaults() {
        let cli = Cli::parse_from(["posedir", "eval", "--mode", "self"]);
        assert_eq!(cli.seed, 0);
        match cli.command {
            Command::Eval(a) => {
                assert_eq!(a.mode, ModeArg::SelfReenactment);
                assert_eq!(a.pairs, 20);
                assert_eq!(a.directions, "synthetic");
            }
            other => panic!("parsed {other:?}"),
        }
    }
}
