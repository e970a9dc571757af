use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bccnn", version, about = "Bilingual chunk-CNN sentence encoder and neural joint model toolkit")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `key = value` settings applied before the command-line flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

pub const SUBCOMMANDS: [&str; 9] = [
    "train-encoder",
    "train-nnjm",
    "embed",
    "score",
    "decode",
    "rescore",
    "grad-check",
    "gen-synthetic",
    "eval-retrieval",
];

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the two sentence encoders with the bilingual max-margin objective.
    TrainEncoder(TrainEncoderArgs),
    /// Train the neural joint model on an aligned corpus.
    TrainNnjm(TrainNnjmArgs),
    /// Encode one sentence per input line.
    Embed(EmbedArgs),
    /// Per-word joint-model log-probabilities of aligned sentence pairs.
    Score(ScoreArgs),
    /// Monotone phrase-based decoding with the joint model as a feature.
    Decode(DecodeArgs),
    /// Re-rank an n-best list with log-linear weights.
    Rescore(RescoreArgs),
    /// Finite-difference gradient checks of every network.
    GradCheck(GradCheckArgs),
    /// Write a seeded synthetic parallel corpus.
    GenSynthetic(GenSyntheticArgs),
    /// Precision@1 of a trained encoder pair on a parallel corpus.
    EvalRetrieval(EvalRetrievalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    /// Source sentences, one per line.
    #[arg(long)]
    pub src: PathBuf,
    /// Target sentences, one per line.
    #[arg(long)]
    pub tgt: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionArg {
    Relu,
    Identity,
}

#[derive(Args, Debug, Clone)]
pub struct EncoderArgs {
    #[arg(long, default_value_t = 192)]
    pub embed_dim: usize,
    /// Convolution window h.
    #[arg(long, default_value_t = 3)]
    pub window: usize,
    /// Number of convolution filters L.
    #[arg(long, default_value_t = 100)]
    pub filters: usize,
    /// Pooling chunks C.
    #[arg(long, default_value_t = 4)]
    pub chunks: usize,
    /// Width of the fully connected layers and the shared space.
    #[arg(long, default_value_t = 192)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, value_enum, default_value_t = ProjectionArg::Relu)]
    pub projection: ProjectionArg,
    /// Initial value of every bias.
    #[arg(long, default_value_t = 0.1)]
    pub init_bias: f64,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub freeze_embeddings: bool,
    /// Maximum vocabulary size per language (most frequent words).
    #[arg(long, default_value_t = 16_000)]
    pub vocab_size: usize,
    /// word2vec text vectors for the source side.
    #[arg(long)]
    pub src_embeddings: Option<PathBuf>,
    /// word2vec text vectors for the target side.
    #[arg(long)]
    pub tgt_embeddings: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainEncoderArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Output snapshot.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub encoder: EncoderArgs,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
    /// L2 weight.
    #[arg(long, default_value_t = 1e-4)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Negatives per pair per epoch.
    #[arg(long, default_value_t = 1)]
    pub negatives: usize,
    #[arg(long, default_value_t = false, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub source_negatives: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Trailing fraction of pairs held out for the epoch log.
    #[arg(long, default_value_t = 0.05)]
    pub heldout: f64,
    #[arg(long, default_value_t = 99)]
    pub distractors: usize,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveArg {
    Nce,
    Softmax,
}

#[derive(Args, Debug, Clone)]
pub struct TrainNnjmArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Pharaoh `i-j` alignments, one line per pair.
    #[arg(long)]
    pub align: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder snapshot providing the sentence vector.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// n-gram order n.
    #[arg(long, default_value_t = 4)]
    pub order: usize,
    /// Source window m.
    #[arg(long, default_value_t = 11)]
    pub source_window: usize,
    #[arg(long, default_value_t = 192)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    #[arg(long, default_value_t = 16_000)]
    pub source_vocab: usize,
    #[arg(long, default_value_t = 16_000)]
    pub target_vocab: usize,
    #[arg(long, default_value_t = 32_000)]
    pub output_vocab: usize,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Nce)]
    pub objective: ObjectiveArg,
    /// Noise samples per example.
    #[arg(long, default_value_t = 100)]
    pub kappa: usize,
    #[arg(long, default_value_t = 0.75)]
    pub noise_exponent: f64,
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub redraw_gold: bool,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Learning-rate factor applied when held-out cross-entropy rises.
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub heldout: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SideArg {
    Source,
    Target,
}

#[derive(Args, Debug, Clone)]
pub struct EmbedArgs {
    /// Encoder snapshot.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = SideArg::Source)]
    pub side: SideArg,
    /// Sentences to encode (default: standard input).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Emit the projected shared-space vector instead of the encoder output.
    #[arg(long)]
    pub shared: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeArg {
    Exact,
    SelfNorm,
}

#[derive(Args, Debug, Clone)]
pub struct NeuralArgs {
    /// Joint-model snapshot.
    #[arg(long)]
    pub nnjm: Option<PathBuf>,
    /// Encoder snapshot for the sentence vector (zeros when absent).
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::SelfNorm)]
    pub mode: ModeArg,
}

#[derive(Args, Debug, Clone)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub align: PathBuf,
    #[command(flatten)]
    pub neural: NeuralArgs,
    /// Print one total per sentence instead of per-word scores.
    #[arg(long)]
    pub totals: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    /// Source sentences (default: standard input).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub phrase_table: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub neural: NeuralArgs,
    #[arg(long, default_value_t = 100)]
    pub beam: usize,
    /// Hypotheses per sentence; above 1 the output is an n-best list.
    #[arg(long, default_value_t = 1)]
    pub nbest: usize,
    #[arg(long, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub passthrough: bool,
}

#[derive(Args, Debug, Clone)]
pub struct RescoreArgs {
    /// n-best list `id ||| words ||| alignment ||| features`.
    #[arg(long)]
    pub nbest: PathBuf,
    /// Source sentences indexed by the n-best ids.
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub neural: NeuralArgs,
}

#[derive(Args, Debug, Clone)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindArg {
    Dictionary,
    Long,
    Disambiguation,
    Noisy,
}

#[derive(Args, Debug, Clone)]
pub struct GenSyntheticArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub pairs: usize,
    /// Content words per language (default depends on the kind).
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Independent draw sharing the seed's dictionary.
    #[arg(long, default_value_t = 0)]
    pub stream: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Writes `PREFIX.src`, `PREFIX.tgt` and `PREFIX.align`.
    #[arg(long, default_value = "corpus")]
    pub prefix: String,
}

#[derive(Args, Debug, Clone)]
pub struct EvalRetrievalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 99)]
    pub distractors: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}
