use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nalp::data::{DatasetFormat, Split};
use nalp::math::Aggregator;
use nalp::model::{parse_aggregator, Mode, ModelConfig, PairEncoder, TypePairing};
use nalp::sampling::{Mechanism, NegSamplerConfig, ValueDomain};
use nalp::training::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "nalp", version, about = "Train and evaluate NaLP-family link predictors on n-ary facts")]
pub struct Cli {
    /// Worker threads for ranking and analysis (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write the best checkpoint.
    Train(TrainCmd),
    /// Rank every position of a split against a checkpoint.
    Evaluate(EvaluateCmd),
    /// List the value substitutions of one fact that are hardest to tell apart.
    Analyze(AnalyzeCmd),
    /// Derive a dataset with fewer binary facts.
    Subset(SubsetCmd),
    /// Compare analytic gradients with central differences on a random model.
    GradCheck(GradCheckCmd),
    /// Closed-form parameter and multiply-add counts.
    Flops(FlopsCmd),
}

/// Model family member: `+` selects the mixed negative sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub mode: Mode,
    pub mechanism: Mechanism,
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (base, mechanism) = match s.strip_suffix('+') {
            Some(base) => (base, Mechanism::Mixed),
            None => (s, Mechanism::Conventional),
        };
        let mode = base
            .parse::<Mode>()
            .map_err(|_| format!("unknown mode {s:?} (expected nalp, tnalp, nalp+ or tnalp+)"))?;
        Ok(Self { mode, mechanism })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let plus = if self.mechanism == Mechanism::Mixed { "+" } else { "" };
        write!(f, "{}{plus}", self.mode)
    }
}

/// Resolved flags as `key=value` lines, in flag order.
#[derive(Default)]
pub struct Echo(Vec<(String, String)>);

impl Echo {
    pub fn set(&mut self, key: &str, value: impl fmt::Display) -> &mut Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding train/valid/test files.
    #[arg(long)]
    pub dataset: PathBuf,

    #[arg(long, default_value = "jsonl-rv")]
    pub format: DatasetFormat,
}

impl DataArgs {
    pub fn echo(&self, e: &mut Echo) {
        e.set("dataset", self.dataset.display()).set("format", self.format);
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// nalp, tnalp, nalp+ or tnalp+.
    #[arg(long, default_value = "nalp")]
    pub mode: Variant,

    /// Pair encoder: conv, plus or mul.
    #[arg(long, default_value = "conv")]
    pub encoder: PairEncoder,

    /// Reduction over pairwise relatedness: min, emax or emean.
    #[arg(long, default_value = "min", value_parser = parse_aggregator)]
    pub aggregator: Aggregator,

    /// How roles meet values in the type branch: diagonal or cross.
    #[arg(long, default_value = "diagonal")]
    pub type_pairing: TypePairing,

    /// Embedding size.
    #[arg(long, default_value_t = 100)]
    pub k: usize,

    /// Type embedding size.
    #[arg(long, default_value_t = 20)]
    pub k_type: usize,

    /// Pair encoder width.
    #[arg(long = "nf", default_value_t = 200)]
    pub n_filters: usize,

    #[arg(long, default_value_t = 1200)]
    pub n_gfcn: usize,

    #[arg(long, default_value_t = 100)]
    pub n_tfcn: usize,
}

impl ModelArgs {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode.mode,
            pair_encoder: self.encoder,
            aggregator: self.aggregator,
            type_pairing: self.type_pairing,
        }
    }

    pub fn echo(&self, e: &mut Echo) {
        e.set("mode", self.mode)
            .set("encoder", self.encoder)
            .set("aggregator", self.aggregator.name())
            .set("type_pairing", self.type_pairing)
            .set("k", self.k)
            .set("k_type", self.k_type)
            .set("nf", self.n_filters)
            .set("n_gfcn", self.n_gfcn)
            .set("n_tfcn", self.n_tfcn);
    }
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub model: ModelArgs,

    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,

    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,

    #[arg(long, default_value_t = 5000)]
    pub max_epochs: usize,

    /// Epochs between validation probes.
    #[arg(long, default_value_t = 5)]
    pub eval_every: usize,

    /// Probes without improvement before stopping.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,

    /// Queries per probe (0 = all).
    #[arg(long, default_value_t = 2000)]
    pub probe_cap: usize,

    #[arg(long, default_value = "valid")]
    pub probe_split: Split,

    /// Chance that the mixed sampler corrupts a single element instead.
    #[arg(long, default_value_t = 0.5)]
    pub branch_prob: f64,

    /// Replacement values for the conventional sampler: role-specific or global.
    #[arg(long, default_value = "role-specific")]
    pub value_domain: ValueDomain,

    #[arg(long, default_value_t = 100)]
    pub max_retries: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out: PathBuf,
}

impl TrainCmd {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            k: self.model.k,
            k_type: self.model.k_type,
            n_filters: self.model.n_filters,
            n_gfcn: self.model.n_gfcn,
            n_tfcn: self.model.n_tfcn,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            max_epochs: self.max_epochs,
            eval_every: self.eval_every,
            patience: self.patience,
            probe_cap: (self.probe_cap > 0).then_some(self.probe_cap),
            probe_split: self.probe_split,
            seed: self.seed,
            model: self.model.config(),
            sampler: NegSamplerConfig {
                mechanism: self.model.mode.mechanism,
                branch_prob: self.branch_prob,
                value_domain: self.value_domain,
                max_retries: self.max_retries,
            },
        }
    }

    pub fn echo(&self, e: &mut Echo) {
        e.set("command", "train");
        self.data.echo(e);
        self.model.echo(e);
        e.set("batch_size", self.batch_size)
            .set("lr", self.lr)
            .set("max_epochs", self.max_epochs)
            .set("eval_every", self.eval_every)
            .set("patience", self.patience)
            .set("probe_cap", self.probe_cap)
            .set("probe_split", self.probe_split.name())
            .set("sampler", self.model.mode.mechanism)
            .set("branch_prob", self.branch_prob)
            .set("value_domain", self.value_domain)
            .set("max_retries", self.max_retries)
            .set("seed", self.seed)
            .set("out", self.out.display());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Role,
    Value,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Ties {
    Optimistic,
    Pessimistic,
}

#[derive(Args, Debug)]
pub struct EvaluateCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, value_enum, default_value = "both")]
    pub task: Task,

    #[arg(long, default_value = "test")]
    pub split: Split,

    /// Rank against every candidate, known facts included.
    #[arg(long)]
    pub raw: bool,

    #[arg(long, value_enum, default_value = "optimistic")]
    pub ties: Ties,

    #[arg(long)]
    pub out: PathBuf,
}

impl EvaluateCmd {
    pub fn echo(&self, e: &mut Echo) {
        e.set("command", "evaluate").set("checkpoint", self.checkpoint.display());
        self.data.echo(e);
        e.set("task", format!("{:?}", self.task).to_lowercase())
            .set("split", self.split.name())
            .set("raw", self.raw)
            .set("ties", format!("{:?}", self.ties).to_lowercase())
            .set("out", self.out.display());
    }
}

#[derive(Args, Debug)]
pub struct AnalyzeCmd {
    #[arg(long)]
    pub checkpoint: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, default_value = "valid")]
    pub split: Split,

    /// Index of the fact within the split.
    #[arg(long, default_value_t = 0)]
    pub fact: usize,

    /// Pair whose value is replaced.
    #[arg(long, default_value_t = 0)]
    pub position: usize,

    #[arg(long, default_value_t = 10)]
    pub top: usize,

    #[arg(long)]
    pub out: PathBuf,
}

impl AnalyzeCmd {
    pub fn echo(&self, e: &mut Echo) {
        e.set("command", "analyze").set("checkpoint", self.checkpoint.display());
        self.data.echo(e);
        e.set("split", self.split.name())
            .set("fact", self.fact)
            .set("position", self.position)
            .set("top", self.top)
            .set("out", self.out.display());
    }
}

#[derive(Args, Debug)]
pub struct SubsetCmd {
    #[command(flatten)]
    pub data: DataArgs,

    /// Percentage of binary facts to keep in each split.
    #[arg(long, conflicts_with = "ratio", required_unless_present = "ratio")]
    pub keep_pct: Option<f64>,

    /// Target binary:n-ary ratio of the training split, e.g. 1:1.
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<(usize, usize)>,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out: PathBuf,
}

impl SubsetCmd {
    pub fn echo(&self, e: &mut Echo, keep_pct: f64) {
        e.set("command", "subset");
        self.data.echo(e);
        if let Some((b, n)) = self.ratio {
            e.set("ratio", format!("{b}:{n}"));
        }
        e.set("keep_pct", keep_pct).set("seed", self.seed).set("out", self.out.display());
    }
}

fn parse_ratio(s: &str) -> Result<(usize, usize), String> {
    let (b, n) = s.split_once(':').ok_or("expected BINARY:NARY")?;
    let b = b.trim().parse().map_err(|e| format!("binary part: {e}"))?;
    let n = n.trim().parse().map_err(|e| format!("n-ary part: {e}"))?;
    Ok((b, n))
}

#[derive(Args, Debug)]
pub struct GradCheckCmd {
    #[arg(long, default_value = "nalp")]
    pub mode: Variant,

    #[arg(long, default_value = "conv")]
    pub encoder: PairEncoder,

    #[arg(long, default_value = "min", value_parser = parse_aggregator)]
    pub aggregator: Aggregator,

    #[arg(long, default_value = "diagonal")]
    pub type_pairing: TypePairing,

    #[arg(long, default_value_t = 4)]
    pub k: usize,

    #[arg(long, default_value_t = 3)]
    pub k_type: usize,

    #[arg(long = "nf", default_value_t = 3)]
    pub n_filters: usize,

    #[arg(long, default_value_t = 5)]
    pub n_gfcn: usize,

    #[arg(long, default_value_t = 4)]
    pub n_tfcn: usize,

    #[arg(long, default_value_t = 6)]
    pub roles: usize,

    #[arg(long, default_value_t = 10)]
    pub values: usize,

    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,

    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Also write the per-tensor report and config echo here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl GradCheckCmd {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode.mode,
            pair_encoder: self.encoder,
            aggregator: self.aggregator,
            type_pairing: self.type_pairing,
        }
    }

    pub fn echo(&self, e: &mut Echo) {
        e.set("command", "grad-check")
            .set("mode", self.mode)
            .set("encoder", self.encoder)
            .set("aggregator", self.aggregator.name())
            .set("type_pairing", self.type_pairing)
            .set("k", self.k)
            .set("k_type", self.k_type)
            .set("nf", self.n_filters)
            .set("n_gfcn", self.n_gfcn)
            .set("n_tfcn", self.n_tfcn)
            .set("roles", self.roles)
            .set("values", self.values)
            .set("step", self.step)
            .set("tol", self.tol)
            .set("seed", self.seed);
    }
}

#[derive(Args, Debug)]
pub struct FlopsCmd {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Take |R| and |V| from this dataset.
    #[arg(long, conflicts_with_all = ["roles", "values"])]
    pub dataset: Option<PathBuf>,

    #[arg(long, default_value = "jsonl-rv")]
    pub format: DatasetFormat,

    #[arg(long, requires = "values")]
    pub roles: Option<usize>,

    #[arg(long, requires = "roles")]
    pub values: Option<usize>,

    /// Arity of the fact the multiply-add counts refer to.
    #[arg(long, default_value_t = 2)]
    pub arity: usize,

    #[arg(long)]
    pub out: Option<PathBuf>,
}
