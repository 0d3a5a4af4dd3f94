//! Command-line surface. Every long flag doubles as a manifest key, so a run
//! can be replayed from the `key=value` file it wrote.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{ArgGroup, Args, Parser, Subcommand};
use subpop_core::dro::{DroMethod, DualScope};
use subpop_core::Error;

#[derive(Debug, Parser)]
#[command(name = "subpop", version, about = "Group-robust adapters for frozen embedding classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-bias synthetic dataset.
    #[command(args_override_self = true)]
    Synth(SynthArgs),
    /// Train adapters, one per repeat.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the zero-shot classifier) on one split.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Retrain the debiasing adapter over a grid of eta values or data sizes.
    #[command(args_override_self = true)]
    Sweep(SweepArgs),
    /// Pick the best configuration and epoch across runs by validation.
    #[command(args_override_self = true)]
    Select(SelectArgs),
    /// Aggregate repeats into mean and std tables.
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Sweep(_) => "sweep",
            Command::Select(_) => "select",
            Command::Report(_) => "report",
        }
    }

    /// Resolved settings as manifest pairs, in flag order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        match self {
            Command::Synth(a) => a.pairs(),
            Command::Train(a) => a.pairs(),
            Command::Eval(a) => a.pairs(),
            Command::Sweep(a) => a.pairs(),
            Command::Select(a) => a.pairs(),
            Command::Report(a) => a.pairs(),
        }
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path(p: &std::path::Path) -> String {
    p.display().to_string()
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, env = "SUBPOP_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "SUBPOP_DIM", default_value_t = 32)]
    pub dim: usize,
    /// Points over all splits (70/15/15).
    #[arg(long, env = "SUBPOP_N", default_value_t = 4000)]
    pub n: usize,
    #[arg(long, env = "SUBPOP_P_SPUR", default_value_t = 0.95)]
    pub p_spur: f64,
    #[arg(long, env = "SUBPOP_A_CLS", default_value_t = 1.0)]
    pub a_cls: f64,
    #[arg(long, env = "SUBPOP_A_GRP", default_value_t = 1.0)]
    pub a_grp: f64,
    #[arg(long, env = "SUBPOP_SIGMA", default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, env = "SUBPOP_BETA", default_value_t = 0.9)]
    pub beta: f64,
    #[arg(long, env = "SUBPOP_SEED", default_value_t = 0)]
    pub seed: u64,
}

impl SynthArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("out", path(&self.out)),
            ("dim", self.dim.to_string()),
            ("n", self.n.to_string()),
            ("p-spur", self.p_spur.to_string()),
            ("a-cls", self.a_cls.to_string()),
            ("a-grp", self.a_grp.to_string()),
            ("sigma", self.sigma.to_string()),
            ("beta", self.beta.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Dataset directory: `{split}.ldeb` + `{split}.csv` per split and
/// `prompts/prompts.csv`.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, env = "SUBPOP_DATA")]
    pub data: PathBuf,
    /// Prompt manifest; defaults to `<data>/prompts/prompts.csv`.
    #[arg(long, env = "SUBPOP_PROMPTS")]
    pub prompts: Option<PathBuf>,
    /// Number of evaluation groups; defaults to the largest id seen plus one.
    #[arg(long, env = "SUBPOP_GROUPS")]
    pub groups: Option<usize>,
}

impl DataArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![("data", path(&self.data))];
        if let Some(p) = &self.prompts {
            v.push(("prompts", path(p)));
        }
        if let Some(g) = self.groups {
            v.push(("groups", g.to_string()));
        }
        v
    }
}

/// Training method: a label-based baseline, the debiasing adapter, or the
/// debiasing adapter followed by a baseline (`ldro+cvar`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ldro,
    Dro(DroMethod),
    Stacked(DroMethod),
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        if s == "ldro" {
            return Ok(Method::Ldro);
        }
        if let Some(rest) = s.strip_prefix("ldro+") {
            return Ok(Method::Stacked(rest.parse()?));
        }
        Ok(Method::Dro(s.parse()?))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Ldro => f.write_str("ldro"),
            Method::Dro(m) => write!(f, "{m}"),
            Method::Stacked(m) => write!(f, "ldro+{m}"),
        }
    }
}

/// Debias logit mode: a positive temperature on cosine logits, or `raw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DebiasScale(pub Option<f64>);

impl FromStr for DebiasScale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "raw" {
            return Ok(DebiasScale(None));
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(DebiasScale(Some(v))),
            _ => Err(format!("expected a positive number or `raw`, got {s:?}")),
        }
    }
}

impl std::fmt::Display for DebiasScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("raw"),
        }
    }
}

fn parse_dual_scope(s: &str) -> Result<DualScope, String> {
    match s {
        "batch" => Ok(DualScope::MiniBatch),
        "epoch" => Ok(DualScope::Epoch),
        _ => Err(format!("expected `batch` or `epoch`, got {s:?}")),
    }
}

fn dual_scope_name(s: DualScope) -> &'static str {
    match s {
        DualScope::MiniBatch => "batch",
        DualScope::Epoch => "epoch",
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OptimizerName {
    Adam,
    Sgd,
}

impl OptimizerName {
    fn as_str(&self) -> &'static str {
        match self {
            OptimizerName::Adam => "adam",
            OptimizerName::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct HyperArgs {
    #[arg(long, env = "SUBPOP_METHOD", default_value = "ldro", value_parser = parse_method)]
    pub method: Method,
    #[arg(long, env = "SUBPOP_ETA", default_value_t = 0.2)]
    pub eta: f64,
    /// Temperature on cosine debias logits, or `raw` for bare dot products.
    #[arg(long, env = "SUBPOP_DEBIAS_SCALE", default_value = "30")]
    pub debias_scale: DebiasScale,
    /// Debias prompt groups to use (all when omitted).
    #[arg(long, env = "SUBPOP_DEBIAS_GROUPS", value_delimiter = ',')]
    pub debias_groups: Option<Vec<usize>>,
    #[arg(long, env = "SUBPOP_ALPHA", default_value_t = 0.2)]
    pub alpha: f64,
    #[arg(long, env = "SUBPOP_RHO", default_value_t = 1.0)]
    pub rho: f64,
    /// Upweighting factor of two-phase methods.
    #[arg(long, env = "SUBPOP_LAMBDA_UP", default_value_t = 4.0)]
    pub lambda_up: f64,
    /// Phase-one epochs of two-phase methods.
    #[arg(long, env = "SUBPOP_T1", default_value_t = 1)]
    pub t1: usize,
    #[arg(long, env = "SUBPOP_DUAL_SCOPE", default_value = "batch", value_parser = parse_dual_scope)]
    pub dual_scope: DualScope,
    #[arg(long, env = "SUBPOP_OPTIMIZER", value_enum, default_value_t = OptimizerName::Adam)]
    pub optimizer: OptimizerName,
    /// Momentum for `--optimizer sgd`.
    #[arg(long, env = "SUBPOP_MOMENTUM", default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, env = "SUBPOP_LR", default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, env = "SUBPOP_EPOCHS", default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, env = "SUBPOP_BATCH", default_value_t = 256)]
    pub batch: usize,
    #[arg(long, env = "SUBPOP_DEPTH", default_value_t = 2)]
    pub depth: usize,
    /// Depth of the second adapter in stacked methods.
    #[arg(long, env = "SUBPOP_STACK_DEPTH", default_value_t = 3)]
    pub stack_depth: usize,
    /// Hidden width (defaults to the embedding width).
    #[arg(long, env = "SUBPOP_HIDDEN")]
    pub hidden: Option<usize>,
    #[arg(long, env = "SUBPOP_BLEND", default_value_t = 1.0)]
    pub blend: f64,
    #[arg(long, env = "SUBPOP_LOGIT_SCALE", default_value_t = 100.0)]
    pub logit_scale: f64,
    #[arg(long, env = "SUBPOP_NORMALIZE", default_value_t = true, action = clap::ArgAction::Set)]
    pub normalize: bool,
    #[arg(long, env = "SUBPOP_EVAL_EVERY", default_value_t = 1)]
    pub eval_every: usize,
    #[arg(long, env = "SUBPOP_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Repeats; repeat `r` uses seed `seed + r`.
    #[arg(long, env = "SUBPOP_REPEATS", default_value_t = 10)]
    pub repeats: usize,
}

impl HyperArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = vec![
            ("method", self.method.to_string()),
            ("eta", self.eta.to_string()),
            ("debias-scale", self.debias_scale.to_string()),
        ];
        if let Some(g) = &self.debias_groups {
            v.push(("debias-groups", join(g)));
        }
        v.extend([
            ("alpha", self.alpha.to_string()),
            ("rho", self.rho.to_string()),
            ("lambda-up", self.lambda_up.to_string()),
            ("t1", self.t1.to_string()),
            ("dual-scope", dual_scope_name(self.dual_scope).to_string()),
            ("optimizer", self.optimizer.as_str().to_string()),
            ("momentum", self.momentum.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch", self.batch.to_string()),
            ("depth", self.depth.to_string()),
            ("stack-depth", self.stack_depth.to_string()),
        ]);
        if let Some(h) = self.hidden {
            v.push(("hidden", h.to_string()));
        }
        v.extend([
            ("blend", self.blend.to_string()),
            ("logit-scale", self.logit_scale.to_string()),
            ("normalize", self.normalize.to_string()),
            ("eval-every", self.eval_every.to_string()),
            ("seed", self.seed.to_string()),
            ("repeats", self.repeats.to_string()),
        ]);
        v
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    /// Keep every epoch's checkpoint under `rep*/ckpt/`.
    #[arg(long, env = "SUBPOP_CKPT_RING", default_value_t = true, action = clap::ArgAction::Set)]
    pub ckpt_ring: bool,
    #[arg(long, env = "SUBPOP_OUT")]
    pub out: PathBuf,
}

impl TrainArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = self.data.pairs();
        v.extend(self.hyper.pairs());
        v.push(("ckpt-ring", self.ckpt_ring.to_string()));
        v.push(("out", path(&self.out)));
        v
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, env = "SUBPOP_SPLIT", default_value = "test")]
    pub split: String,
    /// Adapter chain checkpoint; zero-shot when omitted.
    #[arg(long, env = "SUBPOP_CKPT")]
    pub ckpt: Option<PathBuf>,
    #[arg(long, env = "SUBPOP_NORMALIZE", default_value_t = true, action = clap::ArgAction::Set)]
    pub normalize: bool,
    /// Report file; printed to stdout when omitted.
    #[arg(long, env = "SUBPOP_OUT")]
    pub out: Option<PathBuf>,
}

impl EvalArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = self.data.pairs();
        v.push(("split", self.split.clone()));
        if let Some(c) = &self.ckpt {
            v.push(("ckpt", path(c)));
        }
        v.push(("normalize", self.normalize.to_string()));
        if let Some(o) = &self.out {
            v.push(("out", path(o)));
        }
        v
    }
}

#[derive(Debug, Clone, Args)]
#[command(group(ArgGroup::new("grid").required(true).args(["etas", "sizes"])))]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, env = "SUBPOP_ETAS", value_delimiter = ',')]
    pub etas: Option<Vec<f64>>,
    /// Training-set sizes (nested subsets of the training split).
    #[arg(long, env = "SUBPOP_SIZES", value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long, env = "SUBPOP_EVAL_SPLIT", default_value = "test")]
    pub eval_split: String,
    #[arg(long, env = "SUBPOP_OUT")]
    pub out: PathBuf,
}

impl SweepArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = self.data.pairs();
        v.extend(self.hyper.pairs());
        if let Some(e) = &self.etas {
            v.push(("etas", join(e)));
        }
        if let Some(s) = &self.sizes {
            v.push(("sizes", join(s)));
        }
        v.push(("eval-split", self.eval_split.clone()));
        v.push(("out", path(&self.out)));
        v
    }
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    /// Training output directories, one per configuration.
    #[arg(long, env = "SUBPOP_RUNS", value_delimiter = ',', required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, env = "SUBPOP_SPLIT", default_value = "val")]
    pub split: String,
    #[arg(long, env = "SUBPOP_OUT")]
    pub out: PathBuf,
}

impl SelectArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("runs", join(&self.runs.iter().map(|p| path(p)).collect::<Vec<_>>())),
            ("split", self.split.clone()),
            ("out", path(&self.out)),
        ]
    }
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long, env = "SUBPOP_RUNS", value_delimiter = ',', required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, env = "SUBPOP_SPLIT", default_value = "test")]
    pub split: String,
    #[arg(long, env = "SUBPOP_OUT")]
    pub out: PathBuf,
}

impl ReportArgs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("runs", join(&self.runs.iter().map(|p| path(p)).collect::<Vec<_>>())),
            ("split", self.split.clone()),
            ("out", path(&self.out)),
        ]
    }
}
