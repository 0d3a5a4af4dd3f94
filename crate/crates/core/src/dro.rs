//! Label-based robust training baselines.
//!
//! Both robust risks are computed through their one-dimensional duals:
//!
//! ```text
//! CVaR_a(l)  = min_t  t + mean((l - t)+) / a
//! Chi2_r(l)  = min_t  sqrt(1 + 2r) * sqrt(mean((l - t)+^2)) + t
//! ```
//!
//! The chi-square ball is `{q : (1/2n) sum_i (n q_i - 1)^2 <= r}`. Each risk
//! also returns the maximizing distribution as mean-one per-sample weights,
//! which is what reweights the gradient.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};

use crate::adapter::{AdapterMLP, Optimizer};
use crate::embed_store::{GroupedDataset, PromptSet};
use crate::error::{Error, Result};
use crate::eval::prepare_inputs;
use crate::losses::{cross_entropy_per_sample, DEFAULT_LOGIT_SCALE};
use crate::train::{
    derive_seed, gather_rows, run_epochs, to_f32, to_f64, Batcher, Monitor, TrainOptions,
    TrainOutcome, INIT_STREAM,
};

/// Dual variable of a robust risk (the loss threshold).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualState {
    pub eta: f64,
}

/// Robust risk value with its worst-case reweighting.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSolution {
    pub value: f64,
    /// Nonnegative, mean one.
    pub weights: Vec<f64>,
    pub dual: DualState,
}

impl RiskSolution {
    /// Indices carrying positive worst-case mass.
    pub fn support(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

fn descending_order(losses: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    order
}

/// Tail mass `alpha * n`, snapped to an integer when within rounding noise.
fn tail_mass(alpha: f64, n: usize) -> f64 {
    let k = alpha * n as f64;
    let r = k.round();
    if (k - r).abs() <= 1e-9 * n as f64 {
        r
    } else {
        k
    }
}

/// CVaR at tail fraction `alpha`: the mean of the top `alpha * n` losses, the
/// boundary loss taking fractional weight.
pub fn cvar_risk(losses: &[f64], alpha: f64) -> Result<RiskSolution> {
    if losses.is_empty() {
        return Err(Error::Contract("cvar of an empty loss vector".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha must be in (0, 1], got {alpha}")));
    }
    let n = losses.len();
    let k = tail_mass(alpha, n);
    let full = k.floor() as usize;
    let frac = k - full as f64;
    let mut weights = vec![0.0; n];
    let order = descending_order(losses);
    for &i in &order[..full] {
        weights[i] = 1.0 / alpha;
    }
    if frac > 0.0 {
        weights[order[full]] = frac / alpha;
    }
    let boundary = order[(k.ceil() as usize).max(1) - 1];
    let value = weights.iter().zip(losses).map(|(w, l)| w * l).sum::<f64>() / n as f64;
    Ok(RiskSolution {
        value,
        weights,
        dual: DualState {
            eta: losses[boundary],
        },
    })
}

/// `t + mean((l - t)+) / alpha`.
pub fn cvar_dual_objective(losses: &[f64], alpha: f64, t: f64) -> f64 {
    let n = losses.len() as f64;
    t + losses.iter().map(|&l| (l - t).max(0.0)).sum::<f64>() / (n * alpha)
}

/// Minimizes the CVaR dual directly. The objective is convex and piecewise
/// linear with kinks at the losses, so the minimum sits at one of them.
pub fn cvar_dual_value(losses: &[f64], alpha: f64) -> f64 {
    losses
        .iter()
        .map(|&t| cvar_dual_objective(losses, alpha, t))
        .fold(f64::INFINITY, f64::min)
}

const CHI2_ETA_TOL: f64 = 1e-9;
const CHI2_MAX_ITERS: usize = 400;

/// `sqrt(1 + 2 rho) * sqrt(mean((l - t)+^2)) + t`.
pub fn chi2_dual_objective(losses: &[f64], rho: f64, t: f64) -> f64 {
    let n = losses.len() as f64;
    let m2 = losses.iter().map(|&l| (l - t).max(0.0).powi(2)).sum::<f64>() / n;
    (1.0 + 2.0 * rho).sqrt() * m2.sqrt() + t
}

// Derivative of the dual objective in t; nondecreasing.
fn chi2_dual_slope(losses: &[f64], c: f64, t: f64) -> f64 {
    let (mut m1, mut m2) = (0.0, 0.0);
    for &l in losses {
        let d = (l - t).max(0.0);
        m1 += d;
        m2 += d * d;
    }
    if m2 == 0.0 {
        return 1.0;
    }
    let n = losses.len() as f64;
    1.0 - c * (m1 / n) / (m2 / n).sqrt()
}

/// Chi-square DRO risk with radius `rho`, by bisection on the dual slope.
pub fn chi2_risk(losses: &[f64], rho: f64) -> Result<RiskSolution> {
    if losses.is_empty() {
        return Err(Error::Contract("chi-square risk of an empty loss vector".into()));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }
    let n = losses.len();
    let max = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return Ok(RiskSolution {
            value: max,
            weights: vec![1.0; n],
            dual: DualState { eta: max },
        });
    }

    let c = (1.0 + 2.0 * rho).sqrt();
    let spread = max - min;
    let mut hi = max;
    let mut lo = min - spread;
    let mut iters = 0;
    while chi2_dual_slope(losses, c, lo) >= 0.0 {
        lo -= spread * 2f64.powi(iters as i32);
        iters += 1;
        if iters > 60 {
            return Err(Error::Numerical("could not bracket the chi-square dual".into()));
        }
    }
    iters = 0;
    while hi - lo > CHI2_ETA_TOL {
        let mid = 0.5 * (lo + hi);
        if chi2_dual_slope(losses, c, mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
        if iters > CHI2_MAX_ITERS {
            return Err(Error::Numerical("chi-square dual bisection did not converge".into()));
        }
    }
    let eta = 0.5 * (lo + hi);
    let value = chi2_dual_objective(losses, rho, eta);

    let excess: Vec<f64> = losses.iter().map(|&l| (l - eta).max(0.0)).collect();
    let mass: f64 = excess.iter().sum();
    let weights = if mass > 0.0 {
        excess.iter().map(|&d| d * n as f64 / mass).collect()
    } else {
        let top: Vec<usize> = (0..n).filter(|&i| losses[i] == max).collect();
        let mut w = vec![0.0; n];
        for &i in &top {
            w[i] = n as f64 / top.len() as f64;
        }
        w
    };
    Ok(RiskSolution {
        value,
        weights,
        dual: DualState { eta },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DroMethod {
    Erm,
    Cvar,
    Chi2,
    Jtt,
    CvarTwoPhase,
    Chi2TwoPhase,
}

impl DroMethod {
    pub const ALL: [DroMethod; 6] = [
        DroMethod::Erm,
        DroMethod::Cvar,
        DroMethod::Chi2,
        DroMethod::Jtt,
        DroMethod::CvarTwoPhase,
        DroMethod::Chi2TwoPhase,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DroMethod::Erm => "erm",
            DroMethod::Cvar => "cvar",
            DroMethod::Chi2 => "chi2",
            DroMethod::Jtt => "jtt",
            DroMethod::CvarTwoPhase => "cvar-two-phase",
            DroMethod::Chi2TwoPhase => "chi2-two-phase",
        }
    }

    pub fn is_two_phase(&self) -> bool {
        matches!(self, DroMethod::Jtt | DroMethod::CvarTwoPhase | DroMethod::Chi2TwoPhase)
    }
}

impl fmt::Display for DroMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DroMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DroMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Where the robust dual is solved during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualScope {
    /// Re-solved on every mini-batch.
    MiniBatch,
    /// Solved once per epoch over the full training set.
    Epoch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroConfig {
    pub method: DroMethod,
    /// CVaR tail fraction.
    pub alpha: f64,
    /// Chi-square radius.
    pub rho: f64,
    /// Phase-one epochs of the two-phase methods.
    pub phase1_epochs: usize,
    /// Weight multiplier for identified points in phase two.
    pub upweight: f64,
    pub logit_scale: f64,
    pub dual_scope: DualScope,
}

impl Default for DroConfig {
    fn default() -> Self {
        Self {
            method: DroMethod::Erm,
            alpha: 0.2,
            rho: 1.0,
            phase1_epochs: 1,
            upweight: 4.0,
            logit_scale: DEFAULT_LOGIT_SCALE,
            dual_scope: DualScope::MiniBatch,
        }
    }
}

impl DroConfig {
    pub fn with_method(method: DroMethod) -> Self {
        Self {
            method,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.upweight >= 1.0 && self.upweight.is_finite()) {
            return Err(Error::Config(format!("upweight must be >= 1, got {}", self.upweight)));
        }
        if !(self.logit_scale > 0.0) {
            return Err(Error::Config("logit scale must be positive".into()));
        }
        Ok(())
    }

    fn robust_weights(&self, losses: &[f64]) -> Result<RiskSolution> {
        match self.method {
            DroMethod::Cvar | DroMethod::CvarTwoPhase => cvar_risk(losses, self.alpha),
            DroMethod::Chi2 | DroMethod::Chi2TwoPhase => chi2_risk(losses, self.rho),
            DroMethod::Erm | DroMethod::Jtt => Ok(RiskSolution {
                value: losses.iter().sum::<f64>() / losses.len() as f64,
                weights: vec![1.0; losses.len()],
                dual: DualState { eta: f64::NEG_INFINITY },
            }),
        }
    }
}

/// Duplication-equivalent sample weights: `upweight` on listed indices.
pub fn upweight_weights(n: usize, identified: &[usize], upweight: f64) -> Vec<f64> {
    let mut w = vec![1.0; n];
    for &i in identified {
        w[i] = upweight;
    }
    w
}

/// Per-sample cross-entropy of the whole dataset under `adapter`.
pub fn dataset_losses(
    data: &GroupedDataset,
    prompts: &PromptSet,
    adapter: &AdapterMLP,
    logit_scale: f64,
    normalize_inputs: bool,
) -> Result<crate::losses::CrossEntropy> {
    let labels = data.require_labels()?;
    let x = prepare_inputs(data.embeddings(), normalize_inputs);
    let out = adapter.apply(x.view())?;
    let texts = to_f64(prompts.classification().embeddings.view());
    cross_entropy_per_sample(to_f64(out.view()).view(), texts.view(), labels, logit_scale)
}

// One supervised epoch. `sample_weights` multiplies each point's loss;
// robust weights (if any) are applied on top.
#[allow(clippy::too_many_arguments)]
fn supervised_epoch(
    adapter: &mut AdapterMLP,
    opt: &mut Optimizer<f32>,
    batcher: &mut Batcher,
    x: &Array2<f32>,
    labels: &[usize],
    texts: ArrayView2<f64>,
    cfg: &DroConfig,
    sample_weights: Option<&[f64]>,
    epoch_weights: Option<&[f64]>,
) -> Result<f64> {
    let mut total = 0.0;
    let batches = batcher.epoch();
    for rows in &batches {
        let xb = gather_rows(x, rows);
        let yb: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
        let (out, cache) = adapter.forward(xb.view())?;
        let ce = cross_entropy_per_sample(to_f64(out.view()).view(), texts, &yb, cfg.logit_scale)?;
        if ce.losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::Numerical("non-finite loss".into()));
        }
        let robust = match epoch_weights {
            Some(w) => rows.iter().map(|&i| w[i]).collect(),
            None => cfg.robust_weights(&ce.losses)?.weights,
        };
        let sample: Vec<f64> = match sample_weights {
            Some(s) => rows.iter().map(|&i| s[i]).collect(),
            None => vec![1.0; rows.len()],
        };
        let denom: f64 = sample.iter().sum();
        let coef: Vec<f64> = robust.iter().zip(&sample).map(|(r, s)| r * s / denom).collect();

        let mut grad = ce.grad_rows;
        for (mut row, &c) in grad.rows_mut().into_iter().zip(&coef) {
            row *= c;
        }
        total += coef.iter().zip(&ce.losses).map(|(c, l)| c * l).sum::<f64>();
        let grads = adapter.backward(&cache, to_f32(grad.view()).view())?;
        opt.step(adapter, &grads)?;
    }
    Ok(total / batches.len() as f64)
}

/// Trains a fresh adapter on the labeled data with the configured robust
/// reweighting (uniform for ERM and JTT) and optional per-sample weights.
pub fn train_supervised(
    data: &GroupedDataset,
    prompts: &PromptSet,
    cfg: &DroConfig,
    opts: &TrainOptions,
    sample_weights: Option<&[f64]>,
    monitor: Monitor<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    opts.validate()?;
    let labels = data.require_labels()?;
    if data.embeddings().dim() != prompts.dim() {
        return Err(Error::Shape("dataset and prompt widths differ".into()));
    }
    if let Some(s) = sample_weights {
        if s.len() != data.len() {
            return Err(Error::Shape("one sample weight per training point required".into()));
        }
    }
    let x = prepare_inputs(data.embeddings(), opts.normalize_inputs);
    let texts = to_f64(prompts.classification().embeddings.view());
    let mut adapter = AdapterMLP::init(
        opts.adapter_spec(data.embeddings().dim()),
        derive_seed(opts.seed, INIT_STREAM),
    )?;
    let mut opt = Optimizer::new(opts.optimizer, opts.lr, &adapter);
    let mut batcher = Batcher::new(data.len(), opts.batch_size, opts.seed);

    run_epochs(
        cfg.method.as_str(),
        &mut adapter,
        opts,
        &prompts.classification().embeddings,
        monitor,
        |_, adapter| {
            let epoch_weights = match (cfg.dual_scope, cfg.method) {
                (DualScope::Epoch, DroMethod::Cvar | DroMethod::Chi2) => {
                    let out = adapter.apply(x.view())?;
                    let ce = cross_entropy_per_sample(to_f64(out.view()).view(), texts.view(), labels, cfg.logit_scale)?;
                    Some(cfg.robust_weights(&ce.losses)?.weights)
                }
                _ => None,
            };
            supervised_epoch(
                adapter,
                &mut opt,
                &mut batcher,
                &x,
                labels,
                texts.view(),
                cfg,
                sample_weights,
                epoch_weights.as_deref(),
            )
        },
    )
}

/// Mini-batch ERM, CVaR-DRO or chi-square-DRO training.
pub fn train_dro(
    data: &GroupedDataset,
    prompts: &PromptSet,
    cfg: &DroConfig,
    opts: &TrainOptions,
    monitor: Monitor<'_>,
) -> Result<TrainOutcome> {
    if cfg.method.is_two_phase() {
        return train_two_phase(data, prompts, cfg, opts, monitor).map(|t| t.outcome);
    }
    train_supervised(data, prompts, cfg, opts, None, monitor)
}

/// Result of a two-phase run, with the phase-one bookkeeping.
#[derive(Debug, Clone)]
pub struct TwoPhaseOutcome {
    pub outcome: TrainOutcome,
    pub phase1_losses: Vec<f64>,
    /// Training indices upweighted in phase two.
    pub identified: Vec<usize>,
    pub sample_weights: Vec<f64>,
}

/// Indices a two-phase method upweights, given phase-one losses and
/// correctness: misclassified points for JTT, otherwise the support of the
/// worst-case distribution over the full training loss vector.
pub fn identify(cfg: &DroConfig, losses: &[f64], correct: &[bool]) -> Result<Vec<usize>> {
    match cfg.method {
        DroMethod::Jtt => Ok((0..losses.len()).filter(|&i| !correct[i]).collect()),
        DroMethod::CvarTwoPhase => Ok(cvar_risk(losses, cfg.alpha)?.support()),
        DroMethod::Chi2TwoPhase => Ok(chi2_risk(losses, cfg.rho)?.support()),
        other => Err(Error::Config(format!("{other} is not a two-phase method"))),
    }
}

/// Phase one: ERM for `phase1_epochs`; identification; phase two: weighted
/// ERM from a fresh initialization.
pub fn train_two_phase(
    data: &GroupedDataset,
    prompts: &PromptSet,
    cfg: &DroConfig,
    opts: &TrainOptions,
    monitor: Monitor<'_>,
) -> Result<TwoPhaseOutcome> {
    if !cfg.method.is_two_phase() {
        return Err(Error::Config(format!("{} is not a two-phase method", cfg.method)));
    }
    cfg.validate()?;
    if cfg.phase1_epochs == 0 {
        return Err(Error::Config("phase-one epochs must be at least 1".into()));
    }
    let erm = DroConfig {
        method: DroMethod::Erm,
        ..cfg.clone()
    };
    let phase1_opts = TrainOptions {
        epochs: cfg.phase1_epochs,
        keep_checkpoints: false,
        ..opts.clone()
    };
    let phase1 = train_supervised(data, prompts, &erm, &phase1_opts, None, Monitor::default())?;
    let ce = dataset_losses(data, prompts, &phase1.adapter, cfg.logit_scale, opts.normalize_inputs)?;
    let identified = identify(cfg, &ce.losses, &ce.correct)?;
    if identified.is_empty() {
        eprintln!("warning: {}: empty identification set, phase two is plain ERM", cfg.method);
    }
    let sample_weights = upweight_weights(data.len(), &identified, cfg.upweight);
    let phase2_opts = TrainOptions {
        seed: derive_seed(opts.seed, PHASE2_STREAM),
        ..opts.clone()
    };
    let mut outcome = train_supervised(data, prompts, &erm, &phase2_opts, Some(&sample_weights), monitor)?;
    outcome.report.method = cfg.method.as_str().to_string();
    Ok(TwoPhaseOutcome {
        outcome,
        phase1_losses: ce.losses,
        identified,
        sample_weights,
    })
}

const PHASE2_STREAM: u64 = 3;
