//! Scalar objectives over adapted embeddings, each with its analytic gradient.
//!
//! All math runs in `f64`. Entropies are in nats.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Default weight of the cosine consistency term.
pub const DEFAULT_ETA: f64 = 0.2;
/// Default temperature applied to classification dot products.
pub const DEFAULT_LOGIT_SCALE: f64 = 100.0;
/// Default temperature on cosine debias logits.
pub const DEFAULT_DEBIAS_SCALE: f64 = 30.0;

/// Configuration of the language-guided debiasing objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LdroConfig {
    /// Weight of the cosine consistency term.
    pub eta: f64,
    /// Temperature on classification logits.
    pub logit_scale: f64,
    /// Per-debias-group weights; `None` means the unweighted mean.
    pub debias_group_weights: Option<Vec<f64>>,
    /// When set, debias logits are `scale * (a / |a|) . t`; `None` uses the
    /// bare dot product `a . t`, whose entropy can be raised just by shrinking
    /// `a` towards zero.
    pub debias_scale: Option<f64>,
}

impl Default for LdroConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            logit_scale: DEFAULT_LOGIT_SCALE,
            debias_group_weights: None,
            debias_scale: Some(DEFAULT_DEBIAS_SCALE),
        }
    }
}

impl LdroConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config(format!(
                "logit scale must be > 0, got {}",
                self.logit_scale
            )));
        }
        if let Some(scale) = self.debias_scale {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Config(format!("debias scale must be > 0, got {scale}")));
            }
        }
        if let Some(w) = &self.debias_group_weights {
            if w.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Config("debias group weights must be nonnegative".into()));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("debias group weights sum to {total}, not 1")));
            }
        }
        Ok(())
    }

    fn group_weights(&self, groups: usize) -> Result<Vec<f64>> {
        match &self.debias_group_weights {
            Some(w) if w.len() != groups => Err(Error::Config(format!(
                "{} debias weights for {groups} groups",
                w.len()
            ))),
            Some(w) => Ok(w.clone()),
            None => Ok(vec![1.0 / groups as f64; groups]),
        }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&a| (a - max).exp()).sum();
    let log_z = max + sum.ln();
    logits.iter().map(|&a| a - log_z).collect()
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&a| (a - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy of `softmax(logits)`, in `[0, ln s]`.
pub fn entropy_loss(logits: &[f64]) -> f64 {
    let logp = log_softmax(logits);
    -logp.iter().map(|&l| l.exp() * l).sum::<f64>()
}

/// Entropy and its gradient `dH/da_i = -p_i (log p_i + H)`.
pub fn entropy_with_grad(logits: &[f64]) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let h = -logp.iter().map(|&l| l.exp() * l).sum::<f64>();
    let grad = logp.iter().map(|&l| -l.exp() * (l + h)).collect();
    (h, grad)
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity; zero-norm inputs are a domain error.
pub fn cosine_sim(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    cosine_with_grad(u, v).map(|(c, _)| c)
}

/// Cosine similarity and its gradient with respect to `v`.
pub fn cosine_with_grad(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain(
            "cosine similarity of a zero-norm vector (collapsed adapter output?)".into(),
        ));
    }
    let cos = (u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0);
    let grad = &u / (nu * nv) - &v * (cos / (nv * nv));
    Ok((cos, grad))
}

/// Per-sample cross-entropy over scaled prompt logits.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub losses: Vec<f64>,
    /// Row `i` is `d losses[i] / d adapted[i]`.
    pub grad_rows: Array2<f64>,
    pub correct: Vec<bool>,
}

impl CrossEntropy {
    pub fn mean(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

pub fn cross_entropy_per_sample(
    adapted: ArrayView2<f64>,
    class_texts: ArrayView2<f64>,
    labels: &[usize],
    logit_scale: f64,
) -> Result<CrossEntropy> {
    if adapted.ncols() != class_texts.ncols() {
        return Err(Error::Shape(format!(
            "embedding width {} vs prompt width {}",
            adapted.ncols(),
            class_texts.ncols()
        )));
    }
    if labels.len() != adapted.nrows() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            adapted.nrows()
        )));
    }
    if !(logit_scale > 0.0) {
        return Err(Error::Config("logit scale must be positive".into()));
    }
    let classes = class_texts.nrows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index(format!("label {bad} outside 0..{classes}")));
    }
    let logits = adapted.dot(&class_texts.t()) * logit_scale;
    let mut losses = Vec::with_capacity(labels.len());
    let mut correct = Vec::with_capacity(labels.len());
    let mut dlogits = Array2::zeros(logits.raw_dim());
    for (i, (row, &y)) in logits.axis_iter(Axis(0)).zip(labels).enumerate() {
        let row = row.to_vec();
        let logp = log_softmax(&row);
        losses.push(-logp[y]);
        correct.push(crate::eval::argmax(&row) == y);
        for (k, &lp) in logp.iter().enumerate() {
            dlogits[[i, k]] = lp.exp() - if k == y { 1.0 } else { 0.0 };
        }
    }
    let grad_rows = dlogits.dot(&class_texts) * logit_scale;
    Ok(CrossEntropy {
        losses,
        grad_rows,
        correct,
    })
}

/// Mean cross-entropy of `softmax(scale * adapted . class_texts^T)`.
pub fn cross_entropy_logits(
    adapted: ArrayView2<f64>,
    class_texts: ArrayView2<f64>,
    labels: &[usize],
    logit_scale: f64,
) -> Result<f64> {
    cross_entropy_per_sample(adapted, class_texts, labels, logit_scale).map(|ce| ce.mean())
}

/// Value of the debiasing objective and its pieces.
#[derive(Debug, Clone)]
pub struct LdroLoss {
    /// Batch mean of `1 - mean_entropy - eta * cosine`.
    pub value: f64,
    /// Batch mean of the (weighted) debias entropy.
    pub mean_entropy: f64,
    /// Batch mean of cosine(original, adapted).
    pub mean_cosine: f64,
    /// Gradient of `value` w.r.t. the adapted batch.
    pub grad: Array2<f64>,
}

/// Batch mean of `1 - H(adapted . debias^T) - eta * cos(original, adapted)`,
/// with `H` averaged over debias groups.
pub fn ldro_objective(
    original: ArrayView2<f64>,
    adapted: ArrayView2<f64>,
    debias_groups: &[ArrayView2<f64>],
    cfg: &LdroConfig,
) -> Result<LdroLoss> {
    cfg.validate()?;
    if debias_groups.is_empty() {
        return Err(Error::Contract("at least one debias group is required".into()));
    }
    if original.dim() != adapted.dim() {
        return Err(Error::Shape(format!(
            "original {:?} vs adapted {:?}",
            original.dim(),
            adapted.dim()
        )));
    }
    let dim = adapted.ncols();
    if let Some(g) = debias_groups.iter().find(|g| g.ncols() != dim) {
        return Err(Error::Shape(format!("debias prompts have width {}, expected {dim}", g.ncols())));
    }
    let weights = cfg.group_weights(debias_groups.len())?;
    let batch = adapted.nrows();
    if batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let inv_b = 1.0 / batch as f64;

    let mut grad = Array2::zeros(adapted.raw_dim());
    let (mut total, mut total_ent, mut total_cos) = (0.0, 0.0, 0.0);
    let group_logits: Vec<Array2<f64>> =
        debias_groups.iter().map(|g| adapted.dot(&g.t())).collect();
    for i in 0..batch {
        let row = adapted.row(i);
        // Logits are `k * a . t`; with a debias scale, `k = scale / |a|`.
        let k = match cfg.debias_scale {
            Some(scale) => {
                let n = norm(row);
                if n == 0.0 {
                    return Err(Error::Domain("zero-norm adapted row (collapsed adapter output?)".into()));
                }
                scale / n
            }
            None => 1.0,
        };
        let mut ent = 0.0;
        let mut g_row = Array1::<f64>::zeros(dim);
        for ((logits, texts), &w) in group_logits.iter().zip(debias_groups).zip(&weights) {
            let z: Vec<f64> = logits.row(i).iter().map(|&v| k * v).collect();
            let (h, dh) = entropy_with_grad(&z);
            ent += w * h;
            // d(-w H)/d a = -w k sum_j dH/dz_j t_j, projected off `a` when scaled.
            g_row.scaled_add(-w * k, &Array1::from(dh).dot(texts));
        }
        if cfg.debias_scale.is_some() {
            let n2 = row.dot(&row);
            let along = g_row.dot(&row) / n2;
            g_row.scaled_add(-along, &row);
        }
        let (cos, dcos) = cosine_with_grad(original.row(i), adapted.row(i))?;
        g_row.scaled_add(-cfg.eta, &dcos);
        grad.row_mut(i).assign(&(g_row * inv_b));
        total += 1.0 - ent - cfg.eta * cos;
        total_ent += ent;
        total_cos += cos;
    }
    Ok(LdroLoss {
        value: total * inv_b,
        mean_entropy: total_ent * inv_b,
        mean_cosine: total_cos * inv_b,
        grad,
    })
}
