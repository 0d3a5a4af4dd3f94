//! Synthetic embeddings with a planted class direction and a spuriously
//! correlated group direction, for exercising the trainers without any
//! encoder.
//!
//! Each point draws a class `y` in {-1, +1} and a group `g` that equals `y`
//! with probability `p_spur`, then
//! `x = normalize(a_cls * y * v_class + a_grp * g * v_group + sigma / sqrt(e) * z)`.
//! Classification prompts lean towards the group direction by `beta`, which
//! is what makes the zero-shot classifier fail on the minority cells.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embed_store::{EmbeddingMatrix, GroupedDataset, PromptGroup, PromptSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Embedding width.
    pub dim: usize,
    /// Points over all three splits (70/15/15).
    pub n: usize,
    pub p_spur: f64,
    pub a_cls: f64,
    pub a_grp: f64,
    pub sigma: f64,
    /// Group contamination of the classification prompts.
    pub beta: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            n: 4000,
            p_spur: 0.95,
            a_cls: 1.0,
            a_grp: 1.0,
            sigma: 1.0,
            beta: 0.9,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!(
                "synthetic width must be at least 2, got {}",
                self.dim
            )));
        }
        if !(0.5..1.0).contains(&self.p_spur) {
            return Err(Error::Config(format!("p_spur must be in [0.5, 1), got {}", self.p_spur)));
        }
        for (name, v) in [("a_cls", self.a_cls), ("a_grp", self.a_grp), ("sigma", self.sigma), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.n < 3 {
            return Err(Error::Config("need at least one point per split".into()));
        }
        Ok(())
    }

    /// Train, validation and test sizes.
    pub fn split_sizes(&self) -> [usize; 3] {
        let train = (self.n as f64 * 0.7).round() as usize;
        let val = (self.n as f64 * 0.15).round() as usize;
        [train, val, self.n - train - val]
    }
}

/// Generated splits, prompts and the planted directions.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: GroupedDataset,
    pub val: GroupedDataset,
    pub test: GroupedDataset,
    pub prompts: PromptSet,
    pub v_class: Vec<f64>,
    pub v_group: Vec<f64>,
}

impl SynthData {
    pub fn splits(&self) -> [(&'static str, &GroupedDataset); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Evaluation cell of a point: `2 * label + attribute`.
pub fn cell(label: usize, attribute: usize) -> usize {
    2 * label + attribute
}

/// Group attribute (0 or 1) encoded in an evaluation cell.
pub fn cell_attribute(cell: usize) -> usize {
    cell % 2
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn planted_directions(rng: &mut ChaCha8Rng, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let v_class = normalize(&gaussian(rng, dim));
    let raw = gaussian(rng, dim);
    let proj = dot(&raw, &v_class);
    let mut v_group: Vec<f64> = raw.iter().zip(&v_class).map(|(r, c)| r - proj * c).collect();
    v_group = normalize(&v_group);
    // A second pass removes the residual overlap left by rounding.
    let proj = dot(&v_group, &v_class);
    let v_group = normalize(&v_group.iter().zip(&v_class).map(|(r, c)| r - proj * c).collect::<Vec<_>>());
    (v_class, v_group)
}

fn draw_split(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    n: usize,
    v_class: &[f64],
    v_group: &[f64],
) -> Result<GroupedDataset> {
    let noise = cfg.sigma / (cfg.dim as f64).sqrt();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut cells = Vec::with_capacity(n);
    for _ in 0..n {
        let y: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let g = if rng.random_bool(cfg.p_spur) { y } else { -y };
        let z = gaussian(rng, cfg.dim);
        let x: Vec<f64> = (0..cfg.dim)
            .map(|k| cfg.a_cls * y * v_class[k] + cfg.a_grp * g * v_group[k] + noise * z[k])
            .collect();
        rows.push(normalize(&x));
        let label = usize::from(y > 0.0);
        labels.push(label);
        cells.push(cell(label, usize::from(g > 0.0)));
    }
    let emb = EmbeddingMatrix::from_rows_f64(cfg.dim, &rows)?;
    GroupedDataset::new(emb, Some(labels), Some(cells), 2, 4)
}

fn prompt_group(dim: usize, rows: &[Vec<f64>], names: &[&str]) -> Result<PromptGroup> {
    Ok(PromptGroup {
        embeddings: EmbeddingMatrix::from_rows_f64(dim, rows)?,
        names: names.iter().map(|s| s.to_string()).collect(),
    })
}

/// Draws the planted directions, then the train, validation and test splits
/// in that order from one seeded stream.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (v_class, v_group) = planted_directions(&mut rng, cfg.dim);
    let [n_train, n_val, n_test] = cfg.split_sizes();
    let train = draw_split(&mut rng, cfg, n_train, &v_class, &v_group)?;
    let val = draw_split(&mut rng, cfg, n_val, &v_class, &v_group)?;
    let test = draw_split(&mut rng, cfg, n_test, &v_class, &v_group)?;

    let lean: Vec<f64> = v_class.iter().zip(&v_group).map(|(c, g)| c + cfg.beta * g).collect();
    let lean = normalize(&lean);
    let neg = |v: &[f64]| v.iter().map(|a| -a).collect::<Vec<_>>();
    let classification = prompt_group(cfg.dim, &[neg(&lean), lean.clone()], &["class 0", "class 1"])?;
    let debias = prompt_group(cfg.dim, &[neg(&v_group), v_group.clone()], &["group 0", "group 1"])?;
    let prompts = PromptSet::new(classification, vec![debias])?;
    Ok(SynthData {
        train,
        val,
        test,
        prompts,
        v_class,
        v_group,
    })
}

/// Projections this small relative to the row norm are below `f32`
/// resolution and count as ties.
const PROBE_TIE: f64 = 1e-6;

/// Fraction of rows whose side of the `v_group` hyperplane matches their
/// attribute (positive projection predicts attribute 1). A row lying on the
/// hyperplane scores one half.
pub fn group_probe(embeddings: ndarray::ArrayView2<f32>, attributes: &[usize], v_group: &[f64]) -> Result<f64> {
    if embeddings.nrows() != attributes.len() {
        return Err(Error::Length(format!(
            "{} rows vs {} attributes",
            embeddings.nrows(),
            attributes.len()
        )));
    }
    if embeddings.ncols() != v_group.len() {
        return Err(Error::Shape("probe direction width differs from embeddings".into()));
    }
    if attributes.is_empty() {
        return Err(Error::Contract("probe needs at least one row".into()));
    }
    let score: f64 = embeddings
        .rows()
        .into_iter()
        .zip(attributes)
        .map(|(row, &a)| {
            let s: f64 = row.iter().zip(v_group).map(|(&x, v)| f64::from(x) * v).sum();
            let norm = row.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if s.abs() <= PROBE_TIE * norm {
                0.5
            } else if usize::from(s > 0.0) == a {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    Ok(score / attributes.len() as f64)
}

/// Probe accuracy of a dataset's own embeddings against the attribute held
/// in its evaluation cells.
pub fn dataset_probe(data: &GroupedDataset, embeddings: &Array2<f32>, v_group: &[f64]) -> Result<f64> {
    let attrs: Vec<usize> = data.require_groups()?.iter().map(|&c| cell_attribute(c)).collect();
    group_probe(embeddings.view(), &attrs, v_group)
}
