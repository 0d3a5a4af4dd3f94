//! Pieces shared by every trainer: options, seeded batching, per-epoch
//! monitoring and the metric log format.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterMLP, AdapterSpec, OptimizerKind};
use crate::embed_store::{EmbeddingMatrix, GroupedDataset};
use crate::error::{Error, Result};
use crate::eval::{prepare_inputs, select_model, Candidate, CheckpointId, Classifier, EvalReport};

/// Name of the monitored split used for model selection.
pub const VALIDATION_SPLIT: &str = "val";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub depth: usize,
    /// Hidden width; `None` uses the embedding width.
    pub hidden: Option<usize>,
    pub blend: f64,
    pub normalize_inputs: bool,
    /// Evaluate monitored splits every this many epochs (the last epoch is
    /// always evaluated).
    pub eval_every: usize,
    pub keep_checkpoints: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            lr: 1e-3,
            optimizer: OptimizerKind::adam(),
            seed: 0,
            depth: 2,
            hidden: None,
            blend: 1.0,
            normalize_inputs: true,
            eval_every: 1,
            keep_checkpoints: true,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval cadence must be at least 1".into()));
        }
        Ok(())
    }

    pub fn adapter_spec(&self, dim: usize) -> AdapterSpec {
        AdapterSpec {
            dim,
            depth: self.depth,
            hidden: self.hidden.unwrap_or(dim),
            blend: self.blend,
        }
    }
}

/// SplitMix64 finalizer over `(seed, stream)`; gives independent seeds for
/// initialization, shuffling and later phases from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const INIT_STREAM: u64 = 1;
pub(crate) const SHUFFLE_STREAM: u64 = 2;

/// Seeded epoch-wise shuffler.
pub(crate) struct Batcher {
    order: Vec<usize>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub(crate) fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM)),
        }
    }

    /// Reshuffles and returns the batches of the next epoch.
    pub(crate) fn epoch(&mut self) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

pub(crate) fn gather_rows(x: &Array2<f32>, rows: &[usize]) -> Array2<f32> {
    x.select(ndarray::Axis(0), rows)
}

pub(crate) fn to_f64(x: ArrayView2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

pub(crate) fn to_f32(x: ArrayView2<f64>) -> Array2<f32> {
    x.mapv(|v| v as f32)
}

/// Metrics recorded after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub objective: f64,
    /// Evaluation per monitored split, in monitor order.
    pub reports: Vec<(String, EvalReport)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub method: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch chosen by validation worst-group accuracy, when a validation
    /// split was monitored.
    pub selected_epoch: Option<usize>,
}

impl TrainReport {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            epochs: Vec::new(),
            selected_epoch: None,
        }
    }

    pub fn report(&self, epoch: usize, split: &str) -> Option<&EvalReport> {
        self.epochs
            .iter()
            .find(|r| r.epoch == epoch)?
            .reports
            .iter()
            .find(|(s, _)| s == split)
            .map(|(_, r)| r)
    }

    pub fn last_report(&self, split: &str) -> Option<&EvalReport> {
        let last = self.epochs.last()?.epoch;
        self.report(last, split)
    }

    /// Worst-group accuracy of `split` for every evaluated epoch.
    pub fn worst_series(&self, split: &str) -> Vec<f64> {
        self.epochs
            .iter()
            .filter_map(|r| r.reports.iter().find(|(s, _)| s == split))
            .map(|(_, r)| r.worst_group_acc)
            .collect()
    }

    pub fn candidates(&self, split: &str, config: usize) -> Vec<Candidate> {
        self.epochs
            .iter()
            .filter_map(|r| {
                r.reports.iter().find(|(s, _)| s == split).map(|(_, rep)| Candidate {
                    id: CheckpointId {
                        config,
                        epoch: r.epoch,
                    },
                    validation: rep.clone(),
                })
            })
            .collect()
    }

    pub(crate) fn select(&mut self) {
        let candidates = self.candidates(VALIDATION_SPLIT, 0);
        self.selected_epoch = select_model(&candidates).map(|c| c.id.epoch);
    }

    /// Tab-separated per-epoch log: `epoch split avg_acc worst_acc risk`.
    pub fn metric_log(&self) -> String {
        let mut out = String::from("epoch\tsplit\tavg_acc\tworst_acc\trisk\n");
        for r in &self.epochs {
            for (split, rep) in &r.reports {
                writeln!(
                    out,
                    "{}\t{split}\t{:.6}\t{:.6}\t{:.8}",
                    r.epoch, rep.average_acc, rep.worst_group_acc, r.objective
                )
                .unwrap();
            }
            if r.reports.is_empty() {
                writeln!(out, "{}\ttrain\t\t\t{:.8}", r.epoch, r.objective).unwrap();
            }
        }
        out
    }
}

/// Final adapter, optional per-epoch checkpoints and the metric history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapter: AdapterMLP,
    /// Adapter after each epoch (`checkpoints[k]` is epoch `k`), when kept.
    pub checkpoints: Vec<AdapterMLP>,
    pub report: TrainReport,
}

impl TrainOutcome {
    /// Adapter chosen by validation, falling back to the final one.
    pub fn selected_adapter(&self) -> &AdapterMLP {
        self.report
            .selected_epoch
            .and_then(|e| self.checkpoints.get(e))
            .unwrap_or(&self.adapter)
    }
}

/// Held-out splits evaluated after each epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct Monitor<'a> {
    pub splits: &'a [(&'a str, &'a GroupedDataset)],
}

impl<'a> Monitor<'a> {
    pub fn new(splits: &'a [(&'a str, &'a GroupedDataset)]) -> Self {
        Self { splits }
    }

    pub(crate) fn evaluate(
        &self,
        class_texts: &EmbeddingMatrix,
        adapter: &AdapterMLP,
        normalize_inputs: bool,
    ) -> Result<Vec<(String, EvalReport)>> {
        let clf = Classifier::new(class_texts, vec![adapter.clone()], normalize_inputs)?;
        self.splits
            .iter()
            .filter(|(_, d)| d.labels().is_some() && d.groups().is_some())
            .map(|(name, d)| Ok((name.to_string(), clf.evaluate(d)?)))
            .collect()
    }
}

/// Runs the shared epoch loop: calls `epoch_fn` once per epoch (which
/// returns the mean objective), then records monitoring and checkpoints.
pub(crate) fn run_epochs(
    method: &str,
    adapter: &mut AdapterMLP,
    opts: &TrainOptions,
    class_texts: &EmbeddingMatrix,
    monitor: Monitor<'_>,
    mut epoch_fn: impl FnMut(usize, &mut AdapterMLP) -> Result<f64>,
) -> Result<TrainOutcome> {
    let mut report = TrainReport::new(method);
    let mut checkpoints = Vec::new();
    for epoch in 0..opts.epochs {
        let objective = epoch_fn(epoch, adapter)?;
        if !objective.is_finite() {
            return Err(Error::Numerical(format!("non-finite objective at epoch {epoch}")));
        }
        let evaluate = (epoch + 1) % opts.eval_every == 0 || epoch + 1 == opts.epochs;
        let reports = if evaluate {
            monitor.evaluate(class_texts, adapter, opts.normalize_inputs)?
        } else {
            Vec::new()
        };
        report.epochs.push(EpochRecord {
            epoch,
            objective,
            reports,
        });
        if opts.keep_checkpoints {
            checkpoints.push(adapter.clone());
        }
    }
    report.select();
    Ok(TrainOutcome {
        adapter: adapter.clone(),
        checkpoints,
        report,
    })
}

/// Maps a dataset's (prepared) embeddings through a frozen adapter.
pub fn premap(data: &GroupedDataset, adapter: &AdapterMLP, normalize_inputs: bool) -> Result<GroupedDataset> {
    let x = prepare_inputs(data.embeddings(), normalize_inputs);
    let mapped = adapter.apply(x.view())?;
    data.with_embeddings(EmbeddingMatrix::from_array(&mapped)?)
}
