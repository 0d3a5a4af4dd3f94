//! Label-free adapter training against debiasing prompts, plus the stacked
//! composition with a supervised robust method and the sweep drivers.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapter::{AdapterMLP, Optimizer};
use crate::dro::{train_dro, DroConfig};
use crate::embed_store::{GroupedDataset, PromptSet};
use crate::error::{Error, Result};
use crate::eval::{prepare_inputs, Classifier, EvalReport};
use crate::losses::{ldro_objective, LdroConfig};
use crate::train::{
    derive_seed, gather_rows, premap, run_epochs, to_f32, to_f64, Batcher, Monitor, TrainOptions,
    TrainOutcome, INIT_STREAM,
};

const SUBSAMPLE_STREAM: u64 = 4;
const COLLAPSE_NORM: f64 = 1e-12;

/// One debiasing run: objective settings, loop options and which debias
/// prompt groups to use (`None` selects all of them).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LdroRun {
    pub cfg: LdroConfig,
    pub options: TrainOptions,
    pub debias_selection: Option<Vec<usize>>,
}

impl LdroRun {
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.options.validate()?;
        if matches!(&self.debias_selection, Some(ids) if ids.is_empty()) {
            return Err(Error::Config("at least one debias group must be selected".into()));
        }
        Ok(())
    }

    fn prompts(&self, prompts: &PromptSet) -> Result<PromptSet> {
        match &self.debias_selection {
            Some(ids) => prompts.select_debias(ids),
            None => Ok(prompts.clone()),
        }
    }
}

fn check_collapse(out: ArrayView2<f64>) -> Result<()> {
    for (i, row) in out.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > COLLAPSE_NORM) {
            return Err(Error::Numerical(format!(
                "collapsed adapter output: batch row {i} has norm {norm:e}"
            )));
        }
    }
    Ok(())
}

/// Trains a fresh adapter on the debiasing objective. Only the embeddings of
/// `data` are read; labels and groups matter solely to the monitor.
pub fn train_ldro(
    data: &GroupedDataset,
    prompts: &PromptSet,
    run: &LdroRun,
    monitor: Monitor<'_>,
) -> Result<TrainOutcome> {
    run.validate()?;
    let prompts = run.prompts(prompts)?;
    let dim = data.embeddings().dim();
    if dim != prompts.dim() {
        return Err(Error::Shape(format!(
            "embedding width {dim} does not match prompt width {}",
            prompts.dim()
        )));
    }
    if data.is_empty() {
        return Err(Error::Contract("no training embeddings".into()));
    }
    let opts = &run.options;
    let x = prepare_inputs(data.embeddings(), opts.normalize_inputs);
    let debias: Vec<Array2<f64>> = prompts
        .debias_groups()
        .iter()
        .map(|g| to_f64(g.embeddings.view()))
        .collect();
    let debias_views: Vec<ArrayView2<f64>> = debias.iter().map(|g| g.view()).collect();

    let mut adapter = AdapterMLP::init(opts.adapter_spec(dim), derive_seed(opts.seed, INIT_STREAM))?;
    let mut opt = Optimizer::new(opts.optimizer, opts.lr, &adapter);
    let mut batcher = Batcher::new(data.len(), opts.batch_size, opts.seed);

    run_epochs(
        "ldro",
        &mut adapter,
        opts,
        &prompts.classification().embeddings,
        monitor,
        |_, adapter| {
            let batches = batcher.epoch();
            let mut total = 0.0;
            for rows in &batches {
                let xb = gather_rows(&x, rows);
                let (out, cache) = adapter.forward(xb.view())?;
                let out64 = to_f64(out.view());
                check_collapse(out64.view())?;
                let loss = ldro_objective(to_f64(xb.view()).view(), out64.view(), &debias_views, &run.cfg)?;
                let grads = adapter.backward(&cache, to_f32(loss.grad.view()).view())?;
                opt.step(adapter, &grads)?;
                total += loss.value;
            }
            Ok(total / batches.len() as f64)
        },
    )
}

/// Mean cosine similarity between prepared inputs and their adapted images.
pub fn mean_cosine(data: &GroupedDataset, adapter: &AdapterMLP, normalize_inputs: bool) -> Result<f64> {
    let x = prepare_inputs(data.embeddings(), normalize_inputs);
    if x.nrows() == 0 {
        return Err(Error::Contract("no embeddings".into()));
    }
    let y = adapter.apply(x.view())?;
    let mut total = 0.0;
    for (a, b) in x.rows().into_iter().zip(y.rows()) {
        let (a, b) = (a.mapv(f64::from), b.mapv(f64::from));
        let denom = (a.dot(&a) * b.dot(&b)).sqrt();
        if !(denom > 0.0) {
            return Err(Error::Numerical("collapsed adapter output".into()));
        }
        total += a.dot(&b) / denom;
    }
    Ok(total / x.nrows() as f64)
}

/// Frozen first adapter plus the robust second stage trained on its images.
#[derive(Debug, Clone)]
pub struct StackedOutcome {
    pub first: AdapterMLP,
    pub first_report: crate::train::TrainReport,
    /// Phase-two outcome; its metrics are for the full chain.
    pub second: TrainOutcome,
}

impl StackedOutcome {
    /// Adapter chain applied in order, using phase two's selected adapter.
    pub fn chain(&self) -> Vec<AdapterMLP> {
        vec![self.first.clone(), self.second.selected_adapter().clone()]
    }
}

/// Phase one learns the first adapter with [`train_ldro`] and freezes it;
/// phase two trains a second adapter with `dro_cfg` on embeddings mapped
/// through the first. `dro_options` should ask for a deeper adapter.
pub fn train_stacked(
    data: &GroupedDataset,
    prompts: &PromptSet,
    run: &LdroRun,
    dro_cfg: &DroConfig,
    dro_options: &TrainOptions,
    monitor: Monitor<'_>,
) -> Result<StackedOutcome> {
    data.require_labels()?;
    let phase1 = train_ldro(data, prompts, run, Monitor::default())?;
    let first = phase1.selected_adapter().clone();
    stack_on(first, phase1.report, data, prompts, run.options.normalize_inputs, dro_cfg, dro_options, monitor)
}

/// Phase two of [`train_stacked`] on an already trained first adapter.
#[allow(clippy::too_many_arguments)]
pub fn stack_on(
    first: AdapterMLP,
    first_report: crate::train::TrainReport,
    data: &GroupedDataset,
    prompts: &PromptSet,
    normalize_inputs: bool,
    dro_cfg: &DroConfig,
    dro_options: &TrainOptions,
    monitor: Monitor<'_>,
) -> Result<StackedOutcome> {
    let mapped = premap(data, &first, normalize_inputs)?;
    let mapped_splits = monitor
        .splits
        .iter()
        .map(|(name, d)| Ok((*name, premap(d, &first, normalize_inputs)?)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&str, &GroupedDataset)> = mapped_splits.iter().map(|(n, d)| (*n, d)).collect();
    let options = TrainOptions {
        normalize_inputs: false,
        ..dro_options.clone()
    };
    let mut second = train_dro(&mapped, prompts, dro_cfg, &options, Monitor::new(&refs))?;
    second.report.method = format!("ldro+{}", dro_cfg.method);
    Ok(StackedOutcome {
        first,
        first_report,
        second,
    })
}

/// One row of a sensitivity table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// The swept value (eta or training-set size).
    pub value: f64,
    pub average_acc: f64,
    pub worst_group_acc: f64,
    pub mean_cosine: f64,
}

fn sweep_row(
    value: f64,
    outcome: &TrainOutcome,
    prompts: &PromptSet,
    eval: &GroupedDataset,
    normalize: bool,
) -> Result<SweepRow> {
    let adapter = outcome.selected_adapter();
    let clf = Classifier::new(&prompts.classification().embeddings, vec![adapter.clone()], normalize)?;
    let report: EvalReport = clf.evaluate(eval)?;
    Ok(SweepRow {
        value,
        average_acc: report.average_acc,
        worst_group_acc: report.worst_group_acc,
        mean_cosine: mean_cosine(eval, adapter, normalize)?,
    })
}

/// Retrains with each eta under the run's seed and scores the selected
/// adapter on `eval`.
pub fn eta_sweep(
    data: &GroupedDataset,
    prompts: &PromptSet,
    run: &LdroRun,
    etas: &[f64],
    monitor: Monitor<'_>,
    eval: &GroupedDataset,
) -> Result<Vec<SweepRow>> {
    if etas.len() < 2 {
        return Err(Error::Config("an eta sweep needs at least two values".into()));
    }
    etas.iter()
        .map(|&eta| {
            let run = LdroRun {
                cfg: LdroConfig { eta, ..run.cfg.clone() },
                ..run.clone()
            };
            let outcome = train_ldro(data, prompts, &run, monitor)?;
            sweep_row(eta, &outcome, prompts, eval, run.options.normalize_inputs)
        })
        .collect()
}

/// Seeded training subsets: the first `n` points of one fixed permutation,
/// so smaller subsets nest inside larger ones.
pub fn nested_subsets(len: usize, sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SUBSAMPLE_STREAM)));
    sizes
        .iter()
        .map(|&n| {
            if n == 0 || n > len {
                return Err(Error::Config(format!("subset size {n} outside 1..={len}")));
            }
            let mut idx = order[..n].to_vec();
            idx.sort_unstable();
            Ok(idx)
        })
        .collect()
}

/// Retrains on nested training subsets of each size.
pub fn size_sweep(
    data: &GroupedDataset,
    prompts: &PromptSet,
    run: &LdroRun,
    sizes: &[usize],
    monitor: Monitor<'_>,
    eval: &GroupedDataset,
) -> Result<Vec<SweepRow>> {
    let subsets = nested_subsets(data.len(), sizes, run.options.seed)?;
    sizes
        .iter()
        .zip(subsets)
        .map(|(&n, idx)| {
            let subset = data.subset(&idx)?;
            let outcome = train_ldro(&subset, prompts, run, monitor)?;
            sweep_row(n as f64, &outcome, prompts, eval, run.options.normalize_inputs)
        })
        .collect()
}

/// Softmax over each debias group's bare logits, per sample.
pub fn debias_probabilities(adapted: ArrayView2<f64>, prompts: &PromptSet) -> Vec<Array2<f64>> {
    prompts
        .debias_groups()
        .iter()
        .map(|g| {
            let mut logits = adapted.dot(&to_f64(g.embeddings.view()).t());
            for mut row in logits.axis_iter_mut(Axis(0)) {
                let p = crate::losses::softmax(&row.to_vec());
                row.assign(&ndarray::Array1::from(p));
            }
            logits
        })
        .collect()
}
