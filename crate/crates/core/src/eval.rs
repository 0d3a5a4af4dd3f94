//! Prompt-based classification, group-wise metrics and domain-aware model
//! selection.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};

use crate::adapter::AdapterMLP;
use crate::embed_store::{EmbeddingMatrix, GroupedDataset};
use crate::error::{Error, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Linear classifier over prompt embeddings, optionally preceded by a chain
/// of adapters (an empty chain is the zero-shot classifier).
#[derive(Debug, Clone)]
pub struct Classifier {
    class_texts: Array2<f32>,
    adapters: Vec<AdapterMLP>,
    normalize_inputs: bool,
}

impl Classifier {
    pub fn zero_shot(class_texts: &EmbeddingMatrix) -> Result<Self> {
        Self::new(class_texts, Vec::new(), true)
    }

    pub fn new(
        class_texts: &EmbeddingMatrix,
        adapters: Vec<AdapterMLP>,
        normalize_inputs: bool,
    ) -> Result<Self> {
        if class_texts.count() < 2 {
            return Err(Error::Validation("classifier needs at least two classes".into()));
        }
        if let Some(a) = adapters.iter().find(|a| a.dim() != class_texts.dim()) {
            return Err(Error::Shape(format!(
                "adapter width {} does not match prompt width {}",
                a.dim(),
                class_texts.dim()
            )));
        }
        Ok(Self {
            class_texts: class_texts.to_array(),
            adapters,
            normalize_inputs,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_texts.nrows()
    }

    pub fn adapters(&self) -> &[AdapterMLP] {
        &self.adapters
    }

    pub fn with_adapters(&self, adapters: Vec<AdapterMLP>) -> Result<Self> {
        let texts = EmbeddingMatrix::from_array(&self.class_texts)?;
        Self::new(&texts, adapters, self.normalize_inputs)
    }

    /// Image embeddings after optional normalization and the adapter chain.
    pub fn adapted(&self, images: &EmbeddingMatrix) -> Result<Array2<f32>> {
        if images.dim() != self.class_texts.ncols() {
            return Err(Error::Shape(format!(
                "image width {} does not match prompt width {}",
                images.dim(),
                self.class_texts.ncols()
            )));
        }
        let mut x = prepare_inputs(images, self.normalize_inputs);
        for a in &self.adapters {
            x = a.apply(x.view())?;
        }
        Ok(x)
    }

    pub fn predict(&self, images: &EmbeddingMatrix) -> Result<Vec<usize>> {
        let x = self.adapted(images)?;
        Ok(self.predict_adapted(x.view()))
    }

    fn predict_adapted(&self, adapted: ArrayView2<f32>) -> Vec<usize> {
        let scores = adapted.dot(&self.class_texts.t());
        scores
            .rows()
            .into_iter()
            .map(|r| argmax(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect()
    }

    pub fn evaluate(&self, data: &GroupedDataset) -> Result<EvalReport> {
        let labels = data.require_labels()?;
        let groups = data.require_groups()?;
        let predictions = self.predict(data.embeddings())?;
        Ok(EvalReport::from_predictions(
            &predictions,
            labels,
            groups,
            data.group_count(),
        ))
    }
}

/// Input rows as fed to the adapter chain: L2-normalized when requested and
/// not already unit length.
pub fn prepare_inputs(images: &EmbeddingMatrix, normalize: bool) -> Array2<f32> {
    if normalize && !images.is_normalized() {
        images.l2_normalized().to_array()
    } else {
        images.to_array()
    }
}

/// Instance-level and per-group accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Fraction correct over all instances.
    pub average_acc: f64,
    /// Accuracy per group; `None` for groups with no instances.
    pub group_acc: Vec<Option<f64>>,
    /// Minimum over non-empty groups.
    pub worst_group_acc: f64,
    pub counts: Vec<usize>,
    pub correct: Vec<usize>,
}

impl EvalReport {
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        groups: &[usize],
        group_count: usize,
    ) -> Self {
        let mut counts = vec![0usize; group_count];
        let mut correct = vec![0usize; group_count];
        for ((&p, &y), &g) in predictions.iter().zip(labels).zip(groups) {
            counts[g] += 1;
            if p == y {
                correct[g] += 1;
            }
        }
        Self::from_counts(counts, correct)
    }

    /// Builds a report from per-group instance and correct counts.
    pub fn from_counts(counts: Vec<usize>, correct: Vec<usize>) -> Self {
        let group_acc: Vec<Option<f64>> = counts
            .iter()
            .zip(&correct)
            .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
            .collect();
        let total: usize = counts.iter().sum();
        let total_correct: usize = correct.iter().sum();
        let average_acc = if total == 0 {
            0.0
        } else {
            total_correct as f64 / total as f64
        };
        let worst_group_acc = group_acc
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min);
        Self {
            average_acc,
            worst_group_acc: if worst_group_acc.is_finite() { worst_group_acc } else { 0.0 },
            group_acc,
            counts,
            correct,
        }
    }

    /// Groups excluded from the worst-case because they have no instances.
    pub fn empty_groups(&self) -> Vec<usize> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n == 0)
            .map(|(g, _)| g)
            .collect()
    }

    /// One `key=value` per line, fixed key order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "average_acc={}", self.average_acc).unwrap();
        writeln!(out, "worst_group_acc={}", self.worst_group_acc).unwrap();
        writeln!(out, "groups={}", self.counts.len()).unwrap();
        for (g, acc) in self.group_acc.iter().enumerate() {
            let acc = acc.map_or_else(|| "empty".to_string(), |a| a.to_string());
            writeln!(out, "group_{g}_acc={acc}").unwrap();
            writeln!(out, "group_{g}_count={}", self.counts[g]).unwrap();
            writeln!(out, "group_{g}_correct={}", self.correct[g]).unwrap();
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let map: std::collections::BTreeMap<&str, &str> = text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .filter_map(|l| l.split_once('='))
            .collect();
        let get = |k: &str| -> Result<&str> {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Parse(format!("report missing key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("report key {k} is not an integer")))
        };
        let groups = num("groups")?;
        let mut counts = Vec::with_capacity(groups);
        let mut correct = Vec::with_capacity(groups);
        for g in 0..groups {
            counts.push(num(&format!("group_{g}_count"))?);
            correct.push(num(&format!("group_{g}_correct"))?);
        }
        Ok(Self::from_counts(counts, correct))
    }
}

/// Identifies one trained model: a configuration in a sweep and an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CheckpointId {
    pub config: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub id: CheckpointId,
    pub validation: EvalReport,
}

/// Picks the candidate with the best validation worst-group accuracy; ties go
/// to the higher average accuracy, then to the earliest epoch.
pub fn select_model(candidates: &[Candidate]) -> Option<&Candidate> {
    candidates.iter().reduce(|best, c| {
        let (a, b) = (&c.validation, &best.validation);
        let better = a.worst_group_acc > b.worst_group_acc
            || (a.worst_group_acc == b.worst_group_acc
                && (a.average_acc > b.average_acc
                    || (a.average_acc == b.average_acc && c.id.epoch < best.id.epoch)));
        if better {
            c
        } else {
            best
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterSpec;

    fn texts() -> EmbeddingMatrix {
        EmbeddingMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    fn report(avg: f64, worst: f64) -> EvalReport {
        EvalReport {
            average_acc: avg,
            group_acc: vec![Some(worst)],
            worst_group_acc: worst,
            counts: vec![1],
            correct: vec![1],
        }
    }

    #[test]
    fn aligned_direction() {
        let clf = Classifier::zero_shot(&texts()).unwrap();
        let img = EmbeddingMatrix::new(2, vec![1.0, 0.0]).unwrap();
        assert_eq!(clf.predict(&img).unwrap(), vec![0]);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        let clf = Classifier::zero_shot(&texts()).unwrap();
        let img = EmbeddingMatrix::new(2, vec![1.0, 1.0]).unwrap();
        assert_eq!(clf.predict(&img).unwrap(), vec![0]);
    }

    #[test]
    fn identity_adapter_matches_zero_shot() {
        let mut spec = AdapterSpec::two_layer(2);
        spec.blend = 0.0;
        let clf = Classifier::zero_shot(&texts()).unwrap();
        let adapted = clf
            .with_adapters(vec![AdapterMLP::init(spec, 1).unwrap()])
            .unwrap();
        let img = EmbeddingMatrix::new(2, vec![0.3, -0.2, -1.0, 0.4, 0.7, 0.7]).unwrap();
        assert_eq!(clf.predict(&img).unwrap(), adapted.predict(&img).unwrap());
    }

    #[test]
    fn perfect_and_one_failed_group() {
        let labels = [0, 1, 0, 1, 0, 1, 0, 1];
        let groups = [0, 0, 1, 1, 2, 2, 3, 3];
        let r = EvalReport::from_predictions(&labels, &labels, &groups, 4);
        assert_eq!((r.average_acc, r.worst_group_acc), (1.0, 1.0));

        let mut preds = labels;
        preds[6] = 1;
        preds[7] = 0;
        let r = EvalReport::from_predictions(&preds, &labels, &groups, 4);
        assert_eq!((r.average_acc, r.worst_group_acc), (0.75, 0.0));
    }

    #[test]
    fn empty_group_is_excluded() {
        let r = EvalReport::from_predictions(&[0, 1], &[0, 0], &[0, 2], 3);
        assert_eq!(r.group_acc, vec![Some(1.0), None, Some(0.0)]);
        assert_eq!(r.worst_group_acc, 0.0);
        assert_eq!(r.empty_groups(), vec![1]);
    }

    #[test]
    fn missing_groups_is_contract_error() {
        let emb = EmbeddingMatrix::new(2, vec![1.0, 0.0]).unwrap();
        let ds = GroupedDataset::new(emb, Some(vec![0]), None, 2, 4).unwrap();
        let clf = Classifier::zero_shot(&texts()).unwrap();
        assert!(matches!(clf.evaluate(&ds), Err(Error::Contract(_))));
    }

    #[test]
    fn kv_round_trip() {
        let r = EvalReport::from_predictions(&[0, 1, 1, 0, 1], &[0, 1, 0, 0, 1], &[0, 0, 1, 3, 3], 4);
        let back = EvalReport::from_kv(&r.to_kv()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn selection_rules() {
        let only = [Candidate {
            id: CheckpointId { config: 0, epoch: 3 },
            validation: report(0.5, 0.2),
        }];
        assert_eq!(select_model(&only).unwrap().id.epoch, 3);

        let tie = [
            Candidate {
                id: CheckpointId { config: 0, epoch: 1 },
                validation: report(0.8, 0.6),
            },
            Candidate {
                id: CheckpointId { config: 1, epoch: 4 },
                validation: report(0.9, 0.6),
            },
            Candidate {
                id: CheckpointId { config: 2, epoch: 0 },
                validation: report(0.9, 0.6),
            },
        ];
        assert_eq!(select_model(&tie).unwrap().id, CheckpointId { config: 2, epoch: 0 });
        assert!(select_model(&[]).is_none());
    }
}
