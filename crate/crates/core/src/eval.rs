//! Test-time inference over feature subsets, classification metrics, and
//! latent export.
//!
//! Inference is deterministic: every subset is encoded with zero noise, so
//! the latent of subset `j` is its mean vector.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::MultiOmicsDataset;
use crate::error::{Error, Result};
use crate::model::VaeModel;
use crate::objective::head_input_batch;
use crate::tensor::{softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Max,
    Min,
    Sum,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [Aggregation::Mean, Aggregation::Max, Aggregation::Min, Aggregation::Sum];
}

/// Element-wise reduction of equally sized latent vectors.
pub fn aggregate(latents: &[Vec<f64>], method: Aggregation) -> Result<Vec<f64>> {
    let first = latents
        .first()
        .ok_or_else(|| Error::Validation("cannot aggregate an empty list of latents".into()))?;
    if let Some(bad) = latents.iter().find(|l| l.len() != first.len()) {
        return Err(Error::dim("aggregate", first.len(), bad.len()));
    }
    let mut out = first.clone();
    for l in &latents[1..] {
        for (o, &v) in out.iter_mut().zip(l) {
            *o = match method {
                Aggregation::Mean | Aggregation::Sum => *o + v,
                Aggregation::Max => o.max(v),
                Aggregation::Min => o.min(v),
            };
        }
    }
    if method == Aggregation::Mean {
        let n = latents.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// How a prediction is formed from the subset latents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Reduce all subset head inputs, then classify.
    Aggregate(Aggregation),
    /// Classify one seeded random subset's latent, without its identity.
    RandomSubset,
    /// Classify one seeded random subset's latent with its one-hot appended.
    RandomWithIdentity,
    /// Classify subset `j`.
    Subset(usize),
}

impl Strategy {
    /// The strategies compared in the aggregation sweep.
    pub fn sweep() -> Vec<Strategy> {
        let mut v: Vec<Strategy> = Aggregation::ALL.iter().map(|&a| Strategy::Aggregate(a)).collect();
        v.push(Strategy::RandomSubset);
        v.push(Strategy::RandomWithIdentity);
        v
    }

    /// The strategy used when none is configured.
    pub fn default_for(model: &VaeModel) -> Strategy {
        if model.config().use_subset_identity {
            Strategy::RandomWithIdentity
        } else if model.subset_count() > 1 {
            Strategy::Aggregate(Aggregation::Mean)
        } else {
            Strategy::Subset(0)
        }
    }

    fn check(self, model: &VaeModel) -> Result<()> {
        match self {
            Strategy::RandomWithIdentity if !model.config().use_subset_identity => Err(Error::Validation(
                "random_with_identity needs a model trained with subset identity".into(),
            )),
            Strategy::Subset(j) if j >= model.subset_count() => Err(Error::Index {
                what: "subsets",
                index: j,
                len: model.subset_count(),
            }),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Aggregate(Aggregation::Mean) => f.write_str("mean"),
            Strategy::Aggregate(Aggregation::Max) => f.write_str("max"),
            Strategy::Aggregate(Aggregation::Min) => f.write_str("min"),
            Strategy::Aggregate(Aggregation::Sum) => f.write_str("sum"),
            Strategy::RandomSubset => f.write_str("random_subset"),
            Strategy::RandomWithIdentity => f.write_str("random_with_identity"),
            Strategy::Subset(j) => write!(f, "subset:{j}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "mean" => Strategy::Aggregate(Aggregation::Mean),
            "max" => Strategy::Aggregate(Aggregation::Max),
            "min" => Strategy::Aggregate(Aggregation::Min),
            "sum" => Strategy::Aggregate(Aggregation::Sum),
            "random_subset" => Strategy::RandomSubset,
            "random_with_identity" => Strategy::RandomWithIdentity,
            other => match other.strip_prefix("subset:").map(str::parse::<usize>) {
                Some(Ok(j)) => Strategy::Subset(j),
                _ => return Err(Error::Validation(format!("unknown strategy `{other}`"))),
            },
        })
    }
}

/// Per-sample seed derived from the evaluation seed and the sample id, so a
/// random draw does not depend on dataset order.
pub fn sample_seed(seed: u64, sample_id: &str) -> u64 {
    // FNV-1a over the id, then a splitmix64 finalizer mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sample_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn draw_subset(seed: u64, m: usize) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..m)
}

/// Head inputs (the downstream layer's input rows) for a batch of samples.
/// `draw_seeds[r]` drives the random strategies for row `r`.
fn head_inputs(model: &VaeModel, full: &[Matrix], strategy: Strategy, draw_seeds: &[u64]) -> Result<Matrix> {
    strategy.check(model)?;
    let m = model.subset_count();
    let rows = full.first().map_or(0, Matrix::rows);
    let zero = Matrix::zeros(rows, model.latent_dim());
    let mu_of = |j: usize| -> Result<Matrix> {
        let inputs = model.partition().gather_batch(full, j)?;
        Ok(model.encode_batch(inputs, &zero)?.mu)
    };
    let identity = model.config().use_subset_identity;
    match strategy {
        Strategy::Aggregate(method) => {
            let per_subset: Vec<Matrix> = (0..m)
                .map(|j| head_input_batch(model, &mu_of(j)?, j))
                .collect::<Result<_>>()?;
            let mut out = Matrix::zeros(rows, model.head_input_dim());
            for r in 0..rows {
                let latents: Vec<Vec<f64>> = per_subset.iter().map(|h| h.row(r).to_vec()).collect();
                out.row_mut(r).copy_from_slice(&aggregate(&latents, method)?);
            }
            Ok(out)
        }
        Strategy::Subset(j) => head_input_batch(model, &mu_of(j)?, j),
        Strategy::RandomSubset | Strategy::RandomWithIdentity => {
            let draws: Vec<usize> = draw_seeds.iter().map(|&s| draw_subset(s, m)).collect();
            let mut out = Matrix::zeros(rows, model.head_input_dim());
            for j in 0..m {
                let picked: Vec<usize> = (0..rows).filter(|&r| draws[r] == j).collect();
                if picked.is_empty() {
                    continue;
                }
                let sub: Vec<Matrix> = full.iter().map(|x| x.select_rows(&picked)).collect();
                let inputs = model.partition().gather_batch(&sub, j)?;
                let mu = model.encode_batch(inputs, &Matrix::zeros(picked.len(), model.latent_dim()))?.mu;
                let head = if strategy == Strategy::RandomWithIdentity {
                    head_input_batch(model, &mu, j)?
                } else if identity {
                    // no identity signal: the one-hot slots stay zero
                    let pad = Matrix::zeros(picked.len(), m);
                    Matrix::hcat(&[&mu, &pad])?
                } else {
                    mu
                };
                for (i, &r) in picked.iter().enumerate() {
                    out.row_mut(r).copy_from_slice(head.row(i));
                }
            }
            Ok(out)
        }
    }
}

/// Class probabilities for one sample given its full per-omics vectors.
/// `seed` selects the subset for the random strategies.
pub fn predict(model: &VaeModel, sample: &[Vec<f64>], strategy: Strategy, seed: u64) -> Result<Vec<f64>> {
    let full: Vec<Matrix> = sample.iter().map(|v| Matrix::row_vector(v)).collect();
    Ok(predict_batch(model, &full, strategy, &[seed])?.remove(0))
}

/// Class probabilities for every row of sample-major inputs.
pub fn predict_batch(model: &VaeModel, full: &[Matrix], strategy: Strategy, draw_seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
    let head = head_inputs(model, full, strategy, draw_seeds)?;
    let logits = model.classify_batch(&head)?.logits;
    Ok((0..logits.rows()).map(|r| softmax(logits.row(r))).collect())
}

fn dataset_probabilities(model: &VaeModel, dataset: &MultiOmicsDataset, strategy: Strategy, seed: u64) -> Result<Vec<Vec<f64>>> {
    if dataset.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    if dataset.omics_dims() != model.config().omics_dims {
        return Err(Error::dim(
            "dataset vs model omics dims",
            format!("{:?}", model.config().omics_dims),
            format!("{:?}", dataset.omics_dims()),
        ));
    }
    let seeds: Vec<u64> = dataset.sample_ids().iter().map(|s| sample_seed(seed, s)).collect();
    predict_batch(model, &dataset.sample_major(), strategy, &seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub roc_auc: f64,
    pub mean_metric: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion_matrix: Vec<Vec<usize>>,
}

pub const METRIC_COLUMNS: [&str; 6] = ["accuracy", "macro_precision", "macro_recall", "macro_f1", "roc_auc", "mean_metric"];

impl MetricsReport {
    pub fn values(&self) -> [f64; 6] {
        [
            self.accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            self.roc_auc,
            self.mean_metric,
        ]
    }

    /// `key<TAB>value` lines, one per metric.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in METRIC_COLUMNS.iter().zip(self.values()) {
            writeln!(out, "{k}\t{v}").expect("write to String");
        }
        out
    }

    /// Tab-separated values in [`METRIC_COLUMNS`] order.
    pub fn tsv_fields(&self) -> String {
        self.values().iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\t")
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Confusion matrix with rows = truth, columns = prediction.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], class_count: usize) -> Vec<Vec<usize>> {
    let mut cm = vec![vec![0usize; class_count]; class_count];
    for (&t, &p) in truth.iter().zip(predicted) {
        cm[t][p] += 1;
    }
    cm
}

/// Accuracy and macro precision/recall/F1 from a confusion matrix. Classes
/// with neither true nor predicted samples are left out of the averages; an
/// undefined precision or recall counts as 0.
pub fn confusion_metrics(cm: &[Vec<usize>]) -> (f64, f64, f64, f64) {
    let c = cm.len();
    let total: usize = cm.iter().flatten().sum();
    let correct: usize = (0..c).map(|i| cm[i][i]).sum();
    let (mut p_sum, mut r_sum, mut f_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
    for k in 0..c {
        let tp = cm[k][k] as f64;
        let actual: usize = cm[k].iter().sum();
        let predicted: usize = (0..c).map(|i| cm[i][k]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
        let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
        n += 1;
    }
    let accuracy = if total > 0 { correct as f64 / total as f64 } else { 0.0 };
    let n = n.max(1) as f64;
    (accuracy, p_sum / n, r_sum / n, f_sum / n)
}

/// Trapezoidal area under the ROC curve of `scores` for the positives.
/// Returns `None` when either class is absent.
pub fn roc_auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        // consume every sample sharing this threshold
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tpr = tp as f64 / pos as f64;
        let fpr = fp as f64 / neg as f64;
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Some(area)
}

/// Macro one-vs-rest ROC AUC over classes present in the truth. Falls back
/// to 0.5 when no class has both positives and negatives.
pub fn macro_roc_auc(truth: &[usize], probs: &[Vec<f64>], class_count: usize) -> f64 {
    let aucs: Vec<f64> = (0..class_count)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            roc_auc_binary(&scores, &positive)
        })
        .collect();
    if aucs.is_empty() {
        0.5
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

/// Full report from true labels and predicted class probabilities.
pub fn metrics_from_probabilities(truth: &[usize], probs: &[Vec<f64>], class_count: usize) -> Result<MetricsReport> {
    if truth.is_empty() {
        return Err(Error::Validation("cannot compute metrics without samples".into()));
    }
    if truth.len() != probs.len() {
        return Err(Error::dim("metrics", truth.len(), probs.len()));
    }
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let cm = confusion_matrix(truth, &predicted, class_count);
    let (accuracy, macro_precision, macro_recall, macro_f1) = confusion_metrics(&cm);
    Ok(MetricsReport {
        accuracy,
        macro_precision,
        macro_recall,
        macro_f1,
        roc_auc: macro_roc_auc(truth, probs, class_count),
        mean_metric: (accuracy + macro_precision + macro_recall) / 3.0,
        confusion_matrix: cm,
    })
}

pub fn evaluate(model: &VaeModel, dataset: &MultiOmicsDataset, strategy: Strategy, seed: u64) -> Result<MetricsReport> {
    let probs = dataset_probabilities(model, dataset, strategy, seed)?;
    metrics_from_probabilities(dataset.labels(), &probs, model.config().class_count)
}

/// Fraction of correctly classified samples.
pub fn accuracy(model: &VaeModel, dataset: &MultiOmicsDataset, strategy: Strategy, seed: u64) -> Result<f64> {
    let probs = dataset_probabilities(model, dataset, strategy, seed)?;
    let hits = probs.iter().zip(dataset.labels()).filter(|(p, &l)| argmax(p) == l).count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// Deterministic latent means, aggregated across subsets with `method`.
pub fn latent_means(model: &VaeModel, dataset: &MultiOmicsDataset, method: Aggregation) -> Result<Matrix> {
    let full = dataset.sample_major();
    let zero = Matrix::zeros(dataset.len(), model.latent_dim());
    let per_subset: Vec<Matrix> = (0..model.subset_count())
        .map(|j| Ok(model.encode_batch(model.partition().gather_batch(&full, j)?, &zero)?.mu))
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(dataset.len(), model.latent_dim());
    for r in 0..dataset.len() {
        let latents: Vec<Vec<f64>> = per_subset.iter().map(|m| m.row(r).to_vec()).collect();
        out.row_mut(r).copy_from_slice(&aggregate(&latents, method)?);
    }
    Ok(out)
}

/// Writes `sample_id, label, z0..z{q-1}` rows (tab-separated, with header).
pub fn export_latents(model: &VaeModel, dataset: &MultiOmicsDataset, path: impl AsRef<Path>, method: Aggregation) -> Result<()> {
    let path = path.as_ref();
    let latents = latent_means(model, dataset, method)?;
    let mut out = String::from("sample_id\tlabel");
    for d in 0..model.latent_dim() {
        write!(out, "\tz{d}").expect("write to String");
    }
    out.push('\n');
    for (r, sid) in dataset.sample_ids().iter().enumerate() {
        write!(out, "{sid}\t{}", dataset.class_names()[dataset.labels()[r]]).expect("write to String");
        for v in latents.row(r) {
            write!(out, "\t{v}").expect("write to String");
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn aggregate_examples() {
        let a = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(aggregate(&a, Aggregation::Sum).unwrap(), vec![4.0, 6.0]);
        assert_eq!(aggregate(&a, Aggregation::Mean).unwrap(), vec![2.0, 3.0]);
        let same = vec![vec![0.3, -0.7]; 5];
        assert_eq!(aggregate(&same, Aggregation::Mean).unwrap(), vec![0.3, -0.7]);
        let mixed = vec![vec![-1.0, 5.0], vec![2.0, 3.0]];
        assert_eq!(aggregate(&mixed, Aggregation::Max).unwrap(), vec![2.0, 5.0]);
        assert_eq!(aggregate(&mixed, Aggregation::Min).unwrap(), vec![-1.0, 3.0]);
        assert!(aggregate(&[], Aggregation::Mean).is_err());
    }

    #[test]
    fn strategy_round_trip() {
        for s in Strategy::sweep().into_iter().chain([Strategy::Subset(3)]) {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("median".parse::<Strategy>().is_err());
    }

    #[test]
    fn hand_computed_confusion_metrics() {
        let cm = vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 0, 2]];
        let (acc, p, r, f) = confusion_metrics(&cm);
        // class precisions 2/3, 1, 1; recalls 1, 1/2, 1; F1 4/5, 2/3, 1
        assert!((acc - 5.0 / 6.0).abs() < 1e-15);
        assert!((p - 8.0 / 9.0).abs() < 1e-15);
        assert!((r - 5.0 / 6.0).abs() < 1e-15);
        assert!((f - 37.0 / 45.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_skipped_and_zero_predictions_score_zero() {
        // class 2 absent everywhere; class 1 never predicted
        let cm = vec![vec![2, 0, 0], vec![2, 0, 0], vec![0, 0, 0]];
        let (acc, p, r, _) = confusion_metrics(&cm);
        assert_eq!(acc, 0.5);
        assert_eq!(p, (0.5 + 0.0) / 2.0);
        assert_eq!(r, (1.0 + 0.0) / 2.0);
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc_binary(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(roc_auc_binary(&[0.1, 0.9], &[true, false]), Some(0.0));
        assert_eq!(roc_auc_binary(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(roc_auc_binary(&[0.5], &[true]), None);
    }

    #[test]
    fn perfect_and_constant_predictions() {
        let truth = vec![0, 1, 0, 1];
        let probs: Vec<Vec<f64>> = truth.iter().map(|&t| if t == 0 { vec![0.9, 0.1] } else { vec![0.2, 0.8] }).collect();
        let r = metrics_from_probabilities(&truth, &probs, 2).unwrap();
        assert_eq!(r.values()[..5], [1.0; 5]);
        let constant = vec![vec![0.6, 0.4]; 4];
        let r = metrics_from_probabilities(&truth, &constant, 2).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert!((r.mean_metric - (r.accuracy + r.macro_precision + r.macro_recall) / 3.0).abs() < 1e-12);
    }

    fn model(m: usize, identity: bool) -> VaeModel {
        let cfg = ModelConfig {
            subset_count: m,
            latent_dim: 4,
            branch_hidden: 8,
            trunk_hidden: 6,
            downstream_hidden: 5,
            use_subset_identity: identity,
            ..ModelConfig::new(vec![6, 4], 3)
        };
        VaeModel::build(cfg, 21).unwrap()
    }

    fn sample() -> Vec<Vec<f64>> {
        vec![vec![0.1, 0.5, 0.2, 0.9, 0.4, 0.3], vec![0.7, 0.2, 0.6, 0.1]]
    }

    #[test]
    fn single_subset_strategies_coincide() {
        let m = model(1, false);
        let base = predict(&m, &sample(), Strategy::Subset(0), 0).unwrap();
        for s in [
            Strategy::Aggregate(Aggregation::Mean),
            Strategy::Aggregate(Aggregation::Sum),
            Strategy::Aggregate(Aggregation::Max),
            Strategy::RandomSubset,
        ] {
            assert_eq!(predict(&m, &sample(), s, 17).unwrap(), base);
        }
        assert!(predict(&m, &sample(), Strategy::RandomWithIdentity, 0).is_err());
    }

    #[test]
    fn predictions_are_deterministic_probabilities() {
        let m = model(2, true);
        for s in Strategy::sweep() {
            let p = predict(&m, &sample(), s, 5).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(p, predict(&m, &sample(), s, 5).unwrap());
        }
    }
}
