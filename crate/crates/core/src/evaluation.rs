//! Classification metrics and stratified splitting.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::structures::argmax;

/// Counts indexed `[truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let n = counts.len();
        if n == 0 || counts.iter().any(|r| r.len() != n) {
            return Err(Error::dim("confusion", "count matrix must be square and non-empty"));
        }
        Ok(Self { counts })
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Recall of each class, `None` for classes without true samples.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["truth".to_string()];
        header.extend((0..self.classes()).map(|c| format!("pred_{c}")));
        w.write_record(&header)?;
        for (t, row) in self.counts.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dim(
            "confusion",
            format!("{} labels vs {} predictions", y_true.len(), y_pred.len()),
        ));
    }
    let mut counts = vec![vec![0u64; classes]; classes];
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        if t >= classes || p >= classes {
            return Err(Error::Data(format!(
                "sample {i}: label pair ({t}, {p}) outside 0..{classes}"
            )));
        }
        counts[t][p] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

/// Mean recall over the classes that have true samples.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let present: Vec<f64> = cm.recalls().into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::Data("balanced accuracy of an empty confusion matrix".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("accuracy of an empty confusion matrix".into()));
    }
    let trace: u64 = (0..cm.classes()).map(|c| cm.counts[c][c]).sum();
    Ok(trace as f64 / total as f64)
}

/// Macro one-vs-rest AUC by Mann–Whitney pair counting, ties counted ½.
/// Classes with no positives or no negatives are skipped with a warning.
pub fn auc_macro_ovr(scores: &Array, y_true: &[usize]) -> Result<f64> {
    let (n, classes) = match *scores.shape() {
        [n, c] => (n, c),
        _ => return Err(Error::dim("auc", format!("scores of shape {:?}", scores.shape()))),
    };
    if n != y_true.len() {
        return Err(Error::dim("auc", format!("{n} score rows for {} labels", y_true.len())));
    }
    if let Some(&y) = y_true.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {y} outside 0..{classes}")));
    }
    let mut per_class = Vec::new();
    for c in 0..classes {
        let mut pos: Vec<f64> = Vec::new();
        let mut neg: Vec<f64> = Vec::new();
        for (i, &y) in y_true.iter().enumerate() {
            let s = scores.at(i, c);
            if y == c {
                pos.push(s)
            } else {
                neg.push(s)
            }
        }
        if pos.is_empty() || neg.is_empty() {
            log::warn!("AUC: class {c} has no positive or no negative samples, skipped");
            continue;
        }
        per_class.push(pair_count_auc(&mut pos, &mut neg));
    }
    if per_class.is_empty() {
        return Err(Error::Data("AUC undefined: no class has both positives and negatives".into()));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

/// `(#{pos > neg} + ½·#{pos = neg}) / (|pos|·|neg|)` via sorting.
fn pair_count_auc(pos: &mut [f64], neg: &mut [f64]) -> f64 {
    neg.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &p in pos.iter() {
        let below = neg.partition_point(|&x| x < p);
        let not_above = neg.partition_point(|&x| x <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bac: f64,
    pub acc: f64,
    pub auc: f64,
    /// Recall per class; `null` for classes absent from the evaluated set.
    pub per_class_recall: Vec<Option<f64>>,
}

/// BAC, ACC and AUC of probability scores, predicting by argmax.
pub fn evaluate(scores: &Array, y_true: &[usize]) -> Result<(Metrics, ConfusionMatrix)> {
    let classes = scores.last_dim();
    let preds: Vec<usize> = scores.rows().map(argmax).collect();
    let cm = confusion(y_true, &preds, classes)?;
    let metrics = Metrics {
        bac: balanced_accuracy(&cm)?,
        acc: accuracy(&cm)?,
        auc: auc_macro_ovr(scores, y_true)?,
        per_class_recall: cm.recalls(),
    };
    Ok((metrics, cm))
}

/// `k` disjoint folds covering every index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    /// All indices outside fold `i`, ascending.
    pub fn complement(&self, i: usize) -> Vec<usize> {
        let mut rest: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        rest.sort_unstable();
        rest
    }
}

fn class_groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        groups[y].push(i);
    }
    groups
}

/// Seeded per-class shuffle, then round-robin dealing. The dealing position
/// carries over from one class to the next so fold sizes also stay within
/// one of each other.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > labels.len() {
        return Err(Error::Config(format!("{k} folds for {} samples", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for (c, mut members) in class_groups(labels).into_iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            log::warn!("class {c} has {} samples for {k} folds; some folds lack it", members.len());
        }
        members.shuffle(&mut rng);
        for i in members {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldSplit { folds })
}

/// Splits `indices` into (train, validation), drawing `fraction` of every
/// class into validation while leaving at least one sample per class in
/// train.
pub fn stratified_holdout(
    indices: &[usize],
    labels: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction must lie in (0, 1), got {fraction}")));
    }
    let sub: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut members in class_groups(&sub) {
        members.shuffle(&mut rng);
        let take = ((members.len() as f64 * fraction).round() as usize).min(members.len().saturating_sub(1));
        val.extend(members[..take].iter().map(|&j| indices[j]));
        train.extend(members[take..].iter().map(|&j| indices[j]));
    }
    train.sort_unstable();
    val.sort_unstable();
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "holdout of {} samples left an empty split",
            indices.len()
        )));
    }
    Ok((train, val))
}
