//! Global average precision, mean average precision and precision at equal
//! recall, with brute-force counterparts in [`oracle`].
//!
//! Rankings break score ties deterministically: within a video by class index,
//! across videos by (video index, class index), both ascending.

mod io;
pub mod oracle;

use std::cmp::Ordering;
use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{read_predictions, write_predictions, ScoreTable};

/// Per-video confidences over `C` classes with their ground-truth labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    ids: Vec<String>,
    num_classes: usize,
    scores: Vec<f64>,
    labels: Vec<Vec<usize>>,
}

impl PredictionSet {
    /// `scores` is row-major `[ids.len() × num_classes]`.
    pub fn new(ids: Vec<String>, num_classes: usize, scores: Vec<f64>, labels: Vec<Vec<usize>>) -> Result<Self> {
        let n = ids.len();
        if scores.len() != n * num_classes || labels.len() != n {
            return Err(Error::Data(format!(
                "prediction set: {n} ids, {} label sets and {} scores for C={num_classes}",
                labels.len(),
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!(
                "video `{}`: non-finite confidence for class {}",
                ids[i / num_classes],
                i % num_classes
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate video id `{id}`")));
            }
        }
        for (id, ls) in ids.iter().zip(&labels) {
            if let Some(&l) = ls.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Data(format!(
                    "video `{id}`: label {l} out of range [0, {num_classes})"
                )));
            }
        }
        Ok(Self {
            ids,
            num_classes,
            scores,
            labels,
        })
    }

    pub fn from_tensor(ids: Vec<String>, scores: &Tensor, labels: Vec<Vec<usize>>) -> Result<Self> {
        let (_, c) = scores.dims2();
        Self::new(ids, c, scores.values().to_vec(), labels)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn labels(&self) -> &[Vec<usize>] {
        &self.labels
    }

    /// Same videos and labels, new confidences.
    pub fn with_scores(&self, scores: Vec<f64>) -> Result<Self> {
        Self::new(self.ids.clone(), self.num_classes, scores, self.labels.clone())
    }

    fn is_hit(&self, video: usize, class: usize) -> bool {
        self.labels[video].contains(&class)
    }
}

/// Classes of `row` by descending score, ties by class index.
pub fn ranked_classes(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| descending(row[a], row[b]).then(a.cmp(&b)));
    idx
}

/// Scores are finite, so this is total; `-0.0` and `0.0` tie.
fn descending(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Average precision of a ranked hit list: Σ over hits of precision at that
/// position, divided by `positives`.
fn average_precision(hits: impl Iterator<Item = bool>, positives: usize) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (i, hit) in hits.enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    sum / positives as f64
}

/// GAP over the pooled top-`k` predictions of every video.
pub fn gap_at_k(preds: &PredictionSet, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("GAP needs k >= 1".into()));
    }
    let positives: usize = preds.labels.iter().map(Vec::len).sum();
    if positives == 0 {
        return Err(Error::Data(
            "GAP is undefined: no video has a ground-truth label".into(),
        ));
    }
    let mut list: Vec<(f64, usize, usize)> = (0..preds.len())
        .into_par_iter()
        .flat_map_iter(|v| {
            let row = preds.row(v);
            ranked_classes(row).into_iter().take(k).map(move |c| (row[c], v, c))
        })
        .collect();
    list.sort_by(|a, b| descending(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(average_precision(
        list.iter().map(|&(_, v, c)| preds.is_hit(v, c)),
        positives,
    ))
}

/// Per-class average precision over all videos, `None` for classes without
/// positives; the mean runs over the remaining classes.
pub fn mean_ap(preds: &PredictionSet) -> Result<(f64, Vec<Option<f64>>)> {
    let c = preds.num_classes;
    let mut positives = vec![0usize; c];
    for ls in &preds.labels {
        for &l in ls {
            positives[l] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..c)
        .into_par_iter()
        .map(|cls| {
            if positives[cls] == 0 {
                return None;
            }
            let mut order: Vec<usize> = (0..preds.len()).collect();
            order.sort_by(|&a, &b| descending(preds.scores[a * c + cls], preds.scores[b * c + cls]).then(a.cmp(&b)));
            Some(average_precision(
                order.into_iter().map(|v| preds.is_hit(v, cls)),
                positives[cls],
            ))
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Data("mAP is undefined: no class has a positive".into()));
    }
    Ok((present.iter().sum::<f64>() / present.len() as f64, per_class))
}

/// Mean over videos with `n ≥ 1` labels of the precision of their top `n`
/// predictions; 0 when no video has labels.
pub fn perr(preds: &PredictionSet) -> f64 {
    let per_video: Vec<f64> = (0..preds.len())
        .into_par_iter()
        .filter_map(|v| {
            let n = preds.labels[v].len();
            if n == 0 {
                return None;
            }
            let hits = ranked_classes(preds.row(v))
                .into_iter()
                .take(n)
                .filter(|&c| preds.is_hit(v, c))
                .count();
            Some(hits as f64 / n as f64)
        })
        .collect();
    if per_video.is_empty() {
        0.0
    } else {
        per_video.iter().sum::<f64>() / per_video.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub gap: f64,
    pub map: f64,
    pub perr: f64,
    pub per_class_ap: Vec<Option<f64>>,
}

pub fn evaluate(preds: &PredictionSet, k: usize) -> Result<MetricReport> {
    let gap = gap_at_k(preds, k)?;
    let (map, per_class_ap) = mean_ap(preds)?;
    Ok(MetricReport {
        gap,
        map,
        perr: perr(preds),
        per_class_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[&[f64]], labels: &[&[usize]]) -> PredictionSet {
        let c = scores[0].len();
        PredictionSet::new(
            (0..scores.len()).map(|i| format!("v{i}")).collect(),
            c,
            scores.concat(),
            labels.iter().map(|l| l.to_vec()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn two_video_gap() {
        let p = set(&[&[0.9, 0.8, 0.1], &[0.0, 0.7, 0.6]], &[&[0], &[1, 2]]);
        let g = gap_at_k(&p, 2).unwrap();
        assert_eq!(g, (1.0 + 2.0 / 3.0 + 3.0 / 4.0) / 3.0);
        assert!((g - 29.0 / 36.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictor() {
        let p = set(&[&[0.9, 0.1, 0.8], &[0.2, 0.7, 0.3]], &[&[0, 2], &[1]]);
        assert_eq!(gap_at_k(&p, 20).unwrap(), 1.0);
        assert_eq!(mean_ap(&p).unwrap().0, 1.0);
        assert_eq!(perr(&p), 1.0);
    }

    #[test]
    fn textbook_ap() {
        let p = set(&[&[0.9], &[0.8], &[0.7], &[0.6]], &[&[0], &[], &[0], &[]]);
        assert!((mean_ap(&p).unwrap().0 - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn classes_without_positives_are_skipped() {
        let p = set(&[&[0.9, 0.5], &[0.1, 0.4]], &[&[0], &[]]);
        let (m, per) = mean_ap(&p).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(per, vec![Some(1.0), None]);
        let none = set(&[&[0.9]], &[&[]]);
        assert!(mean_ap(&none).is_err());
        assert!(gap_at_k(&none, 1).is_err());
    }

    #[test]
    fn perr_counts_top_n() {
        let p = set(&[&[0.9, 0.8, 0.7], &[0.5, 0.5, 0.5]], &[&[0, 2], &[]]);
        assert_eq!(perr(&p), 0.5);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(ranked_classes(&[0.5, 0.7, 0.5, 0.7]), vec![1, 3, 0, 2]);
        // Equal scores across videos: video 0 ranks first.
        let p = set(&[&[0.5], &[0.5]], &[&[], &[0]]);
        assert_eq!(gap_at_k(&p, 1).unwrap(), 0.5);
    }

    #[test]
    fn rejects_bad_sets() {
        assert!(PredictionSet::new(vec!["a".into(), "a".into()], 1, vec![0.1, 0.2], vec![vec![], vec![]]).is_err());
        assert!(PredictionSet::new(vec!["a".into()], 1, vec![f64::NAN], vec![vec![]]).is_err());
        assert!(PredictionSet::new(vec!["a".into()], 1, vec![0.1], vec![vec![1]]).is_err());
    }
}
