//! Weighted fusion of prediction sets, leave-one-out fusion weights, greedy
//! ensemble growth, and segmented inference.

mod segmented;

use std::cmp::Ordering;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{gap_at_k, mean_ap, perr, PredictionSet};
use crate::rng::child;

pub use segmented::{segmented_inference, segmented_predictions, SEGMENT_WEIGHTS};

/// Score used to rank fusions; higher is better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Gap { k: usize },
    Map,
    Perr,
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Gap { k: 20 }
    }
}

impl Metric {
    pub fn score(&self, preds: &PredictionSet) -> Result<f64> {
        match *self {
            Metric::Gap { k } => gap_at_k(preds, k),
            Metric::Map => mean_ap(preds).map(|r| r.0),
            Metric::Perr => Ok(perr(preds)),
        }
    }
}

fn check_aligned(members: &[&PredictionSet]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("fusion needs at least one member".into()))?;
    for (m, p) in members.iter().enumerate().skip(1) {
        if p.num_classes() != first.num_classes() {
            return Err(Error::Data(format!(
                "member {m} has C={} but member 0 has C={}",
                p.num_classes(),
                first.num_classes()
            )));
        }
        if p.len() != first.len() {
            return Err(Error::Data(format!(
                "member {m} has {} videos but member 0 has {}",
                p.len(),
                first.len()
            )));
        }
        if let Some(i) = (0..p.len()).find(|&i| p.ids()[i] != first.ids()[i]) {
            return Err(Error::Data(format!(
                "member {m} is misaligned at row {i}: video `{}` vs `{}` in member 0",
                p.ids()[i],
                first.ids()[i]
            )));
        }
    }
    Ok(())
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// `Σ_m w_m · conf_m` per video and class.
///
/// The sum is evaluated as `a + Σ_{m≠a} w_m (conf_m − a)` around the
/// heaviest member `a`, with members in a canonical order (weight, then
/// scores), so the result does not depend on member order, identical members
/// fuse to themselves and one-hot weights return a member exactly. Weights
/// are treated as summing to one.
pub fn fuse(members: &[&PredictionSet], weights: &[f64]) -> Result<PredictionSet> {
    check_aligned(members)?;
    if weights.len() != members.len() {
        return Err(Error::Config(format!(
            "{} weights for {} members",
            weights.len(),
            members.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Config("fusion weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("fusion weights sum to {total}, expected 1")));
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&i, &j| {
        weights[j]
            .total_cmp(&weights[i])
            .then_with(|| lexicographic(members[i].scores(), members[j].scores()))
    });
    let anchor = members[order[0]].scores();
    let mut out = vec![0.0; anchor.len()];
    for &m in &order[1..] {
        let w = weights[m];
        if w == 0.0 {
            continue;
        }
        for ((o, &x), &a) in out.iter_mut().zip(members[m].scores()).zip(anchor) {
            *o += w * (x - a);
        }
    }
    for (o, &a) in out.iter_mut().zip(anchor) {
        *o += a;
    }
    members[0].with_scores(out)
}

pub fn equal_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Weights proportional to `max(drop, 0)`, where `drop = s_M − s_{M−m}` is
/// how much the ensemble loses without member `m`. If every drop clamps to
/// zero the weights fall back to equal, and the flag is set.
pub fn weights_from_drops(drops: &[f64]) -> (Vec<f64>, bool) {
    let clamped: Vec<f64> = drops.iter().map(|&d| d.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total > 0.0 {
        (clamped.iter().map(|c| c / total).collect(), false)
    } else {
        (equal_weights(drops.len()), true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberReport {
    pub name: String,
    #[serde(rename = "GAP")]
    pub gap: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "PERR")]
    pub perr: f64,
    /// `s_{M−m} − s_M`: negative when the member helps.
    pub drop: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub metric: Metric,
    /// `s_M`, the metric of the equal-weight fusion of all members.
    pub baseline: f64,
    /// Every weight clamped to zero and equal weights were used instead.
    pub fallback: bool,
    pub members: Vec<MemberReport>,
}

impl EnsembleReport {
    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.members.iter().map(|m| m.name.clone()).collect()
    }
}

fn member_report(name: &str, p: &PredictionSet, k: usize, drop: f64, weight: f64) -> Result<MemberReport> {
    Ok(MemberReport {
        name: name.to_string(),
        gap: gap_at_k(p, k)?,
        map: mean_ap(p)?.0,
        perr: perr(p),
        drop,
        weight,
    })
}

fn report_k(metric: Metric) -> usize {
    match metric {
        Metric::Gap { k } => k,
        _ => 20,
    }
}

/// Leave-one-out fusion weights. `s_M` is the metric of the equal-weight
/// fusion of all members and `s_{M−m}` that of the others without `m`.
pub fn leave_one_out_weights(names: &[String], members: &[&PredictionSet], metric: Metric) -> Result<EnsembleReport> {
    if members.len() < 2 {
        return Err(Error::Config(
            "leave-one-out weighting needs at least two members".into(),
        ));
    }
    if names.len() != members.len() {
        return Err(Error::Config(format!(
            "{} names for {} members",
            names.len(),
            members.len()
        )));
    }
    check_aligned(members)?;
    let m = members.len();
    let scores: Vec<f64> = (0..=m)
        .into_par_iter()
        .map(|left_out| {
            let subset: Vec<&PredictionSet> = (0..m).filter(|&i| i != left_out).map(|i| members[i]).collect();
            metric.score(&fuse(&subset, &equal_weights(subset.len()))?)
        })
        .collect::<Result<_>>()?;
    let baseline = scores[m];
    let gains: Vec<f64> = scores[..m].iter().map(|s| baseline - s).collect();
    let (weights, fallback) = weights_from_drops(&gains);
    if fallback {
        warn!("no member improves the equal-weight fusion; using equal weights");
    }
    let k = report_k(metric);
    let rows = (0..m)
        .map(|i| member_report(&names[i], members[i], k, scores[i] - baseline, weights[i]))
        .collect::<Result<_>>()?;
    Ok(EnsembleReport {
        metric,
        baseline,
        fallback,
        members: rows,
    })
}

/// One round of [`greedy_grow`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowStep {
    pub added: Vec<usize>,
    /// Members kept after dropping zero-weight ones.
    pub kept: Vec<usize>,
    pub score: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowResult {
    /// Pool indices of the final ensemble.
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    pub score: f64,
    pub trace: Vec<GrowStep>,
}

/// Weights for a candidate set after removing members whose leave-one-out
/// weight clamps to zero, re-weighting the survivors.
fn prune(names: &[String], pool: &[&PredictionSet], cand: &[usize], metric: Metric) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut cand = cand.to_vec();
    loop {
        if cand.len() == 1 {
            return Ok((cand, vec![1.0]));
        }
        let members: Vec<&PredictionSet> = cand.iter().map(|&i| pool[i]).collect();
        let sub_names: Vec<String> = cand.iter().map(|&i| names[i].clone()).collect();
        let report = leave_one_out_weights(&sub_names, &members, metric)?;
        let w = report.weights();
        if w.iter().all(|&x| x > 0.0) {
            return Ok((cand, w));
        }
        cand = cand
            .into_iter()
            .zip(&w)
            .filter(|(_, &x)| x > 0.0)
            .map(|(i, _)| i)
            .collect();
    }
}

/// Grow an ensemble from `pool` by adding random groups of `group_size`
/// members, pruning detrimental members by leave-one-out weight, and keeping
/// a candidate only if its fused metric improves. Every pool member is tried
/// once; at most `max_rounds` groups are drawn.
pub fn greedy_grow(
    names: &[String],
    pool: &[&PredictionSet],
    group_size: usize,
    metric: Metric,
    seed: u64,
    max_rounds: usize,
) -> Result<GrowResult> {
    if pool.is_empty() {
        return Err(Error::Config("greedy growth needs a nonempty pool".into()));
    }
    if group_size == 0 {
        return Err(Error::Config("group size must be at least 1".into()));
    }
    check_aligned(pool)?;
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    remaining.shuffle(&mut child(seed, "greedy_grow", 0));
    let mut best = GrowResult {
        selected: Vec::new(),
        weights: Vec::new(),
        score: f64::NEG_INFINITY,
        trace: Vec::new(),
    };
    for _ in 0..max_rounds {
        if remaining.is_empty() {
            break;
        }
        let added: Vec<usize> = remaining.drain(..group_size.min(remaining.len())).collect();
        let mut cand = best.selected.clone();
        cand.extend(&added);
        let (kept, weights) = prune(names, pool, &cand, metric)?;
        let members: Vec<&PredictionSet> = kept.iter().map(|&i| pool[i]).collect();
        let score = metric.score(&fuse(&members, &weights)?)?;
        let accepted = score > best.score;
        best.trace.push(GrowStep {
            added,
            kept: kept.clone(),
            score,
            accepted,
        });
        if accepted {
            best.selected = kept;
            best.weights = weights;
            best.score = score;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: Vec<f64>, c: usize) -> PredictionSet {
        let n = scores.len() / c;
        PredictionSet::new(
            (0..n).map(|i| format!("v{i}")).collect(),
            c,
            scores,
            (0..n).map(|i| vec![i % c]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fusion_cases() {
        let a = set(vec![0.1, 0.9, 0.4, 0.3], 2);
        let b = set(vec![0.5, 0.25, 0.0, 0.75], 2);
        assert_eq!(fuse(&[&a, &a, &a], &[0.2, 0.3, 0.5]).unwrap(), a);
        assert_eq!(fuse(&[&a, &b], &[1.0, 0.0]).unwrap(), a);
        assert_eq!(fuse(&[&a, &b], &[0.0, 1.0]).unwrap(), b);
        let mean = fuse(&[&a, &b], &[0.5, 0.5]).unwrap();
        for (m, (x, y)) in mean.scores().iter().zip(a.scores().iter().zip(b.scores())) {
            assert!((m - (x + y) / 2.0).abs() < 1e-15);
        }
        assert_eq!(fuse(&[&b, &a], &[0.5, 0.5]).unwrap(), mean);
    }

    #[test]
    fn misalignment_is_reported() {
        let a = set(vec![0.1, 0.9], 2);
        let b = PredictionSet::new(vec!["other".into()], 2, vec![0.1, 0.9], vec![vec![0]]).unwrap();
        let e = fuse(&[&a, &b], &[0.5, 0.5]).unwrap_err().to_string();
        assert!(e.contains("row 0") && e.contains("`other`"), "{e}");
        assert!(fuse(&[&a, &a], &[0.5, 0.6]).is_err());
    }

    #[test]
    fn clamp_and_normalize() {
        let (w, fb) = weights_from_drops(&[0.02, 0.01, -0.01]);
        assert!(!fb);
        assert_eq!(w, vec![0.02 / 0.03, 0.01 / 0.03, 0.0]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(weights_from_drops(&[-0.1, 0.0]), (vec![0.5, 0.5], true));
    }

    #[test]
    fn identical_members_share_equally() {
        let a = set(vec![0.1, 0.9, 0.4, 0.3], 2);
        let names = vec!["a".to_string(), "b".to_string()];
        let r = leave_one_out_weights(&names, &[&a, &a], Metric::default()).unwrap();
        assert_eq!(r.weights(), vec![0.5, 0.5]);
        assert!(r.fallback);
    }
}
