//! Quadratic re-derivations of the metrics. Ranks come from pairwise
//! comparisons and precision is recounted from scratch at every position, so
//! they share no code path with the fast versions. Test use only.

use super::PredictionSet;

/// `a` outranks `b`: higher score, or equal score and smaller key.
fn before(a: (f64, (usize, usize)), b: (f64, (usize, usize))) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Position of each item in the ranking, counted by comparison with all others.
fn ranks(items: &[(f64, (usize, usize))]) -> Vec<usize> {
    items
        .iter()
        .map(|&a| items.iter().filter(|&&b| before(b, a)).count())
        .collect()
}

/// AP of a list of `(score, is_hit)` ranked by descending score, ties in list
/// order; precision at each hit is recounted over the whole prefix.
pub fn oracle_ap(list: &[(f64, bool)], total_positives: usize) -> f64 {
    assert!(total_positives >= 1);
    let keyed: Vec<(f64, (usize, usize))> = list.iter().enumerate().map(|(i, &(s, _))| (s, (i, 0))).collect();
    let rank = ranks(&keyed);
    let mut at = vec![false; list.len()];
    for (i, &(_, hit)) in list.iter().enumerate() {
        at[rank[i]] = hit;
    }
    let mut sum = 0.0;
    for i in 0..at.len() {
        if at[i] {
            let hits = (0..=i).filter(|&j| at[j]).count();
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total_positives as f64
}

pub fn oracle_gap(preds: &PredictionSet, k: usize) -> f64 {
    let c = preds.num_classes();
    let mut entries = Vec::new();
    for v in 0..preds.len() {
        let row = preds.row(v);
        let items: Vec<(f64, (usize, usize))> = (0..c).map(|j| (row[j], (j, 0))).collect();
        for (j, r) in ranks(&items).into_iter().enumerate() {
            if r < k {
                entries.push((row[j], (v, j)));
            }
        }
    }
    let rank = ranks(&entries);
    let mut list = vec![(0.0, false); entries.len()];
    for (e, &r) in entries.iter().zip(&rank) {
        list[r] = (e.0, preds.labels()[e.1 .0].contains(&e.1 .1));
    }
    let positives = preds.labels().iter().map(Vec::len).sum();
    oracle_ap(&list, positives)
}

/// Mean over classes with positives of each class's AP across videos.
pub fn oracle_map(preds: &PredictionSet) -> f64 {
    let mut aps = Vec::new();
    for cls in 0..preds.num_classes() {
        let positives = preds.labels().iter().filter(|l| l.contains(&cls)).count();
        if positives == 0 {
            continue;
        }
        let list: Vec<(f64, bool)> = (0..preds.len())
            .map(|v| (preds.row(v)[cls], preds.labels()[v].contains(&cls)))
            .collect();
        aps.push(oracle_ap(&list, positives));
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

pub fn oracle_perr(preds: &PredictionSet) -> f64 {
    let mut total = 0.0;
    let mut videos = 0;
    for v in 0..preds.len() {
        let labels = &preds.labels()[v];
        if labels.is_empty() {
            continue;
        }
        let row = preds.row(v);
        let items: Vec<(f64, (usize, usize))> = (0..row.len()).map(|j| (row[j], (j, 0))).collect();
        let hits = ranks(&items)
            .into_iter()
            .enumerate()
            .filter(|&(j, r)| r < labels.len() && labels.contains(&j))
            .count();
        total += hits as f64 / labels.len() as f64;
        videos += 1;
    }
    if videos == 0 {
        0.0
    } else {
        total / videos as f64
    }
}
