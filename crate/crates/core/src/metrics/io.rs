//! Prediction files: CSV rows `video_id,class_id,score`, the top `k` classes
//! per video, videos in order.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ranked_classes, PredictionSet};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Row {
    video_id: String,
    class_id: usize,
    score: f64,
}

/// Confidences read from a prediction file. Classes a video does not list
/// score 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub ids: Vec<String>,
    pub num_classes: usize,
    pub scores: Vec<f64>,
}

impl ScoreTable {
    /// Pair the scores with ground truth given as `(id, labels)` pairs, in
    /// the order of `truth`.
    pub fn align(&self, truth: &[(String, Vec<usize>)]) -> Result<PredictionSet> {
        let at: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let c = self.num_classes;
        let mut scores = Vec::with_capacity(truth.len() * c);
        for (id, _) in truth {
            let i = *at
                .get(id.as_str())
                .ok_or_else(|| Error::Data(format!("no predictions for video `{id}`")))?;
            scores.extend_from_slice(&self.scores[i * c..(i + 1) * c]);
        }
        PredictionSet::new(
            truth.iter().map(|(id, _)| id.clone()).collect(),
            c,
            scores,
            truth.iter().map(|(_, l)| l.clone()).collect(),
        )
    }
}

/// Write the top `k` classes of every video (`k = 0` writes all classes).
pub fn write_predictions(path: &Path, preds: &PredictionSet, k: usize) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let k = if k == 0 { preds.num_classes() } else { k };
    for (v, id) in preds.ids().iter().enumerate() {
        let row = preds.row(v);
        for c in ranked_classes(row).into_iter().take(k) {
            w.serialize(Row {
                video_id: id.clone(),
                class_id: c,
                score: row[c],
            })
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path, num_classes: usize) -> Result<ScoreTable> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::Data(format!("{}: cannot open prediction file: {e}", path.display())),
        _ => Error::Data(format!("{}: {e}", path.display())),
    })?;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut table = ScoreTable {
        ids: Vec::new(),
        num_classes,
        scores: Vec::new(),
    };
    for (i, row) in r.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        let bad = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if row.class_id >= num_classes {
            return Err(bad(format!("class {} out of range [0, {num_classes})", row.class_id)));
        }
        if !row.score.is_finite() {
            return Err(bad("non-finite score".into()));
        }
        let v = *index.entry(row.video_id.clone()).or_insert_with(|| {
            table.ids.push(row.video_id.clone());
            table.scores.extend(std::iter::repeat_n(0.0, num_classes));
            table.ids.len() - 1
        });
        if !seen.insert((v, row.class_id)) {
            return Err(bad(format!(
                "duplicate row for video `{}`, class {}",
                row.video_id, row.class_id
            )));
        }
        table.scores[v * num_classes + row.class_id] = row.score;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_scores_exactly() {
        let p = PredictionSet::new(
            vec!["a".into(), "b".into()],
            3,
            vec![0.1, 0.7000000000000001, 1.0 / 3.0, 0.25, 0.5, 0.125],
            vec![vec![1], vec![0, 2]],
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_predictions(f.path(), &p, 0).unwrap();
        let t = read_predictions(f.path(), 3).unwrap();
        let truth: Vec<(String, Vec<usize>)> = vec![("a".into(), vec![1]), ("b".into(), vec![0, 2])];
        assert_eq!(t.align(&truth).unwrap(), p);

        write_predictions(f.path(), &p, 1).unwrap();
        let t = read_predictions(f.path(), 3).unwrap();
        assert_eq!(t.scores, vec![0.0, 0.7000000000000001, 0.0, 0.0, 0.5, 0.0]);
        let missing = vec![("c".to_string(), vec![])];
        assert!(t.align(&missing).unwrap_err().to_string().contains("`c`"));
    }

    #[test]
    fn bad_class_names_the_line() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), "video_id,class_id,score\na,0,0.5\na,9,0.1\n").unwrap();
        let e = read_predictions(f.path(), 3).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");

        std::fs::write(f.path(), "video_id,class_id,score\na,0,0.5\nb,1,0.2\na,0,0.1\n").unwrap();
        let e = read_predictions(f.path(), 3).unwrap_err().to_string();
        assert!(e.contains("line 4") && e.contains("duplicate"), "{e}");
    }
}
