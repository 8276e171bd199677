use crate::data::{mean_pool, segment_pool, FrameDataset};
use crate::error::{Error, Result};
use crate::metrics::PredictionSet;
use crate::models::{Input, Model};
use crate::tensor::Tensor;

/// Weights of the three segment predictions and the global one.
pub const SEGMENT_WEIGHTS: [f64; 4] = [0.1, 0.1, 0.1, 0.7];

fn check(model: &Model, n: usize, weights: &[f64]) -> Result<()> {
    if model.spec.pooling.is_frame_level() {
        return Err(Error::Config("segmented inference needs a video-level model".into()));
    }
    if weights.len() != n + 1 {
        return Err(Error::Config(format!(
            "{n} segments need {} weights, got {}",
            n + 1,
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(
            "segment weights must be non-negative and sum to 1".into(),
        ));
    }
    Ok(())
}

/// Feature rows `[seg_1, …, seg_n, global]` for one video.
fn rows(frames: &Tensor, n: usize) -> Result<Vec<f64>> {
    let mut v: Vec<f64> = segment_pool(frames, n)?.concat();
    v.extend(mean_pool(frames));
    Ok(v)
}

/// Weighted sum of the `n + 1` prediction rows, anchored on the heaviest
/// row so that identical rows reproduce themselves exactly.
fn combine(probs: &[f64], c: usize, weights: &[f64]) -> Vec<f64> {
    let anchor = (0..weights.len())
        .max_by(|&i, &j| weights[i].total_cmp(&weights[j]).then(j.cmp(&i)))
        .expect("at least one weight");
    let a = &probs[anchor * c..(anchor + 1) * c];
    let mut out = vec![0.0; c];
    for (r, &w) in weights.iter().enumerate() {
        if r == anchor || w == 0.0 {
            continue;
        }
        for ((o, &x), &y) in out.iter_mut().zip(&probs[r * c..(r + 1) * c]).zip(a) {
            *o += w * (x - y);
        }
    }
    out.iter().zip(a).map(|(o, y)| y + o).collect()
}

/// Confidences of a video-level model merged over `n` temporal segments and
/// the whole video, in the order `(seg_1, …, seg_n, global)`.
pub fn segmented_inference(model: &Model, frames: &Tensor, n: usize, weights: &[f64]) -> Result<Vec<f64>> {
    check(model, n, weights)?;
    let d = frames.dims2().1;
    let x = Tensor::new(&[n + 1, d], rows(frames, n)?)?;
    let probs = model.predict(Input::Videos(&x))?;
    Ok(combine(probs.values(), model.spec.num_classes, weights))
}

/// [`segmented_inference`] over a whole frame-level dataset.
pub fn segmented_predictions(model: &Model, data: &FrameDataset, n: usize, weights: &[f64]) -> Result<PredictionSet> {
    check(model, n, weights)?;
    let mut x = Vec::with_capacity(data.len() * (n + 1) * data.dim);
    for e in &data.examples {
        x.extend(rows(&e.frames, n).map_err(|err| Error::Data(format!("video `{}`: {err}", e.id)))?);
    }
    let x = Tensor::new(&[data.len() * (n + 1), data.dim], x)?;
    let probs = model.predict(Input::Videos(&x))?;
    let c = model.spec.num_classes;
    let block = (n + 1) * c;
    let scores: Vec<f64> = probs
        .values()
        .chunks_exact(block)
        .flat_map(|p| combine(p, c, weights))
        .collect();
    PredictionSet::new(data.ids(), c, scores, data.label_sets())
}
