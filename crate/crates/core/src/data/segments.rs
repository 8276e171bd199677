use std::ops::Range;

use rand::seq::index::sample;

use super::{Dataset, FrameDataset, VideoDataset, VideoExample};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Per-segment statistic used by [`augment_dataset_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SegmentStat {
    #[default]
    Mean,
    /// Mean followed by the per-coordinate standard deviation (width 2d).
    MeanStd,
}

/// Split `t` frames into `n` contiguous segments of `⌊t/n⌋` frames; the last
/// segment absorbs the remainder.
pub fn segment_bounds(t: usize, n: usize) -> Result<Vec<Range<usize>>> {
    if n == 0 {
        return Err(Error::Config("segment count must be at least 1".into()));
    }
    if t < n {
        return Err(Error::Data(format!("{t} frames cannot fill {n} segments")));
    }
    let len = t / n;
    Ok((0..n)
        .map(|i| i * len..if i + 1 == n { t } else { (i + 1) * len })
        .collect())
}

/// Column means over `rows`, accumulated as offsets from the first row so a
/// constant column yields its value exactly.
fn column_mean(frames: &Tensor, rows: Range<usize>) -> Vec<f64> {
    let pivot = frames.row(rows.start).to_vec();
    let mut acc = vec![0.0; pivot.len()];
    let n = rows.len() as f64;
    for r in rows {
        for ((a, &x), &p) in acc.iter_mut().zip(frames.row(r)).zip(&pivot) {
            *a += x - p;
        }
    }
    pivot.iter().zip(acc).map(|(p, a)| p + a / n).collect()
}

fn column_std(frames: &Tensor, rows: Range<usize>, mean: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; mean.len()];
    let n = rows.len() as f64;
    for r in rows {
        for ((a, &x), &m) in v.iter_mut().zip(frames.row(r)).zip(mean) {
            *a += (x - m) * (x - m);
        }
    }
    v.iter().map(|a| (a / n).sqrt()).collect()
}

fn l2_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n >= 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Video-level feature: the l2-normalized mean of all frames.
pub fn mean_pool(frames: &Tensor) -> Vec<f64> {
    l2_normalized(column_mean(frames, 0..frames.dims2().0))
}

/// Unnormalized means of the `n` temporal segments.
pub fn segment_means(frames: &Tensor, n: usize) -> Result<Vec<Vec<f64>>> {
    let bounds = segment_bounds(frames.dims2().0, n)?;
    Ok(bounds.into_iter().map(|r| column_mean(frames, r)).collect())
}

/// l2-normalized means of the `n` temporal segments.
pub fn segment_pool(frames: &Tensor, n: usize) -> Result<Vec<Vec<f64>>> {
    Ok(segment_means(frames, n)?.into_iter().map(l2_normalized).collect())
}

fn pooled(frames: &Tensor, rows: Range<usize>, stat: SegmentStat) -> Vec<f64> {
    let mean = column_mean(frames, rows.clone());
    match stat {
        SegmentStat::Mean => l2_normalized(mean),
        SegmentStat::MeanStd => {
            let std = column_std(frames, rows, &mean);
            l2_normalized([mean, std].concat())
        }
    }
}

/// Per video, the `n` segment-pooled examples followed by the global-mean
/// example, all carrying the video's labels: `(n + 1)×` as many examples.
pub fn augment_dataset(ds: &FrameDataset, n: usize) -> Result<VideoDataset> {
    augment_dataset_with(ds, n, SegmentStat::Mean)
}

pub fn augment_dataset_with(ds: &FrameDataset, n: usize, stat: SegmentStat) -> Result<VideoDataset> {
    let dim = match stat {
        SegmentStat::Mean => ds.dim,
        SegmentStat::MeanStd => 2 * ds.dim,
    };
    let mut out = Dataset::new(dim, ds.num_classes);
    out.examples.reserve(ds.len() * (n + 1));
    for e in &ds.examples {
        let t = e.frames.dims2().0;
        let bounds = segment_bounds(t, n).map_err(|err| Error::Data(format!("video `{}`: {err}", e.id)))?;
        for (i, r) in bounds.into_iter().enumerate() {
            out.examples.push(VideoExample {
                id: format!("{}#seg{}", e.id, i + 1),
                features: pooled(&e.frames, r, stat),
                labels: e.labels.clone(),
            });
        }
        out.examples.push(VideoExample {
            id: e.id.clone(),
            features: pooled(&e.frames, 0..t, stat),
            labels: e.labels.clone(),
        });
    }
    Ok(out)
}

/// Uniform sample of `⌈fraction · T⌉` frames without replacement, in their
/// original order.
pub fn sample_frames(frames: &Tensor, fraction: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "frame fraction must be in (0, 1], got {fraction}"
        )));
    }
    let (t, d) = frames.dims2();
    let k = ((fraction * t as f64) - 1e-9).ceil().max(1.0) as usize;
    if k >= t {
        return Ok(frames.clone());
    }
    let mut idx = sample(rng, t, k).into_vec();
    idx.sort_unstable();
    let v: Vec<f64> = idx.iter().flat_map(|&i| frames.row(i).iter().copied()).collect();
    Tensor::new(&[k, d], v)
}
