use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_labels, validate_values, AnyDataset, Dataset, FrameExample, Kind, VideoExample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    d: usize,
    #[serde(rename = "C")]
    c: usize,
    kind: Kind,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    labels: Vec<i64>,
    #[serde(default)]
    features: Option<Vec<f32>>,
    #[serde(default)]
    frames: Option<Vec<Vec<f32>>>,
}

#[derive(Serialize)]
struct VideoOut<'a> {
    id: &'a str,
    labels: &'a [usize],
    features: Vec<f32>,
}

#[derive(Serialize)]
struct FrameOut<'a> {
    id: &'a str,
    labels: &'a [usize],
    frames: Vec<Vec<f32>>,
}

fn record_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Read a JSON Lines dataset: a header line `{"d", "C", "kind"}` then one
/// record per line. Values are single precision.
pub fn read_jsonl(path: &Path) -> Result<AnyDataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Ok(AnyDataset::Video(Dataset::new(0, 0))),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let h: Header =
                    serde_json::from_str(&line).map_err(|e| record_error(path, i + 1, format!("bad header: {e}")))?;
                break h;
            }
        }
    };
    let mut videos = Dataset::new(header.d, header.c);
    let mut framesets = Dataset::new(header.d, header.c);
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let n = i + 1;
        let rec: Record = serde_json::from_str(&line).map_err(|e| record_error(path, n, e.to_string()))?;
        let labels = validate_labels(&rec.labels, header.c, &format!("record `{}`", rec.id))
            .map_err(|e| record_error(path, n, e.to_string()))?;
        match (header.kind, rec.features, rec.frames) {
            (Kind::Video, Some(features), None) => {
                if features.len() != header.d {
                    return Err(record_error(
                        path,
                        n,
                        format!("{} features, header says d={}", features.len(), header.d),
                    ));
                }
                let features = widen(&features);
                validate_values(&features, "features").map_err(|e| record_error(path, n, e.to_string()))?;
                videos.examples.push(VideoExample {
                    id: rec.id,
                    features,
                    labels,
                });
            }
            (Kind::Frame, None, Some(rows)) => {
                if rows.is_empty() {
                    return Err(record_error(path, n, "video has no frames"));
                }
                if let Some(r) = rows.iter().position(|r| r.len() != header.d) {
                    return Err(record_error(
                        path,
                        n,
                        format!("frame {r} has {} values, header says d={}", rows[r].len(), header.d),
                    ));
                }
                let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().map(|&x| x as f64)).collect();
                validate_values(&flat, "frames").map_err(|e| record_error(path, n, e.to_string()))?;
                framesets.examples.push(FrameExample {
                    id: rec.id,
                    frames: Tensor::new(&[rows.len(), header.d], flat)?,
                    labels,
                });
            }
            (kind, _, _) => {
                let want = if kind == Kind::Video { "`features`" } else { "`frames`" };
                return Err(record_error(
                    path,
                    n,
                    format!("{kind:?} dataset records need exactly {want}"),
                ));
            }
        }
    }
    Ok(match header.kind {
        Kind::Video => AnyDataset::Video(videos),
        Kind::Frame => AnyDataset::Frame(framesets),
    })
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn write_jsonl(path: &Path, ds: &AnyDataset) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let (d, c) = match ds {
        AnyDataset::Video(v) => (v.dim, v.num_classes),
        AnyDataset::Frame(v) => (v.dim, v.num_classes),
    };
    let mut out = serde_json::to_string(&Header { d, c, kind: ds.kind() })?;
    out.push('\n');
    match ds {
        AnyDataset::Video(v) => {
            for e in &v.examples {
                out.push_str(&serde_json::to_string(&VideoOut {
                    id: &e.id,
                    labels: &e.labels,
                    features: narrow(&e.features),
                })?);
                out.push('\n');
            }
        }
        AnyDataset::Frame(v) => {
            for e in &v.examples {
                let (t, _) = e.frames.dims2();
                out.push_str(&serde_json::to_string(&FrameOut {
                    id: &e.id,
                    labels: &e.labels,
                    frames: (0..t).map(|r| narrow(e.frames.row(r))).collect(),
                })?);
                out.push('\n');
            }
        }
    }
    w.write_all(out.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
