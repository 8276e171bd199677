//! Packed binary datasets. See `docs/FORMATS.md` for the byte layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{validate_labels, validate_values, AnyDataset, Dataset, FrameExample, Kind, VideoExample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BINARY_MAGIC: &[u8; 4] = b"MTDS";
pub const BINARY_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v =
        u32::try_from(v).map_err(|_| Error::Data(format!("{v} does not fit the u32 field of the binary format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for &x in v {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

pub fn write_binary(path: &Path, ds: &AnyDataset) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&BINARY_VERSION.to_le_bytes());
    let (d, c, n) = match ds {
        AnyDataset::Video(v) => (v.dim, v.num_classes, v.len()),
        AnyDataset::Frame(v) => (v.dim, v.num_classes, v.len()),
    };
    put_u32(&mut out, if ds.kind() == Kind::Video { 0 } else { 1 })?;
    put_u32(&mut out, d)?;
    put_u32(&mut out, c)?;
    out.extend_from_slice(&(n as u64).to_le_bytes());
    let mut rec = Vec::new();
    for i in 0..n {
        rec.clear();
        let (id, labels) = match ds {
            AnyDataset::Video(v) => (&v.examples[i].id, &v.examples[i].labels),
            AnyDataset::Frame(v) => (&v.examples[i].id, &v.examples[i].labels),
        };
        put_u32(&mut rec, id.len())?;
        rec.extend_from_slice(id.as_bytes());
        put_u32(&mut rec, labels.len())?;
        for &l in labels {
            put_u32(&mut rec, l)?;
        }
        match ds {
            AnyDataset::Video(v) => put_f32s(&mut rec, &v.examples[i].features),
            AnyDataset::Frame(v) => {
                let f = &v.examples[i].frames;
                put_u32(&mut rec, f.dims2().0)?;
                put_f32s(&mut rec, f.values());
            }
        }
        put_u32(&mut out, rec.len())?;
        out.extend_from_slice(&rec);
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&out)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Data(format!("truncated {what} at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(4 * n, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

pub fn read_binary(path: &Path) -> Result<AnyDataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let err = |e: Error| Error::Data(format!("{}: {e}", path.display()));
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(4, "magic").map_err(err)? != BINARY_MAGIC {
        return Err(err(Error::Data("bad magic, not a packed dataset".into())));
    }
    let version = r.u32("version").map_err(err)?;
    if version != BINARY_VERSION as usize {
        return Err(err(Error::Data(format!("unsupported version {version}"))));
    }
    let kind = match r.u32("kind").map_err(err)? {
        0 => Kind::Video,
        1 => Kind::Frame,
        k => return Err(err(Error::Data(format!("unknown kind tag {k}")))),
    };
    let d = r.u32("d").map_err(err)?;
    let c = r.u32("C").map_err(err)?;
    let n = u64::from_le_bytes(r.take(8, "count").map_err(err)?.try_into().unwrap()) as usize;
    let mut videos = Dataset::new(d, c);
    let mut frames = Dataset::new(d, c);
    for i in 0..n {
        let at = format!("record {i}");
        let rec_err = |e: Error| Error::Data(format!("{}: {at}: {e}", path.display()));
        let len = r.u32("record length").map_err(rec_err)?;
        let body = r.take(len, "record").map_err(rec_err)?;
        let mut b = Reader { bytes: body, at: 0 };
        let id_len = b.u32("id length").map_err(rec_err)?;
        let id = String::from_utf8(b.take(id_len, "id").map_err(rec_err)?.to_vec())
            .map_err(|_| rec_err(Error::Data("id is not UTF-8".into())))?;
        let nl = b.u32("label count").map_err(rec_err)?;
        let raw: Vec<i64> = (0..nl)
            .map(|_| b.u32("label").map(|l| l as i64))
            .collect::<Result<_>>()
            .map_err(rec_err)?;
        let labels = validate_labels(&raw, c, &at).map_err(rec_err)?;
        match kind {
            Kind::Video => {
                let features = b.f32s(d, "features").map_err(rec_err)?;
                validate_values(&features, "features").map_err(rec_err)?;
                videos.examples.push(VideoExample { id, features, labels });
            }
            Kind::Frame => {
                let t = b.u32("frame count").map_err(rec_err)?;
                if t == 0 {
                    return Err(rec_err(Error::Data("video has no frames".into())));
                }
                let v = b.f32s(t * d, "frames").map_err(rec_err)?;
                validate_values(&v, "frames").map_err(rec_err)?;
                frames.examples.push(FrameExample {
                    id,
                    frames: Tensor::new(&[t, d], v)?,
                    labels,
                });
            }
        }
        if b.at != body.len() {
            return Err(rec_err(Error::Data("record length disagrees with its contents".into())));
        }
    }
    if r.at != bytes.len() {
        return Err(err(Error::Data("trailing bytes after the last record".into())));
    }
    Ok(match kind {
        Kind::Video => AnyDataset::Video(videos),
        Kind::Frame => AnyDataset::Frame(frames),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{read_jsonl, write_jsonl};

    fn sample() -> AnyDataset {
        let mut ds = Dataset::new(2, 4);
        for i in 0..3 {
            ds.examples.push(FrameExample {
                id: format!("vid-{i}"),
                frames: Tensor::new(&[i + 1, 2], (0..2 * (i + 1)).map(|k| k as f64 * 0.1).collect()).unwrap(),
                labels: vec![i, 3],
            });
        }
        AnyDataset::Frame(ds)
    }

    #[test]
    fn binary_and_jsonl_agree() {
        let dir = tempfile::tempdir().unwrap();
        let (b, j) = (dir.path().join("a.mtds"), dir.path().join("a.jsonl"));
        write_binary(&b, &sample()).unwrap();
        write_jsonl(&j, &sample()).unwrap();
        let from_b = read_binary(&b).unwrap();
        assert_eq!(from_b, read_jsonl(&j).unwrap());
        let video = AnyDataset::Video(from_b.into_video());
        write_binary(&b, &video).unwrap();
        let once = read_binary(&b).unwrap();
        write_binary(&b, &once).unwrap();
        assert_eq!(read_binary(&b).unwrap(), once);
    }

    #[test]
    fn truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mtds");
        write_binary(&p, &sample()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let e = read_binary(&p).unwrap_err().to_string();
        assert!(e.contains("record 2"), "{e}");
    }
}
