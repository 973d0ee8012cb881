//! Interchange formats: JSONL records for detections, tubes, and ground
//! truth; flat key=value config files; the binary parameter checkpoint; and
//! the metrics report.
//!
//! Every JSONL line is one serde record with unknown fields rejected; parse
//! failures carry the file path and 1-based line number. The checkpoint is a
//! digest-guarded container whose round trip is bitwise exact.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxes::BoxXYXY;
use crate::detector::{DetectorConfig, DetectorModel};
use crate::{Error, Result};

/// One frame-level detection line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video: String,
    pub frame: usize,
    /// 1-based class.
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub p: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeFrameRecord {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub p: f64,
    pub t: f64,
}

/// One trimmed, scored tube line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeRecord {
    pub video: String,
    pub class: usize,
    pub score: f64,
    /// Inclusive frame extent of the trimmed segment.
    pub segment: [usize; 2],
    pub frames: Vec<TubeFrameRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtFrameRecord {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
}

/// Ground truth for one action instance: the annotated (active) extent only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub video: String,
    pub class: usize,
    pub frames: Vec<GtFrameRecord>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)
            .map_err(|e| Error::config(format!("jsonl encode: {e}")))?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

/// Flat `key = value` config text: one pair per line, `#` comments, blank
/// lines ignored. Typed reads consume keys; [`KvReader::finish`] rejects
/// leftovers so typos surface instead of silently using defaults.
pub struct KvReader {
    map: BTreeMap<String, (usize, String)>,
    path: String,
}

impl KvReader {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Record {
                    path: path.to_string(),
                    line: i + 1,
                    msg: format!("expected key = value, got {raw:?}"),
                });
            };
            let key = key.trim().to_string();
            if map.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
                return Err(Error::Record {
                    path: path.to_string(),
                    line: i + 1,
                    msg: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(KvReader { map, path: path.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Takes and parses a key, or None when absent.
    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, value)) => value.parse().map(Some).map_err(|e| Error::Record {
                path: self.path.clone(),
                line,
                msg: format!("key {key:?}: {e}"),
            }),
        }
    }

    /// Takes a key whose value is a comma-separated list.
    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some((line, value)) => value
                .split(',')
                .map(|part| {
                    part.trim().parse().map_err(|e| Error::Record {
                        path: self.path.clone(),
                        line,
                        msg: format!("key {key:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Errors on any key no reader consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.map.into_iter().next() {
            return Err(Error::Record {
                path: self.path,
                line,
                msg: format!("unknown key {key:?}"),
            });
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ACTDET\0\x01";

/// Saves config plus all named parameters, f64 little-endian, with a trailing
/// SHA-256 over everything before it.
pub fn save_checkpoint(path: &Path, model: &DetectorModel) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let config = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    let params = model.named_params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        let name = name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(tensor.numel() as u64).to_le_bytes());
        for &v in tensor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorModel> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if buf.len() < CHECKPOINT_MAGIC.len() + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("digest mismatch".into()));
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    if cur.bytes(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let config_len = cur.u32()? as usize;
    let config: DetectorConfig = serde_json::from_slice(cur.bytes(config_len)?)
        .map_err(|e| Error::Checkpoint(format!("config decode: {e}")))?;
    let mut model = DetectorModel::init(config, 0)?;
    let count = cur.u32()? as usize;
    {
        let mut params = model.named_params_mut();
        if count != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match config ({})",
                count,
                params.len()
            )));
        }
        for (name, tensor) in params.iter_mut() {
            let name_len = cur.u16()? as usize;
            let stored = std::str::from_utf8(cur.bytes(name_len)?)
                .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
            if stored != *name {
                return Err(Error::Checkpoint(format!(
                    "parameter order mismatch: stored {stored:?}, expected {name:?}"
                )));
            }
            let numel = cur.u64()? as usize;
            if numel != tensor.numel() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?}: stored {numel} values, expected {}",
                    tensor.numel()
                )));
            }
            for v in tensor.values_mut() {
                *v = f64::from_le_bytes(cur.bytes(8)?.try_into().unwrap());
            }
        }
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

/// The evaluation report. BTreeMap keys keep the JSON byte-stable across
/// runs, which the end-to-end determinism check relies on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub frame_map: f64,
    pub video_map: BTreeMap<String, f64>,
    pub temporal_map: f64,
    /// Per-class frame AP at IoU 0.5, keyed by class id.
    pub per_class: BTreeMap<String, f64>,
}

pub fn write_metrics(path: &Path, metrics: &Metrics) -> Result<()> {
    let mut text = serde_json::to_string_pretty(metrics)
        .map_err(|e| Error::config(format!("metrics encode: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_metrics(path: &Path) -> Result<Metrics> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Record {
        path: path.display().to_string(),
        line: 1,
        msg: e.to_string(),
    })
}

/// Writes raw f32 little-endian values (the frame storage format).
pub fn write_f32_bin(path: &Path, values: &[f32]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for &v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_f32_bin(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() != expect * 4 {
        return Err(Error::config(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expect * 4
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
