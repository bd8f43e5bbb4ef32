//! Dataset files, seeded splits and monitored-set subsetting.
//!
//! The JSON-lines format holds one sample per line:
//!
//! ```text
//! {"id":"s000001","dirs":[1,-1,-1,1],"labels":[3,17],"tabs":2}
//! ```
//!
//! `dirs` is the unpadded direction sequence. Files written by [`save_dataset`]
//! start with a header line carrying the trace length and class names:
//!
//! ```text
//! {"format":"adwpf-dataset","version":1,"seq_len":2000,"class_names":[...],"meta":{...}}
//! ```
//!
//! Without a header, the trace length is the longest `dirs` array and the class
//! count is one past the largest label, unless [`LoadOptions`] fixes them.
//!
//! The packed cache mirrors the sample records in little-endian binary:
//! `u32 count`, then per sample `u32 id_len, id bytes, u32 dir_len, i8 dirs,
//! u16 label_count, u16 labels`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dataset, DirectionTrace, LabelVector, Sample};

pub const FORMAT_TAG: &str = "adwpf-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    seq_len: usize,
    class_names: Vec<String>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    dirs: Vec<i64>,
    labels: Vec<usize>,
    tabs: usize,
}

/// Overrides for header-less files.
#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    pub seq_len: Option<usize>,
    pub class_count: Option<usize>,
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    load_dataset_with(path, &LoadOptions::default())
}

pub fn load_dataset_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut header: Option<Header> = None;
    let mut records: Vec<(usize, SampleRecord)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if value.get("format").is_some() {
            if header.is_some() || !records.is_empty() {
                return Err(parse_err(lineno, "header must be the first line".into()));
            }
            let h: Header = serde_json::from_value(value).map_err(|e| parse_err(lineno, e.to_string()))?;
            if h.format != FORMAT_TAG || h.version != FORMAT_VERSION {
                return Err(parse_err(
                    lineno,
                    format!("unsupported format {} v{}", h.format, h.version),
                ));
            }
            header = Some(h);
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_value(value).map_err(|e| parse_err(lineno, e.to_string()))?;
        if let Some((pos, v)) = rec.dirs.iter().enumerate().find(|(_, v)| **v != 1 && **v != -1) {
            return Err(parse_err(
                lineno,
                format!("direction value {v} at position {pos} is not -1 or +1"),
            ));
        }
        if rec.dirs.is_empty() {
            return Err(parse_err(lineno, "empty direction sequence".into()));
        }
        if rec.tabs == 0 {
            return Err(parse_err(lineno, "tabs must be positive".into()));
        }
        records.push((lineno, rec));
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let (seq_len, class_names, meta) = match header {
        Some(h) => (h.seq_len, h.class_names, h.meta),
        None => {
            let seq_len = opts
                .seq_len
                .unwrap_or_else(|| records.iter().map(|(_, r)| r.dirs.len()).max().unwrap_or(1));
            let class_count = opts.class_count.unwrap_or_else(|| {
                records
                    .iter()
                    .flat_map(|(_, r)| r.labels.iter().copied())
                    .max()
                    .map_or(1, |m| m + 1)
            });
            (seq_len, Dataset::default_class_names(class_count), serde_json::Value::Null)
        }
    };
    let class_count = class_names.len();

    let mut samples = Vec::with_capacity(records.len());
    for (lineno, rec) in records {
        let dirs: Vec<i8> = rec.dirs.iter().map(|v| *v as i8).collect();
        let trace = DirectionTrace::pad_or_truncate(&dirs, seq_len).map_err(|e| parse_err(lineno, e.to_string()))?;
        let labels = LabelVector::encode(rec.labels.iter().copied(), class_count).map_err(|e| {
            parse_err(lineno, format!("{e}; inconsistent class count"))
        })?;
        samples.push(Sample {
            id: rec.id,
            trace,
            labels,
            tab_count: rec.tabs,
        });
    }
    Dataset::new(samples, class_names, meta)
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        seq_len: ds.seq_len(),
        class_names: ds.class_names().to_vec(),
        meta: ds.meta.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in ds.samples() {
        let rec = SampleRecord {
            id: s.id.clone(),
            dirs: s.trace.active().iter().map(|v| *v as i64).collect(),
            labels: s.labels.decode(),
            tabs: s.tab_count,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_packed<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let count = u32::try_from(ds.len()).map_err(|_| Error::Dataset("too many samples".into()))?;
    out.write_all(&count.to_le_bytes())?;
    for s in ds.samples() {
        out.write_all(&(s.id.len() as u32).to_le_bytes())?;
        out.write_all(s.id.as_bytes())?;
        let dirs = s.trace.active();
        out.write_all(&(dirs.len() as u32).to_le_bytes())?;
        out.write_all(&dirs.iter().map(|d| *d as u8).collect::<Vec<u8>>())?;
        let labels = s.labels.decode();
        out.write_all(&(labels.len() as u16).to_le_bytes())?;
        for l in labels {
            let l = u16::try_from(l).map_err(|_| Error::Dataset("label id exceeds u16".into()))?;
            out.write_all(&l.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

/// Reads the packed cache. The cache carries no header, so trace length and class
/// names come from the caller; `tab_count` is restored as the label count.
pub fn read_packed<R: Read>(mut input: R, seq_len: usize, class_names: Vec<String>) -> Result<Dataset> {
    let count = read_u32(&mut input)? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(&mut input)? as usize;
        let id = String::from_utf8(read_exact_vec(&mut input, id_len)?)
            .map_err(|e| Error::Dataset(format!("sample id is not UTF-8: {e}")))?;
        let dir_len = read_u32(&mut input)? as usize;
        let dirs: Vec<i8> = read_exact_vec(&mut input, dir_len)?.into_iter().map(|b| b as i8).collect();
        let n_labels = read_u16(&mut input)? as usize;
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            labels.push(read_u16(&mut input)? as usize);
        }
        samples.push(Sample {
            id,
            trace: DirectionTrace::pad_or_truncate(&dirs, seq_len)?,
            labels: LabelVector::encode(labels, class_names.len())?,
            tab_count: n_labels,
        });
    }
    Dataset::new(samples, class_names, serde_json::Value::Null)
}

/// Train / validation / test proportions and the permutation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("split ratios must be non-negative".into()));
        }
        if (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split ratios must sum to 1".into()));
        }
        Ok(())
    }

    /// Partition sizes for `n` samples.
    ///
    /// The training share is `floor(n * r_train)`; the holdout is then divided with
    /// the test share rounded up. For 81,284 samples at 8:1:1 this gives
    /// 65,027 / 8,128 / 8,129.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        const EPS: f64 = 1e-9;
        let [rt, rv, rs] = self.ratios;
        let train = ((n as f64 * rt) + EPS).floor() as usize;
        let train = train.min(n);
        let holdout = n - train;
        let test = if rv + rs > 0.0 {
            ((holdout as f64 * rs / (rv + rs)) - EPS).ceil().max(0.0) as usize
        } else {
            0
        };
        let test = test.min(holdout);
        (train, holdout - test, test)
    }
}

pub const MIN_SPLIT_SAMPLES: usize = 10;

/// Uniform (unstratified) seeded partition into train, validation and test.
pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    if ds.len() < MIN_SPLIT_SAMPLES {
        return Err(Error::Dataset(format!(
            "need at least {MIN_SPLIT_SAMPLES} samples to split, got {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (n_train, n_val, _) = spec.sizes(ds.len());
    let parts = [
        ("train", &order[..n_train]),
        ("val", &order[n_train..n_train + n_val]),
        ("test", &order[n_train + n_val..]),
    ];
    let mut out = Vec::with_capacity(3);
    for (name, idx) in parts {
        if idx.is_empty() {
            return Err(Error::Dataset(format!("{name} split is empty")));
        }
        let mut part = ds.select(idx)?;
        let mut meta = serde_json::Map::new();
        meta.insert("parent".into(), ds.meta.clone());
        meta.insert(
            "split".into(),
            serde_json::json!({
                "method": "uniform",
                "part": name,
                "ratios": spec.ratios,
                "seed": spec.seed,
            }),
        );
        part.meta = serde_json::Value::Object(meta);
        out.push(part);
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok((train, val, test))
}

/// Keeps samples whose labels all lie in `selected`, re-indexing the selected
/// classes by ascending original id.
pub fn subset_by_scale(ds: &Dataset, selected: &BTreeSet<usize>) -> Result<Dataset> {
    if selected.is_empty() {
        return Err(Error::Config("no classes selected".into()));
    }
    if let Some(&bad) = selected.iter().find(|c| **c >= ds.class_count()) {
        return Err(Error::LabelOutOfRange {
            id: bad,
            class_count: ds.class_count(),
        });
    }
    let mut remap = vec![None; ds.class_count()];
    for (new, &old) in selected.iter().enumerate() {
        remap[old] = Some(new);
    }
    let mut samples = Vec::new();
    for s in ds.samples() {
        let ids = s.labels.decode();
        if ids.iter().all(|c| remap[*c].is_some()) {
            samples.push(Sample {
                id: s.id.clone(),
                trace: s.trace.clone(),
                labels: LabelVector::encode(ids.iter().map(|c| remap[*c].unwrap()), selected.len())?,
                tab_count: s.tab_count,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Dataset("no sample has all its labels in the selected classes".into()));
    }
    let names = selected.iter().map(|c| ds.class_names()[*c].clone()).collect();
    let meta = serde_json::json!({
        "parent": ds.meta.clone(),
        "selected_classes": selected,
    });
    Dataset::new(samples, names, meta)
}
