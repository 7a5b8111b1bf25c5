//! On-disk formats: the binary feature container, JSON model files and
//! line-delimited run results.
//!
//! Feature container layout, all little-endian:
//!
//! ```text
//! 0   magic "TAFS"
//! 4   version u32 (= 1)
//! 8   n u32
//! 12  d u32
//! 16  K u32
//! 20  flags u32   bit0 labels, bit1 head, bit2 rows already unit-norm
//! 24  features f32[n*d], row-major
//!     labels i32[n] (-1 = unknown)            if bit0
//!     head weight f32[K*d], head bias f32[K]  if bit1
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::bench::{Dataset, RunConfig, RunRecord, SourceModel};
use crate::error::{Error, Result};
use crate::head::LinearHead;

pub const MAGIC: [u8; 4] = *b"TAFS";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
pub const FLAG_LABELS: u32 = 1;
pub const FLAG_HEAD: u32 = 1 << 1;
pub const FLAG_NORMALIZED: u32 = 1 << 2;
const KNOWN_FLAGS: u32 = FLAG_LABELS | FLAG_HEAD | FLAG_NORMALIZED;

/// Rows whose norm is within this of 1 count as unit-norm.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub num_classes: usize,
    pub features: Array2<f32>,
    pub labels: Option<Vec<i32>>,
    pub head: Option<(Array2<f32>, Array1<f32>)>,
    /// Writer's claim that every row is unit-norm.
    pub normalized: bool,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::TruncatedFile {
                offset: self.pos as u64,
                needed: len as u64,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        let start = self.pos;
        let raw = self.take(count.checked_mul(4).ok_or(Error::TruncatedFile {
            offset: start as u64,
            needed: u64::MAX,
        })?)?;
        raw.chunks_exact(4)
            .enumerate()
            .map(|(i, c)| {
                let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFiniteValue { offset: (start + 4 * i) as u64 })
                }
            })
            .collect()
    }

    fn i32s(&mut self, count: usize) -> Result<(usize, Vec<i32>)> {
        let start = self.pos;
        let raw = self.take(count * 4)?;
        Ok((
            start,
            raw.chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        ))
    }
}

impl FeatureFile {
    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn flags(&self) -> u32 {
        let mut f = 0;
        if self.labels.is_some() {
            f |= FLAG_LABELS;
        }
        if self.head.is_some() {
            f |= FLAG_HEAD;
        }
        if self.normalized {
            f |= FLAG_NORMALIZED;
        }
        f
    }

    fn check_shapes(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.n() {
                return Err(Error::ShapeMismatch { expected: self.n(), actual: labels.len() });
            }
        }
        if let Some((w, b)) = &self.head {
            if w.dim() != (self.num_classes, self.dim()) {
                return Err(Error::ShapeMismatch {
                    expected: self.num_classes * self.dim(),
                    actual: w.len(),
                });
            }
            if b.len() != self.num_classes {
                return Err(Error::ShapeMismatch { expected: self.num_classes, actual: b.len() });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_shapes()?;
        let as_u32 = |v: usize| {
            u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{v} does not fit in u32")))
        };
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.features.len());
        out.extend_from_slice(&MAGIC);
        for v in [VERSION, as_u32(self.n())?, as_u32(self.dim())?, as_u32(self.num_classes)?, self.flags()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.features.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for v in labels {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some((w, b)) = &self.head {
            for v in w.iter().chain(b.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let flags = r.u32()?;
        if flags & !KNOWN_FLAGS != 0 {
            return Err(Error::InvalidConfig(format!("unknown flag bits {flags:#x} at offset 20")));
        }
        let features = Array2::from_shape_vec((n, d), r.f32s(n * d)?).expect("length checked");
        let labels = if flags & FLAG_LABELS != 0 {
            let (start, labels) = r.i32s(n)?;
            for (i, &label) in labels.iter().enumerate() {
                if label < -1 || (label >= 0 && label as usize >= k) {
                    return Err(Error::InvalidLabel { offset: (start + 4 * i) as u64, label });
                }
            }
            Some(labels)
        } else {
            None
        };
        let head = if flags & FLAG_HEAD != 0 {
            let w = Array2::from_shape_vec((k, d), r.f32s(k * d)?).expect("length checked");
            let b = Array1::from_vec(r.f32s(k)?);
            Some((w, b))
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::TrailingBytes {
                offset: r.pos as u64,
                extra: (bytes.len() - r.pos) as u64,
            });
        }
        Ok(Self {
            num_classes: k,
            features,
            labels,
            head,
            normalized: flags & FLAG_NORMALIZED != 0,
        })
    }

    pub fn rows(&self) -> Vec<Array1<f64>> {
        self.features
            .rows()
            .into_iter()
            .map(|r| r.mapv(f64::from))
            .collect()
    }

    /// Rows scaled to unit norm, and whether they already were.
    pub fn normalized_rows(&self) -> Result<(Vec<Array1<f64>>, bool)> {
        let rows = self.rows();
        let mut already = true;
        let out = rows
            .into_iter()
            .map(|x| {
                let n = crate::mathcore::norm(x.view());
                if n < crate::mathcore::NORM_EPS {
                    return Err(Error::ZeroNormVector);
                }
                if (n - 1.0).abs() > UNIT_NORM_TOL {
                    already = false;
                }
                Ok(x / n)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((out, already))
    }

    pub fn linear_head(&self) -> Option<Result<LinearHead>> {
        self.head
            .as_ref()
            .map(|(w, b)| LinearHead::new(w.mapv(f64::from), b.mapv(f64::from)))
    }

    /// The rows with their labels; every label must be known.
    pub fn dataset(&self) -> Result<Dataset> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("feature file has no labels".into()))?;
        let mut known = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y < 0 {
                return Err(Error::InvalidLabel {
                    offset: (HEADER_LEN + 4 * self.features.len() + 4 * i) as u64,
                    label: y,
                });
            }
            known.push(y as usize);
        }
        Dataset::new(self.rows(), known, self.num_classes)
    }

    pub fn from_dataset(data: &Dataset, head: Option<&LinearHead>) -> Self {
        let d = data.dim();
        let mut features = Array2::<f32>::zeros((data.len(), d));
        for (mut row, x) in features.rows_mut().into_iter().zip(&data.inputs) {
            row.assign(&x.mapv(|v| v as f32));
        }
        let normalized = data
            .inputs
            .iter()
            .all(|x| (crate::mathcore::norm(x.view()) - 1.0).abs() <= UNIT_NORM_TOL);
        Self {
            num_classes: data.num_classes,
            features,
            labels: Some(data.labels.iter().map(|&y| y as i32).collect()),
            head: head.map(|h| (h.weight.mapv(|v| v as f32), h.bias.mapv(|v| v as f32))),
            normalized,
        }
    }
}

pub fn write_features(path: impl AsRef<Path>, file: &FeatureFile) -> Result<()> {
    fs::write(path, file.to_bytes()?)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureFile> {
    FeatureFile::from_bytes(&fs::read(path)?)
}

/// Parses `label,f1,...,fd` rows (no header). An empty label or `-1`
/// marks an unknown label.
pub fn features_from_csv(text: &str, num_classes: usize) -> Result<FeatureFile> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::InvalidConfig(format!("csv line {}: {e}", line + 1)))?;
        let bad = |what: &str| Error::InvalidConfig(format!("csv line {}: {what}", line + 1));
        let mut fields = record.iter();
        let label = match fields.next().unwrap_or("") {
            "" => -1,
            s => s.parse::<i32>().map_err(|_| bad("label is not an integer"))?,
        };
        if label < -1 || (label >= 0 && label as usize >= num_classes) {
            return Err(bad("label out of range"));
        }
        let row = fields
            .map(|s| s.parse::<f32>().map_err(|_| bad("feature is not a number")))
            .collect::<Result<Vec<_>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature"));
        }
        if *dim.get_or_insert(row.len()) != row.len() || row.is_empty() {
            return Err(bad("inconsistent row width"));
        }
        labels.push(label);
        values.extend(row);
    }
    let d = dim.ok_or_else(|| Error::InvalidConfig("csv has no rows".into()))?;
    let features = Array2::from_shape_vec((labels.len(), d), values).expect("widths checked");
    let normalized = features
        .rows()
        .into_iter()
        .all(|r| (r.mapv(f64::from).dot(&r.mapv(f64::from)).sqrt() - 1.0).abs() <= UNIT_NORM_TOL);
    Ok(FeatureFile {
        num_classes,
        features,
        labels: Some(labels),
        head: None,
        normalized,
    })
}

pub fn write_model(path: impl AsRef<Path>, model: &SourceModel) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<SourceModel> {
    Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
}

/// One line of a result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub method: String,
    pub config: RunConfig,
    pub batch_index: usize,
    pub batch_accuracy: f64,
    pub cumulative_accuracy: f64,
    pub mean_loss: Option<f64>,
    pub wall_ms: f64,
}

pub fn result_lines(record: &RunRecord) -> Vec<ResultLine> {
    record
        .batches
        .iter()
        .map(|b| ResultLine {
            method: record.method.to_string(),
            config: record.config.clone(),
            batch_index: b.batch_index,
            batch_accuracy: b.batch_accuracy,
            cumulative_accuracy: b.cumulative_accuracy,
            mean_loss: b.mean_loss,
            wall_ms: b.wall_ms,
        })
        .collect()
}

pub fn write_results(mut out: impl Write, records: &[RunRecord]) -> Result<()> {
    for r in records {
        for line in result_lines(r) {
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Parses a result file. A `batch_index` of 0 starts a new run; within a
/// run indices must increase.
pub fn read_results(input: impl BufRead) -> Result<Vec<ResultLine>> {
    let mut out: Vec<ResultLine> = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ResultLine = serde_json::from_str(&line)?;
        if let Some(prev) = out.last() {
            if parsed.batch_index != 0 && parsed.batch_index <= prev.batch_index {
                return Err(Error::InvalidConfig(format!(
                    "batch_index {} does not follow {}",
                    parsed.batch_index, prev.batch_index
                )));
            }
        }
        out.push(parsed);
    }
    Ok(out)
}

/// Final line of each run in a result file.
pub fn final_lines(lines: &[ResultLine]) -> Vec<&ResultLine> {
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let next_starts_run = lines.get(i + 1).is_none_or(|n| n.batch_index == 0);
        if next_starts_run {
            out.push(line);
        }
    }
    out
}
