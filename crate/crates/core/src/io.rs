//! File formats: feature files, label sidecars and prediction dumps. All
//! integers are little-endian `u32` and all reals little-endian `f32`.
//!
//! Feature file: `LSTRFEAT`, version, step count, width, then the rows.
//! Prediction dump: `LSTRPRED`, version, output width, then one record per
//! step holding the step index followed by the scores.
//! Label sidecar: one integer class id per line.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 8] = b"LSTRFEAT";
pub const PREDICTION_MAGIC: &[u8; 8] = b"LSTRPRED";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize, what: &'static str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(what, format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.what, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.what, "length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    pub(crate) fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::format(self.what, "bad magic"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::format(self.what, format!("unsupported version {version}")));
        }
        Ok(())
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn features_to_bytes(features: &Matrix<f32>) -> Result<Vec<u8>> {
    const WHAT: &str = "feature file";
    let mut out = Vec::with_capacity(20 + 4 * features.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize, WHAT)?;
    put_u32(&mut out, features.rows(), WHAT)?;
    put_u32(&mut out, features.cols(), WHAT)?;
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<Matrix<f32>> {
    let mut r = ByteReader::new(bytes, "feature file");
    r.header(FEATURE_MAGIC)?;
    let steps = r.u32()?;
    let width = r.u32()?;
    let count = steps
        .checked_mul(width)
        .ok_or_else(|| Error::format("feature file", "size overflow"))?;
    if r.remaining() != count * 4 {
        return Err(Error::format(
            "feature file",
            format!(
                "body holds {} bytes, header promises {}",
                r.remaining(),
                count * 4
            ),
        ));
    }
    Matrix::new(steps, width, r.f32s(count)?)
}

pub fn write_features(path: impl AsRef<Path>, features: &Matrix<f32>) -> Result<()> {
    Ok(fs::write(path, features_to_bytes(features)?)?)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Matrix<f32>> {
    features_from_bytes(&fs::read(path)?)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let text: String = labels.iter().map(|y| format!("{y}\n")).collect();
    Ok(fs::write(path, text)?)
}

/// Blank lines are ignored.
pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|e| Error::format("label sidecar", format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    parse_labels(&fs::read_to_string(path)?)
}

/// Per-step score vectors with their step indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDump {
    pub steps: Vec<u32>,
    pub scores: Matrix<f32>,
}

impl PredictionDump {
    pub fn new(outputs: usize) -> Self {
        Self {
            steps: Vec::new(),
            scores: Matrix::zeros(0, outputs),
        }
    }

    pub fn outputs(&self) -> usize {
        self.scores.cols()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        const WHAT: &str = "prediction dump";
        let mut out = Vec::new();
        out.extend_from_slice(PREDICTION_MAGIC);
        put_u32(&mut out, FORMAT_VERSION as usize, WHAT)?;
        put_u32(&mut out, self.outputs(), WHAT)?;
        for (i, &step) in self.steps.iter().enumerate() {
            out.extend_from_slice(&step.to_le_bytes());
            for v in self.scores.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "prediction dump");
        r.header(PREDICTION_MAGIC)?;
        let outputs = r.u32()?;
        if outputs == 0 {
            return Err(Error::format("prediction dump", "zero output width"));
        }
        let record = 4 * (outputs + 1);
        if !r.remaining().is_multiple_of(record) {
            return Err(Error::format(
                "prediction dump",
                format!("{} trailing bytes after the last record", r.remaining() % record),
            ));
        }
        let n = r.remaining() / record;
        let mut steps = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * outputs);
        for _ in 0..n {
            steps.push(r.u32()? as u32);
            data.extend(r.f32s(outputs)?);
        }
        debug_assert!(r.at_end());
        Ok(Self {
            steps,
            scores: Matrix::new(n, outputs, data)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
