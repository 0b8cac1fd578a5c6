//! Datasets, CSV ingestion and deterministic splitting.
//!
//! CSV layout: a header row naming feature columns `x0..x{d-1}`, the label
//! column `y`, an optional prediction column `pred`, optional embedding
//! columns `emb0..emb{e-1}` and an optional string `id` column. Rows are
//! samples; cells use `.` as the decimal separator.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<f64>,
    ids: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<f64>, ids: Option<Vec<String>>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                what: "labels",
                expected: features.rows(),
                got: labels.len(),
            });
        }
        if let Some(ids) = &ids {
            if ids.len() != labels.len() {
                return Err(Error::LengthMismatch {
                    what: "ids",
                    expected: labels.len(),
                    got: ids.len(),
                });
            }
        }
        if features.as_slice().iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("dataset contains NaN or infinite values".into()));
        }
        Ok(Self {
            features,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: self
                .ids
                .as_ref()
                .map(|ids| indices.iter().map(|&i| ids[i].clone()).collect()),
        }
    }
}

/// Model outputs attached to a dataset: point predictions and, optionally,
/// the representation used for kernel localization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub predictions: Vec<f64>,
    pub embeddings: Option<Matrix>,
}

impl ModelOutputs {
    pub fn new(predictions: Vec<f64>, embeddings: Option<Matrix>) -> Result<Self> {
        if let Some(e) = &embeddings {
            if e.rows() != predictions.len() {
                return Err(Error::LengthMismatch {
                    what: "embeddings",
                    expected: predictions.len(),
                    got: e.rows(),
                });
            }
        }
        Ok(Self {
            predictions,
            embeddings,
        })
    }

    /// Embeddings, defaulting to the raw features when none were supplied.
    pub fn embeddings_or<'a>(&'a self, features: &'a Matrix) -> &'a Matrix {
        self.embeddings.as_ref().unwrap_or(features)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            predictions: indices.iter().map(|&i| self.predictions[i]).collect(),
            embeddings: self.embeddings.as_ref().map(|e| e.select_rows(indices)),
        }
    }
}

/// Marginal miscoverage risk, restricted to the open interval (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RiskLevel(f64);

impl RiskLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha < 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::invalid("alpha", format!("{alpha} is outside (0, 1)")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for RiskLevel {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RiskLevel> for f64 {
    fn from(r: RiskLevel) -> f64 {
        r.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub repetition_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub cal: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition `0..n` into disjoint train/calibration/test index sets.
///
/// The permutation is drawn from the stream keyed on
/// `(spec.seed, spec.repetition_index)` and cut into contiguous blocks.
pub fn split(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    let requested = spec.n_train + spec.n_cal + spec.n_test;
    if requested > n {
        return Err(Error::SplitSize {
            requested,
            available: n,
        });
    }
    let perm = Stream::new(spec.seed, spec.repetition_index).permutation(n);
    let (train, rest) = perm.split_at(spec.n_train);
    let (cal, rest) = rest.split_at(spec.n_cal);
    Ok(SplitIndices {
        train: train.to_vec(),
        cal: cal.to_vec(),
        test: rest[..spec.n_test].to_vec(),
    })
}

/// Parsing options for dataset CSV files.
#[derive(Debug, Clone, Copy)]
pub struct CsvFormat {
    pub delimiter: u8,
    pub require_labels: bool,
}

impl Default for CsvFormat {
    fn default() -> Self {
        Self {
            delimiter: b',',
            require_labels: true,
        }
    }
}

/// Every column recognised in a dataset CSV, before validation into a
/// [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub features: Matrix,
    pub labels: Option<Vec<f64>>,
    pub predictions: Option<Vec<f64>>,
    pub embeddings: Option<Matrix>,
    pub ids: Option<Vec<String>>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn model_outputs(&self) -> Option<ModelOutputs> {
        self.predictions.as_ref().map(|p| ModelOutputs {
            predictions: p.clone(),
            embeddings: self.embeddings.clone(),
        })
    }
}

enum Column {
    Feature(usize),
    Label,
    Pred,
    Emb(usize),
    Id,
}

fn indexed(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok()
}

fn contiguous(path: &Path, prefix: &str, mut idx: Vec<usize>) -> Result<usize> {
    idx.sort_unstable();
    for (expect, got) in idx.iter().enumerate() {
        if expect != *got {
            return Err(Error::Schema {
                path: path.into(),
                msg: format!("{prefix} columns must be numbered 0..{} without gaps", idx.len()),
            });
        }
    }
    Ok(idx.len())
}

/// Read every recognised column of a dataset CSV.
pub fn load_table(path: impl AsRef<Path>, format: CsvFormat) -> Result<Table> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, 1, e))?;

    let headers = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
    let mut columns = Vec::with_capacity(headers.len());
    let (mut feat, mut emb) = (Vec::new(), Vec::new());
    let (mut has_y, mut has_pred, mut has_id) = (false, false, false);
    for name in headers.iter() {
        let col = match name {
            "y" => Column::Label,
            "pred" => Column::Pred,
            "id" => Column::Id,
            _ => {
                if let Some(i) = indexed(name, "x") {
                    feat.push(i);
                    Column::Feature(i)
                } else if let Some(i) = indexed(name, "emb") {
                    emb.push(i);
                    Column::Emb(i)
                } else {
                    return Err(Error::Schema {
                        path: path.into(),
                        msg: format!("unrecognised column `{name}`"),
                    });
                }
            }
        };
        let dup = match col {
            Column::Label => std::mem::replace(&mut has_y, true),
            Column::Pred => std::mem::replace(&mut has_pred, true),
            Column::Id => std::mem::replace(&mut has_id, true),
            _ => false,
        };
        if dup {
            return Err(Error::Schema {
                path: path.into(),
                msg: format!("duplicate column `{name}`"),
            });
        }
        columns.push(col);
    }
    let d = contiguous(path, "x", feat)?;
    let e = contiguous(path, "emb", emb)?;
    if d == 0 {
        return Err(Error::Schema {
            path: path.into(),
            msg: "no feature columns (x0, x1, ...)".into(),
        });
    }
    if format.require_labels && !has_y {
        return Err(Error::Schema {
            path: path.into(),
            msg: "missing label column `y`".into(),
        });
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    let mut embs = Vec::new();
    let mut ids = Vec::new();
    let mut row_feat = vec![0.0; d];
    let mut row_emb = vec![0.0; e];
    for (r, record) in reader.records().enumerate() {
        // Line numbers: header is line 1.
        let line = r + 2;
        let record = record.map_err(|err| csv_error(path, line, err))?;
        if record.len() != columns.len() {
            return Err(Error::Parse {
                path: path.into(),
                row: line,
                msg: format!("expected {} cells, found {}", columns.len(), record.len()),
            });
        }
        for (cell, col) in record.iter().zip(&columns) {
            if let Column::Id = col {
                ids.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                path: path.into(),
                row: line,
                msg: format!("non-numeric cell `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.into(),
                    row: line,
                    msg: format!("non-finite value `{cell}`"),
                });
            }
            match col {
                Column::Feature(i) => row_feat[*i] = v,
                Column::Emb(i) => row_emb[*i] = v,
                Column::Label => labels.push(v),
                Column::Pred => preds.push(v),
                Column::Id => unreachable!(),
            }
        }
        features.extend_from_slice(&row_feat);
        embs.extend_from_slice(&row_emb);
    }
    let n = features.len() / d;
    Ok(Table {
        features: Matrix::new(n, d, features)?,
        labels: has_y.then_some(labels),
        predictions: has_pred.then_some(preds),
        embeddings: if e > 0 {
            Some(Matrix::new(n, e, embs)?)
        } else {
            None
        },
        ids: has_id.then_some(ids),
    })
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    let row = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(line);
    Error::Parse {
        path: path.into(),
        row,
        msg: e.to_string(),
    }
}

/// Load a labelled dataset and any model outputs stored alongside it.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: CsvFormat,
) -> Result<(Dataset, Option<ModelOutputs>)> {
    let path = path.as_ref();
    let table = load_table(
        path,
        CsvFormat {
            require_labels: true,
            ..format
        },
    )?;
    let outputs = table.model_outputs();
    let labels = table.labels.ok_or_else(|| Error::Schema {
        path: path.into(),
        msg: "missing label column `y`".into(),
    })?;
    Ok((Dataset::new(table.features, labels, table.ids)?, outputs))
}

/// Write a dataset (and optional model outputs) in the canonical CSV layout.
///
/// Values are written in Rust's shortest round-trip representation, so
/// reloading reproduces every `f64` bit for bit.
pub fn write_dataset(
    path: impl AsRef<Path>,
    dataset: &Dataset,
    outputs: Option<&ModelOutputs>,
) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header: Vec<String> = Vec::new();
    if dataset.ids.is_some() {
        header.push("id".into());
    }
    header.extend((0..dataset.dim()).map(|i| format!("x{i}")));
    header.push("y".into());
    let emb_dim = outputs
        .and_then(|o| o.embeddings.as_ref())
        .map_or(0, Matrix::cols);
    if outputs.is_some() {
        header.push("pred".into());
        header.extend((0..emb_dim).map(|i| format!("emb{i}")));
    }
    w.write_record(&header).map_err(io_from_csv)?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..dataset.len() {
        rec.clear();
        if let Some(ids) = &dataset.ids {
            rec.push(ids[i].clone());
        }
        rec.extend(dataset.features.row(i).iter().map(f64::to_string));
        rec.push(dataset.labels[i].to_string());
        if let Some(o) = outputs {
            rec.push(o.predictions[i].to_string());
            if let Some(e) = &o.embeddings {
                rec.extend(e.row(i).iter().map(f64::to_string));
            }
        }
        w.write_record(&rec).map_err(io_from_csv)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn io_from_csv(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_file() {
        let f = write_tmp("x0,y\n0.1,1\n0.2,2\n0.3,3\n");
        let (ds, out) = load_dataset(f.path(), CsvFormat::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 1);
        assert_eq!(ds.labels(), &[1.0, 2.0, 3.0]);
        assert!(out.is_none());
    }

    #[test]
    fn predictions_and_embeddings() {
        let f = write_tmp("x0,x1,y,pred,emb0,emb1\n1,2,3,4,5,6\n7,8,9,10,11,12\n");
        let (ds, out) = load_dataset(f.path(), CsvFormat::default()).unwrap();
        assert_eq!(ds.dim(), 2);
        let out = out.unwrap();
        assert_eq!(out.predictions, vec![4.0, 10.0]);
        let emb = out.embeddings.unwrap();
        assert_eq!(emb.cols(), 2);
        assert_eq!(emb.row(1), &[11.0, 12.0]);
    }

    #[test]
    fn nan_label_names_row() {
        let f = write_tmp("x0,y\n0.1,1\n0.2,NaN\n");
        let err = load_dataset(f.path(), CsvFormat::default()).unwrap_err();
        match err {
            Error::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows() {
        let f = write_tmp("x0,y\n0.1,abc\n");
        assert!(matches!(
            load_dataset(f.path(), CsvFormat::default()),
            Err(Error::Parse { row: 2, .. })
        ));
        let f = write_tmp("x0,y\n0.1,1,2\n");
        assert!(matches!(
            load_dataset(f.path(), CsvFormat::default()),
            Err(Error::Parse { .. })
        ));
        let f = write_tmp("x1,y\n0.1,1\n");
        assert!(matches!(
            load_dataset(f.path(), CsvFormat::default()),
            Err(Error::Schema { .. })
        ));
        let f = write_tmp("x0,z\n0.1,1\n");
        assert!(matches!(
            load_dataset(f.path(), CsvFormat::default()),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn split_partition() {
        let spec = SplitSpec {
            seed: 1,
            n_train: 3,
            n_cal: 3,
            n_test: 4,
            repetition_index: 0,
        };
        let s = split(10, &spec).unwrap();
        assert_eq!((s.train.len(), s.cal.len(), s.test.len()), (3, 3, 4));
        let mut all: Vec<usize> = s.train.iter().chain(&s.cal).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(split(10, &spec).unwrap(), s);
        let other = split(
            10,
            &SplitSpec {
                repetition_index: 1,
                ..spec
            },
        )
        .unwrap();
        assert_ne!(other, s);
    }

    #[test]
    fn split_too_large() {
        let spec = SplitSpec {
            seed: 1,
            n_train: 6,
            n_cal: 3,
            n_test: 4,
            repetition_index: 0,
        };
        assert!(matches!(split(10, &spec), Err(Error::SplitSize { .. })));
    }

    #[test]
    fn risk_level_bounds() {
        assert!(RiskLevel::new(0.0).is_err());
        assert!(RiskLevel::new(1.0).is_err());
        assert!(RiskLevel::new(f64::NAN).is_err());
        assert_eq!(RiskLevel::new(0.05).unwrap().get(), 0.05);
        assert!(serde_json::from_str::<RiskLevel>("1.5").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_is_injective(n in 1usize..200, a in 0usize..70, b in 0usize..70, c in 0usize..70, seed: u64, rep in 0u64..5) {
                let spec = SplitSpec { seed, n_train: a, n_cal: b, n_test: c, repetition_index: rep };
                match split(n, &spec) {
                    Ok(s) => {
                        let mut all: Vec<usize> = s.train.iter().chain(&s.cal).chain(&s.test).copied().collect();
                        all.sort_unstable();
                        prop_assert_eq!(all.len(), a + b + c);
                        prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
                        prop_assert!(all.iter().all(|&i| i < n));
                    }
                    Err(_) => prop_assert!(a + b + c > n),
                }
            }

            #[test]
            fn csv_round_trip(rows in proptest::collection::vec((any::<f64>(), any::<f64>(), any::<f64>()), 1..20)) {
                let rows: Vec<_> = rows.into_iter().filter(|(a, b, c)| a.is_finite() && b.is_finite() && c.is_finite()).collect();
                prop_assume!(!rows.is_empty());
                let feats = Matrix::new(rows.len(), 1, rows.iter().map(|r| r.0).collect()).unwrap();
                let ds = Dataset::new(feats, rows.iter().map(|r| r.1).collect(), None).unwrap();
                let out = ModelOutputs::new(rows.iter().map(|r| r.2).collect(), None).unwrap();
                let f = tempfile::NamedTempFile::new().unwrap();
                write_dataset(f.path(), &ds, Some(&out)).unwrap();
                let (back, back_out) = load_dataset(f.path(), CsvFormat::default()).unwrap();
                prop_assert_eq!(back, ds);
                prop_assert_eq!(back_out.unwrap(), out);
            }
        }
    }
}
