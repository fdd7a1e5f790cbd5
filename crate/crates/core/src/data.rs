//! Tabular datasets: CSV input/output and per-column min-max scaling to
//! `[-1, 1]`.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

/// Range of one column before scaling. A constant column scales to 0 and
/// maps back to its constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub min: f64,
    pub max: f64,
}

impl ColumnScale {
    pub fn scale(&self, v: f64) -> f64 {
        if self.max == self.min {
            0.0
        } else {
            2.0 * (v - self.min) / (self.max - self.min) - 1.0
        }
    }

    pub fn inverse(&self, s: f64) -> f64 {
        if self.max == self.min {
            self.min
        } else {
            self.min + (s + 1.0) / 2.0 * (self.max - self.min)
        }
    }
}

/// Column names and scaling of a dataset, without the rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub columns: Vec<String>,
    pub label_name: Option<String>,
    pub num_classes: usize,
    pub scaling: Option<Vec<ColumnScale>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    columns: Vec<String>,
    features: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
    label_name: Option<String>,
    scaling: Option<Vec<ColumnScale>>,
}

impl TabularDataset {
    /// Unscaled dataset. Rows must all have `columns.len()` features.
    pub fn new(
        columns: Vec<String>,
        features: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
        label_name: Option<String>,
    ) -> Result<Self> {
        if let Some(i) = features.iter().position(|r| r.len() != columns.len()) {
            return param(format!(
                "row {i} has {} features, expected {}",
                features[i].len(),
                columns.len()
            ));
        }
        if let Some(l) = &labels {
            if l.len() != features.len() {
                return param(format!("{} labels for {} rows", l.len(), features.len()));
            }
        }
        Ok(Self {
            columns,
            features,
            labels,
            label_name,
            scaling: None,
        })
    }

    /// Fit min-max scaling on the current (raw) features and apply it.
    pub fn scaled(self) -> Self {
        let scales = (0..self.columns.len())
            .map(|c| {
                let (min, max) = self.features.iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY),
                    |(lo, hi), r| (lo.min(r[c]), hi.max(r[c])),
                );
                ColumnScale { min, max }
            })
            .collect::<Vec<_>>();
        self.with_scaling(scales).expect("scales fitted to the columns")
    }

    /// Apply a given scaling to raw features.
    pub fn with_scaling(mut self, scales: Vec<ColumnScale>) -> Result<Self> {
        if self.scaling.is_some() {
            return param("dataset is already scaled");
        }
        if scales.len() != self.columns.len() {
            return param(format!(
                "{} column scales for {} columns",
                scales.len(),
                self.columns.len()
            ));
        }
        for row in &mut self.features {
            for (v, s) in row.iter_mut().zip(&scales) {
                *v = s.scale(*v);
            }
        }
        self.scaling = Some(scales);
        Ok(self)
    }

    /// Dataset whose features are already in scaled space.
    pub fn from_scaled(schema: &Schema, features: Vec<Vec<f64>>, labels: Option<Vec<usize>>) -> Result<Self> {
        let mut ds = Self::new(schema.columns.clone(), features, labels, schema.label_name.clone())?;
        ds.scaling = schema.scaling.clone();
        Ok(ds)
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn label_name(&self) -> Option<&str> {
        self.label_name.as_deref()
    }

    pub fn scaling(&self) -> Option<&[ColumnScale]> {
        self.scaling.as_deref()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.columns.len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max())
            .map_or(0, |m| m + 1)
    }

    pub fn schema(&self) -> Schema {
        Schema {
            columns: self.columns.clone(),
            label_name: self.label_name.clone(),
            num_classes: self.num_classes(),
            scaling: self.scaling.clone(),
        }
    }

    /// Features mapped back through the scaling (or as-is if unscaled).
    pub fn raw_features(&self) -> Vec<Vec<f64>> {
        match &self.scaling {
            None => self.features.clone(),
            Some(scales) => self
                .features
                .iter()
                .map(|r| r.iter().zip(scales).map(|(v, s)| s.inverse(*v)).collect())
                .collect(),
        }
    }

    /// CSV with a header; raw (inverse-scaled) values, label column last.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = self.columns.iter().map(String::as_str).collect();
        if self.labels.is_some() {
            header.push(self.label_name.as_deref().unwrap_or("label"));
        }
        w.write_record(&header).map_err(csv_io)?;
        for (i, row) in self.raw_features().iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            if let Some(l) = &self.labels {
                rec.push(l[i].to_string());
            }
            w.write_record(&rec).map_err(csv_io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn parse_err(row: Option<usize>, column: Option<&str>, message: impl Into<String>) -> Error {
    Error::Parse {
        row,
        column: column.map(str::to_string),
        message: message.into(),
    }
}

/// Parse CSV text with a header row. Rows are numbered by file line.
/// Features are returned unscaled.
pub fn parse_csv<R: Read>(reader: R, label_column: Option<&str>) -> Result<TabularDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(Some(1), None, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(parse_err(Some(1), None, "missing header row"));
    }
    if header.iter().all(|h| h.parse::<f64>().is_ok()) {
        return Err(parse_err(Some(1), None, "missing header row (first row is numeric)"));
    }
    let label_idx = match label_column {
        Some(name) => Some(
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| parse_err(None, Some(name), "unknown label column"))?,
        ),
        None => None,
    };
    let columns: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut features = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| parse_err(Some(line), None, e.to_string()))?;
        if rec.len() != header.len() {
            return Err(parse_err(
                Some(line),
                None,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let mut row = Vec::with_capacity(columns.len());
        for (c, cell) in rec.iter().enumerate() {
            if Some(c) == label_idx {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(Some(line), Some(&header[c]), format!("label {cell:?} is not a number")))?;
                if v < 0.0 || v.fract() != 0.0 || !v.is_finite() {
                    return Err(parse_err(
                        Some(line),
                        Some(&header[c]),
                        format!("label {cell:?} is not a non-negative integer"),
                    ));
                }
                labels.as_mut().expect("label column present").push(v as usize);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(Some(line), Some(&header[c]), format!("{cell:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(parse_err(Some(line), Some(&header[c]), "value is not finite"));
                }
                row.push(v);
            }
        }
        features.push(row);
    }
    TabularDataset::new(columns, features, labels, label_column.map(str::to_string))
}

/// Header row of a CSV file.
pub fn csv_header(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_io)?;
    Ok(rdr
        .headers()
        .map_err(|e| parse_err(Some(1), None, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect())
}

/// Load a CSV file and scale every feature column to `[-1, 1]`.
pub fn load_csv(path: &Path, label_column: Option<&str>) -> Result<TabularDataset> {
    let file = std::fs::File::open(path)?;
    Ok(parse_csv(file, label_column)?.scaled())
}
