//! Labelled datasets: CSV ingestion and synthetic Gaussian blobs.

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Examples with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ...]`; the first axis indexes examples.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.dim(0) != labels.len() {
            return Err(Error::dim(format!(
                "{} feature rows but {} labels",
                features.dim(0),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {class_count} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flattened feature count per example.
    pub fn feature_len(&self) -> usize {
        self.features.len() / self.len()
    }

    /// Features and labels of the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.gather_rows(rows)?;
        let y = rows.iter().map(|&r| self.labels[r]).collect();
        Ok((x, y))
    }

    /// Same rows, features reshaped to `[N, shape...]`.
    pub fn with_example_shape(mut self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.features = self.features.reshape(full)?;
        Ok(self)
    }

    pub fn class_histogram(&self, rows: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &r in rows {
            h[self.labels[r]] += 1;
        }
        h
    }
}

/// Parses `f0,...,fD,label` CSV text. Row order is preserved and the class
/// count is inferred as `max(label) + 1`.
pub fn parse_csv<R: Read>(reader: R, source: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let parse_err = |line: u64, column: u64, message: String| Error::Parse {
        path: source.to_string(),
        line,
        column,
        message,
    };
    let headers = rdr.headers().map_err(|e| parse_err(1, 1, e.to_string()))?.clone();
    if headers.len() < 2 || headers.get(headers.len() - 1).map(str::trim) != Some("label") {
        return Err(parse_err(
            1,
            headers.len().max(1) as u64,
            "missing `label` column (header must be f0,...,fD,label)".into(),
        ));
    }
    let dims = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, 1, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dims + 1 {
            return Err(parse_err(
                line,
                record.len() as u64,
                format!("expected {} fields, found {}", dims + 1, record.len()),
            ));
        }
        for (col, field) in record.iter().take(dims).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, col as u64 + 1, format!("non-numeric feature `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, col as u64 + 1, format!("non-finite feature `{field}`")));
            }
            features.push(v);
        }
        let field = &record[dims];
        let label: usize = field
            .trim()
            .parse()
            .map_err(|_| parse_err(line, dims as u64 + 1, format!("invalid label `{field}`")))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(2, 1, "no data rows".into()));
    }
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    let features = Tensor::new(vec![labels.len(), dims], features)?;
    Dataset::new(features, labels, class_count)
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(std::io::BufReader::new(file), &path.display().to_string())
}

/// Writes the dataset with flattened features; floats use the shortest
/// representation that parses back to the same value.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let dims = dataset.feature_len();
    let mut header: Vec<String> = (0..dims).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, label) in dataset.features.data().chunks(dims).zip(&dataset.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()
}

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(dataset, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// `classes` unit-covariance Gaussian blobs in `dims` dimensions.
///
/// Class means sit on a circle of radius `separation` in the first two
/// coordinates (on a line for `dims == 1`). Rows are ordered by class.
pub fn gen_synthetic(classes: usize, dims: usize, n_per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if dims == 0 || n_per_class == 0 {
        return Err(Error::InvalidArgument("dims and n_per_class must be positive".into()));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::InvalidArgument(format!("separation {separation} must be >= 0")));
    }
    let mut rng = seed::rng(seed);
    let mut features = Vec::with_capacity(classes * n_per_class * dims);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for k in 0..classes {
        let mean = class_mean(k, classes, dims, separation);
        for _ in 0..n_per_class {
            for m in &mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(m + z);
            }
            labels.push(k);
        }
    }
    let features = Tensor::new(vec![labels.len(), dims], features)?;
    Dataset::new(features, labels, classes)
}

fn class_mean(k: usize, classes: usize, dims: usize, separation: f64) -> Vec<f64> {
    let mut mean = vec![0.0; dims];
    if dims == 1 {
        mean[0] = separation * (k as f64 - (classes as f64 - 1.0) / 2.0);
    } else {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
        mean[0] = separation * angle.cos();
        mean[1] = separation * angle.sin();
    }
    mean
}
