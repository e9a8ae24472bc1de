//! Synthetic domain-shift datasets and CSV ingestion.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Id,
    Near,
    Far,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainTag {
    pub kind: DomainKind,
    pub shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `[n, F]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub domain: DomainTag,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, domain: DomainTag) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::shape("dataset", format!("{:?} features, {} labels", features.shape(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        if !features.all_finite() {
            return Err(Error::invalid("features must be finite"));
        }
        Ok(Self { features, labels, num_classes, domain })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let f = self.feature_dim();
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Dataset {
            features: Tensor::matrix(idx.len(), f, data).expect("rows have equal width"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.feature_dim() != self.feature_dim() {
            return Err(Error::shape("concat", "feature widths differ"));
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(
            Tensor::matrix(labels.len(), self.feature_dim(), data)?,
            labels,
            self.num_classes.max(other.num_classes),
            self.domain,
        )
    }

    /// Consecutive disjoint train/val/test slices covering every row.
    pub fn split(&self, n_train: usize, n_val: usize) -> Result<(Dataset, Dataset, Dataset)> {
        if n_train + n_val > self.len() {
            return Err(Error::invalid("split sizes exceed dataset size"));
        }
        let idx: Vec<usize> = (0..self.len()).collect();
        let (a, rest) = idx.split_at(n_train);
        let (b, c) = rest.split_at(n_val);
        Ok((self.subset(a), self.subset(b), self.subset(c)))
    }
}

/// Class-conditional Gaussian mixture with an optional rigid shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub num_classes: usize,
    pub modes_per_class: usize,
    pub feature_dim: usize,
    /// Per-coordinate std of the mode means around the origin.
    pub mode_spread: f64,
    pub noise: f64,
    pub shift: f64,
    /// Radians, in a fixed random plane.
    pub rotation: f64,
    pub seed: u64,
}

const TAG_MEANS: u64 = 1;
const TAG_DIRECTION: u64 = 2;
const TAG_PLANE: u64 = 3;
const TAG_SAMPLES: u64 = 4;

impl Default for SyntheticDomainSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            modes_per_class: 2,
            feature_dim: 16,
            mode_spread: 0.4,
            noise: 0.5,
            shift: 0.0,
            rotation: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.modes_per_class == 0 || self.feature_dim < 2 {
            return Err(Error::Config("need >= 2 classes, >= 1 mode and >= 2 features".into()));
        }
        if !(self.mode_spread > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("mode_spread must be > 0 and noise >= 0".into()));
        }
        if !(self.shift >= 0.0) || !self.rotation.is_finite() {
            return Err(Error::Config("shift must be >= 0 and rotation finite".into()));
        }
        Ok(())
    }

    fn root(&self) -> RngStream {
        RngStream::new(self.seed, 0)
    }

    /// Unshifted mode means, row `c * M + m`.
    pub fn base_means(&self) -> Vec<Vec<f64>> {
        let mut rng = self.root().derive(TAG_MEANS);
        (0..self.num_classes * self.modes_per_class)
            .map(|_| rng.normals(self.feature_dim).into_iter().map(|x| x * self.mode_spread).collect())
            .collect()
    }

    /// Unit shift direction shared by every domain with this seed.
    pub fn shift_direction(&self) -> Vec<f64> {
        unit(self.root().derive(TAG_DIRECTION).normals(self.feature_dim))
    }

    /// Orthonormal pair spanning the rotation plane.
    fn rotation_plane(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rng = self.root().derive(TAG_PLANE);
        let a = unit(rng.normals(self.feature_dim));
        let mut b = rng.normals(self.feature_dim);
        let proj = dot(&a, &b);
        b.iter_mut().zip(&a).for_each(|(x, y)| *x -= proj * y);
        (a, unit(b))
    }

    /// Mode means after rotation and shift.
    pub fn means(&self) -> Vec<Vec<f64>> {
        let dir = self.shift_direction();
        let (a, b) = self.rotation_plane();
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        self.base_means()
            .into_iter()
            .map(|mut mu| {
                if self.rotation != 0.0 {
                    let (pa, pb) = (dot(&mu, &a), dot(&mu, &b));
                    let (ra, rb) = (c * pa - s * pb, s * pa + c * pb);
                    for i in 0..mu.len() {
                        mu[i] += (ra - pa) * a[i] + (rb - pb) * b[i];
                    }
                }
                mu.iter_mut().zip(&dir).for_each(|(x, d)| *x += self.shift * d);
                mu
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Draws `n` labelled examples; `stream` separates independent samples of
/// the same domain.
pub fn generate_domain(spec: &SyntheticDomainSpec, n: usize, stream: u64, kind: DomainKind) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("need at least one example"));
    }
    let means = spec.means();
    let mut rng = spec.root().derive(TAG_SAMPLES).derive(stream);
    let (c, m, f) = (spec.num_classes, spec.modes_per_class, spec.feature_dim);
    let mut data = Vec::with_capacity(n * f);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = ((rng.uniform() * c as f64) as usize).min(c - 1);
        let mode = ((rng.uniform() * m as f64) as usize).min(m - 1);
        let mu = &means[y * m + mode];
        data.extend(mu.iter().map(|&x| x + spec.noise * rng.standard_normal()));
        labels.push(y);
    }
    Dataset::new(Tensor::matrix(n, f, data)?, labels, c, DomainTag { kind, shift: spec.shift })
}

#[derive(Clone, Debug)]
pub struct OodSuite {
    pub id: Dataset,
    pub near: Dataset,
    pub far: Dataset,
}

/// Sample stream used for the suite's ID split; distinct from training data.
pub const SUITE_STREAM: u64 = 100;

/// ID, near- and far-shifted test sets sharing class structure. A zero
/// shift also drops the rotation, so `delta_near = 0` yields a second ID
/// sample.
pub fn make_ood_suite(base: &SyntheticDomainSpec, delta_near: f64, delta_far: f64, n_each: usize) -> Result<OodSuite> {
    if !(0.0 <= delta_near && delta_near < delta_far) {
        return Err(Error::invalid(format!("need 0 <= delta_near < delta_far, got {delta_near}, {delta_far}")));
    }
    let shifted = |delta: f64| SyntheticDomainSpec {
        shift: delta,
        rotation: if delta > 0.0 { base.rotation } else { 0.0 },
        ..base.clone()
    };
    let id_spec = shifted(0.0);
    Ok(OodSuite {
        id: generate_domain(&id_spec, n_each, SUITE_STREAM, DomainKind::Id)?,
        near: generate_domain(&shifted(delta_near), n_each, SUITE_STREAM + 1, DomainKind::Near)?,
        far: generate_domain(&shifted(delta_far), n_each, SUITE_STREAM + 2, DomainKind::Far)?,
    })
}

/// Expected CSV layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub feature_dim: usize,
    pub num_classes: usize,
}

pub fn csv_header(feature_dim: usize) -> Vec<String> {
    (0..feature_dim).map(|i| format!("f{i}")).chain(std::iter::once("label".to_string())).collect()
}

/// Reads `f0,...,f{F-1},label` rows.
pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers().map_err(|e| Error::Csv { line: 1, msg: e.to_string() })?.clone();
    if header.is_empty() || (header.len() == 1 && header.get(0) == Some("")) {
        return Err(Error::Csv { line: 1, msg: "no data rows".into() });
    }
    let expected = csv_header(schema.feature_dim);
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Csv { line: 1, msg: format!("bad header, expected {}", expected.join(",")) });
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::Csv { line: e.position().map_or(0, |p| p.line()), msg: e.to_string() })?;
        let line = record.position().map_or(0, |p| p.line());
        for (j, cell) in record.iter().take(schema.feature_dim).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Csv { line, msg: format!("column f{j}: `{cell}` is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Csv { line, msg: format!("column f{j}: non-finite value") });
            }
            data.push(v);
        }
        let cell = &record[schema.feature_dim];
        let y: usize = cell
            .trim()
            .parse()
            .map_err(|_| Error::Csv { line, msg: format!("label `{cell}` is not a class index") })?;
        if y >= schema.num_classes {
            return Err(Error::Csv { line, msg: format!("label {y} out of range for {} classes", schema.num_classes) });
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(Error::Csv { line: 1, msg: "no data rows".into() });
    }
    Dataset::new(
        Tensor::matrix(labels.len(), schema.feature_dim, data)?,
        labels,
        schema.num_classes,
        DomainTag { kind: DomainKind::External, shift: 0.0 },
    )
}

/// Writes floats in shortest round-trip form, LF line endings.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(&mut out);
        w.write_record(csv_header(data.feature_dim())).map_err(csv_write_err)?;
        for i in 0..data.len() {
            let mut rec: Vec<String> = data.row(i).iter().map(|x| format!("{x:?}")).collect();
            rec.push(data.labels[i].to_string());
            w.write_record(&rec).map_err(csv_write_err)?;
        }
        w.flush()?;
    }
    File::create(path)?.write_all(&out)?;
    Ok(())
}

fn csv_write_err(e: csv::Error) -> Error {
    Error::Csv { line: 0, msg: e.to_string() }
}
