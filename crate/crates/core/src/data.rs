//! Classification datasets: deterministic synthetic generators and a plain
//! CSV loader (`f1,...,fd,label` rows, optional header).

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TwaError};

/// Feature matrix (`m x d_in`, row-major) with integer class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Vec<f64>,
    d_in: usize,
    labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Vec<f64>, d_in: usize, labels: Vec<usize>, name: String) -> Result<Self> {
        if labels.is_empty() {
            return Err(TwaError::Input("dataset must contain at least one row".into()));
        }
        if d_in == 0 {
            return Err(TwaError::Input("dataset needs at least one feature".into()));
        }
        if features.len() != labels.len() * d_in {
            return Err(TwaError::Dimension(format!(
                "{} feature values cannot form {} rows of width {d_in}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(TwaError::Numeric(format!(
                "non-finite feature value at index {i}"
            )));
        }
        Ok(Self {
            features,
            d_in,
            labels,
            name,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d_in..(i + 1) * self.d_in]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) + 1
    }

    /// Owned subset in the given row order (rows may repeat).
    pub fn select(&self, rows: &[usize]) -> Result<Dataset> {
        if rows.is_empty() {
            return Err(TwaError::Input("cannot select an empty subset".into()));
        }
        let mut features = Vec::with_capacity(rows.len() * self.d_in);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            if r >= self.len() {
                return Err(TwaError::IndexOutOfRange {
                    index: r,
                    len: self.len(),
                });
            }
            features.extend_from_slice(self.feature_row(r));
            labels.push(self.labels[r]);
        }
        Dataset::new(features, self.d_in, labels, self.name.clone())
    }
}

/// Built-in synthetic dataset families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    TwoGaussians,
    TwoMoons,
}

const GAUSSIAN_MEANS: [[f64; 2]; 2] = [[-0.35, -0.35], [0.35, 0.35]];

/// Deterministic two-class 2-D dataset. Classes alternate by row, so the
/// class counts differ by at most one.
pub fn make_synthetic(kind: SyntheticKind, m: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if m < 2 {
        return Err(TwaError::Input(format!("need m >= 2 rows, got {m}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(TwaError::Input(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(m * 2);
    let mut labels = Vec::with_capacity(m);
    let per_class = [m.div_ceil(2), m / 2];
    for i in 0..m {
        let class = i % 2;
        let (mut x, mut y) = match kind {
            SyntheticKind::TwoGaussians => {
                let mu = GAUSSIAN_MEANS[class];
                (mu[0], mu[1])
            }
            SyntheticKind::TwoMoons => {
                let count = per_class[class];
                let j = i / 2;
                let t = if count > 1 {
                    std::f64::consts::PI * j as f64 / (count - 1) as f64
                } else {
                    0.0
                };
                if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                }
            }
        };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        x += noise * nx;
        y += noise * ny;
        features.push(x);
        features.push(y);
        labels.push(class);
    }
    let name = match kind {
        SyntheticKind::TwoGaussians => "two_gaussians",
        SyntheticKind::TwoMoons => "two_moons",
    };
    Dataset::new(features, 2, labels, name.to_string())
}

/// Loads `f1,...,fd,label` rows. A header is detected by a non-numeric first
/// cell on the first line and skipped; line numbers in errors are physical,
/// 1-based.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TwaError::Io {
        path: path.to_path_buf(),
        source,
    })?;

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut d_in: Option<usize> = None;
    let mut first_content_line = true;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if first_content_line {
            first_content_line = false;
            if cells[0].parse::<f64>().is_err() {
                continue; // header row
            }
        }
        if cells.len() < 2 {
            return Err(TwaError::Parse {
                line: line_no,
                message: "expected at least one feature and a label".into(),
            });
        }
        let width = cells.len() - 1;
        match d_in {
            None => d_in = Some(width),
            Some(w) if w != width => {
                return Err(TwaError::Parse {
                    line: line_no,
                    message: format!("row has {width} features, expected {w}"),
                })
            }
            _ => {}
        }
        for cell in &cells[..width] {
            let v: f64 = cell.parse().map_err(|_| TwaError::Parse {
                line: line_no,
                message: format!("invalid feature value {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(TwaError::Parse {
                    line: line_no,
                    message: format!("non-finite feature value {cell:?}"),
                });
            }
            features.push(v);
        }
        let label: usize = cells[width].parse().map_err(|_| TwaError::Parse {
            line: line_no,
            message: format!("invalid label {:?}", cells[width]),
        })?;
        labels.push(label);
    }

    if labels.is_empty() {
        return Err(TwaError::Input(format!(
            "no data rows in {}",
            path.display()
        )));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".to_string());
    Dataset::new(features, d_in.unwrap(), labels, name)
}
