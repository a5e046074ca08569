use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::model::{features, predict, ModelParams};
use crate::tensor::Tensor;

const CHUNK: usize = 64;
const VARIANCE_FLOOR: f64 = 1e-12;

/// Classification quality on one labeled split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub count: usize,
    pub accuracy: f64,
    /// `None` for classes absent from the split.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
}

/// Argmax predictions of the encoder and semantic classifier only.
pub fn evaluate(params: &ModelParams, samples: &[(PointCloud, usize)]) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let c = params.config.num_classes;
    if let Some((_, y)) = samples.iter().find(|(_, y)| *y >= c) {
        return Err(Error::invalid(format!("label {y} but the model has {c} classes")));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&PointCloud> = chunk.iter().map(|(p, _)| p).collect();
        let probs = predict(params, &refs)?;
        for (i, (_, y)) in chunk.iter().enumerate() {
            let row = probs.row(i);
            let pred = (0..c).fold(0, |best, k| if row[k] > row[best] { k } else { best });
            confusion[*y][pred] += 1;
        }
    }
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        count: samples.len(),
        accuracy: correct as f64 / samples.len() as f64,
        per_class_accuracy,
        confusion,
    })
}

/// Rows projected onto the top two principal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each of the two axes.
    pub component_variance: [f64; 2],
    pub total_variance: f64,
}

/// PCA of `data` rows (sample covariance). Each axis is signed so that its
/// largest-magnitude loading is positive.
pub fn pca_2d(data: &Tensor) -> Result<Projection> {
    let (n, d) = data.dims2();
    if n < 3 || d < 2 {
        return Err(Error::invalid(format!(
            "PCA needs ≥ 3 samples of ≥ 2 dims, got {n}×{d}"
        )));
    }
    let x = DMatrix::from_row_slice(n, d, data.data());
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let total_variance = cov.trace();
    if !(total_variance > VARIANCE_FLOOR) {
        return Err(Error::Degenerate(format!(
            "feature covariance has trace {total_variance}"
        )));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    let coords: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |a: &[f64]| a.iter().enumerate().map(|(j, v)| v * row[j]).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect();
    let var = |k: usize| coords.iter().map(|c| c[k] * c[k]).sum::<f64>() / (n as f64 - 1.0);
    Ok(Projection {
        component_variance: [var(0), var(1)],
        total_variance,
        coords,
    })
}

/// PCA of encoder features for a labeled split.
pub fn export_projection(params: &ModelParams, samples: &[(PointCloud, usize)]) -> Result<Projection> {
    let mut rows = Vec::new();
    for chunk in samples.chunks(CHUNK) {
        let refs: Vec<&PointCloud> = chunk.iter().map(|(p, _)| p).collect();
        rows.extend(features(params, &refs)?.into_data());
    }
    let d = params.config.feature_dim;
    pca_2d(&Tensor::matrix(samples.len(), d, rows)?)
}

pub fn write_projection_csv(path: &Path, projection: &Projection, labels: &[usize]) -> Result<()> {
    if labels.len() != projection.coords.len() {
        return Err(Error::invalid("one label per projected row is required"));
    }
    let mut out = String::from("x,y,class\n");
    for (c, y) in projection.coords.iter().zip(labels) {
        out.push_str(&format!("{:e},{:e},{y}\n", c[0], c[1]));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
