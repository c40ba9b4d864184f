//! Differentially private PCA projection.
//!
//! A random subset of rows is normalized to unit ℓ2 norm and stacked into
//! `A`. Gaussian noise `N(0, σp²)` is added to each upper-triangular entry of
//! `AᵀA` and mirrored, and the top-`k` eigenvectors of the noisy symmetric
//! matrix become the projection.

use std::io::{Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::container::{self, ContainerError};
use crate::mechanisms::NoiseSource;
use crate::numeric::l2_norm;

const PROJECTION_MAGIC: &[u8; 4] = b"DPCA";

pub const JACOBI_TOLERANCE: f64 = 1e-10;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Eigengaps below this make the top-`k` subspace ambiguous.
pub const EIGENGAP_WARNING: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: expected dimension {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("Jacobi iteration did not converge in {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NotConverged { sweeps: usize, off_norm: f64 },
    #[error("projection container: {0}")]
    Container(#[from] ContainerError),
}

pub type Result<T> = std::result::Result<T, PcaError>;

/// `k` orthonormal columns of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    dim: usize,
    columns: Vec<Vec<f64>>,
}

impl ProjectionMatrix {
    pub fn new(dim: usize, columns: Vec<Vec<f64>>) -> Result<Self> {
        if let Some(c) = columns.iter().find(|c| c.len() != dim) {
            return Err(PcaError::ShapeMismatch { expected: dim, got: c.len() });
        }
        Ok(Self { dim, columns })
    }

    /// The first `k` standard basis vectors.
    pub fn coordinate_selection(dim: usize, k: usize) -> Result<Self> {
        if k > dim {
            return Err(PcaError::Domain(format!("k={k} exceeds dimension {dim}")));
        }
        let columns = (0..k)
            .map(|i| {
                let mut e = vec![0.0; dim];
                e[i] = 1.0;
                e
            })
            .collect();
        Self::new(dim, columns)
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    pub fn output_dim(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// `Pᵀx`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(PcaError::ShapeMismatch { expected: self.dim, got: x.len() });
        }
        Ok(self.columns.iter().map(|c| c.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        container::write_header(w, PROJECTION_MAGIC, &[self.dim as u32, self.columns.len() as u32])?;
        for c in &self.columns {
            container::write_f64s(w, c)?;
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let dims = container::read_header(r, PROJECTION_MAGIC)?;
        let [dim, k] = dims[..] else {
            return Err(ContainerError::Malformed(format!("projection needs 2 dims, found {}", dims.len())).into());
        };
        let (dim, k) = (dim as usize, k as usize);
        let columns = (0..k).map(|_| container::read_f64s(r, dim)).collect::<std::result::Result<_, _>>()?;
        Self::new(dim, columns)
    }
}

/// Output of [`dp_pca`].
#[derive(Debug, Clone)]
pub struct PcaOutcome {
    pub projection: ProjectionMatrix,
    /// Top-`k` eigenvalues of the noisy covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// `λ_k − λ_{k+1}`, infinite when `k == d`.
    pub eigengap: f64,
    /// Set when the eigengap is below [`EIGENGAP_WARNING`].
    pub rank_ambiguous: bool,
    pub rows_used: usize,
}

/// Eigen-decomposition of a symmetric `n × n` matrix (row-major) by cyclic
/// Jacobi rotations. Returns eigenvalues in descending order with matching
/// unit eigenvectors; each eigenvector's largest-magnitude entry is positive.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if matrix.len() != n * n {
        return Err(PcaError::ShapeMismatch { expected: n * n, got: matrix.len() });
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let off_norm = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&a) <= JACOBI_TOLERANCE;
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                if s == 0.0 {
                    continue;
                }
                rotated = true;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        converged = off_norm(&a) <= JACOBI_TOLERANCE || !rotated;
    }
    if !converged {
        return Err(PcaError::NotConverged {
            sweeps,
            off_norm: off_norm(&a),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&col| {
            let mut vec: Vec<f64> = (0..n).map(|k| v[k * n + col]).collect();
            let lead = vec
                .iter()
                .copied()
                .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if lead < 0.0 {
                vec.iter_mut().for_each(|x| *x = -*x);
            }
            vec
        })
        .collect();
    Ok((values, vectors))
}

/// `AᵀA` for row-major `rows × dim` data, computed one output row at a time.
fn gram(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim * dim];
    out.par_chunks_mut(dim).enumerate().for_each(|(i, row_out)| {
        for r in rows {
            let ri = r[i];
            if ri != 0.0 {
                for (o, &rj) in row_out.iter_mut().zip(r) {
                    *o += ri * rj;
                }
            }
        }
    });
    out
}

/// Private top-`k` principal directions of `examples`.
///
/// `rng` drives both the row sampling and the covariance noise, in that order.
pub fn dp_pca<R: AsRef<[f64]>>(
    examples: &[R],
    k: usize,
    sigma_p: f64,
    sample_fraction: f64,
    rng: &mut NoiseSource,
) -> Result<PcaOutcome> {
    let dim = examples.first().map(|e| e.as_ref().len()).unwrap_or(0);
    if dim == 0 {
        return Err(PcaError::Domain("no examples to run PCA on".into()));
    }
    if k == 0 || k > dim {
        return Err(PcaError::Domain(format!("k must be in 1..={dim}, got {k}")));
    }
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(PcaError::Domain(format!("sample fraction must be in (0, 1], got {sample_fraction}")));
    }
    if !(sigma_p >= 0.0 && sigma_p.is_finite()) {
        return Err(PcaError::Domain(format!("sigma_p must be finite and >= 0, got {sigma_p}")));
    }
    if let Some(bad) = examples.iter().find(|e| e.as_ref().len() != dim) {
        return Err(PcaError::ShapeMismatch { expected: dim, got: bad.as_ref().len() });
    }

    let mut rows = Vec::new();
    for ex in examples {
        let ex = ex.as_ref();
        let take = sample_fraction >= 1.0 || rng.uniform() < sample_fraction;
        if !take {
            continue;
        }
        let norm = l2_norm(ex);
        if norm > 0.0 && norm.is_finite() {
            rows.push(ex.iter().map(|x| x / norm).collect::<Vec<_>>());
        }
    }

    let mut cov = gram(&rows, dim);
    if sigma_p > 0.0 {
        let upper = dim * (dim + 1) / 2;
        let mut z = vec![0.0; upper];
        rng.fill_gaussian(&mut z, sigma_p);
        let mut it = z.into_iter();
        for i in 0..dim {
            for j in i..dim {
                let e = it.next().expect("sized to the upper triangle");
                cov[i * dim + j] += e;
                if i != j {
                    cov[j * dim + i] = cov[i * dim + j];
                }
            }
        }
    }

    let (values, vectors) = symmetric_eigen(&cov, dim)?;
    let eigengap = if k < dim { values[k - 1] - values[k] } else { f64::INFINITY };
    Ok(PcaOutcome {
        projection: ProjectionMatrix::new(dim, vectors.into_iter().take(k).collect())?,
        eigenvalues: values.into_iter().take(k).collect(),
        eigengap,
        rank_ambiguous: eigengap < EIGENGAP_WARNING,
        rows_used: rows.len(),
    })
}
