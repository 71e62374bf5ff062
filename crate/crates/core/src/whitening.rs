//! Whitening transform: centre, decorrelate, slice to `d_t` dimensions and
//! L2-normalise, so embeddings of different origin share one space.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::{Error, Result};

/// Eigenvalues below this fraction of the largest one are raised to it.
pub const RELATIVE_EIG_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WhiteningMode {
    /// First `d_t` columns of the symmetric matrix `V·D^(-1/2)·Vᵀ`.
    #[default]
    Literal,
    /// `V[:, :d_t]·D[:d_t]^(-1/2)`, keeping the top-variance directions.
    Pca,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WhiteningTransform {
    pub(crate) mu: Vec<f64>,
    /// Row-major `d × d_t`.
    pub(crate) w: Vec<f64>,
    pub(crate) d: usize,
    pub(crate) d_t: usize,
    pub(crate) eig_floor: f64,
    pub(crate) mode: WhiteningMode,
}

impl WhiteningTransform {
    pub fn from_parts(
        mu: Vec<f64>,
        w: Vec<f64>,
        d_t: usize,
        eig_floor: f64,
        mode: WhiteningMode,
    ) -> Result<Self> {
        let d = mu.len();
        if d_t == 0 || d_t > d || w.len() != d * d_t {
            return Err(Error::Shape(format!(
                "whitening parts: d={d}, d_t={d_t}, w has {} entries",
                w.len()
            )));
        }
        if mu.iter().chain(&w).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("whitening transform".into()));
        }
        Ok(WhiteningTransform {
            mu,
            w,
            d,
            d_t,
            eig_floor,
            mode,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn output_dim(&self) -> usize {
        self.d_t
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    pub fn matrix(&self) -> &[f64] {
        &self.w
    }

    pub fn eig_floor(&self) -> f64 {
        self.eig_floor
    }

    pub fn mode(&self) -> WhiteningMode {
        self.mode
    }

    /// `(v − μ)·W` without the final normalisation.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.d {
            return Err(Error::Dimension {
                context: "whitening input".into(),
                expected: self.d,
                found: v.len(),
            });
        }
        let mut e = vec![0.0; self.d_t];
        for (i, (&x, &m)) in v.iter().zip(&self.mu).enumerate() {
            let c = x - m;
            if c == 0.0 {
                continue;
            }
            let row = &self.w[i * self.d_t..(i + 1) * self.d_t];
            for (acc, &wij) in e.iter_mut().zip(row) {
                *acc += c * wij;
            }
        }
        Ok(e)
    }

    /// Whitened, unit-norm embedding; the zero vector stays zero.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut e = self.project(v)?;
        let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            e.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(e)
    }
}

pub fn fit_whitening(x: &EmbeddingMatrix, d_t: usize) -> Result<WhiteningTransform> {
    let rows: Vec<&[f64]> = x.iter().map(|(_, r)| r).collect();
    fit_rows(&rows, d_t, WhiteningMode::Literal)
}

/// Symmetric eigendecomposition. Exactly rank-deficient input can make the
/// QR iteration produce NaNs; it is retried with a diagonal ridge far below
/// the eigenvalue floor.
fn eigen(cov: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let finite = |e: &SymmetricEigen<f64, nalgebra::Dyn>| {
        e.eigenvalues
            .iter()
            .chain(e.eigenvectors.iter())
            .all(|v| v.is_finite())
    };
    let d = cov.nrows();
    let mean_diag = cov.trace() / d as f64;
    let mut ridge = 1e-12 * mean_diag;
    let mut eig = SymmetricEigen::new(cov.clone());
    for _ in 0..4 {
        if finite(&eig) {
            return Ok(eig);
        }
        let mut m = cov.clone();
        for i in 0..d {
            m[(i, i)] += ridge;
        }
        eig = SymmetricEigen::new(m);
        ridge *= 100.0;
    }
    if finite(&eig) {
        Ok(eig)
    } else {
        Err(Error::NonFinite("covariance eigendecomposition".into()))
    }
}

/// Fit on raw rows (each of equal length `d`).
pub fn fit_rows<R: AsRef<[f64]>>(
    rows: &[R],
    d_t: usize,
    mode: WhiteningMode,
) -> Result<WhiteningTransform> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Insufficient(format!(
            "whitening needs at least 2 rows, got {n}"
        )));
    }
    let d = rows[0].as_ref().len();
    if d_t == 0 || d_t > d {
        return Err(Error::Config(format!(
            "target dimension {d_t} must be in 1..={d}"
        )));
    }
    if let Some(bad) = rows.iter().map(AsRef::as_ref).find(|r| r.len() != d) {
        return Err(Error::Dimension {
            context: "whitening input row".into(),
            expected: d,
            found: bad.len(),
        });
    }

    let mut mu = vec![0.0; d];
    for r in rows {
        for (m, &v) in mu.iter_mut().zip(r.as_ref()) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);

    // upper triangle accumulation, mirrored afterwards
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut c = vec![0.0; d];
    for r in rows {
        for ((ci, &v), &m) in c.iter_mut().zip(r.as_ref()).zip(&mu) {
            *ci = v - m;
        }
        for i in 0..d {
            let ci = c[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += ci * c[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance matrix".into()));
    }

    let eig = eigen(cov)?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let eig_floor = if top > 0.0 {
        RELATIVE_EIG_FLOOR * top
    } else {
        1.0
    };
    let inv_sqrt: Vec<f64> = order
        .iter()
        .map(|&k| 1.0 / eig.eigenvalues[k].max(eig_floor).sqrt())
        .collect();
    let v = |row: usize, k: usize| eig.eigenvectors[(row, order[k])];

    let mut w = vec![0.0; d * d_t];
    match mode {
        WhiteningMode::Literal => {
            // W_full[i][j] = Σ_k V[i][k]·D_k^(-1/2)·V[j][k], keep j < d_t
            for i in 0..d {
                for k in 0..d {
                    let a = v(i, k) * inv_sqrt[k];
                    if a == 0.0 {
                        continue;
                    }
                    for j in 0..d_t {
                        w[i * d_t + j] += a * v(j, k);
                    }
                }
            }
        }
        WhiteningMode::Pca => {
            for i in 0..d {
                for k in 0..d_t {
                    w[i * d_t + k] = v(i, k) * inv_sqrt[k];
                }
            }
        }
    }
    WhiteningTransform::from_parts(mu, w, d_t, eig_floor, mode)
}
