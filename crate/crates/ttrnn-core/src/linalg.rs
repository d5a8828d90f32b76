//! Dense thin SVD via one-sided Jacobi rotations.
//!
//! Deterministic and accurate to near machine precision for the modest matrix
//! sizes the TT-SVD sweeps produce; no external linear-algebra dependency.

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub struct Svd {
    /// Left singular vectors, shape [m, r] with r = min(m, n).
    pub u: DenseTensor,
    /// Singular values, descending.
    pub s: Vec<f64>,
    /// Right singular vectors transposed, shape [r, n].
    pub vt: DenseTensor,
}

const MAX_SWEEPS: usize = 100;

/// Thin SVD of a 2-D tensor.
pub fn svd(a: &DenseTensor) -> Result<Svd> {
    if a.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "svd needs a matrix, got shape {:?}",
            a.shape()
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    if m >= n {
        svd_tall(a)
    } else {
        // A = (A^T)^T = (U' S V'^T)^T = V' S U'^T
        let t = a.transpose2()?;
        let f = svd_tall(&t)?;
        Ok(Svd {
            u: f.vt.transpose2()?,
            s: f.s,
            vt: f.u.transpose2()?,
        })
    }
}

/// One-sided Jacobi on the columns of a tall (m >= n) matrix.
fn svd_tall(a: &DenseTensor) -> Result<Svd> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    // column-major working copies keep the rotations contiguous
    let mut b = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            b[j * m + i] = a.data()[i * n + j];
        }
    }
    let mut v = vec![0.0f64; n * n];
    for j in 0..n {
        v[j * n + j] = 1.0;
    }

    let eps = f64::EPSILON;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let bp = b[p * m + i];
                    let bq = b[q * m + i];
                    alpha += bp * bp;
                    beta += bq * bq;
                    gamma += bp * bq;
                }
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b[p * m + i];
                    let bq = b[q * m + i];
                    b[p * m + i] = c * bp - s * bq;
                    b[q * m + i] = s * bp + c * bq;
                }
                for i in 0..n {
                    let vp = v[p * n + i];
                    let vq = v[q * n + i];
                    v[p * n + i] = c * vp - s * vq;
                    v[q * n + i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // singular values and column ordering (descending, stable)
    let mut norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| b[j * m + i] * b[j * m + i]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));
    norms = order.iter().map(|&j| norms[j]).collect();

    let mut u = DenseTensor::zeros(vec![m, n]);
    let mut vt = DenseTensor::zeros(vec![n, n]);
    for (col, &j) in order.iter().enumerate() {
        let sigma = norms[col];
        if sigma > 0.0 {
            for i in 0..m {
                u.data_mut()[i * n + col] = b[j * m + i] / sigma;
            }
        }
        for i in 0..n {
            vt.data_mut()[col * n + i] = v[j * n + i];
        }
    }
    Ok(Svd { u, s: norms, vt })
}
