//! Class-conditional Gaussian latent priors.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to every fitted covariance, relative to its mean diagonal.
pub const RIDGE_SCALE: f64 = 1e-4;
/// Smallest ridge ever applied, so a zero-scatter class still gets an SPD matrix.
pub const RIDGE_FLOOR: f64 = 1e-8;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::param("cholesky needs a square matrix"));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for p in 0..j {
                s -= l[[i, p]] * l[[j, p]];
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::numeric(format!(
                        "matrix not positive definite (pivot {i} = {s:e})"
                    )));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve `L y = b` for lower-triangular `L`.
fn forward_solve(l: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= l[[i, p]] * y[p];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

fn inverse_from_cholesky(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    // columns of L^{-1}, then Sigma^{-1} = L^{-T} L^{-1}
    let mut linv = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        for (i, v) in forward_solve(l, &e).into_iter().enumerate() {
            linv[[i, j]] = v;
        }
    }
    linv.t().dot(&linv)
}

#[derive(Serialize, Deserialize)]
struct PriorRepr {
    mean: Vec<f64>,
    covariance: Array2<f64>,
    epsilon: f64,
}

/// `N(mu_c, Sigma_c)` with cached Cholesky factor, precision and log-determinant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PriorRepr", into = "PriorRepr")]
pub struct ClassPrior {
    mean: Array1<f64>,
    covariance: Array2<f64>,
    epsilon: f64,
    chol: Array2<f64>,
    precision: Array2<f64>,
    log_det: f64,
}

impl TryFrom<PriorRepr> for ClassPrior {
    type Error = Error;
    fn try_from(r: PriorRepr) -> Result<Self> {
        ClassPrior::new(r.mean, r.covariance, r.epsilon)
    }
}

impl From<ClassPrior> for PriorRepr {
    fn from(p: ClassPrior) -> Self {
        PriorRepr {
            mean: p.mean.to_vec(),
            covariance: p.covariance,
            epsilon: p.epsilon,
        }
    }
}

impl ClassPrior {
    /// `covariance` is taken as already regularized; it must be symmetric and SPD.
    pub fn new(mean: Vec<f64>, covariance: Array2<f64>, epsilon: f64) -> Result<Self> {
        let k = mean.len();
        if covariance.dim() != (k, k) {
            return Err(Error::param(format!(
                "covariance must be {k}x{k}, got {:?}",
                covariance.dim()
            )));
        }
        for i in 0..k {
            for j in 0..i {
                let (a, b) = (covariance[[i, j]], covariance[[j, i]]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::numeric("covariance is not symmetric"));
                }
            }
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("prior has non-finite entries"));
        }
        let chol = cholesky(&covariance)?;
        let precision = inverse_from_cholesky(&chol);
        let log_det = 2.0 * chol.diag().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean: Array1::from_vec(mean),
            covariance,
            epsilon,
            chol,
            precision,
            log_det,
        })
    }

    pub fn standard_normal(k: usize) -> Self {
        Self::new(vec![0.0; k], Array2::eye(k), 0.0).expect("identity is SPD")
    }

    /// Regularize a raw (possibly singular) covariance and build the prior.
    pub fn from_moments(mean: Vec<f64>, raw_covariance: Array2<f64>) -> Result<Self> {
        let k = mean.len();
        let mut cov = raw_covariance;
        // symmetrize against accumulated rounding
        let sym = (&cov + &cov.t()) * 0.5;
        cov.assign(&sym);
        let mean_diag = if k == 0 { 0.0 } else { cov.diag().sum() / k as f64 };
        let eps = (RIDGE_SCALE * mean_diag).max(RIDGE_FLOOR);
        for i in 0..k {
            cov[[i, i]] += eps;
        }
        Self::new(mean, cov, eps)
    }

    /// Empirical mean and ridged covariance of the rows of `latents`.
    pub fn fit(latents: ArrayView2<f64>) -> Result<Self> {
        let n = latents.nrows();
        if n == 0 {
            return Err(Error::param("cannot fit a prior to zero latents"));
        }
        let mean = latents.mean_axis(ndarray::Axis(0)).expect("nonempty");
        let centered = &latents - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        Self::from_moments(mean.to_vec(), cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &Array2<f64> {
        &self.covariance
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn precision(&self) -> &Array2<f64> {
        &self.precision
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `(z - mu)^T Sigma^{-1} (z - mu)` via the Cholesky factor.
    pub fn mahalanobis_sq(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::param(format!(
                "latent has {} dims, prior has {}",
                z.len(),
                self.dim()
            )));
        }
        let d: Vec<f64> = z.iter().zip(self.mean.iter()).map(|(a, b)| a - b).collect();
        Ok(forward_solve(&self.chol, &d).iter().map(|v| v * v).sum())
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let k = self.dim() as f64;
        Ok(-0.5 * (k * (2.0 * std::f64::consts::PI).ln() + self.log_det + self.mahalanobis_sq(z)?))
    }
}
