//! Diagonal-covariance Gaussian mixtures fitted by EM.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DetectorError;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub components: usize,
    pub max_iter: usize,
    /// Stop once the mean log-likelihood gains less than this.
    pub tol: f64,
    pub variance_floor: f64,
    /// Frame subsampling when fitting on log-mel frames.
    pub frame_stride: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            components: 8,
            max_iter: 200,
            tol: 1e-6,
            variance_floor: 1e-6,
            frame_stride: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
}

/// Per-iteration record of an EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean per-sample log-likelihood before each M-step.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
    pub floored: bool,
}

impl GmmModel {
    pub fn from_parts(
        weights: Array1<f64>,
        means: Array2<f64>,
        variances: Array2<f64>,
    ) -> Result<Self, DetectorError> {
        let k = weights.len();
        if k == 0 || means.nrows() != k || variances.dim() != means.dim() {
            return Err(DetectorError::Invalid(format!(
                "GMM parts disagree: {} weights, means {:?}, variances {:?}",
                k,
                means.dim(),
                variances.dim()
            )));
        }
        if (weights.sum() - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
            return Err(DetectorError::Invalid(
                "GMM weights are not on the simplex".into(),
            ));
        }
        if variances.iter().any(|&v| !(v > 0.0)) {
            return Err(DetectorError::Invalid(
                "GMM variances must be positive".into(),
            ));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.means.view()
    }

    pub fn variances(&self) -> ArrayView2<'_, f64> {
        self.variances.view()
    }

    /// `N x K` matrix of `ln w_k + ln N(x | mu_k, diag var_k)`.
    fn joint_log_density(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let k = self.components();
        let d = self.dim() as f64;
        let inv_var = self.variances.mapv(|v| 1.0 / v);
        let consts: Vec<f64> = (0..k)
            .map(|c| {
                self.weights[c].max(f64::MIN_POSITIVE).ln()
                    - 0.5 * (d * LN_2PI + self.variances.row(c).mapv(f64::ln).sum())
            })
            .collect();
        // sum_d (x - mu)^2 / var = x^2 . iv - 2 x . (mu iv) + mu^2 . iv
        let x2 = x.mapv(|v| v * v);
        let mu_iv = &self.means * &inv_var;
        let mu2_iv: Array1<f64> = (&self.means * &mu_iv).sum_axis(Axis(1));
        let mut quad = x2.dot(&inv_var.t());
        quad.scaled_add(-2.0, &x.dot(&mu_iv.t()));
        let mut out = quad;
        for mut row in out.rows_mut() {
            for c in 0..k {
                let q = (row[c] + mu2_iv[c]).max(0.0);
                row[c] = consts[c] - 0.5 * q;
            }
        }
        out
    }

    /// Log-likelihood of each row.
    pub fn log_likelihood(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>, DetectorError> {
        if x.ncols() != self.dim() {
            return Err(DetectorError::Dimension(format!(
                "GMM of dim {} scored on {} columns",
                self.dim(),
                x.ncols()
            )));
        }
        let joint = self.joint_log_density(x);
        Ok(joint.rows().into_iter().map(logsumexp).collect())
    }

    /// Mean per-frame negative log-likelihood of a clip.
    pub fn score(&self, frames: ArrayView2<'_, f64>) -> Result<f64, DetectorError> {
        if frames.nrows() == 0 {
            return Err(DetectorError::Invalid("no frames to score".into()));
        }
        Ok(-self.log_likelihood(frames)?.mean().expect("non-empty"))
    }
}

fn logsumexp(row: ArrayView1<'_, f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// k-means++ seeding: the first center uniformly, the rest proportional to
/// squared distance from the nearest chosen center.
fn kmeans_pp(x: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let sq = |a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>| {
        a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>()
    };
    let mut nearest: Vec<f64> = x.rows().into_iter().map(|r| sq(r, x.row(first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq(r, x.row(pick)));
        }
    }
    centers
}

/// Fits a `K`-component diagonal GMM by EM.
pub fn gmm_fit(
    x: ArrayView2<'_, f64>,
    config: &GmmConfig,
    seed: u64,
) -> Result<GmmFit, DetectorError> {
    let (n, d) = x.dim();
    let k = config.components;
    if k == 0 {
        return Err(DetectorError::Invalid(
            "GMM needs at least one component".into(),
        ));
    }
    if n < k {
        return Err(DetectorError::InsufficientData(format!(
            "{n} samples for a {k}-component GMM"
        )));
    }
    if d == 0 || x.iter().any(|v| !v.is_finite()) {
        return Err(DetectorError::Invalid(
            "GMM data must be finite and non-empty".into(),
        ));
    }
    let floor = config.variance_floor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let global_var = x.var_axis(Axis(0), 0.0).mapv(|v| v.max(floor));
    let mut floored = global_var.iter().any(|&v| v == floor);
    let mut model = GmmModel {
        weights: Array1::from_elem(k, 1.0 / k as f64),
        means: kmeans_pp(x, k, &mut rng),
        variances: Array2::from_shape_fn((k, d), |(_, j)| global_var[j]),
    };

    let mut log_likelihoods = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iter {
        // E-step
        let mut resp = model.joint_log_density(x);
        let mut total = 0.0;
        for mut row in resp.rows_mut() {
            let lse = logsumexp(row.view());
            total += lse;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let ll = total / n as f64;
        if let Some(&prev) = log_likelihoods.last() {
            if ll - prev < config.tol {
                log_likelihoods.push(ll);
                converged = true;
                break;
            }
        }
        log_likelihoods.push(ll);

        // M-step
        let nk = resp.sum_axis(Axis(0));
        let sum_x = resp.t().dot(&x);
        let sum_x2 = resp.t().dot(&x.mapv(|v| v * v));
        let mut weights = nk.mapv(|v| v / n as f64);
        weights /= weights.sum();
        for c in 0..k {
            if nk[c] < 1e-10 {
                // An empty component keeps its parameters; its weight is ~0.
                continue;
            }
            let mean = sum_x.row(c).mapv(|v| v / nk[c]);
            for j in 0..d {
                let var = sum_x2[[c, j]] / nk[c] - mean[j] * mean[j];
                let var = if var < floor {
                    floored = true;
                    floor
                } else {
                    var
                };
                model.variances[[c, j]] = var;
            }
            model.means.row_mut(c).assign(&mean);
        }
        model.weights = weights;
    }
    if floored {
        log::warn!("GMM fit: variance floor {floor} applied to a degenerate component");
    }
    Ok(GmmFit {
        model,
        log_likelihoods,
        converged,
        floored,
    })
}
