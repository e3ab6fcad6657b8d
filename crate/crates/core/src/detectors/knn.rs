//! k-nearest-neighbour inlier model with one bank of normal vectors per
//! domain.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::DetectorError;
use crate::corpus::Domain;

/// Candidates re-ranked with exact distances beyond `k`, to absorb the
/// rounding of the dot-product expansion.
const RERANK_SLACK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
    /// Keep every n-th training frame in the bank.
    pub frame_stride: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 1,
            frame_stride: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnBank {
    k: usize,
    banks: BTreeMap<Domain, Array2<f64>>,
}

impl KnnBank {
    pub fn new(k: usize, banks: BTreeMap<Domain, Array2<f64>>) -> Result<Self, DetectorError> {
        if k == 0 {
            return Err(DetectorError::Invalid("k must be >= 1".into()));
        }
        if banks.is_empty() || banks.values().all(|b| b.nrows() == 0) {
            return Err(DetectorError::InsufficientData("kNN bank is empty".into()));
        }
        let dim = banks.values().next().map(|b| b.ncols()).unwrap_or(0);
        for (domain, bank) in &banks {
            if bank.nrows() < k {
                return Err(DetectorError::InsufficientData(format!(
                    "{domain} bank holds {} vectors, fewer than k = {k}",
                    bank.nrows()
                )));
            }
            if bank.ncols() != dim {
                return Err(DetectorError::Dimension("banks differ in dimension".into()));
            }
        }
        Ok(Self { k, banks })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bank(&self, domain: Domain) -> Option<&Array2<f64>> {
        self.banks.get(&domain)
    }

    pub fn banks(&self) -> &BTreeMap<Domain, Array2<f64>> {
        &self.banks
    }

    /// Score against the hinted domain's bank; without a hint (or when that
    /// domain has no bank) the minimum over banks.
    pub fn score(
        &self,
        query: ArrayView2<'_, f64>,
        hint: Option<Domain>,
    ) -> Result<f64, DetectorError> {
        if let Some(bank) = hint.and_then(|d| self.banks.get(&d)) {
            return mean_knn_distance(bank.view(), query, self.k);
        }
        let mut best = f64::INFINITY;
        for bank in self.banks.values() {
            best = best.min(mean_knn_distance(bank.view(), query, self.k)?);
        }
        Ok(best)
    }
}

/// Mean over query rows of the mean Euclidean distance to the `k` nearest
/// bank rows.
pub fn mean_knn_distance(
    bank: ArrayView2<'_, f64>,
    query: ArrayView2<'_, f64>,
    k: usize,
) -> Result<f64, DetectorError> {
    if bank.ncols() != query.ncols() {
        return Err(DetectorError::Dimension(format!(
            "bank dim {} vs query dim {}",
            bank.ncols(),
            query.ncols()
        )));
    }
    if k == 0 || bank.nrows() < k {
        return Err(DetectorError::InsufficientData(format!(
            "k = {k} with {} bank vectors",
            bank.nrows()
        )));
    }
    if query.nrows() == 0 {
        return Err(DetectorError::Invalid("no query vectors".into()));
    }
    let bank_sq: Array1<f64> = bank.map_axis(Axis(1), |r| r.dot(&r));
    let cross = query.dot(&bank.t());
    let take = (k + RERANK_SLACK).min(bank.nrows());
    let mut order: Vec<usize> = (0..bank.nrows()).collect();
    let mut total = 0.0;
    for (qi, q) in query.rows().into_iter().enumerate() {
        let q_sq = q.dot(&q);
        let approx = |j: usize| q_sq + bank_sq[j] - 2.0 * cross[[qi, j]];
        if take < order.len() {
            order.select_nth_unstable_by(take - 1, |&a, &b| approx(a).total_cmp(&approx(b)));
        }
        let mut exact: Vec<f64> = order[..take]
            .iter()
            .map(|&j| {
                q.iter()
                    .zip(bank.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        exact.sort_by(f64::total_cmp);
        total += exact[..k].iter().sum::<f64>() / k as f64;
    }
    Ok(total / query.nrows() as f64)
}
