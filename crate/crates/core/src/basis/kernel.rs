use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BasisSpec, Standardizer};
use crate::error::Result;

/// Gaussian-kernel Nyström features `k(x, C) K_CC^{-1/2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelState {
    pub standardizer: Standardizer,
    /// Centers in standardized coordinates, one per row.
    pub centers: Vec<Vec<f64>>,
    pub bandwidth: f64,
    /// `M × r` whitening map onto the numerically nonzero eigenspace of K_CC.
    pub whitening: DMatrix<f64>,
}

impl KernelState {
    pub(super) fn fit(
        spec: &BasisSpec,
        x: &DMatrix<f64>,
        names: &[String],
        seed: u64,
        warnings: &mut Vec<String>,
    ) -> Result<Self> {
        let standardizer = if spec.standardize {
            Standardizer::fit(x, names)?
        } else {
            Standardizer::identity(x.ncols())
        };
        let s = standardizer.apply(x);
        let n = s.nrows();
        let m = if spec.n_centers > n {
            warnings.push(format!(
                "kernel basis: n_centers {} exceeds {n} rows, clipped to {n}",
                spec.n_centers
            ));
            n
        } else {
            spec.n_centers
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        let centers: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| s.row(i).iter().cloned().collect())
            .collect();
        let bandwidth = spec
            .bandwidth
            .unwrap_or_else(|| median_pairwise_distance(&centers));
        let mut state = KernelState {
            standardizer,
            centers,
            bandwidth,
            whitening: DMatrix::zeros(0, 0),
        };
        let cm = state.centers_matrix();
        let kcc = state.raw_kernel(&cm);
        let eig = kcc.symmetric_eigen();
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let keep: Vec<usize> = (0..m)
            .filter(|&k| eig.eigenvalues[k] > 1e-10 * lmax)
            .collect();
        let mut whitening = DMatrix::zeros(m, keep.len());
        for (col, &k) in keep.iter().enumerate() {
            let scale = eig.eigenvalues[k].sqrt();
            whitening
                .column_mut(col)
                .copy_from(&(eig.eigenvectors.column(k) / scale));
        }
        state.whitening = whitening;
        Ok(state)
    }

    pub(super) fn n_features(&self) -> usize {
        self.whitening.ncols()
    }

    pub fn centers_matrix(&self) -> DMatrix<f64> {
        let d = self.standardizer.means.len();
        DMatrix::from_fn(self.centers.len(), d, |i, j| self.centers[i][j])
    }

    /// Unwhitened kernel evaluations `k(x_i, c_m)` for standardized inputs.
    pub fn raw_kernel(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let denom = 2.0 * self.bandwidth * self.bandwidth;
        DMatrix::from_fn(s.nrows(), self.centers.len(), |i, m| {
            let d2: f64 = self.centers[m]
                .iter()
                .enumerate()
                .map(|(j, c)| (s[(i, j)] - c).powi(2))
                .sum();
            (-d2 / denom).exp()
        })
    }

    pub(super) fn features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.raw_kernel(&self.standardizer.apply(x)) * &self.whitening
    }
}

fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            let dist: f64 = points[a]
                .iter()
                .zip(&points[b])
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
            d.push(dist);
        }
    }
    d.retain(|&v| v > 0.0);
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    if d.len() % 2 == 0 {
        0.5 * (d[mid - 1] + d[mid])
    } else {
        d[mid]
    }
}
