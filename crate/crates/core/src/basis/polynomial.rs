use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BasisSpec, Standardizer};
use crate::error::Result;

/// One expanded feature: a power of a single input or a pairwise product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monomial {
    Power { input: usize, power: u32 },
    Product { a: usize, b: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolynomialState {
    pub input: Standardizer,
    pub terms: Vec<Monomial>,
    /// Centering/scaling of the expanded features (identity when
    /// standardization is off).
    pub output: Standardizer,
}

impl PolynomialState {
    pub(super) fn fit(spec: &BasisSpec, x: &DMatrix<f64>, names: &[String]) -> Result<Self> {
        let input = if spec.standardize {
            Standardizer::fit(x, names)?
        } else {
            Standardizer::identity(x.ncols())
        };
        let mut terms = Vec::new();
        for j in 0..x.ncols() {
            // Columns with two distinct values gain nothing from higher powers.
            let max_power = if is_two_valued(x.column(j).iter()) {
                1
            } else {
                spec.degree as u32
            };
            terms.extend((1..=max_power).map(|power| Monomial::Power { input: j, power }));
        }
        if spec.interactions {
            for a in 0..x.ncols() {
                for b in a + 1..x.ncols() {
                    terms.push(Monomial::Product { a, b });
                }
            }
        }
        let mut state = PolynomialState {
            input,
            terms,
            output: Standardizer::identity(0),
        };
        state.output = Standardizer::identity(state.terms.len());
        if spec.standardize {
            let raw = state.features(x);
            let n = raw.nrows() as f64;
            let mut means = Vec::with_capacity(raw.ncols());
            let mut scales = Vec::with_capacity(raw.ncols());
            for col in raw.column_iter() {
                let m = col.sum() / n;
                let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                means.push(m);
                // Constant expanded features are only centered.
                scales.push(if sd > 1e-12 { sd } else { 1.0 });
            }
            state.output = Standardizer { means, scales };
        }
        Ok(state)
    }

    pub(super) fn n_features(&self) -> usize {
        self.terms.len()
    }

    pub(super) fn features(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.input.apply(x);
        DMatrix::from_fn(x.nrows(), self.terms.len(), |i, k| {
            let raw = match self.terms[k] {
                Monomial::Power { input, power } => s[(i, input)].powi(power as i32),
                Monomial::Product { a, b } => s[(i, a)] * s[(i, b)],
            };
            (raw - self.output.means[k]) / self.output.scales[k]
        })
    }
}

fn is_two_valued<'a>(mut values: impl Iterator<Item = &'a f64>) -> bool {
    let Some(&first) = values.next() else {
        return true;
    };
    let mut second = None;
    for &v in values {
        if v == first {
            continue;
        }
        match second {
            None => second = Some(v),
            Some(s) if s == v => {}
            Some(_) => return false,
        }
    }
    true
}
