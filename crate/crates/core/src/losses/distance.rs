use serde::{Deserialize, Serialize};

use crate::matrix::{squared_distance, Matrix};

/// Floor applied to squared distances before the square root.
pub const SQ_DIST_FLOOR: f64 = 1e-24;
/// Floor applied to the euclidean distance in the gradient denominator.
pub const DIST_GRAD_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl Metric {
    /// Distance between two distinct rows.
    #[inline]
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        let sq = squared_distance(a, b);
        match self {
            Metric::Euclidean => sq.max(SQ_DIST_FLOOR).sqrt(),
            Metric::SquaredEuclidean => sq,
        }
    }

    /// Adds `coef · ∂D(a, b)/∂a` to `grad_a` and its negation to `grad_b`.
    #[inline]
    pub(crate) fn accumulate_grad(
        self,
        a: &[f64],
        b: &[f64],
        dist: f64,
        coef: f64,
        grad_a: &mut [f64],
        grad_b: &mut [f64],
    ) {
        let scale = match self {
            Metric::Euclidean => coef / dist.max(DIST_GRAD_FLOOR),
            Metric::SquaredEuclidean => 2.0 * coef,
        };
        for (((ga, gb), &x), &y) in grad_a.iter_mut().zip(grad_b.iter_mut()).zip(a).zip(b) {
            let g = scale * (x - y);
            *ga += g;
            *gb -= g;
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "squared" | "squared_euclidean" | "sqeuclidean" => Ok(Metric::SquaredEuclidean),
            other => Err(crate::Error::Parse(format!("unknown metric '{other}'"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Euclidean => "euclidean",
            Metric::SquaredEuclidean => "squared_euclidean",
        })
    }
}

/// Symmetric matrix of pairwise distances with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub values: Matrix,
    pub metric: Metric,
}

impl DistanceMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    /// Upper-triangle entries `i < j`, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                out.push(self.get(i, j));
            }
        }
        out
    }
}

pub fn pairwise_distances(embeddings: &Matrix, metric: Metric) -> DistanceMatrix {
    let n = embeddings.rows();
    let mut values = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = metric.between(embeddings.row(i), embeddings.row(j));
            values[(i, j)] = d;
            values[(j, i)] = d;
        }
    }
    DistanceMatrix { values, metric }
}
