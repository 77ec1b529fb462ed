//! Direct, unoptimized transcriptions of the loss and retrieval formulas plus
//! small helpers shared by the integration tests. Nothing here calls into the
//! library's loss or evaluation code.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use tripletkit::dataset::LabeledDataset;
use tripletkit::losses::{BatchLabels, Label, MarginMode, Metric};
use tripletkit::Matrix;

pub const ACTIVE: f64 = 1e-5;

pub fn dist(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match metric {
        Metric::Euclidean => sq.sqrt(),
        Metric::SquaredEuclidean => sq,
    }
}

pub fn dmat(e: &Matrix, metric: Metric) -> Vec<Vec<f64>> {
    (0..e.rows())
        .map(|i| (0..e.rows()).map(|j| dist(e.row(i), e.row(j), metric)).collect())
        .collect()
}

pub fn hinge_or_soft(x: f64, mode: MarginMode) -> f64 {
    match mode {
        MarginMode::Hard(m) => (m + x).max(0.0),
        MarginMode::Soft => (1.0 + x.exp()).ln(),
    }
}

/// Zero-margin outer function of the lifted losses.
pub fn outer(x: f64, mode: MarginMode) -> f64 {
    match mode {
        MarginMode::Hard(_) => x.max(0.0),
        MarginMode::Soft => (1.0 + x.exp()).ln(),
    }
}

/// Every valid (anchor, positive, negative) index triple.
pub fn all_triplets(y: &[Label]) -> Vec<(usize, usize, usize)> {
    let n = y.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || y[p] != y[a] {
                continue;
            }
            for q in 0..n {
                if y[q] != y[a] {
                    out.push((a, p, q));
                }
            }
        }
    }
    out
}

/// Per anchor, the largest loss over all of its triplets, averaged.
pub fn batch_hard_oracle(e: &Matrix, y: &[Label], metric: Metric, mode: MarginMode, nonzero: bool) -> f64 {
    let d = dmat(e, metric);
    let n = y.len();
    let mut terms = vec![f64::NEG_INFINITY; n];
    for (a, p, q) in all_triplets(y) {
        terms[a] = terms[a].max(hinge_or_soft(d[a][p] - d[a][q], mode));
    }
    average(&terms, nonzero)
}

pub fn batch_all_oracle(e: &Matrix, y: &[Label], metric: Metric, mode: MarginMode, nonzero: bool) -> f64 {
    let d = dmat(e, metric);
    let terms: Vec<f64> = all_triplets(y)
        .into_iter()
        .map(|(a, p, q)| hinge_or_soft(d[a][p] - d[a][q], mode))
        .collect();
    average(&terms, nonzero)
}

pub fn average(terms: &[f64], nonzero: bool) -> f64 {
    let count = if nonzero {
        terms.iter().filter(|&&t| t > ACTIVE).count()
    } else {
        terms.len()
    };
    if count == 0 {
        0.0
    } else {
        terms.iter().sum::<f64>() / count as f64
    }
}

pub fn classic_oracle(e: &Matrix, metric: Metric, mode: MarginMode) -> f64 {
    let t = e.rows() / 3;
    (0..t)
        .map(|i| {
            let (a, p, n) = (e.row(3 * i), e.row(3 * i + 1), e.row(3 * i + 2));
            hinge_or_soft(dist(a, p, metric) - dist(a, n, metric), mode)
        })
        .sum::<f64>()
        / t as f64
}

pub fn lifted_oracle(e: &Matrix, pairs: &[(usize, usize)], metric: Metric, m: f64, mode: MarginMode) -> f64 {
    let d = dmat(e, metric);
    let n = e.rows();
    let mut total = 0.0;
    for &(a, p) in pairs {
        let mut s = 0.0;
        for k in 0..n {
            if k != a && k != p {
                s += (m - d[a][k]).exp() + (m - d[p][k]).exp();
            }
        }
        total += outer(d[a][p] + s.ln(), mode);
    }
    total / pairs.len() as f64
}

pub fn lifted_gen_oracle(e: &Matrix, y: &[Label], metric: Metric, m: f64, mode: MarginMode) -> f64 {
    let d = dmat(e, metric);
    let n = y.len();
    let mut total = 0.0;
    for a in 0..n {
        let mut sp = 0.0;
        let mut sn = 0.0;
        for j in 0..n {
            if j != a && y[j] == y[a] {
                sp += d[a][j].exp();
            } else if y[j] != y[a] {
                sn += (m - d[a][j]).exp();
            }
        }
        total += outer(sp.ln() + sn.ln(), mode);
    }
    total / n as f64
}

pub fn lmnn_oracle(e: &Matrix, y: &[Label], targets: &[usize], mu: f64, mode: MarginMode, metric: Metric) -> f64 {
    let d = dmat(e, metric);
    let n = y.len();
    let pull: f64 = (0..n).map(|i| d[i][targets[i]]).sum::<f64>() / n as f64;
    let mut push = Vec::new();
    for i in 0..n {
        for k in 0..n {
            if y[k] != y[i] {
                push.push(hinge_or_soft(d[i][targets[i]] - d[i][k], mode));
            }
        }
    }
    (1.0 - mu) * pull + mu * push.iter().sum::<f64>() / push.len() as f64
}

/// Average precision straight from its definition: mean over the relevant
/// positions of the precision of the prefix ending there.
pub fn ap_oracle(relevance: &[bool]) -> Option<f64> {
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut sum = 0.0;
    for (k, _) in relevance.iter().enumerate().filter(|(_, &r)| r) {
        let hits = relevance[..=k].iter().filter(|&&r| r).count();
        sum += hits as f64 / (k + 1) as f64;
    }
    Some(sum / total as f64)
}

/// 1 if a relevant item sits within the first `k` positions.
pub fn cmc_oracle(relevance: &[bool], k: usize) -> f64 {
    if relevance.iter().take(k).any(|&r| r) {
        1.0
    } else {
        0.0
    }
}

pub fn pk_labels(p: usize, k: usize) -> BatchLabels {
    BatchLabels::new((0..p * k).map(|i| (i / k) as Label).collect())
}

pub fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Same rows with identities shifted by `pid_offset` and item ids by `id_offset`.
pub fn relabel(set: &LabeledDataset, pid_offset: Label, id_offset: u64) -> LabeledDataset {
    LabeledDataset::new(
        set.features().clone(),
        set.pids().iter().map(|p| p + pid_offset).collect(),
        set.cams().to_vec(),
        set.item_ids().iter().map(|i| i + id_offset).collect(),
    )
    .unwrap()
}

/// Central finite-difference gradient of `f` with respect to every entry.
pub fn finite_difference<F: Fn(&Matrix) -> f64>(e: &Matrix, step: f64, f: F) -> Matrix {
    let mut g = Matrix::zeros(e.rows(), e.cols());
    let mut probe = e.clone();
    for i in 0..e.rows() {
        for j in 0..e.cols() {
            let x = e[(i, j)];
            probe.as_mut_slice()[i * e.cols() + j] = x + step;
            let up = f(&probe);
            probe.as_mut_slice()[i * e.cols() + j] = x - step;
            let down = f(&probe);
            probe.as_mut_slice()[i * e.cols() + j] = x;
            g.as_mut_slice()[i * e.cols() + j] = (up - down) / (2.0 * step);
        }
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the plain difference norm when both are tiny.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
