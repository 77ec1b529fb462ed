use super::triplet::check_rows;
use super::{finish, pairwise_distances, Averaging, BatchLabels, LossReport, MarginMode, Metric, PairGrads};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Stable `ln Σ eᶻ` together with the softmax weights of `z`.
fn log_sum_exp(z: &[f64]) -> (f64, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Lifted embedding loss over explicit positive pairs.
///
/// For each pair `(a, p)` the term is
/// `outer(D(a,p) + ln Σₙ (e^{m − D(a,n)} + e^{m − D(p,n)}))`, where `n` runs
/// over every other row of the batch. `outer` is a zero-margin hinge in hard
/// mode and softplus in soft mode; the margin `m` only enters the exponent.
pub fn lifted_loss(
    embeddings: &Matrix,
    labels: &BatchLabels,
    pairs: &[(usize, usize)],
    metric: Metric,
    m: f64,
    mode: MarginMode,
) -> Result<LossReport> {
    check_rows(embeddings, labels)?;
    let n = embeddings.rows();
    if n < 3 {
        return Err(Error::contract("lifted loss needs at least one negative row"));
    }
    if pairs.is_empty() {
        return Err(Error::contract("lifted loss needs at least one positive pair"));
    }
    let y = labels.as_slice();
    for &(a, p) in pairs {
        if a >= n || p >= n || a == p || y[a] != y[p] {
            return Err(Error::contract(format!(
                "pair ({a}, {p}) is not two distinct rows of the same identity"
            )));
        }
    }
    let outer = mode.outer();
    let dist = pairwise_distances(embeddings, metric);
    let mut grads = PairGrads::new(embeddings, metric);
    let mut terms = Vec::with_capacity(pairs.len());
    for &(a, p) in pairs {
        let negs: Vec<usize> = (0..n).filter(|&k| k != a && k != p).collect();
        let mut z = Vec::with_capacity(2 * negs.len());
        z.extend(negs.iter().map(|&k| m - dist.get(a, k)));
        z.extend(negs.iter().map(|&k| m - dist.get(p, k)));
        let (lse, w) = log_sum_exp(&z);
        let dap = dist.get(a, p);
        let x = dap + lse;
        terms.push(outer.apply(x));
        let c = outer.derivative(x);
        if c == 0.0 {
            continue;
        }
        grads.add(a, p, dap, c);
        for (i, &k) in negs.iter().enumerate() {
            grads.add(a, k, dist.get(a, k), -c * w[i]);
            grads.add(p, k, dist.get(p, k), -c * w[negs.len() + i]);
        }
    }
    Ok(finish(terms, grads, Averaging::All))
}

/// Generalized lifted loss on a PK batch.
///
/// Per anchor: `outer(ln Σₚ e^{D(a,p)} + ln Σₙ e^{m − D(a,n)})` over all of
/// the anchor's positives and negatives, averaged over anchors.
pub fn lifted_generalized_loss(
    embeddings: &Matrix,
    labels: &BatchLabels,
    metric: Metric,
    m: f64,
    mode: MarginMode,
) -> Result<LossReport> {
    check_rows(embeddings, labels)?;
    labels.require_pk()?;
    let y = labels.as_slice();
    let n = y.len();
    let outer = mode.outer();
    let dist = pairwise_distances(embeddings, metric);
    let mut grads = PairGrads::new(embeddings, metric);
    let mut terms = Vec::with_capacity(n);
    for a in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != a && y[j] == y[a]).collect();
        let neg: Vec<usize> = (0..n).filter(|&j| y[j] != y[a]).collect();
        let zp: Vec<f64> = pos.iter().map(|&j| dist.get(a, j)).collect();
        let zn: Vec<f64> = neg.iter().map(|&j| m - dist.get(a, j)).collect();
        let (lp, wp) = log_sum_exp(&zp);
        let (ln, wn) = log_sum_exp(&zn);
        let x = lp + ln;
        terms.push(outer.apply(x));
        let c = outer.derivative(x);
        if c == 0.0 {
            continue;
        }
        for (&j, w) in pos.iter().zip(wp) {
            grads.add(a, j, dist.get(a, j), c * w);
        }
        for (&j, w) in neg.iter().zip(wn) {
            grads.add(a, j, dist.get(a, j), -c * w);
        }
    }
    Ok(finish(terms, grads, Averaging::All))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_is_stable() {
        let (v, w) = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-9);
        assert_eq!(w, vec![0.5, 0.5]);
        let (v, _) = log_sum_exp(&[-1000.0]);
        assert_eq!(v, -1000.0);
    }

    #[test]
    fn lifted_symmetric_plug_in() {
        // a = p at the origin, two negatives at distance exactly m = 1
        let e = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, -1.0]]).unwrap();
        let l = BatchLabels::new(vec![0, 0, 1, 2]);
        let r = lifted_loss(&e, &l, &[(0, 1)], Metric::Euclidean, 1.0, MarginMode::Hard(1.0))
            .unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-9, "{}", r.loss);
    }

    #[test]
    fn lifted_far_negatives_hinge_to_zero() {
        let e = Matrix::from_rows(&[[0.0], [0.0], [50.0], [-60.0]]).unwrap();
        let l = BatchLabels::new(vec![0, 0, 1, 2]);
        let r = lifted_loss(&e, &l, &[(0, 1)], Metric::Euclidean, 0.5, MarginMode::Hard(0.5))
            .unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn lifted_rejects_bad_input() {
        let e = Matrix::zeros(2, 1);
        let l = BatchLabels::new(vec![0, 0]);
        assert!(matches!(
            lifted_loss(&e, &l, &[(0, 1)], Metric::Euclidean, 1.0, MarginMode::Soft),
            Err(Error::Contract(_))
        ));
        let e = Matrix::zeros(3, 1);
        let l = BatchLabels::new(vec![0, 1, 1]);
        assert!(matches!(
            lifted_loss(&e, &l, &[(0, 1)], Metric::Euclidean, 1.0, MarginMode::Soft),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn lifted_gen_collapse() {
        let e = Matrix::from_rows(&[[0.3, 0.1]; 4]).unwrap();
        let l = BatchLabels::new(vec![0, 0, 1, 1]);
        let r = lifted_generalized_loss(&e, &l, Metric::Euclidean, 0.0, MarginMode::Hard(0.0))
            .unwrap();
        // coincident rows sit at the 1e-12 distance floor
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn lifted_gen_single_positive_is_plain_distance() {
        let e = Matrix::from_rows(&[[0.0], [0.7], [3.0], [4.5]]).unwrap();
        let l = BatchLabels::new(vec![0, 0, 1, 1]);
        let r = lifted_generalized_loss(&e, &l, Metric::Euclidean, 1.0, MarginMode::Soft).unwrap();
        // anchor 0: ln e^{0.7} + ln(e^{1-3} + e^{1-4.5})
        let x: f64 = 0.7 + ((-2.0f64).exp() + (-3.5f64).exp()).ln();
        assert!((r.per_term[0] - super::super::softplus(x)).abs() < 1e-12);
    }
}
