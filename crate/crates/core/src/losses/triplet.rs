use super::{finish, pairwise_distances, Averaging, BatchLabels, LossReport, MarginMode, Metric, PairGrads};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub(crate) fn check_rows(embeddings: &Matrix, labels: &BatchLabels) -> Result<()> {
    if embeddings.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} embeddings but {} labels",
            embeddings.rows(),
            labels.len()
        )));
    }
    Ok(())
}

/// For every anchor, the hinge on its farthest positive and nearest negative.
///
/// Ties in either selection go to the lowest row index. The gradient flows
/// only through the two selected distances.
pub fn batch_hard_loss(
    embeddings: &Matrix,
    labels: &BatchLabels,
    metric: Metric,
    mode: MarginMode,
    averaging: Averaging,
) -> Result<LossReport> {
    check_rows(embeddings, labels)?;
    labels.require_pk()?;
    let y = labels.as_slice();
    let dist = pairwise_distances(embeddings, metric);
    let n = y.len();
    let mut grads = PairGrads::new(embeddings, metric);
    let mut terms = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            let d = dist.get(a, j);
            if y[j] == y[a] {
                if j != a && pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let ((p, dp), (q, dn)) = (pos.expect("K >= 2"), neg.expect("P >= 2"));
        let x = dp - dn;
        terms.push(mode.apply(x));
        let c = mode.derivative(x);
        grads.add(a, p, dp, c);
        grads.add(a, q, dn, -c);
    }
    Ok(finish(terms, grads, averaging))
}

/// Hinge over every valid (anchor, positive, negative) triplet in the batch.
///
/// Terms are ordered by anchor, then positive, then negative row index.
pub fn batch_all_loss(
    embeddings: &Matrix,
    labels: &BatchLabels,
    metric: Metric,
    mode: MarginMode,
    averaging: Averaging,
) -> Result<LossReport> {
    check_rows(embeddings, labels)?;
    let (p, k) = labels.require_pk()?;
    let y = labels.as_slice();
    let dist = pairwise_distances(embeddings, metric);
    let n = y.len();
    let mut grads = PairGrads::new(embeddings, metric);
    let mut terms = Vec::with_capacity(n * (k - 1) * (n - k));
    debug_assert_eq!(n, p * k);
    for a in 0..n {
        for pos in (0..n).filter(|&j| j != a && y[j] == y[a]) {
            let dp = dist.get(a, pos);
            for neg in (0..n).filter(|&j| y[j] != y[a]) {
                let dn = dist.get(a, neg);
                let x = dp - dn;
                terms.push(mode.apply(x));
                let c = mode.derivative(x);
                grads.add(a, pos, dp, c);
                grads.add(a, neg, dn, -c);
            }
        }
    }
    Ok(finish(terms, grads, averaging))
}

/// Mean hinge over stacked triplets: rows `3t, 3t+1, 3t+2` are anchor,
/// positive and negative of triplet `t`.
pub fn classic_triplet_loss(
    embeddings: &Matrix,
    metric: Metric,
    mode: MarginMode,
) -> Result<LossReport> {
    let rows = embeddings.rows();
    if rows == 0 || !rows.is_multiple_of(3) {
        return Err(Error::contract(format!(
            "classic triplet batches need a positive multiple of 3 rows, got {rows}"
        )));
    }
    let mut grads = PairGrads::new(embeddings, metric);
    let mut terms = Vec::with_capacity(rows / 3);
    for t in 0..rows / 3 {
        let (a, p, n) = (3 * t, 3 * t + 1, 3 * t + 2);
        let dp = metric.between(embeddings.row(a), embeddings.row(p));
        let dn = metric.between(embeddings.row(a), embeddings.row(n));
        let x = dp - dn;
        terms.push(mode.apply(x));
        let c = mode.derivative(x);
        grads.add(a, p, dp, c);
        grads.add(a, n, dn, -c);
    }
    Ok(finish(terms, grads, Averaging::All))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Matrix, BatchLabels) {
        let e = Matrix::from_rows(&[[0.0], [1.0], [1.5], [2.5]]).unwrap();
        (e, BatchLabels::new(vec![0, 0, 1, 1]))
    }

    #[test]
    fn batch_hard_separated_is_zero() {
        let e = Matrix::from_rows(&[[0.0], [1.0], [10.0], [11.0]]).unwrap();
        let l = BatchLabels::new(vec![0, 0, 1, 1]);
        let r = batch_hard_loss(&e, &l, Metric::Euclidean, MarginMode::Hard(0.2), Averaging::All)
            .unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.num_active, 0);
        assert!(r.grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_hard_toy() {
        let (e, l) = toy();
        let r = batch_hard_loss(&e, &l, Metric::Euclidean, MarginMode::Hard(0.2), Averaging::All)
            .unwrap();
        assert!((r.loss - 0.35).abs() < 1e-12);
        let expected = [0.0, 0.7, 0.7, 0.0];
        for (t, e) in r.per_term.iter().zip(expected) {
            assert!((t - e).abs() < 1e-12);
        }
        assert_eq!(r.num_terms, 4);
        assert_eq!(r.num_active, 2);
    }

    #[test]
    fn batch_all_toy() {
        let (e, l) = toy();
        let all = batch_all_loss(&e, &l, Metric::Euclidean, MarginMode::Hard(0.2), Averaging::All)
            .unwrap();
        assert_eq!(all.num_terms, 8);
        assert!((all.loss - 0.175).abs() < 1e-12);
        let nnz =
            batch_all_loss(&e, &l, Metric::Euclidean, MarginMode::Hard(0.2), Averaging::Nonzero)
                .unwrap();
        assert_eq!(nnz.num_active, 2);
        assert!((nnz.loss - 0.7).abs() < 1e-12);
    }

    #[test]
    fn nonzero_with_nothing_active_is_zero() {
        let e = Matrix::from_rows(&[[0.0], [1.0], [10.0], [11.0]]).unwrap();
        let l = BatchLabels::new(vec![0, 0, 1, 1]);
        let r =
            batch_all_loss(&e, &l, Metric::Euclidean, MarginMode::Hard(0.2), Averaging::Nonzero)
                .unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn pk_violations_are_contract_errors() {
        let e = Matrix::zeros(3, 2);
        let single = BatchLabels::new(vec![0, 1, 2]);
        let one_id = BatchLabels::new(vec![4, 4, 4]);
        for l in [single, one_id] {
            for r in [
                batch_hard_loss(&e, &l, Metric::Euclidean, MarginMode::Soft, Averaging::All),
                batch_all_loss(&e, &l, Metric::Euclidean, MarginMode::Soft, Averaging::All),
            ] {
                assert!(matches!(r, Err(Error::Contract(_))));
            }
        }
        let mismatched = BatchLabels::new(vec![0, 0, 1, 1]);
        assert!(matches!(
            batch_hard_loss(&e, &mismatched, Metric::Euclidean, MarginMode::Soft, Averaging::All),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn classic_examples() {
        // D(a,p) = 0.5, D(a,n) = 1.0
        let e = Matrix::from_rows(&[[0.0], [0.5], [1.0]]).unwrap();
        let r = classic_triplet_loss(&e, Metric::Euclidean, MarginMode::Hard(0.2)).unwrap();
        assert_eq!(r.loss, 0.0);
        // D(a,p) = 1.0, D(a,n) = 0.5
        let e = Matrix::from_rows(&[[0.0], [1.0], [-0.5]]).unwrap();
        let r = classic_triplet_loss(&e, Metric::Euclidean, MarginMode::Hard(0.2)).unwrap();
        assert!((r.loss - 0.7).abs() < 1e-12);
        assert!(matches!(
            classic_triplet_loss(&Matrix::zeros(4, 1), Metric::Euclidean, MarginMode::Soft),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn classic_on_materialized_triplets_equals_batch_all() {
        let (e, l) = toy();
        let y = l.as_slice();
        let mut rows = Vec::new();
        for a in 0..4 {
            for p in (0..4).filter(|&p| p != a && y[p] == y[a]) {
                for n in (0..4).filter(|&n| y[n] != y[a]) {
                    rows.extend([a, p, n]);
                }
            }
        }
        let stacked = e.select_rows(&rows);
        for mode in [MarginMode::Hard(0.2), MarginMode::Soft] {
            let c = classic_triplet_loss(&stacked, Metric::Euclidean, mode).unwrap();
            let b = batch_all_loss(&e, &l, Metric::Euclidean, mode, Averaging::All).unwrap();
            assert!((c.loss - b.loss).abs() < 1e-12);
        }
    }
}
