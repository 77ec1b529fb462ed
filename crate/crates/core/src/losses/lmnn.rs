use super::triplet::check_rows;
use super::{count_active, pairwise_distances, BatchLabels, LossReport, MarginMode, Metric, PairGrads};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Large-margin nearest-neighbor loss with fixed target neighbors.
///
/// `(1 − mu) · mean_i D(i, T(i)) + mu · mean_{a,n} margin(D(a, T(a)) − D(a, n))`
/// where `n` ranges over rows of a different identity. The pull and push
/// means are taken separately before weighting. `per_term` lists the pull
/// terms first, then the push terms.
pub fn lmnn_loss(
    embeddings: &Matrix,
    labels: &BatchLabels,
    target_neighbors: &[usize],
    mu: f64,
    mode: MarginMode,
) -> Result<LossReport> {
    lmnn_loss_with_metric(embeddings, labels, target_neighbors, mu, mode, Metric::Euclidean)
}

pub fn lmnn_loss_with_metric(
    embeddings: &Matrix,
    labels: &BatchLabels,
    target_neighbors: &[usize],
    mu: f64,
    mode: MarginMode,
    metric: Metric,
) -> Result<LossReport> {
    check_rows(embeddings, labels)?;
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::contract(format!("mu must lie in [0, 1], got {mu}")));
    }
    let y = labels.as_slice();
    let n = y.len();
    if target_neighbors.len() != n {
        return Err(Error::contract(format!(
            "{} target neighbors for {n} rows",
            target_neighbors.len()
        )));
    }
    for (i, &t) in target_neighbors.iter().enumerate() {
        if t >= n || t == i || y[t] != y[i] {
            return Err(Error::contract(format!(
                "target neighbor {t} of row {i} is not another row of the same identity"
            )));
        }
    }
    let dist = pairwise_distances(embeddings, metric);
    let mut pull_grads = PairGrads::new(embeddings, metric);
    let mut push_grads = PairGrads::new(embeddings, metric);
    let mut pull = Vec::with_capacity(n);
    let mut push = Vec::new();
    for i in 0..n {
        let t = target_neighbors[i];
        let dt = dist.get(i, t);
        pull.push(dt);
        pull_grads.add(i, t, dt, 1.0);
        for k in (0..n).filter(|&k| y[k] != y[i]) {
            let dk = dist.get(i, k);
            let x = dt - dk;
            push.push(mode.apply(x));
            let c = mode.derivative(x);
            push_grads.add(i, t, dt, c);
            push_grads.add(i, k, dk, -c);
        }
    }
    if push.is_empty() {
        return Err(Error::contract("LMNN push term needs rows of at least two identities"));
    }
    let wp = (1.0 - mu) / pull.len() as f64;
    let wq = mu / push.len() as f64;
    let loss = wp * pull.iter().sum::<f64>() + wq * push.iter().sum::<f64>();
    let mut grad = pull_grads.into_grad(wp);
    let push_grad = push_grads.into_grad(wq);
    for (g, h) in grad.as_mut_slice().iter_mut().zip(push_grad.as_slice()) {
        *g += h;
    }
    let mut per_term = pull;
    per_term.extend(push);
    Ok(LossReport {
        loss,
        grad,
        num_terms: per_term.len(),
        num_active: count_active(&per_term),
        per_term,
    })
}
