mod common;

use common::{all_triplets, dist, gaussian_matrix, hinge_or_soft};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use tripletkit::dataset::LabeledDataset;
use tripletkit::losses::{Label, MarginMode, Metric};
use tripletkit::mlp::{embed, init_params, Layer, MlpParams, DEFAULT_SLOPE};
use tripletkit::sampling::{mine_hard_offline, sample_pk_batch, sample_random_triplets};
use tripletkit::Matrix;

fn dataset(features: Matrix, per: usize) -> LabeledDataset {
    let n = features.rows();
    LabeledDataset::new(
        features,
        (0..n).map(|i| (i / per) as Label).collect(),
        vec![0; n],
        (0..n as u64).collect(),
    )
    .unwrap()
}

fn identity_net(dim: usize) -> MlpParams {
    MlpParams {
        layers: vec![Layer {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        }],
        slope: DEFAULT_SLOPE,
    }
}

/// `ids` clusters of `per` points, centers 100 apart on the first axis.
fn separated(ids: usize, per: usize, seed: u64) -> LabeledDataset {
    let mut f = gaussian_matrix(ids * per, 2, 0.1, &mut ChaCha8Rng::seed_from_u64(seed));
    for i in 0..ids * per {
        f.row_mut(i)[0] += 100.0 * (i / per) as f64;
    }
    dataset(f, per)
}

#[test]
fn random_triplet_batch_of_42_has_126_rows() {
    let d = separated(6, 5, 0);
    let set = sample_random_triplets(&d, 42, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(set.len(), 42);
    assert_eq!(set.rows().len(), 126);
    set.validate(&d).unwrap();
}

#[test]
fn pk_identity_selection_is_uniform() {
    let ids = 12;
    let d = separated(ids, 6, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let draws = 10_000;
    let p = 4;
    let mut counts = vec![0f64; ids];
    for _ in 0..draws {
        let batch = sample_pk_batch(&d, p, 4, &mut rng).unwrap();
        for b in 0..p {
            counts[d.pid(batch.block(b)[0]) as usize] += 1.0;
        }
    }
    let q = p as f64 / ids as f64;
    let expected = draws as f64 * q;
    let sigma = (draws as f64 * q * (1.0 - q)).sqrt();
    for (id, c) in counts.iter().enumerate() {
        assert!((c - expected).abs() <= 3.0 * sigma, "identity {id}: {c} vs {expected} ± {sigma}");
    }
    let chi2: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new((ids - 1) as f64).unwrap().cdf(chi2);
    assert!(p_value > 1e-3, "chi-square {chi2}, p = {p_value}");
}

#[test]
fn mining_perfectly_separated_data_returns_zero_loss_triplets() {
    let d = separated(4, 5, 3);
    let net = identity_net(2);
    let b = 30;
    let mode = MarginMode::Hard(0.5);
    let set = mine_hard_offline(&net, &d, 1.0, b, mode, Metric::Euclidean, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(set.len(), b);
    set.validate(&d).unwrap();
    let f = d.features();
    for &(a, p, n) in &set.triplets {
        let loss = hinge_or_soft(dist(f.row(a), f.row(p), Metric::Euclidean) - dist(f.row(a), f.row(n), Metric::Euclidean), mode);
        assert_eq!(loss, 0.0);
    }
}

#[test]
fn planted_impostor_shows_up_in_the_hardest_triplet() {
    let mut d = separated(4, 5, 4);
    // row 7 belongs to identity 1 but sits inside identity 0's cluster
    let mut f = d.features().clone();
    f.row_mut(7)[0] -= 100.0;
    d = d.with_features(f).unwrap();
    let set = mine_hard_offline(
        &identity_net(2),
        &d,
        1.0,
        5,
        MarginMode::Soft,
        Metric::Euclidean,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let (a, p, n) = set.triplets[0];
    assert!([a, p, n].contains(&7), "top triplet {:?}", set.triplets[0]);
}

#[test]
fn full_fraction_mining_equals_exhaustive_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = dataset(gaussian_matrix(20, 3, 1.0, &mut rng), 4);
    let net = init_params(&[3, 5, 2], DEFAULT_SLOPE, 2).unwrap();
    let e = embed(&net, d.features()).unwrap();
    for (mode, metric) in [
        (MarginMode::Hard(0.2), Metric::Euclidean),
        (MarginMode::Soft, Metric::SquaredEuclidean),
    ] {
        let mut scored: Vec<(f64, (usize, usize, usize))> = all_triplets(d.pids())
            .into_iter()
            .map(|(a, p, n)| {
                let x = dist(e.row(a), e.row(p), metric) - dist(e.row(a), e.row(n), metric);
                (hinge_or_soft(x, mode), (a, p, n))
            })
            .collect();
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let b = 40;
        let want: Vec<_> = scored[..b].iter().map(|s| s.1).collect();
        let got = mine_hard_offline(&net, &d, 1.0, b, mode, metric, &mut rng).unwrap();
        assert_eq!(got.triplets, want);
    }
}
