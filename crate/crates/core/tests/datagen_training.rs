use std::collections::BTreeMap;

use tripletkit::bench::{evaluate_params, BenchSplit};
use tripletkit::datagen::{generate, generate_with_truth, GenSpec};
use tripletkit::diagnostics::{collapse_alarm, read_log, TrainLog, DEFAULT_COLLAPSE_WINDOW};
use tripletkit::evalkit::EvalProtocol;
use tripletkit::losses::{Label, LossKind, MarginMode};
use tripletkit::optim::Schedule;
use tripletkit::train::{initial_params, train, OhmConfig, RunConfig};

#[test]
fn outlier_count_is_binomial() {
    let spec = GenSpec {
        num_identities: 100,
        items_per_identity: 100,
        feature_dim: 2,
        outlier_rate: 0.1,
        seed: 3,
        ..GenSpec::default()
    };
    let (data, truth) = generate_with_truth(&spec).unwrap();
    let swapped = data.pids().iter().zip(&truth).filter(|(a, b)| a != b).count() as f64;
    let (n, q) = (10_000.0f64, 0.1);
    let sigma = (n * q * (1.0 - q)).sqrt();
    assert!((swapped - n * q).abs() <= 3.0 * sigma, "{swapped} outliers");
}

#[test]
fn tight_clusters_are_recovered_by_nearest_centroid() {
    let data = generate(&GenSpec {
        intra_spread: 0.01,
        outlier_rate: 0.0,
        ..GenSpec::default()
    })
    .unwrap();
    let mut centroids: BTreeMap<Label, Vec<f64>> = BTreeMap::new();
    for (pid, rows) in data.identities() {
        let mut c = vec![0.0; data.dim()];
        for &r in rows {
            for (acc, x) in c.iter_mut().zip(data.features().row(r)) {
                *acc += x / rows.len() as f64;
            }
        }
        centroids.insert(*pid, c);
    }
    for i in 0..data.len() {
        let x = data.features().row(i);
        let nearest = centroids
            .iter()
            .map(|(pid, c)| (c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), *pid))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1;
        assert_eq!(nearest, data.pid(i), "row {i}");
    }
}

#[test]
fn batch_hard_soft_training_lowers_the_active_fraction() {
    let data = generate(&GenSpec::default()).unwrap();
    let cfg = RunConfig {
        schedule: Schedule::new(1e-3, 1000, 2000).unwrap(),
        ..RunConfig::default()
    };
    assert_eq!((cfg.loss, cfg.margin), (LossKind::BatchHard, MarginMode::Soft));
    let mut log = TrainLog::in_memory();
    let out = train(&cfg, &data, &mut log).unwrap();
    assert_eq!(out.iterations, 2000);
    let records = log.records();
    let first = records[0].active_fraction;
    let last = records.last().unwrap().active_fraction;
    assert!(last < first, "active fraction {first} -> {last}");
}

#[test]
fn batch_hard_soft_full_schedule_deactivates_terms() {
    let data = generate(&GenSpec::default()).unwrap();
    let cfg = RunConfig {
        schedule: Schedule::full(),
        ..RunConfig::default()
    };
    let mut log = TrainLog::in_memory();
    train(&cfg, &data, &mut log).unwrap();
    let first = log.records()[0].active_fraction;
    let lowest = log.records().iter().map(|r| r.active_fraction).fold(1.0, f64::min);
    assert!(lowest < first, "active fraction never dropped below {first}");
}

#[test]
fn training_beats_random_init_on_separable_data() {
    let data = generate(&GenSpec {
        num_identities: 12,
        intra_spread: 0.35,
        outlier_rate: 0.0,
        seed: 4,
        ..GenSpec::default()
    })
    .unwrap();
    let cfg = RunConfig {
        margin: MarginMode::Hard(0.5),
        layer_widths: vec![32, 8],
        ..RunConfig::default()
    };
    let protocol = EvalProtocol::default();
    // every item serves as a query against all others
    let untrained = initial_params(&cfg, data.dim()).unwrap();
    let before = evaluate_params(&untrained, &data, &data, &protocol).unwrap().map;
    let trained = train(&cfg, &data, &mut TrainLog::in_memory()).unwrap();
    let after = evaluate_params(&trained.params, &data, &data, &protocol).unwrap().map;
    assert!(after >= 0.95, "trained mAP {after}");
    assert!(before < after, "untrained {before} vs trained {after}");
}

#[test]
fn collapse_is_visible_in_the_written_log() {
    let data = generate(&GenSpec {
        outlier_rate: 0.3,
        ..GenSpec::default()
    })
    .unwrap();
    let split = BenchSplit::new(&data, 10, 0).unwrap();
    let cfg = RunConfig {
        loss: LossKind::TripletOhm,
        margin: MarginMode::Hard(0.1),
        schedule: Schedule::full(),
        ohm: OhmConfig {
            refresh_every: 10,
            pool_batches: 1,
            ..OhmConfig::default()
        },
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train_log.csv");
    let out = train(&cfg, &split.train, &mut TrainLog::to_file(&path).unwrap()).unwrap();
    let at = out.collapsed_at.expect("run should collapse") as usize;
    assert!(at < cfg.schedule.t1 as usize);

    let records = read_log(&path).unwrap();
    assert_eq!(records.len(), at + 1);
    assert!(collapse_alarm(&records, DEFAULT_COLLAPSE_WINDOW));
    assert!(!collapse_alarm(&records[..at], DEFAULT_COLLAPSE_WINDOW));
}
