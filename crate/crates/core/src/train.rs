//! Run configuration and the training loop.
//!
//! One iteration samples a batch, embeds it, evaluates the configured loss,
//! backpropagates the embedding gradient through the network and takes an Adam
//! step. A diagnostics record is logged per iteration; the run stops at `t1`
//! or, optionally, as soon as the collapse alarm fires.

use std::path::PathBuf;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::diagnostics::{batch_stats, CollapseMonitor, TrainLog, DEFAULT_COLLAPSE_WINDOW};
use crate::error::{Error, Result};
use crate::losses::{
    batch_all_loss, batch_hard_loss, classic_triplet_loss, lifted_generalized_loss, lifted_loss,
    lmnn_loss_with_metric, Averaging, BatchLabels, LossKind, LossReport, MarginMode, Metric,
};
use crate::matrix::{squared_distance, Matrix};
use crate::mlp::{init_params, mlp_backward, mlp_forward, MlpParams, DEFAULT_EMBEDDING_DIM, DEFAULT_SLOPE};
use crate::optim::{adam_step, lr_at, AdamState, Schedule};
use crate::sampling::{mine_hard_offline, sample_pk_batch, sample_random_triplets, TripletSet, DEFAULT_OHM_FRACTION};

pub const DEFAULT_OHM_REFRESH: u64 = 500;
pub const DEFAULT_LIFTED_MARGIN: f64 = 1.0;

/// Offline hard mining knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OhmConfig {
    /// Fraction of the training set embedded at every refresh.
    pub sample_fraction: f64,
    /// Iterations between refreshes of the mined pool.
    pub refresh_every: u64,
    /// Mined pool size as a multiple of `B`; batches are drawn from the pool.
    pub pool_batches: usize,
}

impl Default for OhmConfig {
    fn default() -> Self {
        Self {
            sample_fraction: DEFAULT_OHM_FRACTION,
            refresh_every: DEFAULT_OHM_REFRESH,
            pool_batches: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub loss: LossKind,
    pub margin: MarginMode,
    pub metric: Metric,
    pub p: usize,
    pub k: usize,
    /// Triplets per batch for `triplet` and `triplet_ohm`.
    pub b: usize,
    /// Hidden widths followed by the embedding width; the input width comes
    /// from the data.
    pub layer_widths: Vec<usize>,
    pub slope: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Overrides the averaging implied by the loss name.
    pub averaging: Option<Averaging>,
    /// Margin inside the lifted losses' exponent.
    pub lifted_margin: f64,
    /// Push weight of LMNN.
    pub lmnn_mu: f64,
    pub ohm: OhmConfig,
    /// Multiplies the last layer after initialization; tiny values start the
    /// run with every embedding squeezed around one point.
    pub init_output_scale: f64,
    pub collapse_window: usize,
    pub abort_on_collapse: bool,
    pub train_data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::BatchHard,
            margin: MarginMode::Soft,
            metric: Metric::Euclidean,
            p: 8,
            k: 4,
            b: 11,
            layer_widths: vec![64, DEFAULT_EMBEDDING_DIM],
            slope: DEFAULT_SLOPE,
            schedule: Schedule::desk(),
            seed: 0,
            averaging: None,
            lifted_margin: DEFAULT_LIFTED_MARGIN,
            lmnn_mu: 0.5,
            ohm: OhmConfig::default(),
            init_output_scale: 1.0,
            collapse_window: DEFAULT_COLLAPSE_WINDOW,
            abort_on_collapse: true,
            train_data: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return Err(Error::config("layer widths must be a nonempty list of positive sizes"));
        }
        if self.loss.uses_triplets() {
            if self.b == 0 {
                return Err(Error::config(format!("{} needs B >= 1", self.loss)));
            }
        } else if self.p < 2 || self.k < 2 {
            return Err(Error::config(format!(
                "{} needs P >= 2 and K >= 2, got P={}, K={}",
                self.loss, self.p, self.k
            )));
        }
        if !(self.slope.is_finite() && self.slope >= 0.0) {
            return Err(Error::config("slope must be a nonnegative number"));
        }
        if !(self.lifted_margin.is_finite() && self.lifted_margin >= 0.0) {
            return Err(Error::config("lifted_margin must be a nonnegative number"));
        }
        if !(0.0..=1.0).contains(&self.lmnn_mu) {
            return Err(Error::config("lmnn_mu must lie in [0, 1]"));
        }
        if !(self.init_output_scale.is_finite() && self.init_output_scale > 0.0) {
            return Err(Error::config("init_output_scale must be positive"));
        }
        if self.loss == LossKind::TripletOhm {
            let o = &self.ohm;
            if !(o.sample_fraction > 0.0 && o.sample_fraction <= 1.0) {
                return Err(Error::config("ohm.sample_fraction must lie in (0, 1]"));
            }
            if o.refresh_every == 0 || o.pool_batches == 0 {
                return Err(Error::config("ohm.refresh_every and ohm.pool_batches must be positive"));
            }
        }
        if self.collapse_window < 2 {
            return Err(Error::config("collapse_window must be at least 2"));
        }
        Ok(())
    }

    pub fn averaging(&self) -> Averaging {
        self.averaging.unwrap_or_else(|| self.loss.averaging())
    }

    /// Full network widths for inputs of width `input_dim`.
    pub fn network_widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.layer_widths);
        w
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::config(format!("bad run config: {e}")))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub optim: AdamState,
    /// Iterations actually run.
    pub iterations: u64,
    /// Iteration at which the collapse alarm fired, if it did.
    pub collapsed_at: Option<u64>,
}

impl TrainOutcome {
    pub fn collapsed(&self) -> bool {
        self.collapsed_at.is_some()
    }
}

/// Nearest same-identity row of every batch row in input space. LMNN keeps
/// target neighbors fixed, so they are never recomputed from embeddings.
fn input_target_neighbors(inputs: &Matrix, y: &[i64]) -> Vec<usize> {
    (0..y.len())
        .map(|i| {
            (0..y.len())
                .filter(|&j| j != i && y[j] == y[i])
                .min_by(|&a, &b| {
                    squared_distance(inputs.row(i), inputs.row(a))
                        .total_cmp(&squared_distance(inputs.row(i), inputs.row(b)))
                        .then(a.cmp(&b))
                })
                .unwrap_or(i)
        })
        .collect()
}

fn positive_pairs(y: &[i64]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            if y[i] == y[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

struct Batch {
    rows: Vec<usize>,
    labels: BatchLabels,
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a LabeledDataset,
    rng: ChaCha8Rng,
    pool: TripletSet,
}

impl Trainer<'_> {
    fn next_batch(&mut self, t: u64, params: &MlpParams) -> Result<Batch> {
        let cfg = self.cfg;
        let rows = match cfg.loss {
            LossKind::Triplet => sample_random_triplets(self.data, cfg.b, &mut self.rng)?.rows(),
            LossKind::TripletOhm => {
                if t.is_multiple_of(cfg.ohm.refresh_every) {
                    self.pool = mine_hard_offline(
                        params,
                        self.data,
                        cfg.ohm.sample_fraction,
                        cfg.b * cfg.ohm.pool_batches,
                        cfg.margin,
                        cfg.metric,
                        &mut self.rng,
                    )?;
                }
                let picks = index::sample(&mut self.rng, self.pool.len(), cfg.b);
                TripletSet {
                    triplets: picks.iter().map(|i| self.pool.triplets[i]).collect(),
                }
                .rows()
            }
            _ => sample_pk_batch(self.data, cfg.p, cfg.k, &mut self.rng)?.indices,
        };
        let labels = BatchLabels::new(rows.iter().map(|&r| self.data.pid(r)).collect());
        Ok(Batch { rows, labels })
    }

    fn loss(&self, emb: &Matrix, inputs: &Matrix, batch: &Batch) -> Result<LossReport> {
        let cfg = self.cfg;
        let labels = &batch.labels;
        match cfg.loss {
            LossKind::Triplet | LossKind::TripletOhm => classic_triplet_loss(emb, cfg.metric, cfg.margin),
            LossKind::BatchHard | LossKind::BatchHardNnz => {
                batch_hard_loss(emb, labels, cfg.metric, cfg.margin, cfg.averaging())
            }
            LossKind::BatchAll | LossKind::BatchAllNnz => {
                batch_all_loss(emb, labels, cfg.metric, cfg.margin, cfg.averaging())
            }
            LossKind::Lifted => {
                let pairs = positive_pairs(labels.as_slice());
                lifted_loss(emb, labels, &pairs, cfg.metric, cfg.lifted_margin, cfg.margin)
            }
            LossKind::LiftedGen => {
                lifted_generalized_loss(emb, labels, cfg.metric, cfg.lifted_margin, cfg.margin)
            }
            LossKind::Lmnn => {
                let targets = input_target_neighbors(inputs, labels.as_slice());
                lmnn_loss_with_metric(emb, labels, &targets, cfg.lmnn_mu, cfg.margin, cfg.metric)
            }
        }
    }
}

/// Initial network for `cfg` on inputs of width `input_dim`.
pub fn initial_params(cfg: &RunConfig, input_dim: usize) -> Result<MlpParams> {
    let mut params = init_params(&cfg.network_widths(input_dim), cfg.slope, cfg.seed)?;
    if cfg.init_output_scale != 1.0 {
        params.scale_output(cfg.init_output_scale);
    }
    Ok(params)
}

/// Trains a fresh network on `data`, appending one record per iteration to
/// `log`. Fully deterministic given the config and data.
pub fn train(cfg: &RunConfig, data: &LabeledDataset, log: &mut TrainLog) -> Result<TrainOutcome> {
    cfg.validate()?;
    let params = initial_params(cfg, data.dim())?;
    train_from(cfg, data, params, log)
}

/// Same as [`train`] but starting from given parameters.
pub fn train_from(
    cfg: &RunConfig,
    data: &LabeledDataset,
    mut params: MlpParams,
    log: &mut TrainLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.input_dim() != data.dim() {
        return Err(Error::dim(format!(
            "network expects width {} but the data has {}",
            params.input_dim(),
            data.dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut trainer = Trainer {
        cfg,
        data,
        rng,
        pool: TripletSet { triplets: Vec::new() },
    };
    let mut state = AdamState::new(&params);
    let mut monitor = CollapseMonitor::new(cfg.collapse_window);
    let mut collapsed_at = None;
    let mut iterations = 0;
    for t in 0..cfg.schedule.t1 {
        let batch = trainer.next_batch(t, &params)?;
        let inputs = data.features().select_rows(&batch.rows);
        let (emb, cache) = mlp_forward(&params, &inputs)?;
        let report = trainer.loss(&emb, &inputs, &batch)?;
        if !report.loss.is_finite() {
            return Err(Error::contract(format!("loss became non-finite at iteration {t}")));
        }
        let grads = mlp_backward(&params, &cache, &report.grad)?;
        state.apply_beta1_drop(t, &cfg.schedule);
        let lr = lr_at(&cfg.schedule, t)?;
        adam_step(&mut params, &grads, &mut state, lr)?;
        let record = batch_stats(&emb, &report, t, lr);
        let alarm = monitor.observe(&record);
        log.push(record)?;
        log.push_terms(t, &report.per_term)?;
        iterations = t + 1;
        if alarm && collapsed_at.is_none() {
            collapsed_at = Some(t);
            if cfg.abort_on_collapse {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        optim: state,
        iterations,
        collapsed_at,
    })
}
