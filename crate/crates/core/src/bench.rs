//! Loss × margin benchmark grid.
//!
//! Every cell trains on the same identity-disjoint split with the same seed and
//! schedule, then scores the held-out identities. Cells that trip the collapse
//! alarm are still evaluated and flagged with `*`; a cell that errors is
//! recorded as failed and the rest of the grid carries on.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate, GenSpec};
use crate::dataset::{format_float, LabeledDataset};
use crate::diagnostics::TrainLog;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalProtocol, EvalResult};
use crate::losses::{LossKind, MarginMode};
use crate::mlp::{embed, MlpParams};
use crate::par;
use crate::train::{train, RunConfig};

pub const COLLAPSE_MARKER: &str = "*";
pub const CSV_HEADER: &str = "loss,margin,map,rank1,collapsed,iterations,status";
/// Caveat printed under every rendered table.
pub const ARCHITECTURE_NOTE: &str = "note: the embedding network has no batch normalization";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub data: GenSpec,
    /// Identities held out for validation.
    pub validation_identities: usize,
    pub losses: Vec<LossKind>,
    pub margins: Vec<MarginMode>,
    /// Shared settings of every cell; `loss` and `margin` are overridden.
    pub run: RunConfig,
    pub protocol: EvalProtocol,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            data: GenSpec::default(),
            validation_identities: 10,
            losses: LossKind::ALL.to_vec(),
            margins: vec![
                MarginMode::Hard(0.1),
                MarginMode::Hard(0.2),
                MarginMode::Hard(0.5),
                MarginMode::Hard(1.0),
                MarginMode::Soft,
            ],
            run: RunConfig::default(),
            protocol: EvalProtocol::default(),
        }
    }
}

/// Training identities plus the validation query/gallery sets.
#[derive(Clone, Debug)]
pub struct BenchSplit {
    pub train: LabeledDataset,
    pub query: LabeledDataset,
    pub gallery: LabeledDataset,
}

impl BenchSplit {
    pub fn new(data: &LabeledDataset, validation_identities: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (train, val) = data.split_identities(validation_identities, &mut rng)?;
        let (query, gallery) = val.query_gallery_split()?;
        Ok(Self { train, query, gallery })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub loss: LossKind,
    pub margin: MarginMode,
    pub map: Option<f64>,
    pub rank1: Option<f64>,
    pub collapsed: bool,
    pub iterations: u64,
    pub error: Option<String>,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(format_float).unwrap_or_default();
        let status = match &self.error {
            Some(e) => format!("failed: {}", e.replace([',', '\n'], ";")),
            None => "ok".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{}",
            self.loss,
            self.margin,
            opt(self.map),
            opt(self.rank1),
            self.collapsed,
            self.iterations,
            status
        )
    }
}

/// Embeds both sets with `params` and runs the evaluation protocol.
pub fn evaluate_params(
    params: &MlpParams,
    query: &LabeledDataset,
    gallery: &LabeledDataset,
    protocol: &EvalProtocol,
) -> Result<EvalResult> {
    let q = query.with_features(embed(params, query.features())?)?;
    let g = gallery.with_features(embed(params, gallery.features())?)?;
    evaluate(&q, &g, protocol)
}

/// Trains and scores one grid cell. Never fails; errors land in the result.
pub fn run_cell(
    base: &RunConfig,
    loss: LossKind,
    margin: MarginMode,
    split: &BenchSplit,
    protocol: &EvalProtocol,
) -> CellResult {
    let cfg = RunConfig {
        loss,
        margin,
        ..base.clone()
    };
    let mut cell = CellResult {
        loss,
        margin,
        map: None,
        rank1: None,
        collapsed: false,
        iterations: 0,
        error: None,
    };
    let outcome = train(&cfg, &split.train, &mut TrainLog::in_memory()).and_then(|out| {
        let eval = evaluate_params(&out.params, &split.query, &split.gallery, protocol)?;
        Ok((out, eval))
    });
    match outcome {
        Ok((out, eval)) => {
            cell.collapsed = out.collapsed();
            cell.iterations = out.iterations;
            cell.map = Some(eval.map);
            cell.rank1 = eval.rank(1);
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell
}

/// Runs every loss × margin cell on one shared split. Cells run in parallel
/// when the `parallel` feature is on; results come back in grid order.
pub fn run_grid(cfg: &BenchConfig) -> Result<Vec<CellResult>> {
    if cfg.losses.is_empty() || cfg.margins.is_empty() {
        return Err(Error::config("benchmark grid needs at least one loss and one margin"));
    }
    cfg.protocol.validate()?;
    if !cfg.protocol.cmc_ranks.contains(&1) {
        return Err(Error::config("benchmark protocol must report rank 1"));
    }
    let data = generate(&cfg.data)?;
    let split = BenchSplit::new(&data, cfg.validation_identities, cfg.run.seed)?;
    let cells: Vec<(LossKind, MarginMode)> = cfg
        .losses
        .iter()
        .flat_map(|&l| cfg.margins.iter().map(move |&m| (l, m)))
        .collect();
    Ok(par::map_slice(&cells, |&(l, m)| {
        run_cell(&cfg.run, l, m, &split, &cfg.protocol)
    }))
}

pub fn results_csv(cells: &[CellResult]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&c.csv_line());
        out.push('\n');
    }
    out
}

/// Losses as rows, margins as columns, each cell `mAP / rank-1` in percent.
pub fn render_table(cells: &[CellResult]) -> String {
    let mut losses: Vec<LossKind> = Vec::new();
    let mut margins: Vec<MarginMode> = Vec::new();
    for c in cells {
        if !losses.contains(&c.loss) {
            losses.push(c.loss);
        }
        if !margins.contains(&c.margin) {
            margins.push(c.margin);
        }
    }
    let width = 16;
    let mut out = format!("{:<16}", "loss");
    for m in &margins {
        let _ = write!(out, "{:>width$}", format!("m={m}"));
    }
    out.push('\n');
    for l in &losses {
        let _ = write!(out, "{:<16}", l.name());
        for m in &margins {
            let text = match cells.iter().find(|c| c.loss == *l && c.margin == *m) {
                None => "-".to_string(),
                Some(c) if c.failed() => "failed".to_string(),
                Some(c) => format!(
                    "{:.1}/{:.1}{}",
                    100.0 * c.map.unwrap_or(0.0),
                    100.0 * c.rank1.unwrap_or(0.0),
                    if c.collapsed { COLLAPSE_MARKER } else { "" }
                ),
            };
            let _ = write!(out, "{text:>width$}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "cells show mAP/rank-1 in %; {COLLAPSE_MARKER} marks runs that collapsed");
    out.push_str(ARCHITECTURE_NOTE);
    out.push('\n');
    out
}
