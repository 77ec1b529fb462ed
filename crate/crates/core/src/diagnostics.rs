//! Training-dynamics statistics and the collapse alarm.
//!
//! One [`TrainLogRecord`] per iteration captures the loss distribution, the
//! fraction of active terms, and 0/5/50/95/100 percentiles of embedding norms
//! and of all pairwise euclidean distances in the batch. Percentiles use linear
//! interpolation between closest ranks.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::format_float;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::matrix::{norm, squared_distance, Matrix};

pub const PERCENTILES: [f64; 5] = [0.0, 5.0, 50.0, 95.0, 100.0];
pub const LOG_HEADER: &str = "iter,loss_mean,loss_p5,active_frac,norm_p0,norm_p5,norm_p50,norm_p95,norm_p100,dist_p0,dist_p5,dist_p50,dist_p95,dist_p100,lr";

pub const TERMS_HEADER: &str = "iter,term";

/// Median distance must fall below this fraction of its first value.
pub const COLLAPSE_RELATIVE_DISTANCE: f64 = 1e-3;
/// ... while at least this fraction of terms stays active.
pub const COLLAPSE_ACTIVE_FRACTION: f64 = 0.99;
pub const DEFAULT_COLLAPSE_WINDOW: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub iteration: u64,
    pub loss_mean: f64,
    pub loss_p5: f64,
    pub active_fraction: f64,
    pub emb_norm_percentiles: [f64; 5],
    pub pair_dist_percentiles: [f64; 5],
    pub lr: f64,
}

impl TrainLogRecord {
    pub fn median_distance(&self) -> f64 {
        self.pair_dist_percentiles[2]
    }

    pub fn csv_line(&self) -> String {
        let mut fields = vec![
            self.iteration.to_string(),
            format_float(self.loss_mean),
            format_float(self.loss_p5),
            format_float(self.active_fraction),
        ];
        fields.extend(self.emb_norm_percentiles.iter().map(|&v| format_float(v)));
        fields.extend(self.pair_dist_percentiles.iter().map(|&v| format_float(v)));
        fields.push(format_float(self.lr));
        fields.join(",")
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let v: Vec<&str> = line.trim_end().split(',').collect();
        if v.len() != 15 {
            return Err(Error::Parse(format!("log line has {} fields, expected 15", v.len())));
        }
        let f = |i: usize| -> Result<f64> {
            v[i].parse().map_err(|_| Error::Parse(format!("bad log field '{}'", v[i])))
        };
        Ok(Self {
            iteration: v[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad iteration '{}'", v[0])))?,
            loss_mean: f(1)?,
            loss_p5: f(2)?,
            active_fraction: f(3)?,
            emb_norm_percentiles: [f(4)?, f(5)?, f(6)?, f(7)?, f(8)?],
            pair_dist_percentiles: [f(9)?, f(10)?, f(11)?, f(12)?, f(13)?],
            lr: f(14)?,
        })
    }
}

/// Percentile `q` in `[0, 100]` of already sorted values, by linear
/// interpolation between closest ranks. Empty input gives 0.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q / 100.0 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

pub fn percentiles(values: &[f64]) -> [f64; 5] {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    PERCENTILES.map(|q| percentile_sorted(&s, q))
}

pub fn batch_stats(embeddings: &Matrix, report: &LossReport, iteration: u64, lr: f64) -> TrainLogRecord {
    let terms = &report.per_term;
    let loss_mean = if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    };
    let norms: Vec<f64> = embeddings.iter_rows().map(norm).collect();
    let n = embeddings.rows();
    let mut dists = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(squared_distance(embeddings.row(i), embeddings.row(j)).sqrt());
        }
    }
    TrainLogRecord {
        iteration,
        loss_mean,
        loss_p5: percentiles(terms)[1],
        active_fraction: report.active_fraction(),
        emb_norm_percentiles: percentiles(&norms),
        pair_dist_percentiles: percentiles(&dists),
        lr,
    }
}

/// True when the last `window` records all show a median pairwise distance
/// below `1e-3 ×` the first record's while more than 99% of terms are active.
pub fn collapse_alarm(history: &[TrainLogRecord], window: usize) -> bool {
    let window = window.max(2);
    let Some(first) = history.first() else {
        return false;
    };
    if history.len() < window {
        return false;
    }
    let limit = COLLAPSE_RELATIVE_DISTANCE * first.median_distance();
    history[history.len() - window..]
        .iter()
        .all(|r| r.median_distance() < limit && r.active_fraction > COLLAPSE_ACTIVE_FRACTION)
}

/// Streaming form of [`collapse_alarm`].
#[derive(Clone, Debug)]
pub struct CollapseMonitor {
    window: usize,
    initial: Option<f64>,
    streak: usize,
}

impl CollapseMonitor {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(2),
            initial: None,
            streak: 0,
        }
    }

    /// Feeds the next record; returns true once the alarm condition holds.
    pub fn observe(&mut self, r: &TrainLogRecord) -> bool {
        let initial = *self.initial.get_or_insert(r.median_distance());
        if r.median_distance() < COLLAPSE_RELATIVE_DISTANCE * initial
            && r.active_fraction > COLLAPSE_ACTIVE_FRACTION
        {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.streak >= self.window
    }
}

/// In-memory log with strictly increasing iterations and an optional CSV sink
/// that is flushed after every record.
pub struct TrainLog {
    records: Vec<TrainLogRecord>,
    sink: Option<BufWriter<File>>,
    terms: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            sink: None,
            terms: None,
        }
    }

    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{LOG_HEADER}")?;
        w.flush()?;
        Ok(Self {
            records: Vec::new(),
            sink: Some(w),
            terms: None,
        })
    }

    /// Also write every per-term loss value to `path`, one `iter,value` row
    /// per term. Meant for debugging; the files get large.
    pub fn with_term_dump(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{TERMS_HEADER}")?;
        self.terms = Some(w);
        Ok(self)
    }

    pub fn push_terms(&mut self, iteration: u64, per_term: &[f64]) -> Result<()> {
        if let Some(w) = &mut self.terms {
            for v in per_term {
                writeln!(w, "{iteration},{}", format_float(*v))?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn push(&mut self, r: TrainLogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.iteration <= last.iteration {
                return Err(Error::contract(format!(
                    "log iteration {} does not follow {}",
                    r.iteration, last.iteration
                )));
            }
        }
        if let Some(w) = &mut self.sink {
            writeln!(w, "{}", r.csv_line())?;
            w.flush()?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn records(&self) -> &[TrainLogRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TrainLogRecord> {
        self.records
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<TrainLogRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Parse("unexpected training log header".to_string()));
    }
    lines.filter(|l| !l.is_empty()).map(TrainLogRecord::parse_csv_line).collect()
}
