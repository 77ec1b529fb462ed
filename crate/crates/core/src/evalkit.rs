//! Retrieval evaluation: gallery ranking, average precision, mAP and CMC.
//!
//! Gallery items that share both identity and camera with the query are
//! dropped before scoring when `exclude_same_camera_same_id` is set (the
//! Market-1501 convention). Queries left without any relevant gallery item are
//! skipped and counted, not scored as zero.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::{Label, Metric};
use crate::matrix::Matrix;
use crate::par;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    #[default]
    SingleQuery,
    /// Mean-pool all queries of one (identity, camera) before ranking.
    MultiQuery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub mode: QueryMode,
    pub exclude_same_camera_same_id: bool,
    pub cmc_ranks: Vec<usize>,
    #[serde(default)]
    pub metric: Metric,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            mode: QueryMode::SingleQuery,
            exclude_same_camera_same_id: true,
            cmc_ranks: vec![1, 5, 10, 20],
            metric: Metric::Euclidean,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.cmc_ranks.contains(&0) {
            return Err(Error::config("CMC ranks start at 1"));
        }
        if self.cmc_ranks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("CMC ranks must be strictly ascending"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    /// Fraction of scored queries whose first correct match is within each rank.
    pub cmc: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub per_query_ap: Vec<f64>,
    /// 1-based rank of the first correct match, per scored query.
    #[serde(skip)]
    pub first_hit: Vec<usize>,
    pub num_queries: usize,
    pub num_skipped: usize,
    pub protocol: EvalProtocol,
}

impl EvalResult {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.cmc.get(&k).copied()
    }

    /// Report document `{map, cmc, num_queries, num_skipped, protocol}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Gallery indices by ascending distance to `query`; ties keep index order.
pub fn rank_gallery(query: &[f64], gallery: &Matrix, metric: Metric) -> Vec<usize> {
    let d: Vec<f64> = gallery.iter_rows().map(|g| metric.between(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

/// Mean of precision@k over the relevant positions `k`, divided by the total
/// number of relevant items.
pub fn average_precision(relevance: &[bool], num_relevant_total: usize) -> Result<f64> {
    if num_relevant_total == 0 {
        return Err(Error::contract("average precision is undefined without relevant items"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits > num_relevant_total {
        return Err(Error::contract(format!(
            "{hits} relevant entries exceed the declared total {num_relevant_total}"
        )));
    }
    Ok(sum / num_relevant_total as f64)
}

pub fn combine_embeddings_mean(embeddings: &[&[f64]]) -> Result<Vec<f64>> {
    let first = check_combinable(embeddings)?;
    let mut out = vec![0.0; first];
    for e in embeddings {
        for (o, x) in out.iter_mut().zip(*e) {
            *o += x;
        }
    }
    let n = embeddings.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

pub fn combine_embeddings_max(embeddings: &[&[f64]]) -> Result<Vec<f64>> {
    check_combinable(embeddings)?;
    let mut out = embeddings[0].to_vec();
    for e in &embeddings[1..] {
        for (o, &x) in out.iter_mut().zip(*e) {
            *o = o.max(x);
        }
    }
    Ok(out)
}

fn check_combinable(embeddings: &[&[f64]]) -> Result<usize> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::contract("cannot combine an empty set of embeddings"))?
        .len();
    if embeddings.iter().any(|e| e.len() != first) {
        return Err(Error::dim("embeddings to combine differ in width"));
    }
    Ok(first)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Max,
}

/// Collapses every (identity, camera) group into a single pooled row, in order
/// of first appearance. The pooled row keeps the group's first item id.
pub fn pool_groups(set: &LabeledDataset, pooling: Pooling) -> Result<LabeledDataset> {
    let mut order: Vec<(Label, i64)> = Vec::new();
    let mut members: HashMap<(Label, i64), Vec<usize>> = HashMap::new();
    for i in 0..set.len() {
        let key = (set.pid(i), set.cams()[i]);
        members
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(i);
    }
    let mut rows = Vec::with_capacity(order.len());
    let (mut pids, mut cams, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for key in &order {
        let idx = &members[key];
        let vecs: Vec<&[f64]> = idx.iter().map(|&i| set.features().row(i)).collect();
        rows.push(match pooling {
            Pooling::Mean => combine_embeddings_mean(&vecs)?,
            Pooling::Max => combine_embeddings_max(&vecs)?,
        });
        pids.push(key.0);
        cams.push(key.1);
        ids.push(set.item_ids()[idx[0]]);
    }
    let features = if rows.is_empty() {
        Matrix::zeros(0, set.dim())
    } else {
        Matrix::from_rows(&rows)?
    };
    LabeledDataset::new(features, pids, cams, ids)
}

struct QueryScore {
    ap: f64,
    first_hit: usize,
}

fn score_query(
    q: usize,
    queries: &LabeledDataset,
    gallery: &LabeledDataset,
    protocol: &EvalProtocol,
) -> Option<QueryScore> {
    let (qpid, qcam) = (queries.pid(q), queries.cams()[q]);
    let order = rank_gallery(queries.features().row(q), gallery.features(), protocol.metric);
    let relevance: Vec<bool> = order
        .into_iter()
        .filter(|&g| {
            !(protocol.exclude_same_camera_same_id
                && gallery.pid(g) == qpid
                && gallery.cams()[g] == qcam)
        })
        .map(|g| gallery.pid(g) == qpid)
        .collect();
    let num_relevant = relevance.iter().filter(|&&r| r).count();
    if num_relevant == 0 {
        return None;
    }
    let ap = average_precision(&relevance, num_relevant).expect("relevant items exist");
    let first_hit = relevance.iter().position(|&r| r).expect("relevant items exist") + 1;
    Some(QueryScore { ap, first_hit })
}

/// Scores every query against the gallery. Queries are processed in parallel
/// when the `parallel` feature is on; results are merged in query order.
pub fn evaluate(
    queries: &LabeledDataset,
    gallery: &LabeledDataset,
    protocol: &EvalProtocol,
) -> Result<EvalResult> {
    protocol.validate()?;
    if gallery.is_empty() {
        return Err(Error::contract("gallery is empty"));
    }
    if queries.dim() != gallery.dim() {
        return Err(Error::dim(format!(
            "query width {} vs gallery width {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    let pooled;
    let queries = match protocol.mode {
        QueryMode::SingleQuery => queries,
        QueryMode::MultiQuery => {
            pooled = pool_groups(queries, Pooling::Mean)?;
            &pooled
        }
    };
    let scores = par::map_range(queries.len(), |q| score_query(q, queries, gallery, protocol));
    let num_skipped = scores.iter().filter(|s| s.is_none()).count();
    let scored: Vec<QueryScore> = scores.into_iter().flatten().collect();
    if scored.is_empty() {
        return Err(Error::contract("no query has a relevant gallery item"));
    }
    let n = scored.len() as f64;
    let per_query_ap: Vec<f64> = scored.iter().map(|s| s.ap).collect();
    let first_hit: Vec<usize> = scored.iter().map(|s| s.first_hit).collect();
    let cmc = protocol
        .cmc_ranks
        .iter()
        .map(|&k| (k, first_hit.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    Ok(EvalResult {
        map: per_query_ap.iter().sum::<f64>() / n,
        cmc,
        per_query_ap,
        first_hit,
        num_queries: scored.len(),
        num_skipped,
        protocol: protocol.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Placement {
    #[default]
    Append,
    Prepend,
}

/// Adds distractor rows to the gallery. Distractor identities must not occur
/// among the queries.
pub fn inject_distractors(
    gallery: &LabeledDataset,
    distractors: &LabeledDataset,
    queries: &LabeledDataset,
    placement: Placement,
) -> Result<LabeledDataset> {
    let query_ids: HashSet<Label> = queries.pids().iter().copied().collect();
    if let Some(p) = distractors.pids().iter().find(|p| query_ids.contains(p)) {
        return Err(Error::contract(format!(
            "distractor identity {p} is also a query identity"
        )));
    }
    if distractors.is_empty() {
        return Ok(gallery.clone());
    }
    match placement {
        Placement::Append => gallery.concat(distractors),
        Placement::Prepend => distractors.concat(gallery),
    }
}

/// mAP after injecting growing prefixes of one random permutation of the
/// distractor pool, so that each level contains all smaller ones.
pub fn distractor_curve<R: Rng + ?Sized>(
    queries: &LabeledDataset,
    gallery: &LabeledDataset,
    pool: &LabeledDataset,
    counts: &[usize],
    protocol: &EvalProtocol,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>> {
    let mut perm: Vec<usize> = (0..pool.len()).collect();
    perm.shuffle(rng);
    counts
        .iter()
        .map(|&c| {
            if c > pool.len() {
                return Err(Error::config(format!(
                    "{c} distractors requested from a pool of {}",
                    pool.len()
                )));
            }
            let injected = inject_distractors(gallery, &pool.subset(&perm[..c])?, queries, Placement::Append)?;
            Ok((c, evaluate(queries, &injected, protocol)?.map))
        })
        .collect()
}
