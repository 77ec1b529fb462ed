//! Synthetic identity clusters.
//!
//! Every identity gets a Gaussian center; its items are the center plus
//! isotropic Gaussian noise. Cameras are assigned round-robin within an
//! identity. A fraction of items get their label swapped to another identity,
//! mimicking annotation mistakes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::Label;
use crate::matrix::Matrix;
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub num_identities: usize,
    pub items_per_identity: usize,
    pub feature_dim: usize,
    pub identity_spread: f64,
    pub intra_spread: f64,
    pub num_cameras: usize,
    pub outlier_rate: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            num_identities: 32,
            items_per_identity: 16,
            feature_dim: 16,
            identity_spread: 1.0,
            intra_spread: 0.6,
            num_cameras: 4,
            outlier_rate: 0.05,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.items_per_identity == 0 || self.feature_dim == 0 {
            return Err(Error::config("identity, item and feature counts must be positive"));
        }
        if self.num_cameras == 0 {
            return Err(Error::config("need at least one camera"));
        }
        if !(self.identity_spread > 0.0 && self.identity_spread.is_finite()) {
            return Err(Error::config("identity_spread must be positive"));
        }
        if !(self.intra_spread >= 0.0 && self.intra_spread.is_finite()) {
            return Err(Error::config("intra_spread must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(Error::config("outlier_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

struct Block {
    rows: Vec<f64>,
    pids: Vec<Label>,
    true_pid: Label,
}

fn generate_block(spec: &GenSpec, id: usize) -> Block {
    // one independent stream per identity keeps parallel generation deterministic
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id as u64 + 1);
    let dim = spec.feature_dim;
    let center: Vec<f64> = (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.identity_spread * z
        })
        .collect();
    let mut rows = Vec::with_capacity(spec.items_per_identity * dim);
    let mut pids = Vec::with_capacity(spec.items_per_identity);
    for _ in 0..spec.items_per_identity {
        for c in &center {
            let z: f64 = StandardNormal.sample(&mut rng);
            rows.push(c + spec.intra_spread * z);
        }
        let swap = rng.random::<f64>() < spec.outlier_rate && spec.num_identities > 1;
        let pid = if swap {
            let mut other = rng.random_range(0..spec.num_identities - 1);
            if other >= id {
                other += 1;
            }
            other
        } else {
            id
        };
        pids.push(pid as Label);
    }
    Block {
        rows,
        pids,
        true_pid: id as Label,
    }
}

/// Generates the dataset and, per row, the identity it was drawn from
/// (which differs from the stored label for outliers).
pub fn generate_with_truth(spec: &GenSpec) -> Result<(LabeledDataset, Vec<Label>)> {
    spec.validate()?;
    let blocks = par::map_range(spec.num_identities, |id| generate_block(spec, id));
    let n = spec.num_identities * spec.items_per_identity;
    let mut data = Vec::with_capacity(n * spec.feature_dim);
    let mut pids = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut cams = Vec::with_capacity(n);
    for b in blocks {
        data.extend(b.rows);
        truth.extend(std::iter::repeat_n(b.true_pid, b.pids.len()));
        cams.extend((0..b.pids.len()).map(|j| (j % spec.num_cameras) as i64));
        pids.extend(b.pids);
    }
    let features = Matrix::new(n, spec.feature_dim, data)?;
    let dataset = LabeledDataset::new(features, pids, cams, (0..n as u64).collect())?;
    Ok((dataset, truth))
}

pub fn generate(spec: &GenSpec) -> Result<LabeledDataset> {
    generate_with_truth(spec).map(|(d, _)| d)
}
