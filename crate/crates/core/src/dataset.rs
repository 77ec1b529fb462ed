//! Labeled feature (or embedding) tables and their CSV form.
//!
//! Files carry a header `item_id,pid,cam,<p>0,...,<p>{F-1}` where the column
//! prefix `<p>` is `f` for raw features and `e` for embeddings. Floats are
//! written with the shortest representation that parses back to the same value.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::Label;
use crate::matrix::Matrix;

pub const FEATURE_PREFIX: &str = "f";
pub const EMBEDDING_PREFIX: &str = "e";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    pids: Vec<Label>,
    cams: Vec<i64>,
    item_ids: Vec<u64>,
    by_identity: BTreeMap<Label, Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, pids: Vec<Label>, cams: Vec<i64>, item_ids: Vec<u64>) -> Result<Self> {
        let n = features.rows();
        if pids.len() != n || cams.len() != n || item_ids.len() != n {
            return Err(Error::dim(format!(
                "{n} feature rows but {} pids, {} cams, {} item ids",
                pids.len(),
                cams.len(),
                item_ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = item_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Parse(format!("duplicate item_id {dup}")));
        }
        let mut by_identity: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (i, &p) in pids.iter().enumerate() {
            by_identity.entry(p).or_default().push(i);
        }
        Ok(Self {
            features,
            pids,
            cams,
            item_ids,
            by_identity,
        })
    }

    pub fn len(&self) -> usize {
        self.pids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn pids(&self) -> &[Label] {
        &self.pids
    }

    pub fn cams(&self) -> &[i64] {
        &self.cams
    }

    pub fn item_ids(&self) -> &[u64] {
        &self.item_ids
    }

    pub fn pid(&self, i: usize) -> Label {
        self.pids[i]
    }

    /// Row indices per identity, identities in ascending order.
    pub fn identities(&self) -> &BTreeMap<Label, Vec<usize>> {
        &self.by_identity
    }

    pub fn num_identities(&self) -> usize {
        self.by_identity.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.pids[i]).collect(),
            indices.iter().map(|&i| self.cams[i]).collect(),
            indices.iter().map(|&i| self.item_ids[i]).collect(),
        )
    }

    /// Same rows and labels with different vectors (e.g. embeddings).
    pub fn with_features(&self, features: Matrix) -> Result<Self> {
        if features.rows() != self.len() {
            return Err(Error::dim(format!(
                "{} rows replaced by {}",
                self.len(),
                features.rows()
            )));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Concatenates rows; item ids must stay unique.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(Error::dim(format!(
                "cannot stack width {} onto width {}",
                other.dim(),
                self.dim()
            )));
        }
        let rows: Vec<&[f64]> = self
            .features
            .iter_rows()
            .chain(other.features.iter_rows())
            .collect();
        let mut features = Matrix::from_rows(&rows)?;
        if rows.is_empty() {
            features = Matrix::zeros(0, self.dim().max(other.dim()));
        }
        Self::new(
            features,
            [self.pids.as_slice(), &other.pids].concat(),
            [self.cams.as_slice(), &other.cams].concat(),
            [self.item_ids.as_slice(), &other.item_ids].concat(),
        )
    }

    /// Splits off `holdout` randomly chosen identities (all of their rows).
    pub fn split_identities<R: Rng + ?Sized>(&self, holdout: usize, rng: &mut R) -> Result<(Self, Self)> {
        let mut ids: Vec<Label> = self.by_identity.keys().copied().collect();
        if holdout == 0 || holdout >= ids.len() {
            return Err(Error::config(format!(
                "cannot hold out {holdout} of {} identities",
                ids.len()
            )));
        }
        ids.shuffle(rng);
        let held: HashSet<Label> = ids[..holdout].iter().copied().collect();
        let (mut keep, mut out) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            if held.contains(&self.pids[i]) {
                out.push(i);
            } else {
                keep.push(i);
            }
        }
        Ok((self.subset(&keep)?, self.subset(&out)?))
    }

    /// Splits rows into queries (first row of every identity/camera group) and
    /// gallery (everything else).
    pub fn query_gallery_split(&self) -> Result<(Self, Self)> {
        let mut seen = HashSet::new();
        let (mut q, mut g) = (Vec::new(), Vec::new());
        for i in 0..self.len() {
            if seen.insert((self.pids[i], self.cams[i])) {
                q.push(i);
            } else {
                g.push(i);
            }
        }
        Ok((self.subset(&q)?, self.subset(&g)?))
    }

    pub fn write_csv<W: Write>(&self, mut w: W, prefix: &str) -> Result<()> {
        let mut header = String::from("item_id,pid,cam");
        for j in 0..self.dim() {
            header.push_str(&format!(",{prefix}{j}"));
        }
        writeln!(w, "{header}")?;
        for i in 0..self.len() {
            let mut line = format!("{},{},{}", self.item_ids[i], self.pids[i], self.cams[i]);
            for v in self.features.row(i) {
                line.push(',');
                line.push_str(&format_float(*v));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>, prefix: &str) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_csv(&mut w, prefix)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a table whose vector columns use `prefix`.
    pub fn read_csv<R: Read>(r: R, prefix: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.len() < 3 || &headers[0] != "item_id" || &headers[1] != "pid" || &headers[2] != "cam" {
            return Err(Error::Parse(
                "header must start with item_id,pid,cam".to_string(),
            ));
        }
        let width = headers.len() - 3;
        for (j, h) in headers.iter().skip(3).enumerate() {
            if h != format!("{prefix}{j}") {
                return Err(Error::Parse(format!(
                    "column {} should be '{prefix}{j}', found '{h}'",
                    j + 3
                )));
            }
        }
        let (mut ids, mut pids, mut cams, mut data) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let at = |what: &str| Error::Parse(format!("record {}: bad {what}", line + 1));
            ids.push(rec[0].parse::<u64>().map_err(|_| at("item_id"))?);
            pids.push(rec[1].parse::<Label>().map_err(|_| at("pid"))?);
            cams.push(rec[2].parse::<i64>().map_err(|_| at("cam"))?);
            for v in rec.iter().skip(3) {
                let x: f64 = v.parse().map_err(|_| at("value"))?;
                if !x.is_finite() {
                    return Err(at("non-finite value"));
                }
                data.push(x);
            }
        }
        let rows = ids.len();
        Self::new(Matrix::new(rows, width, data)?, pids, cams, ids)
    }

    pub fn load_csv(path: impl AsRef<Path>, prefix: &str) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Parse(format!("cannot open {}: {e}", path.display())))?;
        Self::read_csv(std::io::BufReader::new(file), prefix)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Shortest round-trip decimal form of a float.
pub fn format_float(v: f64) -> String {
    // Display for f64 already emits the shortest string that parses back exactly.
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> LabeledDataset {
        let f = Matrix::from_rows(&[[0.1, -2.5], [1.0 / 3.0, 4e-9], [7.0, 0.0], [1e300, -0.0]]).unwrap();
        LabeledDataset::new(f, vec![1, 1, 2, 3], vec![0, 1, 0, 1], vec![10, 11, 12, 13]).unwrap()
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let d = small();
        let mut buf = Vec::new();
        d.write_csv(&mut buf, FEATURE_PREFIX).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("item_id,pid,cam,f0,f1\n"));
        let back = LabeledDataset::read_csv(buf.as_slice(), FEATURE_PREFIX).unwrap();
        assert_eq!(back, d);
        let mut again = Vec::new();
        back.write_csv(&mut again, FEATURE_PREFIX).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn csv_rejects_wrong_prefix_and_duplicates() {
        let d = small();
        let mut buf = Vec::new();
        d.write_csv(&mut buf, EMBEDDING_PREFIX).unwrap();
        assert!(LabeledDataset::read_csv(buf.as_slice(), FEATURE_PREFIX).is_err());
        let dup = "item_id,pid,cam,f0\n1,0,0,0.5\n1,0,1,0.25\n";
        assert!(LabeledDataset::read_csv(dup.as_bytes(), FEATURE_PREFIX).is_err());
        let bad = "item_id,pid,cam,f0\n1,0,0,abc\n";
        assert!(LabeledDataset::read_csv(bad.as_bytes(), FEATURE_PREFIX).is_err());
    }

    #[test]
    fn identity_split_is_disjoint() {
        let f = Matrix::zeros(12, 1);
        let pids = (0..12).map(|i| i / 2).collect();
        let d = LabeledDataset::new(f, pids, vec![0; 12], (0..12).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = d.split_identities(2, &mut rng).unwrap();
        assert_eq!(b.num_identities(), 2);
        assert_eq!(a.num_identities(), 4);
        assert!(a.identities().keys().all(|k| !b.identities().contains_key(k)));
        assert_eq!(a.len() + b.len(), 12);
    }

    #[test]
    fn query_gallery_split_takes_first_per_camera() {
        let f = Matrix::zeros(5, 1);
        let d = LabeledDataset::new(f, vec![0, 0, 0, 1, 1], vec![0, 0, 1, 0, 0], (0..5).collect()).unwrap();
        let (q, g) = d.query_gallery_split().unwrap();
        assert_eq!(q.item_ids(), &[0, 2, 3]);
        assert_eq!(g.item_ids(), &[1, 4]);
    }
}
