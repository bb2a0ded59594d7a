use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use super::records::CandidateRecord;
use crate::error::{Error, Result};
use crate::seed;

/// Scan-level partition of a dataset into `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    k: usize,
    by_candidate: BTreeMap<u64, usize>,
    by_scan: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// Builds an assignment from an explicit scan → fold map.
    pub fn from_scan_folds(
        records: &[CandidateRecord],
        k: usize,
        by_scan: BTreeMap<String, usize>,
    ) -> Result<Self> {
        let mut by_candidate = BTreeMap::new();
        for r in records {
            let fold = *by_scan
                .get(&r.scan_id)
                .ok_or_else(|| Error::Config(format!("scan {} has no fold", r.scan_id)))?;
            if fold >= k {
                return Err(Error::Config(format!("fold {fold} out of range for k={k}")));
            }
            by_candidate.insert(r.candidate_id, fold);
        }
        Ok(Self {
            k,
            by_candidate,
            by_scan,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, candidate_id: u64) -> Option<usize> {
        self.by_candidate.get(&candidate_id).copied()
    }

    pub fn fold_of_scan(&self, scan_id: &str) -> Option<usize> {
        self.by_scan.get(scan_id).copied()
    }

    /// Candidate ids in `fold`, ascending.
    pub fn members(&self, fold: usize) -> Vec<u64> {
        self.by_candidate
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(&id, _)| id)
            .collect()
    }

    /// Candidate ids outside `fold`, ascending.
    pub fn complement(&self, fold: usize) -> Vec<u64> {
        self.by_candidate
            .iter()
            .filter(|(_, &f)| f != fold)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn scans_in(&self, fold: usize) -> Vec<&str> {
        self.by_scan
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn candidate_count(&self) -> usize {
        self.by_candidate.len()
    }
}

/// Assigns whole scans to `k` folds: distinct scan ids are sorted, shuffled
/// with the `folds` stream of `seed`, and dealt round-robin, so fold sizes
/// differ by at most one scan.
pub fn split_folds(records: &[CandidateRecord], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let scans: BTreeSet<&str> = records.iter().map(|r| r.scan_id.as_str()).collect();
    if scans.len() < k {
        return Err(Error::Config(format!(
            "{} distinct scans cannot fill {k} folds",
            scans.len()
        )));
    }
    let mut order: Vec<&str> = scans.into_iter().collect();
    order.shuffle(&mut seed::stream(seed, "folds"));
    let by_scan = order
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), i % k))
        .collect();
    FoldAssignment::from_scan_folds(records, k, by_scan)
}
