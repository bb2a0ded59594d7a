//! Inverse-imbalanced and balanced training-set construction.
//!
//! Sampling is split in two: a *plan* (which candidate ids, with which
//! augmentation) that only needs labels, and materialisation against a
//! [`PatchStore`]. Plans are what get written to audit manifests.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{patches_to_tensor, CandidateRecord, Patch, PatchStore, PATCH_CHANNELS, PATCH_LEN, PATCH_SIDE};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    /// Degrees; positive angles turn the content clockwise as displayed
    /// (x right, y down).
    pub angle: f64,
    pub scale: f64,
}

impl AugmentationParams {
    pub const IDENTITY: Self = Self { angle: 0.0, scale: 1.0 };

    pub fn is_identity(&self) -> bool {
        self.angle.rem_euclid(360.0) == 0.0 && self.scale == 1.0
    }
}

/// `cos`/`sin` of `degrees`, exact at multiples of 90°.
fn cos_sin(degrees: f64) -> (f64, f64) {
    let d = degrees.rem_euclid(360.0);
    match d {
        0.0 => (1.0, 0.0),
        90.0 => (0.0, 1.0),
        180.0 => (-1.0, 0.0),
        270.0 => (0.0, -1.0),
        _ => {
            let r = d.to_radians();
            (r.cos(), r.sin())
        }
    }
}

/// Rotates `patch` about its centre by `params.angle` and scales it by
/// `params.scale`, sampling every channel bilinearly. Pixels outside the
/// source grid read as 0; results are clamped to `[0, 1]`.
pub fn augment(patch: &Patch, params: AugmentationParams) -> Patch {
    assert!(params.scale > 0.0, "augmentation scale must be positive");
    let (cos, sin) = cos_sin(params.angle);
    let center = (PATCH_SIDE as f64 - 1.0) / 2.0;
    let side = PATCH_SIDE as isize;
    let src = patch.values();
    let at = |y: isize, x: isize, c: usize| -> f64 {
        if (0..side).contains(&y) && (0..side).contains(&x) {
            f64::from(src[(y as usize * PATCH_SIDE + x as usize) * PATCH_CHANNELS + c])
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(PATCH_LEN);
    for y in 0..PATCH_SIDE {
        for x in 0..PATCH_SIDE {
            // inverse map: rotate by −angle, shrink by 1/scale
            let (dx, dy) = (x as f64 - center, y as f64 - center);
            let sx = center + (cos * dx + sin * dy) / params.scale;
            let sy = center + (-sin * dx + cos * dy) / params.scale;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..PATCH_CHANNELS {
                let v = if fx == 0.0 && fy == 0.0 {
                    at(y0, x0, c)
                } else {
                    (1.0 - fy) * ((1.0 - fx) * at(y0, x0, c) + fx * at(y0, x0 + 1, c))
                        + fy * ((1.0 - fx) * at(y0 + 1, x0, c) + fx * at(y0 + 1, x0 + 1, c))
                };
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Patch::new(out).expect("augment produces a valid patch")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseSamplerConfig {
    pub majority_subsample: usize,
    /// Total minority copies per original, the original included.
    pub minority_oversample_factor: usize,
    /// Half-open `[lo, hi)` in degrees.
    pub rotation_range_degrees: (f64, f64),
    /// Closed `[lo, hi]`.
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for InverseSamplerConfig {
    fn default() -> Self {
        Self {
            majority_subsample: 100,
            minority_oversample_factor: 9,
            rotation_range_degrees: (0.0, 360.0),
            scale_range: (0.9, 1.1),
            seed: 0,
        }
    }
}

impl InverseSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.majority_subsample == 0 {
            return Err(Error::Config("majority subsample must be positive".into()));
        }
        if self.minority_oversample_factor == 0 {
            return Err(Error::Config("minority oversample factor must be >= 1".into()));
        }
        let (rlo, rhi) = self.rotation_range_degrees;
        if !(rlo.is_finite() && rhi.is_finite() && rlo <= rhi) {
            return Err(Error::Config(format!("bad rotation range [{rlo}, {rhi})")));
        }
        let (slo, shi) = self.scale_range;
        if !(slo > 0.0 && slo <= shi && shi <= 2.0) {
            return Err(Error::Config(format!("scale range [{slo}, {shi}] must lie within (0, 2]")));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> AugmentationParams {
        let (rlo, rhi) = self.rotation_range_degrees;
        let (slo, shi) = self.scale_range;
        AugmentationParams {
            angle: if rlo < rhi { rng.gen_range(rlo..rhi) } else { rlo },
            scale: if slo < shi { rng.gen_range(slo..=shi) } else { slo },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedSample {
    pub candidate_id: u64,
    pub label: u8,
    pub augmentation: AugmentationParams,
}

/// Which candidates (and augmentations) make up a training set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub samples: Vec<PlannedSample>,
}

impl SamplePlan {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(nodule samples, non-nodule samples)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.samples.iter().filter(|s| s.label == 1).count();
        (pos, self.samples.len() - pos)
    }

    /// Writes `candidate_id,label,angle,scale` rows for audit.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let mut out = String::from("candidate_id,label,angle,scale\n");
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.candidate_id, s.label, s.augmentation.angle, s.augmentation.scale
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    /// Fetches and augments every planned patch.
    pub fn materialize(&self, store: &PatchStore) -> Result<TrainingSet> {
        let mut patches = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let p = store.get(s.candidate_id)?;
            patches.push(if s.augmentation.is_identity() {
                p.clone()
            } else {
                augment(p, s.augmentation)
            });
        }
        Ok(TrainingSet {
            candidate_ids: self.samples.iter().map(|s| s.candidate_id).collect(),
            labels: self.samples.iter().map(|s| s.label).collect(),
            patches,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub candidate_ids: Vec<u64>,
    pub labels: Vec<u8>,
    pub patches: Vec<Patch>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        patches_to_tensor(self.patches.iter())
    }

    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| usize::from(l)).collect()
    }
}

fn split_classes(records: &[CandidateRecord]) -> (Vec<&CandidateRecord>, Vec<&CandidateRecord>) {
    records.iter().partition(|r| r.is_nodule())
}

/// Uniform draw of `min(m, pool.len())` items without replacement, kept in pool order.
fn subsample<'a>(pool: &[&'a CandidateRecord], m: usize, rng: &mut impl Rng) -> Vec<&'a CandidateRecord> {
    if m >= pool.len() {
        return pool.to_vec();
    }
    let mut idx = sample(rng, pool.len(), m).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

/// Plan for an inverse-imbalanced set: every nodule `factor` times (first
/// copy unaugmented, the rest randomly rotated and scaled) plus
/// `min(majority_subsample, n_non_nodules)` distinct non-nodules.
pub fn plan_inverse_imbalanced(records: &[CandidateRecord], config: &InverseSamplerConfig) -> Result<SamplePlan> {
    config.validate()?;
    let (minority, majority) = split_classes(records);
    if minority.is_empty() {
        return Err(Error::Empty("no nodules to oversample; single-sided training is undefined".into()));
    }
    let mut aug_rng = seed::stream(config.seed, "augment");
    let mut samples = Vec::with_capacity(minority.len() * config.minority_oversample_factor + config.majority_subsample);
    for r in &minority {
        for copy in 0..config.minority_oversample_factor {
            samples.push(PlannedSample {
                candidate_id: r.candidate_id,
                label: 1,
                augmentation: if copy == 0 { AugmentationParams::IDENTITY } else { config.draw(&mut aug_rng) },
            });
        }
    }
    let chosen = subsample(&majority, config.majority_subsample, &mut seed::stream(config.seed, "majority"));
    samples.extend(chosen.into_iter().map(|r| PlannedSample {
        candidate_id: r.candidate_id,
        label: 0,
        augmentation: AugmentationParams::IDENTITY,
    }));
    Ok(SamplePlan { samples })
}

pub fn inverse_imbalanced_sample(
    records: &[CandidateRecord],
    store: &PatchStore,
    config: &InverseSamplerConfig,
) -> Result<TrainingSet> {
    plan_inverse_imbalanced(records, config)?.materialize(store)
}

/// Plan with `min(n_nodules, n_non_nodules)` of each class; the larger class is
/// subsampled uniformly without replacement.
pub fn plan_balanced(records: &[CandidateRecord], seed: u64) -> Result<SamplePlan> {
    let (minority, majority) = split_classes(records);
    if minority.is_empty() || majority.is_empty() {
        return Err(Error::Empty(format!(
            "balanced sampling needs both classes ({} nodules, {} non-nodules)",
            minority.len(),
            majority.len()
        )));
    }
    let m = minority.len().min(majority.len());
    let mut samples = Vec::with_capacity(2 * m);
    for (pool, label, stream) in [(&minority, 1u8, "balanced-minority"), (&majority, 0u8, "balanced-majority")] {
        let picked = subsample(pool, m, &mut seed::stream(seed, stream));
        samples.extend(picked.into_iter().map(|r| PlannedSample {
            candidate_id: r.candidate_id,
            label,
            augmentation: AugmentationParams::IDENTITY,
        }));
    }
    Ok(SamplePlan { samples })
}

pub fn balanced_sample(records: &[CandidateRecord], store: &PatchStore, seed: u64) -> Result<TrainingSet> {
    plan_balanced(records, seed)?.materialize(store)
}

/// Distinct candidate ids in a plan.
pub fn distinct_ids(plan: &SamplePlan) -> BTreeSet<u64> {
    plan.samples.iter().map(|s| s.candidate_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn asymmetric_patch() -> Patch {
        Patch::new(
            (0..PATCH_LEN)
                .map(|i| {
                    let (p, c) = (i / PATCH_CHANNELS, i % PATCH_CHANNELS);
                    let (y, x) = (p / PATCH_SIDE, p % PATCH_SIDE);
                    ((x * 7 + y * 3 + c * 11) % 97) as f32 / 96.0
                })
                .collect(),
        )
        .unwrap()
    }

    fn records(pos: usize, neg: usize) -> Vec<CandidateRecord> {
        (0..pos + neg)
            .map(|i| CandidateRecord {
                candidate_id: i as u64,
                scan_id: format!("s{}", i / 10),
                coord_x: 0.0,
                coord_y: 0.0,
                coord_z: 0.0,
                label: u8::from(i < pos),
            })
            .collect()
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let p = asymmetric_patch();
        assert_eq!(augment(&p, AugmentationParams::IDENTITY), p);
    }

    #[test]
    fn half_turn_twice_returns_original() {
        let p = asymmetric_patch();
        let half = AugmentationParams { angle: 180.0, scale: 1.0 };
        let back = augment(&augment(&p, half), half);
        for (a, b) in back.values().iter().zip(p.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn quarter_turn_matches_index_permutation() {
        let p = asymmetric_patch();
        let r = augment(&p, AugmentationParams { angle: 90.0, scale: 1.0 });
        let n = PATCH_SIDE - 1;
        for y in 0..PATCH_SIDE {
            for x in 0..PATCH_SIDE {
                for c in 0..PATCH_CHANNELS {
                    // output (x, y) reads source (x = y, y = n − x)
                    assert_eq!(r.get(y, x, c), p.get(n - x, y, c), "({y},{x},{c})");
                }
            }
        }
    }

    #[test]
    fn shrinking_pads_with_zero() {
        let bright = Patch::new(vec![1.0; PATCH_LEN]).unwrap();
        let small = augment(&bright, AugmentationParams { angle: 0.0, scale: 0.5 });
        assert_eq!(small.get(0, 0, 0), 0.0);
        assert_eq!(small.get(24, 24, 1), 1.0);
    }

    #[test]
    fn inverse_plan_counts() {
        let plan = plan_inverse_imbalanced(&records(7, 300), &InverseSamplerConfig::default()).unwrap();
        assert_eq!(plan.class_counts(), (63, 100));
        let plan = plan_inverse_imbalanced(&records(3, 50), &InverseSamplerConfig::default()).unwrap();
        assert_eq!(plan.class_counts(), (27, 50));
        let neg: BTreeSet<u64> = plan.samples.iter().filter(|s| s.label == 0).map(|s| s.candidate_id).collect();
        assert_eq!(neg.len(), 50);
    }

    #[test]
    fn inverse_plan_requires_nodules() {
        assert!(matches!(
            plan_inverse_imbalanced(&records(0, 20), &InverseSamplerConfig::default()),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn balanced_counts() {
        assert_eq!(plan_balanced(&records(5, 1000), 1).unwrap().class_counts(), (5, 5));
        assert_eq!(plan_balanced(&records(10, 10), 1).unwrap().len(), 20);
        assert_eq!(plan_balanced(&records(5, 1000), 3).unwrap(), plan_balanced(&records(5, 1000), 3).unwrap());
        assert!(plan_balanced(&records(0, 10), 1).is_err());
        assert!(plan_balanced(&records(4, 0), 1).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = InverseSamplerConfig { scale_range: (0.5, 2.5), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = InverseSamplerConfig { minority_oversample_factor: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
