//! Desk-scale stand-in for a candidate corpus.
//!
//! Every patch is a dim background with two vessel-like ridges running
//! through the three slices, a spherical Gaussian blob near the centre, and
//! pixel noise. The blob's peak intensity is drawn from `N(separation, σ)`
//! for nodules and `N(0, σ)` for non-nodules (negative peaks darken), so the
//! classes are identically distributed at `separation = 0` and the class
//! means of the blob intensity sit `separation` apart.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::patch::{Patch, PatchStore, PATCH_CHANNELS, PATCH_LEN, PATCH_SIDE};
use super::records::CandidateRecord;
use crate::error::{Error, Result};
use crate::seed;

pub const CANDIDATES_PER_SCAN: usize = 50;
const BACKGROUND: f64 = 0.2;
const RIDGE_AMPLITUDE: f64 = 0.2;
const RIDGE_WIDTH: f64 = 1.0;
const BLOB_RADIUS: (f64, f64) = (4.0, 5.5);
const CENTER_JITTER: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_positive: usize,
    pub n_negative: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_positive: 10,
            n_negative: 1000,
            separation: 0.3,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_positive == 0 || self.n_negative == 0 {
            return Err(Error::Config("both class counts must be positive".into()));
        }
        if self.n_negative < self.n_positive {
            return Err(Error::Config(format!(
                "non-nodules ({}) must be at least as many as nodules ({})",
                self.n_negative, self.n_positive
            )));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::Config(format!("separation must be >= 0, got {}", self.separation)));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise sigma must be > 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; avoids an extra dependency for one distribution
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates `n_positive + n_negative` candidates spread over
/// `ceil(n / 50)` scans, with one patch each.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Vec<CandidateRecord>, PatchStore)> {
    config.validate()?;
    let n = config.n_positive + config.n_negative;
    let mut labels: Vec<u8> = std::iter::repeat_n(1, config.n_positive)
        .chain(std::iter::repeat_n(0, config.n_negative))
        .collect();
    labels.shuffle(&mut seed::stream(config.seed, "synthetic-labels"));

    let mut coord_rng = seed::stream(config.seed, "synthetic-coords");
    let mut records = Vec::with_capacity(n);
    let mut store = PatchStore::new();
    for (i, &label) in labels.iter().enumerate() {
        let id = i as u64;
        records.push(CandidateRecord {
            candidate_id: id,
            scan_id: format!("synth-{:04}", i / CANDIDATES_PER_SCAN),
            coord_x: (coord_rng.gen_range(-150.0..150.0f64) * 100.0).round() / 100.0,
            coord_y: (coord_rng.gen_range(-150.0..150.0f64) * 100.0).round() / 100.0,
            coord_z: (coord_rng.gen_range(-300.0..0.0f64) * 100.0).round() / 100.0,
            label,
        });
        // each patch has its own stream so patches do not depend on generation order
        let mut rng = seed::stream(config.seed, &format!("synthetic-patch-{id}"));
        store.insert(id, render_patch(&mut rng, label == 1, config));
    }
    Ok((records, store))
}

struct Ridge {
    ux: f64,
    uy: f64,
    px: f64,
    py: f64,
    drift: f64,
    amplitude: f64,
}

fn render_patch(rng: &mut impl Rng, nodule: bool, config: &SyntheticConfig) -> Patch {
    let sigma = config.noise_sigma;
    let center = (PATCH_SIDE as f64 - 1.0) / 2.0;
    let peak = if nodule { config.separation } else { 0.0 } + sigma * normal(rng);
    let radius = rng.gen_range(BLOB_RADIUS.0..BLOB_RADIUS.1);
    let bx = center + rng.gen_range(-CENTER_JITTER..CENTER_JITTER);
    let by = center + rng.gen_range(-CENTER_JITTER..CENTER_JITTER);

    // ridges: lines through a random point, drifting slightly from slice to slice
    let ridges: Vec<Ridge> = (0..2)
        .map(|_| {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            Ridge {
                ux: angle.cos(),
                uy: angle.sin(),
                px: center + rng.gen_range(-16.0..16.0),
                py: center + rng.gen_range(-16.0..16.0),
                drift: rng.gen_range(-1.0..1.0),
                amplitude: RIDGE_AMPLITUDE * rng.gen_range(0.8..1.2),
            }
        })
        .collect();

    let mut values = Vec::with_capacity(PATCH_LEN);
    for y in 0..PATCH_SIDE {
        for x in 0..PATCH_SIDE {
            for c in 0..PATCH_CHANNELS {
                let dz = c as f64 - 1.0;
                let (fx, fy) = (x as f64, y as f64);
                let r2 = (fx - bx).powi(2) + (fy - by).powi(2) + dz * dz;
                let mut v = BACKGROUND + peak * (-r2 / (2.0 * radius * radius)).exp();
                for r in &ridges {
                    // distance to the line through (px + drift·dz, py) along (ux, uy)
                    let dx = fx - (r.px + r.drift * dz);
                    let dy = fy - r.py;
                    let dist = (dx * r.uy - dy * r.ux).abs();
                    v += r.amplitude * (-(dist * dist) / (2.0 * RIDGE_WIDTH * RIDGE_WIDTH)).exp();
                }
                v += sigma * normal(rng);
                values.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Patch::from_unchecked(values)
}
