//! Inconsistent random spatial masking with equal masked ground cover per group.
//!
//! Each spectral group hides `floor(p^2 * r)` of its `p^2` tokens, so groups
//! with different patch counts lose the same fraction of ground area. Draws
//! come from ChaCha8 (a counter-based stream) via a partial Fisher-Yates
//! shuffle, so a seed fully determines every mask.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UsatError};
use crate::geometry::{BandSubset, GeometryConfig};
use crate::patch_embed::TokenMeta;

pub type MaskRng = ChaCha8Rng;

pub fn mask_rng(seed: u64) -> MaskRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mask_count(p: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(UsatError::Ratio(ratio));
    }
    if p == 0 {
        return Err(UsatError::Range("patch count must be positive".into()));
    }
    Ok(((p * p) as f64 * ratio).floor() as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub ratio: f64,
    /// Group id to number of masked tokens.
    pub per_group_count: BTreeMap<usize, usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn new(config: &GeometryConfig, subset: &BandSubset, ratio: f64, seed: u64) -> Result<Self> {
        let mut per_group_count = BTreeMap::new();
        for g in config.active_groups(subset) {
            per_group_count.insert(g.id, mask_count(g.patch_count, ratio)?);
        }
        let plan = Self {
            ratio,
            per_group_count,
            seed,
        };
        plan.validate(config)?;
        Ok(plan)
    }

    pub fn validate(&self, config: &GeometryConfig) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(UsatError::Ratio(self.ratio));
        }
        for (&id, &count) in &self.per_group_count {
            let g = config
                .group(id)
                .ok_or_else(|| UsatError::Config(format!("mask plan names unknown group {id}")))?;
            if count >= g.num_patches() {
                return Err(UsatError::Range(format!(
                    "group {id} would mask {count} of {} tokens",
                    g.num_patches()
                )));
            }
        }
        Ok(())
    }
}

/// Chooses `count` of `n` indices uniformly without replacement.
pub fn choose_masked<R: Rng>(n: usize, count: usize, rng: &mut R) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let mut grid = vec![false; n];
    for &idx in &order[..count] {
        grid[idx] = true;
    }
    grid
}

/// One row-major boolean grid per group, `true` = masked.
pub fn sample_masks<R: Rng>(
    plan: &MaskPlan,
    config: &GeometryConfig,
    rng: &mut R,
) -> Result<BTreeMap<usize, Vec<bool>>> {
    plan.validate(config)?;
    let mut out = BTreeMap::new();
    for (&id, &count) in &plan.per_group_count {
        let g = config.group(id).expect("validated");
        out.insert(id, choose_masked(g.num_patches(), count, rng));
    }
    Ok(out)
}

/// Masks for a plan's own seed.
pub fn sample_masks_seeded(plan: &MaskPlan, config: &GeometryConfig) -> Result<BTreeMap<usize, Vec<bool>>> {
    sample_masks(plan, config, &mut mask_rng(plan.seed))
}

/// Flattens per-group grids into a per-token mask following `meta`.
pub fn token_mask(meta: &[TokenMeta], grids: &BTreeMap<usize, Vec<bool>>, config: &GeometryConfig) -> Vec<bool> {
    meta.iter()
        .map(|m| {
            let p = config.group(m.group_id).map(|g| g.patch_count).unwrap_or(0);
            grids
                .get(&m.group_id)
                .map(|grid| grid[m.row * p + m.col])
                .unwrap_or(false)
        })
        .collect()
}
