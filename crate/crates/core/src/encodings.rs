//! Sine-cosine positional, superpositional, spectral group and sensor encodings.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UsatError};
use crate::geometry::{BandSubset, FootprintConfig, GeometryConfig, SpectralGroup};

pub const DEFAULT_OMEGA: f64 = 10000.0;

/// Which spectral group indices are used when only some groups are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupIndexMode {
    /// Keep the indices assigned at pre-training time.
    #[default]
    Pretrain,
    /// Re-enumerate the present groups from zero.
    Finetune,
}

impl std::str::FromStr for GroupIndexMode {
    type Err = UsatError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Self::Pretrain),
            "finetune" => Ok(Self::Finetune),
            other => Err(UsatError::Config(format!("unknown group index mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingFlags {
    pub superpos: bool,
    pub group: bool,
    pub sensor: bool,
}

impl Default for EncodingFlags {
    fn default() -> Self {
        Self {
            superpos: true,
            group: true,
            sensor: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingParams {
    pub omega: f64,
    pub d_model: usize,
    pub pos_dim: usize,
    pub group_dim: usize,
    pub sensor_dim: usize,
    pub group_index_mode: GroupIndexMode,
}

impl EncodingParams {
    /// Default split: 3/4 of the width positional (a multiple of 4) when any
    /// extra encoding is on, the rest to the extras, halved when both are on.
    pub fn allocate(d_model: usize, flags: EncodingFlags, omega: f64) -> Result<Self> {
        let (pos_dim, group_dim, sensor_dim) = if !flags.group && !flags.sensor {
            (d_model, 0, 0)
        } else {
            let pos = ((0.75 * d_model as f64) / 4.0).round() as usize * 4;
            let rest = d_model.checked_sub(pos).ok_or_else(|| {
                UsatError::Allocation(format!("d_model {d_model} too small"))
            })?;
            match (flags.group, flags.sensor) {
                (true, true) => (pos, rest / 2, rest - rest / 2),
                (true, false) => (pos, rest, 0),
                (false, true) => (pos, 0, rest),
                (false, false) => unreachable!(),
            }
        };
        let params = Self {
            omega,
            d_model,
            pos_dim,
            group_dim,
            sensor_dim,
            group_index_mode: GroupIndexMode::default(),
        };
        params.validate(flags)?;
        Ok(params)
    }

    pub fn with_mode(mut self, mode: GroupIndexMode) -> Self {
        self.group_index_mode = mode;
        self
    }

    pub fn validate(&self, flags: EncodingFlags) -> Result<()> {
        if self.pos_dim + self.group_dim + self.sensor_dim != self.d_model {
            return Err(UsatError::Allocation(format!(
                "{} + {} + {} != {}",
                self.pos_dim, self.group_dim, self.sensor_dim, self.d_model
            )));
        }
        if self.pos_dim == 0 || self.pos_dim % 4 != 0 {
            return Err(UsatError::Allocation(format!(
                "positional width {} must be a positive multiple of 4",
                self.pos_dim
            )));
        }
        if self.group_dim % 2 != 0 || self.sensor_dim % 2 != 0 {
            return Err(UsatError::Allocation(format!(
                "group width {} and sensor width {} must be even",
                self.group_dim, self.sensor_dim
            )));
        }
        if flags.group != (self.group_dim > 0) || flags.sensor != (self.sensor_dim > 0) {
            return Err(UsatError::Allocation(
                "disabled encodings must have width 0 and enabled ones a positive width".into(),
            ));
        }
        Ok(())
    }
}

/// `out[2i] = sin(pos / omega^(2i/d))`, `out[2i+1] = cos(...)`.
pub fn sincos_1d(pos: f64, d: usize, omega: f64) -> Result<Vec<f64>> {
    if d < 2 || d % 2 != 0 {
        return Err(UsatError::Dimension(format!(
            "encoding width must be even and at least 2, got {d}"
        )));
    }
    let mut out = vec![0.0; d];
    write_sincos(pos, omega, &mut out);
    Ok(out)
}

fn write_sincos(pos: f64, omega: f64, out: &mut [f64]) {
    let d = out.len() as f64;
    for (i, pair) in out.chunks_exact_mut(2).enumerate() {
        let angle = pos / omega.powf((2 * i) as f64 / d);
        pair[0] = angle.sin();
        pair[1] = angle.cos();
    }
}

/// Row half followed by column half.
pub fn posenc_2d(row: f64, col: f64, pos_dim: usize, omega: f64) -> Result<Vec<f64>> {
    if pos_dim == 0 || pos_dim % 4 != 0 {
        return Err(UsatError::Dimension(format!(
            "2d positional width must be a positive multiple of 4, got {pos_dim}"
        )));
    }
    let mut out = vec![0.0; pos_dim];
    let (r, c) = out.split_at_mut(pos_dim / 2);
    write_sincos(row, omega, r);
    write_sincos(col, omega, c);
    Ok(out)
}

/// Plain 2D encodings on a `count x count` grid starting at `offset`.
fn grid_encodings(count: usize, offset: f64, pos_dim: usize, omega: f64) -> Result<Array2<f64>> {
    let mut table = Array2::zeros((count * count, pos_dim));
    for i in 0..count {
        for j in 0..count {
            let e = posenc_2d(offset + i as f64, offset + j as f64, pos_dim, omega)?;
            table
                .row_mut(i * count + j)
                .iter_mut()
                .zip(e)
                .for_each(|(t, v)| *t = v);
        }
    }
    Ok(table)
}

/// Encodings of the reference grid, row-major `[p_ref^2, pos_dim]`.
pub fn reference_encodings(footprint: &FootprintConfig, pos_dim: usize, omega: f64) -> Result<Array2<f64>> {
    grid_encodings(
        footprint.reference_patch_count(),
        footprint.offset()?,
        pos_dim,
        omega,
    )
}

/// Each patch of `group` gets the mean of the reference encodings it covers.
pub fn superpositional(
    group: &SpectralGroup,
    footprint: &FootprintConfig,
    pos_dim: usize,
    omega: f64,
) -> Result<Array2<f64>> {
    let p_ref = footprint.reference_patch_count();
    let p = group.patch_count;
    if p == 0 || p > p_ref || p_ref % p != 0 {
        return Err(UsatError::Divisibility(format!(
            "{p_ref} % {p} != 0 (group {})",
            group.id
        )));
    }
    let reference = reference_encodings(footprint, pos_dim, omega)?;
    let b = p_ref / p;
    if b == 1 {
        return Ok(reference);
    }
    let mut out = Array2::zeros((p * p, pos_dim));
    let inv = 1.0 / (b * b) as f64;
    for i in 0..p {
        for j in 0..p {
            let mut row = out.row_mut(i * p + j);
            for u in i * b..(i + 1) * b {
                for v in j * b..(j + 1) * b {
                    row += &reference.row(u * p_ref + v);
                }
            }
            row *= inv;
        }
    }
    Ok(out)
}

/// Encodings of a group on its own patch grid, offset concentrically in its own cells.
pub fn vanilla(
    group: &SpectralGroup,
    footprint: &FootprintConfig,
    pos_dim: usize,
    omega: f64,
) -> Result<Array2<f64>> {
    let offset = crate::geometry::fine_grid_offset(
        footprint.image_footprint_m,
        footprint.max_footprint_m,
        group.patch_extent_m(),
    )?;
    grid_encodings(group.patch_count, offset, pos_dim, omega)
}

pub fn group_encoding(sp: usize, group_dim: usize, omega: f64) -> Result<Vec<f64>> {
    sincos_1d(sp as f64, group_dim, omega)
}

pub fn sensor_encoding(s: usize, sensor_dim: usize, omega: f64) -> Result<Vec<f64>> {
    sincos_1d(s as f64, sensor_dim, omega)
}

/// Spectral group index used for each present group under `mode`.
pub fn group_indices(
    config: &GeometryConfig,
    subset: &BandSubset,
    mode: GroupIndexMode,
) -> BTreeMap<usize, usize> {
    config
        .active_groups(subset)
        .into_iter()
        .enumerate()
        .map(|(k, g)| match mode {
            GroupIndexMode::Pretrain => (g.id, g.id),
            GroupIndexMode::Finetune => (g.id, k),
        })
        .collect()
}

/// Per-token `[positional | group | sensor]` encodings in token order.
pub fn compose(
    config: &GeometryConfig,
    subset: &BandSubset,
    params: &EncodingParams,
    flags: EncodingFlags,
) -> Result<Array2<f64>> {
    params.validate(flags)?;
    let groups = config.active_groups(subset);
    if groups.is_empty() {
        return Err(UsatError::EmptySubset);
    }
    let indices = group_indices(config, subset, params.group_index_mode);
    let seq_len: usize = groups.iter().map(|g| g.num_patches()).sum();
    let mut out = Array2::zeros((seq_len, params.d_model));
    let (pd, gd, sd) = (params.pos_dim, params.group_dim, params.sensor_dim);
    let mut start = 0;
    for g in groups {
        let n = g.num_patches();
        let pos = if flags.superpos {
            superpositional(g, &config.footprint, pd, params.omega)?
        } else {
            vanilla(g, &config.footprint, pd, params.omega)?
        };
        out.slice_mut(s![start..start + n, 0..pd]).assign(&pos);
        if gd > 0 {
            let e = group_encoding(indices[&g.id], gd, params.omega)?;
            for mut row in out.slice_mut(s![start..start + n, pd..pd + gd]).rows_mut() {
                row.iter_mut().zip(&e).for_each(|(t, v)| *t = *v);
            }
        }
        if sd > 0 {
            let e = sensor_encoding(g.sensor_id, sd, params.omega)?;
            for mut row in out
                .slice_mut(s![start..start + n, pd + gd..pd + gd + sd])
                .rows_mut()
            {
                row.iter_mut().zip(&e).for_each(|(t, v)| *t = *v);
            }
        }
        start += n;
    }
    Ok(out)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(f64::MIN_POSITIVE)
}

/// Cosine similarity of one coarse patch encoding against every reference
/// encoding, as a `p_ref x p_ref` map.
pub fn similarity_map(
    group: &SpectralGroup,
    footprint: &FootprintConfig,
    pos_dim: usize,
    omega: f64,
    row: usize,
    col: usize,
) -> Result<Array2<f64>> {
    let coarse = superpositional(group, footprint, pos_dim, omega)?;
    let reference = reference_encodings(footprint, pos_dim, omega)?;
    let p = group.patch_count;
    if row >= p || col >= p {
        return Err(UsatError::Range(format!("patch ({row}, {col}) outside {p}x{p} grid")));
    }
    let target = coarse.row(row * p + col).to_vec();
    let p_ref = footprint.reference_patch_count();
    Ok(Array2::from_shape_fn((p_ref, p_ref), |(u, v)| {
        cosine_similarity(&target, reference.row(u * p_ref + v).as_slice().unwrap())
    }))
}
