//! Sensor, spectral group and footprint declarations.
//!
//! Every other module consumes a [`GeometryConfig`]: it fixes how many
//! patches each spectral group is cut into, how large those patches are and
//! where the image sits inside the maximum footprint frame. Validation here
//! is the single place the nesting and ground-cover constraints are checked.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UsatError};

const REL_TOL: f64 = 1e-9;

pub(crate) fn approx_eq(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Bands of one sensor sharing a ground sampling distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralGroup {
    pub id: usize,
    pub sensor_id: usize,
    pub band_names: Vec<String>,
    /// Meters per pixel.
    pub gsd: f64,
    /// Patches per side.
    pub patch_count: usize,
    /// Pixels per patch side.
    pub patch_size: usize,
}

impl SpectralGroup {
    /// Raster side length in pixels.
    pub fn side(&self) -> usize {
        self.patch_count * self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patch_count * self.patch_count
    }

    /// Ground extent of one patch in meters.
    pub fn patch_extent_m(&self) -> f64 {
        self.patch_size as f64 * self.gsd
    }

    pub fn band_index(&self, band: &str) -> Option<usize> {
        self.band_names.iter().position(|b| b == band)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub sensor_id: usize,
    pub name: String,
    pub groups: Vec<SpectralGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FootprintConfig {
    #[serde(default = "default_max_footprint")]
    pub max_footprint_m: f64,
    pub image_footprint_m: f64,
    /// Ground extent of one patch of the reference fine group.
    pub fine_patch_extent_m: f64,
    /// Group whose patch grid defines global positions.
    pub reference_group: usize,
}

fn default_max_footprint() -> f64 {
    1280.0
}

impl FootprintConfig {
    /// Patches per side on the reference grid.
    pub fn reference_patch_count(&self) -> usize {
        (self.image_footprint_m / self.fine_patch_extent_m).round() as usize
    }

    /// Offset of the image's first reference cell inside the max footprint frame.
    pub fn offset(&self) -> Result<f64> {
        fine_grid_offset(
            self.image_footprint_m,
            self.max_footprint_m,
            self.fine_patch_extent_m,
        )
    }
}

/// A sensor/band pair, e.g. `sentinel2/Red`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BandKey {
    pub sensor: String,
    pub band: String,
}

impl BandKey {
    pub fn new(sensor: impl Into<String>, band: impl Into<String>) -> Self {
        Self {
            sensor: sensor.into(),
            band: band.into(),
        }
    }
}

impl std::fmt::Display for BandKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.sensor, self.band)
    }
}

/// Selected bands, kept in configuration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandSubset(Vec<BandKey>);

impl BandSubset {
    pub fn keys(&self) -> &[BandKey] {
        &self.0
    }

    pub fn contains(&self, sensor: &str, band: &str) -> bool {
        self.0.iter().any(|k| k.sensor == sensor && k.band == band)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub footprint: FootprintConfig,
    pub sensors: Vec<SensorConfig>,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self::usatlas()
    }
}

fn bands(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

impl GeometryConfig {
    /// 320 m NAIP + Sentinel-2 pairs: NAIP 1 m 20x20 patches of 16 px,
    /// Sentinel-2 10 m 4x4 patches of 8 px, Sentinel-2 20 m 2x2 patches of 8 px.
    pub fn usatlas() -> Self {
        Self::two_sensor(320.0, (20, 16), (4, 8), (2, 8))
    }

    /// 160 m variant of [`GeometryConfig::usatlas`] small enough for CPU training.
    pub fn desk() -> Self {
        Self::two_sensor(160.0, (8, 20), (4, 4), (2, 4))
    }

    fn two_sensor(
        footprint: f64,
        naip: (usize, usize),
        s2_10: (usize, usize),
        s2_20: (usize, usize),
    ) -> Self {
        Self {
            footprint: FootprintConfig {
                max_footprint_m: 1280.0,
                image_footprint_m: footprint,
                fine_patch_extent_m: naip.1 as f64,
                reference_group: 0,
            },
            sensors: vec![
                SensorConfig {
                    sensor_id: 0,
                    name: "naip".into(),
                    groups: vec![SpectralGroup {
                        id: 0,
                        sensor_id: 0,
                        band_names: bands(&["Red", "Green", "Blue"]),
                        gsd: 1.0,
                        patch_count: naip.0,
                        patch_size: naip.1,
                    }],
                },
                SensorConfig {
                    sensor_id: 1,
                    name: "sentinel2".into(),
                    groups: vec![
                        SpectralGroup {
                            id: 1,
                            sensor_id: 1,
                            band_names: bands(&["Red", "Green", "Blue", "NIR"]),
                            gsd: 10.0,
                            patch_count: s2_10.0,
                            patch_size: s2_10.1,
                        },
                        SpectralGroup {
                            id: 2,
                            sensor_id: 1,
                            band_names: bands(&[
                                "RedEdge1", "RedEdge2", "RedEdge3", "SWIR1", "SWIR2",
                            ]),
                            gsd: 20.0,
                            patch_count: s2_20.0,
                            patch_size: s2_20.1,
                        },
                    ],
                },
            ],
        }
    }

    /// Groups in token order: by sensor id, then group id.
    pub fn groups(&self) -> Vec<&SpectralGroup> {
        let mut gs: Vec<&SpectralGroup> = self.sensors.iter().flat_map(|s| &s.groups).collect();
        gs.sort_by_key(|g| (g.sensor_id, g.id));
        gs
    }

    pub fn group(&self, id: usize) -> Option<&SpectralGroup> {
        self.sensors
            .iter()
            .flat_map(|s| &s.groups)
            .find(|g| g.id == id)
    }

    pub fn sensor(&self, name: &str) -> Option<&SensorConfig> {
        self.sensors.iter().find(|s| s.name == name)
    }

    pub fn sensor_by_id(&self, id: usize) -> Option<&SensorConfig> {
        self.sensors.iter().find(|s| s.sensor_id == id)
    }

    /// Group containing `band` of `sensor`.
    pub fn group_of(&self, sensor: &str, band: &str) -> Option<&SpectralGroup> {
        self.sensor(sensor)?
            .groups
            .iter()
            .find(|g| g.band_index(band).is_some())
    }

    pub fn reference(&self) -> Result<&SpectralGroup> {
        self.group(self.footprint.reference_group).ok_or_else(|| {
            UsatError::Config(format!(
                "reference group {} not declared",
                self.footprint.reference_group
            ))
        })
    }

    /// Every configured band.
    pub fn all_bands(&self) -> BandSubset {
        let keys = self
            .groups()
            .into_iter()
            .flat_map(|g| {
                let sensor = &self.sensor_by_id(g.sensor_id).expect("sensor of group").name;
                g.band_names.iter().map(move |b| BandKey::new(sensor, b))
            })
            .collect();
        BandSubset(keys)
    }

    /// Builds a subset from optional sensor and band filters.
    ///
    /// Band names may be bare (`Red`, matching every selected sensor that has
    /// it) or qualified (`sentinel2/Red`).
    pub fn select(&self, sensors: Option<&[String]>, bands: Option<&[String]>) -> Result<BandSubset> {
        if let Some(names) = sensors {
            for n in names {
                if self.sensor(n).is_none() {
                    return Err(UsatError::Config(format!("unknown sensor {n}")));
                }
            }
        }
        if let Some(bs) = bands {
            for b in bs {
                let known = match b.split_once('/') {
                    Some((s, band)) => self.group_of(s, band).is_some(),
                    None => self
                        .sensors
                        .iter()
                        .any(|s| s.groups.iter().any(|g| g.band_index(b).is_some())),
                };
                if !known {
                    return Err(UsatError::UnknownBand(b.clone()));
                }
            }
        }
        let keys: Vec<BandKey> = self
            .all_bands()
            .0
            .into_iter()
            .filter(|k| sensors.is_none_or(|ss| ss.iter().any(|s| *s == k.sensor)))
            .filter(|k| {
                bands.is_none_or(|bs| {
                    bs.iter().any(|b| match b.split_once('/') {
                        Some((s, band)) => s == k.sensor && band == k.band,
                        None => *b == k.band,
                    })
                })
            })
            .collect();
        if keys.is_empty() {
            return Err(UsatError::EmptySubset);
        }
        Ok(BandSubset(keys))
    }

    /// Subset from explicit keys, rejecting unknown bands.
    pub fn subset(&self, keys: Vec<BandKey>) -> Result<BandSubset> {
        for k in &keys {
            if self.group_of(&k.sensor, &k.band).is_none() {
                return Err(UsatError::UnknownBand(k.to_string()));
            }
        }
        let ordered: Vec<BandKey> = self
            .all_bands()
            .0
            .into_iter()
            .filter(|k| keys.contains(k))
            .collect();
        if ordered.is_empty() {
            return Err(UsatError::EmptySubset);
        }
        Ok(BandSubset(ordered))
    }

    /// Groups with at least one selected band, in token order.
    pub fn active_groups(&self, subset: &BandSubset) -> Vec<&SpectralGroup> {
        self.groups()
            .into_iter()
            .filter(|g| {
                let sensor = &self.sensor_by_id(g.sensor_id).expect("sensor of group").name;
                g.band_names.iter().any(|b| subset.contains(sensor, b))
            })
            .collect()
    }

    /// Checks every nesting, coverage and uniqueness constraint.
    pub fn validate(&self) -> Result<()> {
        let fp = &self.footprint;
        if !(fp.image_footprint_m > 0.0 && fp.fine_patch_extent_m > 0.0) {
            return Err(UsatError::Footprint("footprints must be positive".into()));
        }
        if fp.image_footprint_m > fp.max_footprint_m * (1.0 + REL_TOL) {
            return Err(UsatError::Footprint(format!(
                "image footprint {} exceeds max footprint {}",
                fp.image_footprint_m, fp.max_footprint_m
            )));
        }

        let mut group_ids = HashSet::new();
        let mut sensor_ids = HashSet::new();
        let mut sensor_names = HashSet::new();
        for sensor in &self.sensors {
            if !sensor_ids.insert(sensor.sensor_id) {
                return Err(UsatError::DuplicateId(format!("sensor id {}", sensor.sensor_id)));
            }
            if !sensor_names.insert(sensor.name.as_str()) {
                return Err(UsatError::DuplicateId(format!("sensor name {}", sensor.name)));
            }
            let mut band_names = HashSet::new();
            for g in &sensor.groups {
                if !group_ids.insert(g.id) {
                    return Err(UsatError::DuplicateId(format!("group id {}", g.id)));
                }
                if g.sensor_id != sensor.sensor_id {
                    return Err(UsatError::Config(format!(
                        "group {} declares sensor {} but is listed under sensor {}",
                        g.id, g.sensor_id, sensor.sensor_id
                    )));
                }
                if g.band_names.is_empty() {
                    return Err(UsatError::EmptyGroup);
                }
                for b in &g.band_names {
                    if !band_names.insert(b.as_str()) {
                        return Err(UsatError::DuplicateId(format!(
                            "band {} in sensor {}",
                            b, sensor.name
                        )));
                    }
                }
                if g.patch_count == 0 || g.patch_size == 0 || !(g.gsd > 0.0) {
                    return Err(UsatError::Config(format!(
                        "group {} needs positive gsd, patch count and patch size",
                        g.id
                    )));
                }
                let cover = g.patch_count as f64 * g.patch_size as f64 * g.gsd;
                if !approx_eq(cover, fp.image_footprint_m) {
                    return Err(UsatError::Coverage(format!(
                        "group {}: {} x {} x {} = {} m, footprint is {} m",
                        g.id, g.patch_count, g.patch_size, g.gsd, cover, fp.image_footprint_m
                    )));
                }
            }
        }

        let reference = self.reference()?;
        if !approx_eq(reference.patch_extent_m(), fp.fine_patch_extent_m) {
            return Err(UsatError::Config(format!(
                "fine patch extent {} m does not match reference group extent {} m",
                fp.fine_patch_extent_m,
                reference.patch_extent_m()
            )));
        }
        let p_ref = reference.patch_count;
        for g in self.groups() {
            if g.patch_count > p_ref {
                return Err(UsatError::Divisibility(format!(
                    "group {} has {} patches per side, more than reference group {} ({})",
                    g.id, g.patch_count, reference.id, p_ref
                )));
            }
            if p_ref % g.patch_count != 0 {
                return Err(UsatError::Divisibility(format!(
                    "{} % {} != 0 (group {})",
                    p_ref, g.patch_count, g.id
                )));
            }
        }
        Ok(())
    }
}

/// Number of tokens produced for `subset`: sum of p^2 over represented groups.
pub fn sequence_length(config: &GeometryConfig, subset: &BandSubset) -> Result<usize> {
    if subset.is_empty() {
        return Err(UsatError::EmptySubset);
    }
    Ok(config
        .active_groups(subset)
        .iter()
        .map(|g| g.num_patches())
        .sum())
}

/// Offset, in reference cells, that centers an image inside the max footprint.
pub fn fine_grid_offset(
    image_footprint_m: f64,
    max_footprint_m: f64,
    fine_patch_extent_m: f64,
) -> Result<f64> {
    if image_footprint_m > max_footprint_m * (1.0 + REL_TOL) {
        return Err(UsatError::Footprint(format!(
            "image footprint {image_footprint_m} exceeds max footprint {max_footprint_m}"
        )));
    }
    if !(fine_patch_extent_m > 0.0) {
        return Err(UsatError::Footprint("patch extent must be positive".into()));
    }
    Ok((max_footprint_m - image_footprint_m) / (2.0 * fine_patch_extent_m))
}
