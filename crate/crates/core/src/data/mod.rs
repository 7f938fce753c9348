//! Samples, the raster store, the pairing pipeline and the synthetic generator.

pub mod raster;
pub mod store;
pub mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;

pub use raster::{
    bilinear_resample, crop_to, read_raster, write_raster, Annotation, AnnotationGeometry, Footprint,
    LoadedRecord, RasterHeader, RasterRecord, RecordBand,
};
pub use store::{BandStats, Dataset, NormStats, SampleEntry, Split, Store, StoreWriter};

use crate::error::{Result, UsatError};
use crate::geometry::{BandKey, GeometryConfig};
use crate::patch_embed::BandRaster;

/// Co-registered rasters of every sensor over one ground square.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rasters: IndexMap<BandKey, BandRaster>,
    /// Multi-label targets in {0, 1}.
    pub labels: Vec<f64>,
    /// Acquisition time per sensor, seconds since epoch.
    pub timestamps: BTreeMap<String, i64>,
    pub split: Split,
}

impl Sample {
    /// Applies `f` to every raster's pixels.
    pub fn map_rasters(&self, mut f: impl FnMut(&Array2<f64>) -> Array2<f64>) -> Sample {
        let mut out = self.clone();
        for r in out.rasters.values_mut() {
            r.pixels = f(&r.pixels);
        }
        out
    }
}

/// For each fine record, the containing coarse record closest in time.
///
/// Ties on |dt| go to the earlier coarse acquisition, then the smaller id.
/// Fine records without a containing coarse record are dropped.
pub fn pair_images<'a>(
    fine: &'a [RasterRecord],
    coarse: &'a [RasterRecord],
) -> Vec<(&'a RasterRecord, &'a RasterRecord)> {
    fine.iter()
        .filter_map(|f| {
            let fp = f.footprint();
            coarse
                .iter()
                .filter(|c| c.footprint().contains(&fp))
                .min_by(|a, b| {
                    let da = (a.timestamp - f.timestamp).unsigned_abs();
                    let db = (b.timestamp - f.timestamp).unsigned_abs();
                    da.cmp(&db)
                        .then(a.timestamp.cmp(&b.timestamp))
                        .then_with(|| a.id.cmp(&b.id))
                })
                .map(|c| (f, c))
        })
        .collect()
}

/// Class `c` is positive iff some annotation of class `c` intersects `footprint`.
pub fn to_multilabel(annotations: &[Annotation], footprint: &Footprint, classes: &[String]) -> Result<Vec<u8>> {
    let mut labels = vec![0u8; classes.len()];
    for a in annotations {
        let idx = classes
            .iter()
            .position(|c| *c == a.class)
            .ok_or_else(|| UsatError::UnknownClass(a.class.clone()))?;
        if a.intersects(footprint) {
            labels[idx] = 1;
        }
    }
    Ok(labels)
}

/// Resamples every band of `record` to the native GSD of its spectral group.
pub fn resample_to_native(record: &LoadedRecord, geometry: &GeometryConfig) -> Result<LoadedRecord> {
    let mut out = record.clone();
    for band in out.record.bands.iter_mut() {
        let group = geometry
            .group_of(&record.record.sensor, &band.name)
            .ok_or_else(|| UsatError::UnknownBand(format!("{}/{}", record.record.sensor, band.name)))?;
        let px = &record.pixels[&band.name];
        out.pixels
            .insert(band.name.clone(), bilinear_resample(px.view(), band.gsd, group.gsd)?);
        band.gsd = group.gsd;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairReport {
    pub fine_records: usize,
    pub paired: usize,
    pub missing_bands: usize,
    pub written: usize,
}

/// Pairs `fine_sensor` records of one store with `coarse_sensor` records of
/// another, crops the coarse image to the fine footprint, keeps pairs with
/// every configured band, resamples to native GSD and writes a sample store.
pub fn pair_stores(
    fine_store: &Store,
    coarse_store: &Store,
    out_dir: &Path,
    geometry: &GeometryConfig,
    fine_sensor: &str,
    coarse_sensor: &str,
) -> Result<PairReport> {
    let fine: Vec<RasterRecord> = fine_store
        .manifest
        .records
        .iter()
        .filter(|r| r.sensor == fine_sensor)
        .cloned()
        .collect();
    let coarse: Vec<RasterRecord> = coarse_store
        .manifest
        .records
        .iter()
        .filter(|r| r.sensor == coarse_sensor)
        .cloned()
        .collect();
    let classes = fine_store.manifest.classes.clone();
    let mut report = PairReport {
        fine_records: fine.len(),
        ..Default::default()
    };
    let pairs = pair_images(&fine, &coarse);
    report.paired = pairs.len();

    let required = |sensor: &str| -> Vec<String> {
        geometry
            .sensor(sensor)
            .map(|s| s.groups.iter().flat_map(|g| g.band_names.clone()).collect())
            .unwrap_or_default()
    };
    let (fine_bands, coarse_bands) = (required(fine_sensor), required(coarse_sensor));
    let has_all = |r: &RasterRecord, bands: &[String]| bands.iter().all(|b| r.bands.iter().any(|rb| rb.name == *b));

    let mut writer = StoreWriter::create(out_dir, classes.clone())?;
    for (f, c) in pairs {
        if !has_all(f, &fine_bands) || !has_all(c, &coarse_bands) {
            report.missing_bands += 1;
            continue;
        }
        let fine_loaded = fine_store.load_record(f)?;
        let coarse_loaded = crop_to(&coarse_store.load_record(c)?, f.footprint())?;
        let mut fine_native = resample_to_native(&fine_loaded, geometry)?;
        let mut coarse_native = resample_to_native(&coarse_loaded, geometry)?;
        fine_native.record.bands.retain(|b| fine_bands.contains(&b.name));
        coarse_native.record.bands.retain(|b| coarse_bands.contains(&b.name));

        let mut annotations = f.annotations.clone();
        annotations.extend(coarse_native.record.annotations.iter().cloned());
        let labels = to_multilabel(&annotations, &f.footprint(), &classes)?;

        let split = fine_store
            .manifest
            .samples
            .iter()
            .find(|s| s.records.contains(&f.id))
            .map(|s| s.split)
            .unwrap_or(Split::Train);
        let pair_id = format!("{}+{}", f.id, c.id);
        coarse_native.record.id = format!("{}@{}", c.id, f.id);
        writer.add_record(&fine_native)?;
        writer.add_record(&coarse_native)?;
        writer.add_sample(SampleEntry {
            id: pair_id,
            records: vec![fine_native.record.id.clone(), coarse_native.record.id.clone()],
            labels,
            split,
        })?;
        report.written += 1;
    }
    writer.finish()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, x: f64, y: f64, size: f64, t: i64) -> RasterRecord {
        RasterRecord {
            id: id.into(),
            sensor: "s".into(),
            origin_m: (x, y),
            footprint_m: size,
            timestamp: t,
            bands: vec![],
            annotations: vec![],
        }
    }

    #[test]
    fn single_pair() {
        let fine = [rec("f", 0.0, 0.0, 320.0, 100)];
        let coarse = [rec("c", -160.0, -160.0, 640.0, 0)];
        let pairs = pair_images(&fine, &coarse);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].1.id, "c");
    }

    #[test]
    fn closest_in_time_wins() {
        let fine = [rec("f", 0.0, 0.0, 320.0, 10_000)];
        let coarse = [
            rec("a", 0.0, 0.0, 320.0, 10_000 + 3600),
            rec("b", 0.0, 0.0, 320.0, 10_000 - 120),
            rec("c", 0.0, 0.0, 320.0, 10_000 + 7200),
        ];
        assert_eq!(pair_images(&fine, &coarse)[0].1.id, "b");
    }

    #[test]
    fn non_containing_excluded() {
        let fine = [rec("f", 0.0, 0.0, 320.0, 0)];
        let coarse = [rec("near", 100.0, 0.0, 320.0, 0), rec("far", 0.0, 0.0, 640.0, 9999)];
        assert_eq!(pair_images(&fine, &coarse)[0].1.id, "far");
        let coarse = [rec("near", 100.0, 0.0, 320.0, 0)];
        assert!(pair_images(&fine, &coarse).is_empty());
    }

    #[test]
    fn tie_goes_to_earlier() {
        let fine = [rec("f", 0.0, 0.0, 320.0, 1000)];
        let coarse = [rec("late", 0.0, 0.0, 320.0, 1100), rec("early", 0.0, 0.0, 320.0, 900)];
        assert_eq!(pair_images(&fine, &coarse)[0].1.id, "early");
    }

    #[test]
    fn multilabel_conversion() {
        let classes: Vec<String> = ["water", "road", "tree"].iter().map(|s| s.to_string()).collect();
        let fp = Footprint::new(0.0, 0.0, 100.0);
        assert_eq!(to_multilabel(&[], &fp, &classes).unwrap(), vec![0, 0, 0]);
        let point = Annotation {
            class: "road".into(),
            geometry: AnnotationGeometry::Point { x: 10.0, y: 10.0 },
        };
        assert_eq!(to_multilabel(&[point], &fp, &classes).unwrap(), vec![0, 1, 0]);
        let edge = Annotation {
            class: "tree".into(),
            geometry: AnnotationGeometry::Box { x0: -50.0, y0: 40.0, x1: 1.0, y1: 60.0 },
        };
        assert_eq!(to_multilabel(&[edge], &fp, &classes).unwrap(), vec![0, 0, 1]);
        let unknown = Annotation {
            class: "cloud".into(),
            geometry: AnnotationGeometry::Point { x: 1.0, y: 1.0 },
        };
        assert!(matches!(
            to_multilabel(&[unknown], &fp, &classes),
            Err(UsatError::UnknownClass(_))
        ));
    }
}
