//! Raster records, the binary raster file format, cropping and bilinear resampling.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UsatError};

pub const RASTER_MAGIC: &[u8] = b"USRAS1\n";

const ALIGN_TOL: f64 = 1e-6;

/// Ground-coordinate square. `origin_m` is the top-left corner; x grows
/// with columns and y grows with rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub origin_m: (f64, f64),
    pub size_m: f64,
}

impl Footprint {
    pub fn new(x: f64, y: f64, size_m: f64) -> Self {
        Self {
            origin_m: (x, y),
            size_m,
        }
    }

    pub fn contains(&self, other: &Footprint) -> bool {
        let eps = ALIGN_TOL * self.size_m.max(1.0);
        other.origin_m.0 >= self.origin_m.0 - eps
            && other.origin_m.1 >= self.origin_m.1 - eps
            && other.origin_m.0 + other.size_m <= self.origin_m.0 + self.size_m + eps
            && other.origin_m.1 + other.size_m <= self.origin_m.1 + self.size_m + eps
    }

    pub fn max_corner(&self) -> (f64, f64) {
        (self.origin_m.0 + self.size_m, self.origin_m.1 + self.size_m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AnnotationGeometry {
    Point { x: f64, y: f64 },
    Box { x0: f64, y0: f64, x1: f64, y1: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class: String,
    pub geometry: AnnotationGeometry,
}

impl Annotation {
    /// Point inside the half-open square, or box overlapping it.
    pub fn intersects(&self, fp: &Footprint) -> bool {
        let (fx0, fy0) = fp.origin_m;
        let (fx1, fy1) = fp.max_corner();
        match self.geometry {
            AnnotationGeometry::Point { x, y } => x >= fx0 && x < fx1 && y >= fy0 && y < fy1,
            AnnotationGeometry::Box { x0, y0, x1, y1 } => {
                let (bx0, bx1) = (x0.min(x1), x0.max(x1));
                let (by0, by1) = (y0.min(y1), y0.max(y1));
                bx0 < fx1 && bx1 >= fx0 && by0 < fy1 && by1 >= fy0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordBand {
    pub name: String,
    pub gsd: f64,
    /// Relative to the store directory.
    pub file: String,
}

/// Image metadata as listed in a store manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterRecord {
    pub id: String,
    pub sensor: String,
    pub origin_m: (f64, f64),
    pub footprint_m: f64,
    /// Seconds since epoch.
    pub timestamp: i64,
    pub bands: Vec<RecordBand>,
    #[serde(default)]
    pub annotations: Vec<Annotation>,
}

impl RasterRecord {
    pub fn footprint(&self) -> Footprint {
        Footprint {
            origin_m: self.origin_m,
            size_m: self.footprint_m,
        }
    }
}

/// A record with its pixels in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedRecord {
    pub record: RasterRecord,
    pub pixels: IndexMap<String, Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterHeader {
    pub band: String,
    pub rows: usize,
    pub cols: usize,
    pub gsd: f64,
    pub origin: (f64, f64),
    pub timestamp: i64,
}

/// Writes magic, one JSON header line, then little-endian f32 pixels row-major.
pub fn write_raster(path: &Path, header: &RasterHeader, pixels: ArrayView2<f64>) -> Result<()> {
    if pixels.dim() != (header.rows, header.cols) {
        return Err(UsatError::Shape(format!(
            "header says {}x{}, pixels are {:?}",
            header.rows,
            header.cols,
            pixels.dim()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RASTER_MAGIC)?;
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n")?;
    for v in pixels.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raster(path: &Path) -> Result<(RasterHeader, Array2<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if magic != RASTER_MAGIC {
        return Err(UsatError::Format(format!("{}: bad magic", path.display())));
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: RasterHeader = serde_json::from_str(line.trim_end_matches('\n'))?;
    let n = header.rows * header.cols;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(UsatError::Format(format!(
            "{}: {} trailing bytes",
            path.display(),
            rest.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let pixels = Array2::from_shape_vec((header.rows, header.cols), values)
        .map_err(|e| UsatError::Shape(e.to_string()))?;
    Ok((header, pixels))
}

fn integral(v: f64) -> Option<usize> {
    let r = v.round();
    ((v - r).abs() <= ALIGN_TOL * v.abs().max(1.0) && r >= 0.0).then_some(r as usize)
}

/// Copies the pixel window covering `target` out of every band.
pub fn crop_to(record: &LoadedRecord, target: Footprint) -> Result<LoadedRecord> {
    if !record.record.footprint().contains(&target) {
        return Err(UsatError::OutOfBounds(format!(
            "{:?} not inside record {} ({:?}, {} m)",
            target, record.record.id, record.record.origin_m, record.record.footprint_m
        )));
    }
    let mut out = record.clone();
    for band in &record.record.bands {
        let px = &record.pixels[&band.name];
        let dx = (target.origin_m.0 - record.record.origin_m.0) / band.gsd;
        let dy = (target.origin_m.1 - record.record.origin_m.1) / band.gsd;
        let size = target.size_m / band.gsd;
        let (c0, r0, n) = match (integral(dx), integral(dy), integral(size)) {
            (Some(c), Some(r), Some(n)) => (c, r, n),
            _ => {
                return Err(UsatError::Alignment(format!(
                    "band {} at {} m: offset ({dx}, {dy}) px, size {size} px",
                    band.name, band.gsd
                )))
            }
        };
        if r0 + n > px.nrows() || c0 + n > px.ncols() {
            return Err(UsatError::OutOfBounds(format!(
                "band {} window exceeds {:?}",
                band.name,
                px.dim()
            )));
        }
        out.pixels.insert(
            band.name.clone(),
            px.slice(s![r0..r0 + n, c0..c0 + n]).to_owned(),
        );
    }
    out.record.origin_m = target.origin_m;
    out.record.footprint_m = target.size_m;
    out.record.annotations.retain(|a| a.intersects(&target));
    Ok(out)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
///
/// Output pixel `(r, c)` samples the input at `((r+0.5)k - 0.5, (c+0.5)k - 0.5)`
/// with `k = dst_gsd / src_gsd`.
pub fn bilinear_resample(band: ArrayView2<f64>, src_gsd: f64, dst_gsd: f64) -> Result<Array2<f64>> {
    if !(src_gsd > 0.0 && dst_gsd > 0.0) {
        return Err(UsatError::Shape("gsd must be positive".into()));
    }
    let k = dst_gsd / src_gsd;
    let (rows, cols) = band.dim();
    let (out_rows, out_cols) = match (integral(rows as f64 / k), integral(cols as f64 / k)) {
        (Some(r), Some(c)) if r > 0 && c > 0 => (r, c),
        _ => {
            return Err(UsatError::Shape(format!(
                "{rows}x{cols} at {src_gsd} m does not resample to whole pixels at {dst_gsd} m"
            )))
        }
    };
    if out_rows == rows && out_cols == cols {
        return Ok(band.to_owned());
    }
    let taps = |n_in: usize, i: usize| {
        let pos = ((i as f64 + 0.5) * k - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let row_taps: Vec<_> = (0..out_rows).map(|r| taps(rows, r)).collect();
    let col_taps: Vec<_> = (0..out_cols).map(|c| taps(cols, c)).collect();
    Ok(Array2::from_shape_fn((out_rows, out_cols), |(r, c)| {
        let (r0, r1, fy) = row_taps[r];
        let (c0, c1, fx) = col_taps[c];
        let top = band[[r0, c0]] * (1.0 - fx) + band[[r0, c1]] * fx;
        let bottom = band[[r1, c0]] * (1.0 - fx) + band[[r1, c1]] * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}
