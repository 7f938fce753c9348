//! Binary PGM (P5) and PPM (P6) images.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

/// Linear map of `[lo, hi]` onto `0..=255`, clamped.
pub fn to_u8(img: &Array2<f64>, lo: f64, hi: f64) -> Array2<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    img.mapv(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn min_max(img: &Array2<f64>) -> (f64, f64) {
    img.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

pub fn write_pgm(path: &Path, img: &Array2<u8>) -> std::io::Result<()> {
    let (h, w) = img.dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    for v in img.iter() {
        f.write_all(&[*v])?;
    }
    f.flush()
}

/// Three equally sized channels as one colour image.
pub fn write_ppm(path: &Path, rgb: [&Array2<u8>; 3]) -> std::io::Result<()> {
    let (h, w) = rgb[0].dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{w} {h}\n255\n")?;
    for r in 0..h {
        for c in 0..w {
            f.write_all(&[rgb[0][[r, c]], rgb[1][[r, c]], rgb[2][[r, c]]])?;
        }
    }
    f.flush()
}

/// Panels side by side, separated by `gap` columns of zeros.
pub fn hstack(panels: &[Array2<u8>], gap: usize) -> Array2<u8> {
    let h = panels[0].nrows();
    let w: usize = panels.iter().map(|p| p.ncols()).sum::<usize>() + gap * (panels.len() - 1);
    let mut out = Array2::zeros((h, w));
    let mut x = 0;
    for p in panels {
        out.slice_mut(ndarray::s![.., x..x + p.ncols()]).assign(p);
        x += p.ncols() + gap;
    }
    out
}
