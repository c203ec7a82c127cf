//! 8-bit PNG heatmaps of rasters with a JSON scale sidecar.

use std::path::{Path, PathBuf};

use image::{ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::Glyph;
use crate::io::atomic_write;
use crate::model::ScalarRaster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    /// Black at `min`, white at `max`.
    Gray,
    /// Blue at `min`, mid-gray at the center, red at `max`.
    Diverging,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub min: f64,
    pub max: f64,
    pub colormap: Colormap,
}

impl Scale {
    /// Symmetric diverging scale `±max|v|` for signed data, gray
    /// `[min, max]` otherwise.
    pub fn auto(r: &ScalarRaster) -> Self {
        let (lo, hi) = r.min_max();
        if lo < 0.0 && hi > 0.0 {
            let m = lo.abs().max(hi);
            Self {
                min: -m,
                max: m,
                colormap: Colormap::Diverging,
            }
        } else {
            Self {
                min: lo,
                max: hi,
                colormap: Colormap::Gray,
            }
        }
    }
}

/// Contents of the `.scale.json` file written next to each image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSidecar {
    pub image: String,
    pub min: f64,
    pub max: f64,
    pub unit: String,
    pub colormap: Colormap,
    pub nx: usize,
    pub ny: usize,
    pub pitch_m: f64,
    pub origin_m: (f64, f64),
    /// Number of vector glyphs drawn over the image.
    pub glyphs: usize,
}

const GLYPH_COLOR: Rgb<u8> = Rgb([255, 220, 0]);

fn color(t: f64, map: Colormap) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    match map {
        Colormap::Gray => {
            let v = q(255.0 * t);
            Rgb([v, v, v])
        }
        Colormap::Diverging => {
            let (from, to, s) = if t < 0.5 {
                ([0.0, 0.0, 255.0], [128.0, 128.0, 128.0], 2.0 * t)
            } else {
                ([128.0, 128.0, 128.0], [255.0, 0.0, 0.0], 2.0 * t - 1.0)
            };
            Rgb([0, 1, 2].map(|c| q(from[c] + (to[c] - from[c]) * s)))
        }
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64)) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        let (px, py) = (x.round(), y.round());
        if px >= 0.0 && py >= 0.0 && (px as u32) < img.width() && (py as u32) < img.height() {
            img.put_pixel(px as u32, py as u32, GLYPH_COLOR);
        }
    }
}

/// Renders `r` with `y` pointing up (the first raster row is the bottom
/// image row). Glyph arrows start at their pixel and have length
/// `glyph_len·|K|/max|K|` pixels. Returns the image and the number of
/// glyphs drawn.
pub fn render(
    r: &ScalarRaster,
    scale: &Scale,
    glyphs: &[Glyph],
    glyph_len: f64,
) -> Result<(RgbImage, usize)> {
    if r.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("cannot render a raster with non-finite values".into()));
    }
    if !(scale.min.is_finite() && scale.max.is_finite()) || scale.min > scale.max {
        return Err(Error::InvalidParam("heatmap scale must be finite with min ≤ max".into()));
    }
    let (lo, hi) = r.min_max();
    let constant = lo == hi;
    if scale.min == scale.max && !constant {
        return Err(Error::Degenerate(format!(
            "heatmap scale collapses to {} for a non-constant raster",
            scale.min
        )));
    }
    let g = r.grid();
    let (nx, ny) = (g.nx() as u32, g.ny() as u32);
    let span = scale.max - scale.min;
    let mut img = RgbImage::new(nx, ny);
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            let t = if span == 0.0 { 0.5 } else { (r.get(i, j) - scale.min) / span };
            img.put_pixel(i as u32, ny - 1 - j as u32, color(t, scale.colormap));
        }
    }
    let kmax = glyphs.iter().fold(0.0_f64, |m, gl| m.max(gl.kx.hypot(gl.ky)));
    let mut drawn = 0;
    for gl in glyphs {
        let Some((i, j)) = g.index_of(gl.x, gl.y) else { continue };
        let mag = gl.kx.hypot(gl.ky);
        let len = if kmax > 0.0 { (glyph_len * mag / kmax).max(1.0) } else { 1.0 };
        let (ux, uy) = if mag > 0.0 { (gl.kx / mag, gl.ky / mag) } else { (0.0, 0.0) };
        let start = (i as f64, (ny - 1) as f64 - j as f64);
        let end = (start.0 + len * ux, start.1 - len * uy);
        draw_line(&mut img, start, end);
        drawn += 1;
    }
    Ok((img, drawn))
}

/// Path of the scale sidecar for an image path: `name.png` → `name.scale.json`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("scale.json")
}

/// Renders `r` to an 8-bit PNG at `path` and writes its scale sidecar.
/// `scale` defaults to [`Scale::auto`].
pub fn emit_heatmap(
    r: &ScalarRaster,
    scale: Option<Scale>,
    glyphs: &[Glyph],
    glyph_len: f64,
    path: &Path,
) -> Result<ScaleSidecar> {
    let scale = scale.unwrap_or_else(|| Scale::auto(r));
    let (img, drawn) = render(r, &scale, glyphs, glyph_len)?;
    let mut png = Vec::new();
    image::codecs::png::PngEncoder::new(&mut png)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, e.to_string()))?;
    atomic_write(path, &png)?;
    let g = r.grid();
    let sidecar = ScaleSidecar {
        image: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        min: scale.min,
        max: scale.max,
        unit: r.unit().to_string(),
        colormap: scale.colormap,
        nx: g.nx(),
        ny: g.ny(),
        pitch_m: g.pitch(),
        origin_m: g.origin(),
        glyphs: drawn,
    };
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::format(path, e.to_string()))?;
    atomic_write(&sidecar_path(path), &json)?;
    Ok(sidecar)
}
