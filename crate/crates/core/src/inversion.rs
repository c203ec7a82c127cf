//! Sheet current density from a single-axis `B_NV` map.
//!
//! A sheet current `K` at height `h` above the NV layer produces, at depth
//! `l` below the surface (distance `d = h + l`), the Fourier-space field
//!
//! ```text
//! b̂x = −(μ0/2) e^{−kd} K̂y
//! b̂y = +(μ0/2) e^{−kd} K̂x
//! b̂z = (μ0/2) e^{−kd} · i (kx K̂y − ky K̂x) / k
//! ```
//!
//! with `f̂(k) = ∫ f(r) e^{−ik·r} dr`. Writing the current through a stream
//! function, `K̂x = i ky ĝ`, `K̂y = −i kx ĝ`, makes `k·K̂ = 0` hold identically
//! and collapses the projected field onto one scalar kernel:
//!
//! ```text
//! b̂_NV = (μ0/2) A(k) [uz k + i (ux kx + uy ky)] ĝ
//! ```
//!
//! where `u` is the NV axis and `A(k)` is `e^{−kd}` averaged over the NV
//! layer, `(e^{−kh} − e^{−k(h+h_NV)}) / (k h_NV)`. The kernel vanishes only
//! along directions where the axis is in-plane and perpendicular to `k`.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Grid2D, NvSensorParams, ScalarRaster, Unit, MU0};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// `½(1 + cos(πk/k_c))` below the cutoff, zero above.
    Hanning,
    /// Sharp cutoff at `k_c`.
    Boxcar,
    /// No filtering; only Nyquist and singular modes are dropped.
    None,
}

/// k-space low-pass filter; `cutoff_wavelength` is `λ_c = 2π/k_c` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub kind: WindowKind,
    pub cutoff_wavelength: f64,
}

impl Default for Window {
    fn default() -> Self {
        Self {
            kind: WindowKind::Hanning,
            cutoff_wavelength: 1.0e-6,
        }
    }
}

impl Window {
    pub fn weight(&self, k: f64) -> f64 {
        let kc = 2.0 * PI / self.cutoff_wavelength;
        match self.kind {
            WindowKind::None => 1.0,
            WindowKind::Boxcar => {
                if k < kc {
                    1.0
                } else {
                    0.0
                }
            }
            WindowKind::Hanning => {
                if k < kc {
                    0.5 * (1.0 + (PI * k / kc).cos())
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionOptions {
    /// Linear zero-padding factor (≥ 1).
    pub pad_factor: usize,
    pub window: Window,
    /// Width of the cosine edge taper, pixels.
    pub taper_pixels: usize,
    /// Tikhonov weight relative to the unattenuated kernel; 0 disables.
    pub tikhonov: f64,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            pad_factor: 2,
            window: Window::default(),
            taper_pixels: 8,
            tikhonov: 0.0,
        }
    }
}

impl InversionOptions {
    fn validate(&self) -> Result<()> {
        if self.pad_factor == 0 {
            return Err(Error::InvalidParam("pad factor must be at least 1".into()));
        }
        if !(self.window.cutoff_wavelength.is_finite() && self.window.cutoff_wavelength > 0.0) {
            return Err(Error::InvalidParam("window cutoff must be positive".into()));
        }
        if !(self.tikhonov.is_finite() && self.tikhonov >= 0.0) {
            return Err(Error::InvalidParam("tikhonov weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Reconstructed sheet current density, A/m.
#[derive(Debug, Clone)]
pub struct CurrentDensityMap {
    pub kx: ScalarRaster,
    pub ky: ScalarRaster,
    pub kmag: ScalarRaster,
    pub standoff_used: f64,
    pub options: InversionOptions,
    pub source_grid: Grid2D,
    pub warnings: Vec<String>,
}

impl CurrentDensityMap {
    /// Builds a map from component rasters, computing `|K|`.
    pub fn from_components(
        kx: ScalarRaster,
        ky: ScalarRaster,
        standoff_used: f64,
        options: InversionOptions,
    ) -> Result<Self> {
        kx.ensure_unit(Unit::AmperePerMeter)?;
        kx.ensure_compatible(&ky)?;
        let kmag = kx.zip_with(&ky, |a, b| a.hypot(b))?;
        Ok(Self {
            source_grid: *kx.grid(),
            kx,
            ky,
            kmag,
            standoff_used,
            options,
            warnings: Vec::new(),
        })
    }

    /// Zeroes every pixel for which `keep(x, y)` is false.
    pub fn masked(&self, keep: impl Fn(f64, f64) -> bool) -> Result<Self> {
        let g = self.source_grid;
        let mask: Vec<bool> = (0..g.len())
            .map(|k| {
                let (x, y) = g.coord_of_index(k);
                keep(x, y)
            })
            .collect();
        let apply = |r: &ScalarRaster| {
            let v = r
                .values()
                .iter()
                .zip(&mask)
                .map(|(&v, &m)| if m { v } else { 0.0 })
                .collect();
            ScalarRaster::from_values(g, r.unit(), v)
        };
        Ok(Self {
            kx: apply(&self.kx)?,
            ky: apply(&self.ky)?,
            kmag: apply(&self.kmag)?,
            ..self.clone()
        })
    }
}

/// Fourier-space current components on the padded grid.
#[derive(Debug, Clone)]
pub struct FourierCurrents {
    pub nx: usize,
    pub ny: usize,
    /// Angular wavenumbers along x (length `nx`) and y (length `ny`), rad/m.
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
    /// Row-major, `y` outer.
    pub kx_hat: Vec<Complex64>,
    pub ky_hat: Vec<Complex64>,
    /// Modes kept after windowing, excluding `k = 0`, Nyquist and singular modes.
    pub retained: Vec<bool>,
    pub singular_modes: usize,
}

fn wavenumbers(n: usize, pitch: f64) -> Vec<f64> {
    let l = n as f64 * pitch;
    (0..n)
        .map(|m| {
            let m = if m < n.div_ceil(2) { m as f64 } else { m as f64 - n as f64 };
            2.0 * PI * m / l
        })
        .collect()
}

fn taper_weight(i: usize, n: usize, width: usize) -> f64 {
    if width == 0 {
        return 1.0;
    }
    let edge = i.min(n - 1 - i);
    if edge >= width {
        1.0
    } else {
        0.5 * (1.0 - (PI * (edge as f64 + 0.5) / width as f64).cos())
    }
}

/// In-place 2D FFT of a row-major `nx × ny` buffer.
fn fft2(data: &mut [Complex64], nx: usize, ny: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col): (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) = if inverse {
        (planner.plan_fft_inverse(nx), planner.plan_fft_inverse(ny))
    } else {
        (planner.plan_fft_forward(nx), planner.plan_fft_forward(ny))
    };
    data.par_chunks_mut(nx).for_each(|r| row.process(r));
    let mut t = vec![Complex64::default(); nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            t[i * ny + j] = data[j * nx + i];
        }
    }
    t.par_chunks_mut(ny).for_each(|c| col.process(c));
    for i in 0..nx {
        for j in 0..ny {
            data[j * nx + i] = t[i * ny + j];
        }
    }
}

/// Layer-averaged attenuation `⟨e^{−k(h+l)}⟩` over `l ∈ [0, h_nv]`.
pub fn layer_attenuation(k: f64, h: f64, h_nv: f64) -> f64 {
    if h_nv == 0.0 || k == 0.0 {
        return (-k * h).exp();
    }
    let x = k * h_nv;
    (-k * h).exp() * (-(-x).exp_m1()) / x
}

fn check_inputs(b_sample: &ScalarRaster, params: &NvSensorParams, h: f64, opts: &InversionOptions) -> Result<()> {
    params.validate()?;
    opts.validate()?;
    b_sample.ensure_unit(Unit::Tesla)?;
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidParam("stand-off must be positive".into()));
    }
    Ok(())
}

/// Steps 1–5 of the reconstruction: taper and pad, transform, solve the
/// projected kernel per mode, window. Exposed for diagnostics and tests.
pub fn reconstruct_spectrum(
    b_sample: &ScalarRaster,
    params: &NvSensorParams,
    h: f64,
    opts: &InversionOptions,
) -> Result<FourierCurrents> {
    check_inputs(b_sample, params, h, opts)?;
    let g = b_sample.grid();
    let (nx0, ny0) = (g.nx(), g.ny());
    let (nx, ny) = (nx0 * opts.pad_factor, ny0 * opts.pad_factor);
    let taper = opts.taper_pixels.min(nx0 / 2).min(ny0 / 2);

    let mut buf = vec![Complex64::default(); nx * ny];
    for j in 0..ny0 {
        let wy = taper_weight(j, ny0, taper);
        for i in 0..nx0 {
            let w = wy * taper_weight(i, nx0, taper);
            buf[j * nx + i] = Complex64::new(w * b_sample.get(i, j), 0.0);
        }
    }
    fft2(&mut buf, nx, ny, false);

    let kxs = wavenumbers(nx, g.pitch());
    let kys = wavenumbers(ny, g.pitch());
    let [ux, uy, uz] = params.axis();
    let half_mu0 = 0.5 * MU0;
    let tik = opts.tikhonov;

    let mut kx_hat = vec![Complex64::default(); nx * ny];
    let mut ky_hat = vec![Complex64::default(); nx * ny];
    let mut retained = vec![false; nx * ny];
    let mut singular = 0usize;
    let mut kept = 0usize;
    for (j, &ky) in kys.iter().enumerate() {
        let nyq_y = ny % 2 == 0 && j == ny / 2;
        for (i, &kx) in kxs.iter().enumerate() {
            let nyq_x = nx % 2 == 0 && i == nx / 2;
            let k = kx.hypot(ky);
            let idx = j * nx + i;
            if k == 0.0 || nyq_x || nyq_y {
                continue;
            }
            let w = opts.window.weight(k);
            if w <= 0.0 {
                continue;
            }
            kept += 1;
            let angular = Complex64::new(uz * k, ux * kx + uy * ky);
            if angular.norm() < 1e-9 * k {
                singular += 1;
                continue;
            }
            let kernel = angular * (half_mu0 * layer_attenuation(k, h, params.h_nv));
            let gh = if tik > 0.0 {
                let reg = tik * (half_mu0 * k).powi(2);
                buf[idx] * kernel.conj() / (kernel.norm_sqr() + reg)
            } else {
                buf[idx] / kernel
            } * w;
            kx_hat[idx] = Complex64::new(0.0, ky) * gh;
            ky_hat[idx] = Complex64::new(0.0, -kx) * gh;
            retained[idx] = true;
        }
    }
    if kept > 0 && singular as f64 > 0.3 * kept as f64 {
        return Err(Error::SingularKernel {
            fraction: 100.0 * singular as f64 / kept as f64,
        });
    }
    Ok(FourierCurrents {
        nx,
        ny,
        kx: kxs,
        ky: kys,
        kx_hat,
        ky_hat,
        retained,
        singular_modes: singular,
    })
}

/// Reconstructs `K = (Kx, Ky)` from a bias-free `B_NV` map (tesla) with the
/// conductor at stand-off `h` (meters).
///
/// The `k = 0` mode carries no current information and is dropped, so the
/// reconstruction has zero mean over the padded domain; use
/// [`integrate_current`] with baseline removal to recover absolute currents.
pub fn invert_bnv(
    b_sample: &ScalarRaster,
    params: &NvSensorParams,
    h: f64,
    opts: &InversionOptions,
) -> Result<CurrentDensityMap> {
    let spec = reconstruct_spectrum(b_sample, params, h, opts)?;
    let g = *b_sample.grid();
    let (nx, ny) = (spec.nx, spec.ny);
    let norm = 1.0 / (nx * ny) as f64;
    let back = |mut data: Vec<Complex64>| -> Result<ScalarRaster> {
        fft2(&mut data, nx, ny, true);
        let mut out = Vec::with_capacity(g.len());
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                out.push(data[j * nx + i].re * norm);
            }
        }
        ScalarRaster::from_values(g, Unit::AmperePerMeter, out)
    };
    let kx = back(spec.kx_hat)?;
    let ky = back(spec.ky_hat)?;
    let mut map = CurrentDensityMap::from_components(kx, ky, h, *opts)?;
    if g.pitch() > 0.5 * h {
        map.warnings.push(format!(
            "pixel pitch {:.3e} m exceeds half the stand-off {:.3e} m; resolution is pitch-limited",
            g.pitch(),
            h
        ));
    }
    Ok(map)
}

/// A straight line across a conductor, from `p0` to `p1` (meters). Current
/// is counted positive along the transect normal `ẑ × t̂`, so a transect
/// running along `+x` measures current flowing along `+y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transect {
    pub p0: (f64, f64),
    pub p1: (f64, f64),
}

impl Transect {
    pub fn length(&self) -> f64 {
        (self.p1.0 - self.p0.0).hypot(self.p1.1 - self.p0.1)
    }

    pub fn direction(&self) -> (f64, f64) {
        let l = self.length();
        ((self.p1.0 - self.p0.0) / l, (self.p1.1 - self.p0.1) / l)
    }

    pub fn normal(&self) -> (f64, f64) {
        let (tx, ty) = self.direction();
        (-ty, tx)
    }

    /// The transect translated by `offset` along its normal.
    pub fn shifted(&self, offset: f64) -> Self {
        let (nx, ny) = self.normal();
        Self {
            p0: (self.p0.0 + offset * nx, self.p0.1 + offset * ny),
            p1: (self.p1.0 + offset * nx, self.p1.1 + offset * ny),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationOptions {
    /// Number of parallel transects in the band.
    pub band_count: usize,
    /// Spacing between band transects, meters.
    pub band_spacing: f64,
    /// Subtract the mean density of the outer 10% at each transect end.
    pub baseline: bool,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self {
            band_count: 1,
            band_spacing: 0.0,
            baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentIntegral {
    /// Mean current over the band, amperes.
    pub current: f64,
    pub current_std: f64,
    /// Mean normal density over the conducting sub-segment, A/m.
    pub mean_density: f64,
    pub density_std: f64,
    pub per_transect: Vec<f64>,
}

/// Normal-component density samples along a transect at `pitch/2` steps.
pub fn transect_profile(kmap: &CurrentDensityMap, transect: &Transect) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = kmap.source_grid;
    let len = transect.length();
    if !(len >= 3.0 * g.pitch()) {
        return Err(Error::InvalidParam(format!(
            "transect of {len:.3e} m is shorter than 3 pixels"
        )));
    }
    let n_steps = (len / (0.5 * g.pitch()) - 1e-9).ceil().max(1.0) as usize;
    let ds = len / n_steps as f64;
    let (tx, ty) = transect.direction();
    let (nx, ny) = transect.normal();
    let mut s = Vec::with_capacity(n_steps + 1);
    let mut kn = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        let d = k as f64 * ds;
        let (x, y) = (transect.p0.0 + d * tx, transect.p0.1 + d * ty);
        let (a, b) = match (kmap.kx.bilinear(x, y), kmap.ky.bilinear(x, y)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidParam(format!(
                    "transect point ({x:.3e}, {y:.3e}) lies outside the map"
                )))
            }
        };
        s.push(d);
        kn.push(a * nx + b * ny);
    }
    Ok((s, kn))
}

fn integrate_one(kmap: &CurrentDensityMap, transect: &Transect, baseline: bool) -> Result<(f64, f64)> {
    let (s, mut kn) = transect_profile(kmap, transect)?;
    let n = kn.len();
    if baseline {
        let tail = (n / 10).max(2).min(n / 2);
        let ends: Vec<f64> = kn[..tail].iter().chain(&kn[n - tail..]).copied().collect();
        let b = ends.iter().sum::<f64>() / ends.len() as f64;
        kn.iter_mut().for_each(|v| *v -= b);
    }
    let current: f64 = s
        .windows(2)
        .zip(kn.windows(2))
        .map(|(s, k)| 0.5 * (s[1] - s[0]) * (k[0] + k[1]))
        .sum();
    let peak = kn.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let inside: Vec<f64> = kn.iter().copied().filter(|v| peak > 0.0 && v.abs() > 0.1 * peak).collect();
    let mean_density = if inside.is_empty() {
        0.0
    } else {
        inside.iter().sum::<f64>() / inside.len() as f64
    };
    Ok((current, mean_density))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Line integral of the density normal to a band of parallel transects.
///
/// Each transect is sampled bilinearly at `pitch/2` steps and integrated
/// with the trapezoid rule. The band is centered on `transect`.
pub fn integrate_current(
    kmap: &CurrentDensityMap,
    transect: &Transect,
    opts: &IntegrationOptions,
) -> Result<CurrentIntegral> {
    if opts.band_count == 0 {
        return Err(Error::InvalidParam("band needs at least one transect".into()));
    }
    if !(opts.band_spacing.is_finite() && opts.band_spacing >= 0.0) {
        return Err(Error::InvalidParam("band spacing must be non-negative".into()));
    }
    let mut currents = Vec::with_capacity(opts.band_count);
    let mut densities = Vec::with_capacity(opts.band_count);
    for b in 0..opts.band_count {
        let offset = (b as f64 - 0.5 * (opts.band_count - 1) as f64) * opts.band_spacing;
        let (c, d) = integrate_one(kmap, &transect.shifted(offset), opts.baseline)?;
        currents.push(c);
        densities.push(d);
    }
    let (current, current_std) = mean_std(&currents);
    let (mean_density, density_std) = mean_std(&densities);
    Ok(CurrentIntegral {
        current,
        current_std,
        mean_density,
        density_std,
        per_transect: currents,
    })
}

/// One arrow of a current-flow plot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub x: f64,
    pub y: f64,
    pub kx: f64,
    pub ky: f64,
}

impl Glyph {
    pub fn angle(&self) -> f64 {
        self.ky.atan2(self.kx)
    }
}

/// Arrows on the `stride` lattice wherever `|K| > threshold` (A/m).
pub fn vector_glyphs(kmap: &CurrentDensityMap, threshold: f64, stride: usize) -> Result<Vec<Glyph>> {
    if !(threshold >= 0.0) || stride == 0 {
        return Err(Error::InvalidParam("threshold must be ≥ 0 and stride ≥ 1".into()));
    }
    let g = kmap.source_grid;
    let mut out = Vec::new();
    for j in (0..g.ny()).step_by(stride) {
        for i in (0..g.nx()).step_by(stride) {
            if kmap.kmag.get(i, j) > threshold {
                let (x, y) = g.coord(i, j);
                out.push(Glyph {
                    x,
                    y,
                    kx: kmap.kx.get(i, j),
                    ky: kmap.ky.get(i, j),
                });
            }
        }
    }
    Ok(out)
}
