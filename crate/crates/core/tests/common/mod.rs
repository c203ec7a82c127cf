//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use qdm_core::config::PipelineConfig;
use qdm_core::model::{NvSensorParams, MU0};

/// Filament count of the brute-force sheet quadrature.
pub const SHEET_FILAMENTS: usize = 10_000;

/// Field `(B_lateral, B_z)` of a `+y`-flowing sheet of width `w` carrying
/// `current`, at lateral offset `x` and distance `d` below the sheet, by
/// summing `n` infinite straight wires placed at the midpoints of equal
/// sub-strips.
pub fn sheet_quadrature(current: f64, w: f64, x: f64, d: f64, n: usize) -> (f64, f64) {
    let di = current / n as f64;
    let mut bx = 0.0;
    let mut bz = 0.0;
    for k in 0..n {
        let s = -0.5 * w + (k as f64 + 0.5) * w / n as f64;
        let r2 = (x - s) * (x - s) + d * d;
        let c = MU0 * di / (2.0 * std::f64::consts::PI * r2);
        bx -= c * d;
        bz -= c * (x - s);
    }
    (bx, bz)
}

/// Layer average of `f(l)` over `[0, h_nv]` by a fine midpoint rule.
pub fn midpoint_layer_mean(f: impl Fn(f64) -> f64, h_nv: f64, n: usize) -> f64 {
    if h_nv == 0.0 {
        return f(0.0);
    }
    let dl = h_nv / n as f64;
    (0..n).map(|k| f((k as f64 + 0.5) * dl)).sum::<f64>() / n as f64
}

/// NV projection of a `+y` strip field computed from the quadrature.
pub fn projected_quadrature(params: &NvSensorParams, current: f64, w: f64, x: f64, d: f64) -> f64 {
    let (bx, bz) = sheet_quadrature(current, w, x, d, SHEET_FILAMENTS);
    let [ux, _, uz] = params.axis();
    bx * ux + bz * uz
}

/// Two-point Lorentzian doublet sampled on `freqs`.
pub fn doublet(freqs: &[f64], centers: [f64; 2], c: f64, hwhm: f64, offset: f64) -> Vec<f64> {
    freqs
        .iter()
        .map(|&f| {
            let l = |f0: f64| c / (1.0 + ((f - f0) / hwhm).powi(2));
            1.0 - l(centers[0]) - l(centers[1]) + offset
        })
        .collect()
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Loads a shipped scenario with its input and output redirected to `dir`.
pub fn scenario(name: &str, dir: &std::path::Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(&config_path(name)).expect("scenario config parses");
    cfg.io.out_dir = dir.to_path_buf();
    cfg.io.input_dir = dir.to_path_buf();
    cfg
}
