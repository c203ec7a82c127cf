//! Stand-off calibration: least-squares fit of a measured `B_NV` line cut
//! across a strip to the layer-averaged analytic strip model.
//!
//! Free parameters are `ln h`, the centerline offset `x₀` and optionally the
//! current. The model shares its Simpson layer average with
//! [`crate::forward`].

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::forward::{simpson_mean, strip_partials_unit, DEFAULT_LAYER_POINTS};
use crate::lm::{minimize, LeastSquares, LmConfig, Termination};
use crate::model::{NvSensorParams, ScalarRaster, StripGeometry, Unit, MU0};

/// Iteration budget for the transect fit.
pub const MAX_FIT_ITERATIONS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct TransectFitResult {
    /// Stand-off, meters.
    pub h: f64,
    /// Current, amperes (fitted, or the fixed input value).
    pub current: f64,
    /// Centerline position along the transect coordinate, meters.
    pub center_offset: f64,
    /// RMS of the fit residuals, tesla.
    pub residual_rms: f64,
    /// Per-parameter variances `[h, x₀, I]` in SI units; `I` is zero when
    /// the current was held fixed. `None` when the normal matrix is singular.
    pub covariance_diag: Option<[f64; 3]>,
    pub converged: bool,
    pub iterations: usize,
}

struct StripFit<'a> {
    x: &'a [f64],
    b: &'a [f64],
    width: f64,
    h_nv: f64,
    /// In-plane and out-of-plane projection weights of the lateral and
    /// normal field components onto the NV axis.
    c_lat: f64,
    c_z: f64,
    layer_points: usize,
    fit_current: bool,
    fixed_current: f64,
    /// Current scale so the fitted parameter is of order one.
    i_scale: f64,
}

/// Parameter vector: `[ln(h/w), x₀/w, I/i_scale]`.
impl StripFit<'_> {
    fn unpack(&self, p: &[f64]) -> (f64, f64, f64) {
        let h = self.width * p[0].exp();
        let x0 = self.width * p[1];
        let i = if self.fit_current { self.i_scale * p[2] } else { self.fixed_current };
        (h, x0, i)
    }

    fn mean<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        if self.h_nv == 0.0 {
            f(0.0)
        } else {
            simpson_mean(f, self.h_nv, self.layer_points)
        }
    }

    fn unit_value(&self, x: f64, h: f64) -> f64 {
        self.mean(|l| {
            let s = strip_partials_unit(self.width, x, h + l);
            self.c_lat * s.bx + self.c_z * s.bz
        })
    }

    /// Layer-averaged unit-current model and its partials in `x` and `h`.
    fn unit_model(&self, x: f64, h: f64) -> (f64, f64, f64) {
        let part = |l: f64| strip_partials_unit(self.width, x, h + l);
        let v = self.mean(|l| {
            let s = part(l);
            self.c_lat * s.bx + self.c_z * s.bz
        });
        let dx = self.mean(|l| {
            let s = part(l);
            self.c_lat * s.dbx_dx + self.c_z * s.dbz_dx
        });
        let dh = self.mean(|l| {
            let s = part(l);
            self.c_lat * s.dbx_dd + self.c_z * s.dbz_dd
        });
        (v, dx, dh)
    }
}

impl LeastSquares for StripFit<'_> {
    fn n_params(&self) -> usize {
        if self.fit_current {
            3
        } else {
            2
        }
    }

    fn n_residuals(&self) -> usize {
        self.x.len()
    }

    fn residuals(&self, p: &[f64], r: &mut [f64]) {
        let (h, x0, i) = self.unpack(p);
        for (k, (&x, &b)) in self.x.iter().zip(self.b).enumerate() {
            r[k] = i * self.unit_value(x - x0, h) - b;
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        let (h, x0, i) = self.unpack(p);
        for (k, &x) in self.x.iter().enumerate() {
            let (u, du_dx, du_dh) = self.unit_model(x - x0, h);
            jac[(k, 0)] = i * du_dh * h;
            jac[(k, 1)] = -i * du_dx * self.width;
            if self.fit_current {
                jac[(k, 2)] = u * self.i_scale;
            }
        }
    }
}

/// Fits the stand-off of `strip` (whose `standoff` field is ignored) to a
/// line cut `(x, b_nv)`, with `x` the signed lateral coordinate across the
/// strip in meters and `b_nv` the bias-free projected field in tesla.
///
/// With `fit_current` false the strip's current is held fixed.
pub fn fit_standoff(
    transect: &[(f64, f64)],
    strip: &StripGeometry,
    params: &NvSensorParams,
    fit_current: bool,
) -> Result<TransectFitResult> {
    params.validate()?;
    StripGeometry { standoff: 0.0, ..*strip }.validate()?;
    if transect.len() < 10 {
        return Err(Error::InvalidParam(format!(
            "transect has {} samples; at least 10 are needed",
            transect.len()
        )));
    }
    if transect.iter().any(|(x, b)| !(x.is_finite() && b.is_finite())) {
        return Err(Error::InvalidParam("transect contains non-finite samples".into()));
    }
    let w = strip.width;
    let (xmin, xmax) = transect
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| (lo.min(x), hi.max(x)));
    if xmax - xmin < 2.0 * w {
        return Err(Error::InvalidParam(format!(
            "transect spans {:.3e} m; at least twice the strip width is needed",
            xmax - xmin
        )));
    }
    let b_peak = transect.iter().fold(0.0_f64, |m, &(_, b)| m.max(b.abs()));
    if b_peak == 0.0 {
        return Err(Error::Degenerate("transect carries no field".into()));
    }
    if !fit_current && strip.current == 0.0 {
        return Err(Error::Degenerate("fixed current is zero".into()));
    }

    let a = params.axis();
    let (lx, ly) = strip.lateral();
    let x: Vec<f64> = transect.iter().map(|p| p.0).collect();
    let b: Vec<f64> = transect.iter().map(|p| p.1).collect();
    let weight_sum: f64 = b.iter().map(|v| v.abs()).sum();
    let x0_guess = x.iter().zip(&b).map(|(x, b)| x * b.abs()).sum::<f64>() / weight_sum;
    let h_guess = 0.25 * w;
    let i_sheet = 2.0 * w * b_peak / MU0;

    let problem = StripFit {
        x: &x,
        b: &b,
        width: w,
        h_nv: params.h_nv,
        c_lat: a[0] * lx + a[1] * ly,
        c_z: a[2],
        layer_points: DEFAULT_LAYER_POINTS,
        fit_current,
        fixed_current: strip.current,
        i_scale: i_sheet,
    };
    let mut start = vec![(h_guess / w).ln(), x0_guess / w];
    if fit_current {
        // the sheet relation fixes the magnitude; the sign follows the data
        let overlap: f64 = x
            .iter()
            .zip(&b)
            .map(|(&x, &b)| problem.unit_value(x - x0_guess, h_guess) * b)
            .sum();
        start.push(if overlap < 0.0 { -1.0 } else { 1.0 });
    }

    let cfg = LmConfig {
        max_iterations: MAX_FIT_ITERATIONS,
        ..LmConfig::default()
    };
    let report = minimize(&problem, &start, &cfg);
    if matches!(report.termination, Termination::MaxIterations | Termination::NonFinite) {
        let (h, x0, i) = problem.unpack(&report.params);
        return Err(Error::NotConverged(format!(
            "stand-off fit stopped after {} iterations ({:?}) at h = {h:.4e} m, x0 = {x0:.4e} m, I = {i:.4e} A, cost = {:.3e} T²",
            report.iterations, report.termination, report.cost
        )));
    }
    let (h, x0, i) = problem.unpack(&report.params);
    let covariance_diag = report.covariance.as_ref().map(|c| {
        let var_i = if fit_current { c[(2, 2)] * problem.i_scale.powi(2) } else { 0.0 };
        [c[(0, 0)] * h * h, c[(1, 1)] * w * w, var_i]
    });
    Ok(TransectFitResult {
        h,
        current: i,
        center_offset: x0,
        residual_rms: (report.cost / x.len() as f64).sqrt(),
        covariance_diag,
        converged: report.converged,
        iterations: report.iterations,
    })
}

/// Samples a `B_NV` raster (any field unit, returned in tesla) along the
/// lateral axis of `strip`, through its center, at `step` spacing out to
/// `±half_length`. Points outside the raster are skipped.
pub fn strip_line_cut(
    map: &ScalarRaster,
    strip: &StripGeometry,
    half_length: f64,
    step: f64,
) -> Result<Vec<(f64, f64)>> {
    strip.validate()?;
    if !(step > 0.0 && half_length > 0.0) {
        return Err(Error::InvalidParam("line-cut step and length must be positive".into()));
    }
    let tesla = map.to_unit(Unit::Tesla)?;
    let (lx, ly) = strip.lateral();
    let n = (half_length / step).floor() as i64;
    Ok((-n..=n)
        .filter_map(|k| {
            let s = k as f64 * step;
            let (px, py) = (strip.center.0 + s * lx, strip.center.1 + s * ly);
            tesla.bilinear(px, py).map(|v| (s, v))
        })
        .collect())
}
