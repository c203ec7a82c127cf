//! ODMR image stacks: synthesis from a field map and per-pixel two-dip
//! Lorentzian fitting back to a field map.
//!
//! Each branch (`f−` or `f+`) is swept separately. Within a branch the
//! hyperfine doublet gives the lineshape
//!
//! ```text
//! L(f) = 1 − c₁ / (1 + ((f − f₁)/Δ₁)²) − c₂ / (1 + ((f − f₂)/Δ₂)²) + C
//! ```
//!
//! and the branch frequency is the mean of the two dip centers. The field
//! along the NV axis follows from `B_NV = (f+ − f−) / (2γ)`.

use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{self, LeastSquares, LmConfig};
use crate::model::{resonance_pair, Grid2D, NvSensorParams, ScalarRaster, Unit};

/// Which NV transition a stack sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    #[serde(rename = "f_minus")]
    Minus,
    #[serde(rename = "f_plus")]
    Plus,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Minus => "f_minus",
            Branch::Plus => "f_plus",
        }
    }

    pub fn parse(s: &str) -> Option<Branch> {
        match s {
            "f_minus" => Some(Branch::Minus),
            "f_plus" => Some(Branch::Plus),
            _ => None,
        }
    }

    fn salt(&self) -> u64 {
        match self {
            Branch::Minus => 0x6d69_6e75_735f_6f64,
            Branch::Plus => 0x706c_7573_5f6f_646d,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Normalized fluorescence versus microwave frequency for every pixel of
/// one branch. `frames[k]` is the image at `freqs[k]` (MHz).
#[derive(Debug, Clone, PartialEq)]
pub struct OdmrStack {
    grid: Grid2D,
    freqs: Vec<f64>,
    frames: Vec<ScalarRaster>,
    branch: Branch,
    sweeps_averaged: u32,
}

impl OdmrStack {
    pub fn new(
        grid: Grid2D,
        freqs: Vec<f64>,
        frames: Vec<ScalarRaster>,
        branch: Branch,
        sweeps_averaged: u32,
    ) -> Result<Self> {
        if freqs.len() < 5 {
            return Err(Error::InvalidParam(format!(
                "stack needs at least 5 frequencies, got {}",
                freqs.len()
            )));
        }
        if freqs.iter().any(|f| !f.is_finite()) || freqs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParam("frequencies must be strictly increasing".into()));
        }
        if frames.len() != freqs.len() {
            return Err(Error::InvalidParam(format!(
                "{} frames for {} frequencies",
                frames.len(),
                freqs.len()
            )));
        }
        for frame in &frames {
            if *frame.grid() != grid {
                return Err(Error::GridMismatch);
            }
            frame.ensure_unit(Unit::Dimensionless)?;
            if frame.values().iter().any(|&v| !(v > 0.0 && v < 2.0)) {
                return Err(Error::InvalidParam(
                    "normalized fluorescence must lie in (0, 2)".into(),
                ));
            }
        }
        if sweeps_averaged == 0 {
            return Err(Error::InvalidParam("sweeps_averaged must be at least 1".into()));
        }
        Ok(Self {
            grid,
            freqs,
            frames,
            branch,
            sweeps_averaged,
        })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn frames(&self) -> &[ScalarRaster] {
        &self.frames
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn sweeps_averaged(&self) -> u32 {
        self.sweeps_averaged
    }

    /// Fluorescence spectrum of the pixel at linear index `idx`.
    pub fn spectrum(&self, idx: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f.values()[idx]).collect()
    }
}

/// One Lorentzian dip.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Dip {
    /// Contrast `c`.
    pub amplitude: f64,
    /// Half width at half maximum `Δ`, MHz.
    pub linewidth: f64,
    /// Center frequency, MHz.
    pub center: f64,
}

impl Dip {
    fn eval(&self, f: f64) -> f64 {
        let u = (f - self.center) / self.linewidth;
        self.amplitude / (1.0 + u * u)
    }
}

/// Result of fitting one branch spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianFit {
    /// Hyperfine dips with `dips[0].center < dips[1].center`.
    pub dips: [Dip; 2],
    /// Background offset `C`.
    pub offset: f64,
    /// Mean of the two dip centers, MHz.
    pub branch_center: f64,
    pub residual_rms: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl LorentzianFit {
    pub fn from_dips(dips: [Dip; 2], offset: f64) -> Self {
        let mut dips = dips;
        if dips[1].center < dips[0].center {
            dips.swap(0, 1);
        }
        Self {
            branch_center: 0.5 * (dips[0].center + dips[1].center),
            dips,
            offset,
            residual_rms: 0.0,
            converged: false,
            iterations: 0,
        }
    }

    /// The doublet lineshape evaluated at `f` (MHz).
    pub fn eval(&self, f: f64) -> f64 {
        lineshape(&self.dips, self.offset, f)
    }

    /// Frequency separation of the two dips, MHz.
    pub fn splitting(&self) -> f64 {
        self.dips[1].center - self.dips[0].center
    }
}

pub fn lineshape(dips: &[Dip; 2], offset: f64, f: f64) -> f64 {
    1.0 - dips[0].eval(f) - dips[1].eval(f) + offset
}

/// Synthetic acquisition settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionParams {
    pub n_f: usize,
    pub span_mhz: f64,
    pub contrast: f64,
    /// HWHM, MHz.
    pub linewidth_mhz: f64,
    /// Background offset `C` added to every spectrum.
    pub offset: f64,
    /// Per-sweep Gaussian noise on normalized fluorescence.
    pub noise_sigma: f64,
    /// Number of averaged sweeps; effective noise is `σ/√n`.
    pub sweeps_averaged: u32,
    pub seed: u64,
}

impl Default for AcquisitionParams {
    fn default() -> Self {
        Self {
            n_f: 71,
            span_mhz: 20.0,
            contrast: 0.02,
            linewidth_mhz: 0.8,
            offset: 0.0,
            noise_sigma: 0.0,
            sweeps_averaged: 1,
            seed: 0,
        }
    }
}

impl AcquisitionParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(m.to_string()));
        if self.n_f < 7 {
            return bad("n_f must be at least 7 (free parameters of the doublet)");
        }
        if !(self.span_mhz.is_finite() && self.span_mhz > 0.0) {
            return bad("span must be positive");
        }
        if !(self.contrast > 0.0 && self.contrast < 1.0) {
            return bad("contrast must lie in (0, 1)");
        }
        if !(self.linewidth_mhz.is_finite() && self.linewidth_mhz > 0.0) {
            return bad("linewidth must be positive");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        if !self.offset.is_finite() || self.offset.abs() >= 0.5 {
            return bad("offset must be finite and below 0.5 in magnitude");
        }
        if self.sweeps_averaged == 0 {
            return bad("sweeps_averaged must be at least 1");
        }
        Ok(())
    }

    pub fn effective_sigma(&self) -> f64 {
        self.noise_sigma / (self.sweeps_averaged as f64).sqrt()
    }
}

/// Non-fatal synthesis diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthWarning {
    /// Some dips fall outside the swept band by more than 20% of the span.
    DipsOutsideSpan { branch: Branch, pixels: usize },
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub minus: OdmrStack,
    pub plus: OdmrStack,
    pub warnings: Vec<SynthWarning>,
}

/// Frequency axis `center ± span/2` with `n_f` points.
pub fn frequency_axis(center: f64, span: f64, n_f: usize) -> Vec<f64> {
    let lo = center - 0.5 * span;
    let step = span / (n_f - 1) as f64;
    (0..n_f).map(|k| lo + k as f64 * step).collect()
}

/// Synthesizes both branch stacks from a map of the total field along the
/// NV axis (mT).
///
/// Each branch is swept around the resonance of the map's mean field. The
/// noise stream of every pixel is derived from `(seed, branch, pixel)`, so
/// the output does not depend on scheduling.
pub fn synth_stack(
    b_map: &ScalarRaster,
    params: &NvSensorParams,
    acq: &AcquisitionParams,
) -> Result<SynthOutput> {
    params.validate()?;
    acq.validate()?;
    b_map.ensure_unit(Unit::Millitesla)?;
    let grid = *b_map.grid();
    let mean_b = b_map.values().iter().sum::<f64>() / grid.len() as f64;
    let sigma = acq.effective_sigma();
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::InvalidParam(e.to_string()))?;

    let pairs: Vec<(f64, f64)> = b_map
        .values()
        .iter()
        .map(|&b| resonance_pair(params, b))
        .collect::<Result<_>>()?;
    let (cm, cp) = resonance_pair(params, mean_b)?;

    let mut warnings = Vec::new();
    let mut build = |branch: Branch, center: f64| -> Result<OdmrStack> {
        let freqs = frequency_axis(center, acq.span_mhz, acq.n_f);
        let (lo, hi) = (freqs[0], freqs[acq.n_f - 1]);
        let margin = 0.2 * acq.span_mhz;
        let half_hf = 0.5 * params.hyperfine_mhz;
        let mut outside = 0;
        for &(fm, fp) in &pairs {
            let f = if branch == Branch::Minus { fm } else { fp };
            if f - half_hf < lo - margin || f + half_hf > hi + margin {
                outside += 1;
            }
        }
        if outside > 0 {
            warnings.push(SynthWarning::DipsOutsideSpan {
                branch,
                pixels: outside,
            });
        }
        let spectra: Vec<Vec<f64>> = pairs
            .par_iter()
            .enumerate()
            .map(|(idx, &(fm, fp))| {
                let f0 = if branch == Branch::Minus { fm } else { fp };
                let dips = [
                    Dip {
                        amplitude: acq.contrast,
                        linewidth: acq.linewidth_mhz,
                        center: f0 - half_hf,
                    },
                    Dip {
                        amplitude: acq.contrast,
                        linewidth: acq.linewidth_mhz,
                        center: f0 + half_hf,
                    },
                ];
                let mut rng = ChaCha8Rng::seed_from_u64(acq.seed ^ branch.salt());
                rng.set_stream(idx as u64);
                freqs
                    .iter()
                    .map(|&f| {
                        let mut v = lineshape(&dips, acq.offset, f);
                        if sigma > 0.0 {
                            v += noise.sample(&mut rng);
                        }
                        v.clamp(1e-9, 2.0 - 1e-9)
                    })
                    .collect()
            })
            .collect();
        let frames = (0..acq.n_f)
            .map(|k| {
                let values = spectra.iter().map(|s| s[k]).collect();
                ScalarRaster::from_values(grid, Unit::Dimensionless, values)
            })
            .collect::<Result<Vec<_>>>()?;
        OdmrStack::new(grid, freqs, frames, branch, acq.sweeps_averaged)
    };
    let minus = build(Branch::Minus, cm)?;
    let plus = build(Branch::Plus, cp)?;
    Ok(SynthOutput {
        minus,
        plus,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Share amplitude and linewidth between the two dips.
    pub tied: bool,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tied: false,
            max_iterations: 200,
        }
    }
}

/// A spectrum to fit; `weights` multiply squared residuals.
#[derive(Debug, Clone, Copy)]
pub struct Spectrum<'a> {
    pub freqs: &'a [f64],
    pub values: &'a [f64],
    pub weights: Option<&'a [f64]>,
}

impl<'a> Spectrum<'a> {
    pub fn new(freqs: &'a [f64], values: &'a [f64]) -> Self {
        Self {
            freqs,
            values,
            weights: None,
        }
    }
}

struct DoubletProblem {
    /// Frequencies relative to `f_ref`.
    f: Vec<f64>,
    y: Vec<f64>,
    sqrt_w: Vec<f64>,
    tied: bool,
}

impl DoubletProblem {
    // parameter layout, untied: [c1, Δ1, f1, c2, Δ2, f2, C]; tied: [c, Δ, f1, f2, C]
    fn unpack(&self, p: &[f64]) -> ([Dip; 2], f64) {
        if self.tied {
            (
                [
                    Dip {
                        amplitude: p[0],
                        linewidth: p[1],
                        center: p[2],
                    },
                    Dip {
                        amplitude: p[0],
                        linewidth: p[1],
                        center: p[3],
                    },
                ],
                p[4],
            )
        } else {
            (
                [
                    Dip {
                        amplitude: p[0],
                        linewidth: p[1],
                        center: p[2],
                    },
                    Dip {
                        amplitude: p[3],
                        linewidth: p[4],
                        center: p[5],
                    },
                ],
                p[6],
            )
        }
    }

    fn pack(&self, dips: &[Dip; 2], offset: f64) -> Vec<f64> {
        if self.tied {
            vec![
                0.5 * (dips[0].amplitude + dips[1].amplitude),
                0.5 * (dips[0].linewidth + dips[1].linewidth),
                dips[0].center,
                dips[1].center,
                offset,
            ]
        } else {
            vec![
                dips[0].amplitude,
                dips[0].linewidth,
                dips[0].center,
                dips[1].amplitude,
                dips[1].linewidth,
                dips[1].center,
                offset,
            ]
        }
    }
}

impl LeastSquares for DoubletProblem {
    fn n_params(&self) -> usize {
        if self.tied {
            5
        } else {
            7
        }
    }

    fn n_residuals(&self) -> usize {
        self.f.len()
    }

    fn residuals(&self, p: &[f64], r: &mut [f64]) {
        let (dips, c) = self.unpack(p);
        for (k, rk) in r.iter_mut().enumerate() {
            *rk = self.sqrt_w[k] * (lineshape(&dips, c, self.f[k]) - self.y[k]);
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        let (dips, _) = self.unpack(p);
        for k in 0..self.f.len() {
            let w = self.sqrt_w[k];
            let mut parts = [[0.0; 3]; 2];
            for (d, part) in dips.iter().zip(parts.iter_mut()) {
                let u = (self.f[k] - d.center) / d.linewidth;
                let l = 1.0 / (1.0 + u * u);
                let l2 = l * l;
                // ∂/∂c, ∂/∂Δ, ∂/∂f of −c·L
                *part = [
                    -l,
                    -d.amplitude * 2.0 * u * u * l2 / d.linewidth,
                    -d.amplitude * 2.0 * u * l2 / d.linewidth,
                ];
            }
            if self.tied {
                jac[(k, 0)] = w * (parts[0][0] + parts[1][0]);
                jac[(k, 1)] = w * (parts[0][1] + parts[1][1]);
                jac[(k, 2)] = w * parts[0][2];
                jac[(k, 3)] = w * parts[1][2];
                jac[(k, 4)] = w;
            } else {
                for (j, part) in parts.iter().enumerate() {
                    jac[(k, 3 * j)] = w * part[0];
                    jac[(k, 3 * j + 1)] = w * part[1];
                    jac[(k, 3 * j + 2)] = w * part[2];
                }
                jac[(k, 6)] = w;
            }
        }
    }
}

fn moving_average5(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|k| {
            let lo = k.saturating_sub(2);
            let hi = (k + 2).min(n - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

fn upper_quartile_mean(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let start = (3 * s.len()) / 4;
    let top = &s[start.min(s.len() - 1)..];
    top.iter().sum::<f64>() / top.len() as f64
}

/// HWHM estimate from the half-depth crossings around index `k`.
fn half_depth_width(f: &[f64], s: &[f64], k: usize, baseline: f64, depth: f64) -> Option<f64> {
    let half = baseline - 0.5 * depth;
    let crossing = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let mut prev = k;
        for j in range {
            if s[j] >= half {
                let (v0, v1) = (s[prev], s[j]);
                let t = if v1 != v0 { (half - v0) / (v1 - v0) } else { 0.5 };
                let fx = f[prev] + t * (f[j] - f[prev]);
                return Some((fx - f[k]).abs());
            }
            prev = j;
        }
        None
    };
    let right = crossing(&mut (k + 1..f.len()));
    let left = crossing(&mut (0..k).rev());
    match (left, right) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    }
}

/// Heuristic starting point: the two deepest local minima of a 5-point
/// moving average, depth-derived amplitudes, half-depth linewidths and an
/// upper-quartile baseline. `f` must be sorted ascending.
pub fn initial_guess(f: &[f64], y: &[f64]) -> LorentzianFit {
    let n = f.len();
    let s = moving_average5(y);
    let baseline = upper_quartile_mean(y);
    let step = (f[n - 1] - f[0]) / (n - 1) as f64;

    let mut minima: Vec<usize> = (0..n)
        .filter(|&k| {
            let left = k == 0 || s[k] < s[k - 1];
            let right = k == n - 1 || s[k] <= s[k + 1];
            left && right && k != 0 && k != n - 1
        })
        .collect();
    minima.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    let first = minima.first().copied();
    let second = first.and_then(|a| minima.iter().copied().find(|&b| b.abs_diff(a) >= 2));

    let global_min = (0..n).min_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap_or(0);
    let dip_at = |k: usize, center: f64| {
        let depth = (baseline - y[k].min(s[k])).max(0.0);
        let width = half_depth_width(f, &s, k, baseline, depth)
            .unwrap_or(2.0 * step)
            .clamp(step, 0.25 * (f[n - 1] - f[0]));
        Dip {
            amplitude: depth.min(0.9),
            linewidth: width,
            center,
        }
    };
    let dips = match (first, second) {
        (Some(a), Some(b)) => [dip_at(a, f[a]), dip_at(b, f[b])],
        (Some(a), None) => [dip_at(a, f[a] - step), dip_at(a, f[a] + step)],
        _ => [
            dip_at(global_min, f[global_min] - step),
            dip_at(global_min, f[global_min] + step),
        ],
    };
    LorentzianFit::from_dips(dips, baseline - 1.0)
}

/// Fits the two-dip Lorentzian to one spectrum by Levenberg–Marquardt.
///
/// The spectrum is sorted by frequency first, so the result does not depend
/// on sample order. Non-convergence (iteration cap, ill-conditioned normal
/// matrix, parameters outside their physical range) is reported through
/// `converged`, never as an error or panic.
pub fn fit_pixel(
    spectrum: Spectrum<'_>,
    init: Option<&LorentzianFit>,
    opts: &FitOptions,
) -> Result<LorentzianFit> {
    let n = spectrum.freqs.len();
    let n_params = if opts.tied { 5 } else { 7 };
    if spectrum.values.len() != n || spectrum.weights.is_some_and(|w| w.len() != n) {
        return Err(Error::InvalidParam("spectrum arrays differ in length".into()));
    }
    if n < n_params {
        return Err(Error::InvalidParam(format!(
            "{n} samples cannot constrain {n_params} parameters"
        )));
    }
    if spectrum.freqs.iter().chain(spectrum.values).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParam("spectrum contains non-finite samples".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| spectrum.freqs[a].total_cmp(&spectrum.freqs[b]));
    let f: Vec<f64> = order.iter().map(|&k| spectrum.freqs[k]).collect();
    let y: Vec<f64> = order.iter().map(|&k| spectrum.values[k]).collect();
    let sqrt_w: Vec<f64> = match spectrum.weights {
        Some(w) => order.iter().map(|&k| w[k].max(0.0).sqrt()).collect(),
        None => vec![1.0; n],
    };
    if f.windows(2).any(|w| w[1] == w[0]) {
        return Err(Error::InvalidParam("duplicate frequencies in spectrum".into()));
    }

    let f_ref = 0.5 * (f[0] + f[n - 1]);
    let guess = init.copied().unwrap_or_else(|| initial_guess(&f, &y));
    let shifted = guess.dips.map(|d| Dip {
        center: d.center - f_ref,
        ..d
    });
    let problem = DoubletProblem {
        f: f.iter().map(|v| v - f_ref).collect(),
        y,
        sqrt_w,
        tied: opts.tied,
    };
    let start = problem.pack(&shifted, guess.offset);
    let cfg = LmConfig {
        max_iterations: opts.max_iterations,
        ..LmConfig::default()
    };
    let rep = lm::minimize(&problem, &start, &cfg);
    let (dips, offset) = problem.unpack(&rep.params);
    let dips = dips.map(|d| Dip {
        amplitude: d.amplitude,
        linewidth: d.linewidth.abs(),
        center: d.center + f_ref,
    });
    let mut fit = LorentzianFit::from_dips(dips, offset);

    let mut r = vec![0.0; n];
    let unweighted = DoubletProblem {
        sqrt_w: vec![1.0; n],
        ..problem
    };
    unweighted.residuals(&rep.params, &mut r);
    fit.residual_rms = (r.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    fit.iterations = rep.iterations;

    let span = f[n - 1] - f[0];
    let physical = fit.dips.iter().all(|d| {
        (0.0..1.0).contains(&d.amplitude)
            && d.linewidth > 0.0
            && d.linewidth < span
            && d.center > f[0] - 0.5 * span
            && d.center < f[n - 1] + 0.5 * span
    });
    fit.converged = rep.converged && physical && fit.residual_rms.is_finite();
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractOptions {
    pub fit: FitOptions,
    /// Largest tolerated fraction of non-converged pixels.
    pub max_nonconverged_fraction: f64,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            max_nonconverged_fraction: 0.10,
        }
    }
}

/// Field map recovered from a pair of branch stacks.
#[derive(Debug, Clone)]
pub struct BnvExtraction {
    /// Total field along the NV axis, mT.
    pub map: ScalarRaster,
    /// Pixels whose fit failed and were filled from converged neighbors.
    pub infilled: Vec<bool>,
}

impl BnvExtraction {
    pub fn infilled_count(&self) -> usize {
        self.infilled.iter().filter(|&&b| b).count()
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fits both branches pixel by pixel and forms `B_NV = (f+ − f−)/(2γ)` in mT.
///
/// Pixels where either fit fails are replaced by the median of converged
/// 3×3 neighbors (or of all converged pixels when no neighbor converged)
/// and flagged in `infilled`. More than `max_nonconverged_fraction` failed
/// pixels is a quality-gate error.
pub fn extract_bnv_map(
    minus: &OdmrStack,
    plus: &OdmrStack,
    params: &NvSensorParams,
    opts: &ExtractOptions,
) -> Result<BnvExtraction> {
    params.validate()?;
    if minus.branch() != Branch::Minus || plus.branch() != Branch::Plus {
        return Err(Error::InvalidParam(format!(
            "expected (f_minus, f_plus) stacks, got ({}, {})",
            minus.branch(),
            plus.branch()
        )));
    }
    if minus.grid() != plus.grid() {
        return Err(Error::GridMismatch);
    }
    let grid = *minus.grid();
    let fits: Vec<(LorentzianFit, LorentzianFit)> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let sm = minus.spectrum(idx);
            let sp = plus.spectrum(idx);
            let a = fit_pixel(Spectrum::new(minus.freqs(), &sm), None, &opts.fit)?;
            let b = fit_pixel(Spectrum::new(plus.freqs(), &sp), None, &opts.fit)?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;

    let gamma = params.gamma_mhz_per_mt;
    let ok: Vec<bool> = fits.iter().map(|(a, b)| a.converged && b.converged).collect();
    let n_bad = ok.iter().filter(|&&c| !c).count();
    let fraction = n_bad as f64 / grid.len() as f64;
    if fraction > opts.max_nonconverged_fraction || n_bad == grid.len() {
        return Err(Error::QualityGate {
            stage: "fit".into(),
            message: format!(
                "{n_bad} of {} pixels did not converge ({:.1}% > {:.1}%)",
                grid.len(),
                100.0 * fraction,
                100.0 * opts.max_nonconverged_fraction
            ),
        });
    }

    let raw_b: Vec<f64> = fits
        .iter()
        .map(|(a, b)| (b.branch_center - a.branch_center) / (2.0 * gamma))
        .collect();
    let mut all_good: Vec<f64> = raw_b
        .iter()
        .zip(&ok)
        .filter(|(_, &c)| c)
        .map(|(&v, _)| v)
        .collect();
    let global = median(&mut all_good);

    let fill = |values: &[f64]| -> Vec<f64> {
        (0..grid.len())
            .map(|idx| {
                if ok[idx] {
                    return values[idx];
                }
                let (i, j) = (idx % grid.nx(), idx / grid.nx());
                let mut neigh = Vec::with_capacity(8);
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (ii, jj) = (i as i64 + di, j as i64 + dj);
                        if ii < 0 || jj < 0 || ii >= grid.nx() as i64 || jj >= grid.ny() as i64 {
                            continue;
                        }
                        let k = grid.linear(ii as usize, jj as usize);
                        if ok[k] {
                            neigh.push(values[k]);
                        }
                    }
                }
                if neigh.is_empty() {
                    f64::NAN
                } else {
                    median(&mut neigh)
                }
            })
            .collect()
    };
    let b = fill(&raw_b)
        .into_iter()
        .map(|v| if v.is_nan() { global } else { v })
        .collect();
    Ok(BnvExtraction {
        map: ScalarRaster::from_values(grid, Unit::Millitesla, b)?,
        infilled: ok.iter().map(|c| !c).collect(),
    })
}

/// Removes the open-circuit (bias) field: `b_total − b_openckt`.
pub fn subtract_bias(b_total: &ScalarRaster, b_openckt: &ScalarRaster) -> Result<ScalarRaster> {
    b_total.sub(b_openckt)
}

/// Uniform bias map at `params.bias_mt` on `grid`, mT.
pub fn bias_map(grid: &Grid2D, params: &NvSensorParams) -> Result<ScalarRaster> {
    ScalarRaster::new(*grid, Unit::Millitesla, params.bias_mt)
}
