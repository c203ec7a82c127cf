//! Current-mirror bookkeeping and the comparison report between expected,
//! reference, conventional and magnetometry-extracted currents.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named conductor fed by `multiplier` unit transistors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub name: String,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirrorSpec {
    /// `(W/L)` of the input transistor.
    pub input_aspect: f64,
    /// `(W/L)` of the full output stage.
    pub output_aspect: f64,
    /// Input (reference) current, amperes.
    pub i_in: f64,
    pub taps: Vec<Tap>,
}

impl MirrorSpec {
    /// Mirror whose output is `n_parallel` copies of a unit transistor with
    /// aspect ratio `unit_aspect`. The output tap is named `output`.
    pub fn from_units(unit_aspect: f64, n_parallel: u32, i_in: f64, mut taps: Vec<Tap>) -> Result<Self> {
        if n_parallel < 1 {
            return Err(Error::InvalidParam("parallel count must be at least 1".into()));
        }
        if !taps.iter().any(|t| t.name == "output") {
            taps.insert(
                0,
                Tap {
                    name: "output".into(),
                    multiplier: n_parallel as f64,
                },
            );
        }
        let spec = Self {
            input_aspect: unit_aspect,
            output_aspect: unit_aspect * n_parallel as f64,
            i_in,
            taps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.input_aspect.is_finite() && self.input_aspect > 0.0)
            || !(self.output_aspect.is_finite() && self.output_aspect > 0.0)
        {
            return Err(Error::InvalidParam("aspect ratios must be positive".into()));
        }
        if !self.i_in.is_finite() {
            return Err(Error::InvalidParam("input current must be finite".into()));
        }
        for t in &self.taps {
            if !(t.multiplier.is_finite() && t.multiplier >= 1.0) {
                return Err(Error::InvalidParam(format!(
                    "tap `{}` multiplier must be at least 1",
                    t.name
                )));
            }
        }
        Ok(())
    }

    /// Aspect-ratio mirror ratio `(W/L)₂ / (W/L)₁`.
    pub fn ratio(&self) -> f64 {
        self.output_aspect / self.input_aspect
    }
}

/// `I_in · m` for the named tap.
pub fn expected_current(spec: &MirrorSpec, tap: &str) -> Result<f64> {
    spec.validate()?;
    spec.taps
        .iter()
        .find(|t| t.name == tap)
        .map(|t| spec.i_in * t.multiplier)
        .ok_or_else(|| Error::UnknownTap(tap.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least-squares line through `(I_in, I_out)` points; the slope is
/// the empirical mirror ratio.
pub fn mirror_ratio(points: &[(f64, f64)]) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::Degenerate("a mirror sweep needs at least two points".into()));
    }
    if points.iter().any(|(a, b)| !(a.is_finite() && b.is_finite())) {
        return Err(Error::InvalidParam("sweep contains non-finite points".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= f64::EPSILON * points.iter().map(|p| p.0 * p.0).sum::<f64>() {
        return Err(Error::Degenerate("all input currents are identical".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Externally supplied currents for one tap, amperes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalRefs {
    /// Circuit-simulation reference.
    pub reference: Option<f64>,
    /// Source-meter reading.
    pub conventional: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub tap: String,
    pub expected: f64,
    pub reference: Option<f64>,
    pub conventional: Option<f64>,
    pub qdm: f64,
    pub pct_error_vs_conventional: Option<f64>,
    pub pct_error_vs_expected: Option<f64>,
}

/// `100·|a − b| / |b|`.
pub fn pct_error(a: f64, b: f64) -> f64 {
    100.0 * (a - b).abs() / b.abs()
}

/// One row per tap that has a magnetometry result, in tap order.
pub fn build_report(
    spec: &MirrorSpec,
    qdm: &BTreeMap<String, f64>,
    refs: &BTreeMap<String, ExternalRefs>,
) -> Result<Vec<ComparisonRow>> {
    spec.validate()?;
    if let Some(name) = qdm.keys().find(|k| !spec.taps.iter().any(|t| &t.name == *k)) {
        return Err(Error::UnknownTap(name.clone()));
    }
    let mut rows = Vec::new();
    for tap in &spec.taps {
        let Some(&q) = qdm.get(&tap.name) else { continue };
        let expected = spec.i_in * tap.multiplier;
        let r = refs.get(&tap.name).copied().unwrap_or_default();
        rows.push(ComparisonRow {
            tap: tap.name.clone(),
            expected,
            reference: r.reference,
            conventional: r.conventional,
            qdm: q,
            pct_error_vs_conventional: r.conventional.map(|c| pct_error(q, c)),
            pct_error_vs_expected: (expected != 0.0).then(|| pct_error(q, expected)),
        });
    }
    Ok(rows)
}

fn cell_ua(v: Option<f64>) -> String {
    v.map_or_else(|| "–".to_string(), |a| format!("{:.1}", a * 1e6))
}

fn cell_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "–".to_string(), |p| format!("{p:.1}"))
}

/// Fixed-width text table with currents in µA and errors to one decimal;
/// a missing value is shown as `–`.
pub fn render_table(rows: &[ComparisonRow]) -> String {
    let header = [
        "tap",
        "expected_uA",
        "reference_uA",
        "conventional_uA",
        "qdm_uA",
        "err_vs_conv_pct",
        "err_vs_expected_pct",
    ];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.tap.clone(),
                cell_ua(Some(r.expected)),
                cell_ua(r.reference),
                cell_ua(r.conventional),
                cell_ua(Some(r.qdm)),
                cell_pct(r.pct_error_vs_conventional),
                cell_pct(r.pct_error_vs_expected),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..7)
        .map(|c| {
            body.iter()
                .map(|row| row[c].chars().count())
                .chain(std::iter::once(header[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}", w = *w))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for row in &body {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}
