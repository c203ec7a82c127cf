//! Shared data model: grids, unit-tagged rasters, sensor parameters and
//! conductor geometry.
//!
//! Internal units are SI (meters, amperes, tesla) except microwave
//! frequencies, which are carried in MHz, and the gyromagnetic ratio, in
//! MHz/mT. Raster storage is row-major with `y` as the outer index and `x` as
//! the inner index: the value of pixel `(i, j)` lives at `j * nx + i`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vacuum permeability, T·m/A.
pub const MU0: f64 = 4.0 * PI * 1e-7;

/// Default camera pixel pitch after 2×2 binning, meters.
pub const DEFAULT_PITCH: f64 = 260e-9;

/// Uniform square-pixel grid with pixel `(0, 0)` centered at `origin`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
    pitch: f64,
    origin: (f64, f64),
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, pitch: f64, origin: (f64, f64)) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidGrid(format!("{nx}x{ny} has no pixels")));
        }
        if !(pitch.is_finite() && pitch > 0.0) {
            return Err(Error::InvalidGrid(format!("pitch {pitch} must be positive")));
        }
        if !(origin.0.is_finite() && origin.1.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(Self {
            nx,
            ny,
            pitch,
            origin,
        })
    }

    /// Grid of `nx × ny` pixels centered on the physical origin.
    pub fn centered(nx: usize, ny: usize, pitch: f64) -> Result<Self> {
        let ox = -0.5 * (nx as f64 - 1.0) * pitch;
        let oy = -0.5 * (ny as f64 - 1.0) * pitch;
        Self::new(nx, ny, pitch, (ox, oy))
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn origin(&self) -> (f64, f64) {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Physical center of pixel `(i, j)`.
    pub fn coord(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin.0 + i as f64 * self.pitch,
            self.origin.1 + j as f64 * self.pitch,
        )
    }

    /// Coordinate of the pixel stored at linear index `idx`.
    pub fn coord_of_index(&self, idx: usize) -> (f64, f64) {
        self.coord(idx % self.nx, idx / self.nx)
    }

    /// Nearest pixel to a physical point, or `None` outside the grid.
    pub fn index_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.origin.0) / self.pitch).round();
        let fj = ((y - self.origin.1) / self.pitch).round();
        if fi < 0.0 || fj < 0.0 || fi >= self.nx as f64 || fj >= self.ny as f64 {
            return None;
        }
        Some((fi as usize, fj as usize))
    }

    /// Continuous (fractional) pixel coordinates of a physical point.
    pub fn fractional_index(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin.0) / self.pitch,
            (y - self.origin.1) / self.pitch,
        )
    }

    pub fn linear(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Physical extent covered by pixel centers, `(width, height)`.
    pub fn extent(&self) -> (f64, f64) {
        (
            (self.nx - 1) as f64 * self.pitch,
            (self.ny - 1) as f64 * self.pitch,
        )
    }
}

/// Physical unit tag carried by every raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Tesla,
    Millitesla,
    AmperePerMeter,
    Hertz,
    Dimensionless,
}

impl Unit {
    pub fn as_str(&self) -> &'static str {
        match self {
            Unit::Tesla => "tesla",
            Unit::Millitesla => "millitesla",
            Unit::AmperePerMeter => "ampere_per_meter",
            Unit::Hertz => "hertz",
            Unit::Dimensionless => "dimensionless",
        }
    }

    pub fn parse(s: &str) -> Option<Unit> {
        Some(match s {
            "tesla" => Unit::Tesla,
            "millitesla" => Unit::Millitesla,
            "ampere_per_meter" => Unit::AmperePerMeter,
            "hertz" => Unit::Hertz,
            "dimensionless" => Unit::Dimensionless,
            _ => return None,
        })
    }

    /// Multiplicative factor taking a value in `self` to `to`, when the two
    /// units measure the same quantity.
    fn factor_to(self, to: Unit) -> Option<f64> {
        match (self, to) {
            (a, b) if a == b => Some(1.0),
            (Unit::Tesla, Unit::Millitesla) => Some(1e3),
            (Unit::Millitesla, Unit::Tesla) => Some(1e-3),
            _ => None,
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Finite-valued scalar field on a [`Grid2D`] with a unit tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarRaster {
    grid: Grid2D,
    values: Vec<f64>,
    unit: Unit,
}

impl ScalarRaster {
    pub fn new(grid: Grid2D, unit: Unit, fill: f64) -> Result<Self> {
        if !fill.is_finite() {
            return Err(Error::InvalidParam(format!("fill value {fill} is not finite")));
        }
        Ok(Self {
            grid,
            values: vec![fill; grid.len()],
            unit,
        })
    }

    pub fn from_values(grid: Grid2D, unit: Unit, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidParam(format!(
                "{} values for a {}x{} grid",
                values.len(),
                grid.nx(),
                grid.ny()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!("non-finite value at index {k}")));
        }
        Ok(Self { grid, values, unit })
    }

    /// Evaluates `f(x, y)` at every pixel center.
    pub fn from_fn(grid: Grid2D, unit: Unit, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.coord_of_index(k);
                f(x, y)
            })
            .collect();
        Self::from_values(grid, unit, values)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.linear(i, j)]
    }

    /// Applies `f` pixelwise; the unit is kept. Fails if `f` produces a
    /// non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_values(self.grid, self.unit, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn scaled(&self, a: f64) -> Result<Self> {
        self.map(|v| a * v)
    }

    /// Explicit unit conversion; only tesla ↔ millitesla is defined.
    pub fn to_unit(&self, unit: Unit) -> Result<Self> {
        let k = self.unit.factor_to(unit).ok_or(Error::UnitMismatch {
            expected: unit,
            found: self.unit,
        })?;
        let mut out = self.map(|v| v * k)?;
        out.unit = unit;
        Ok(out)
    }

    pub fn ensure_unit(&self, unit: Unit) -> Result<()> {
        if self.unit != unit {
            return Err(Error::UnitMismatch {
                expected: unit,
                found: self.unit,
            });
        }
        Ok(())
    }

    /// Checks grid and unit agreement with `other`.
    pub fn ensure_compatible(&self, other: &ScalarRaster) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        other.ensure_unit(self.unit)
    }

    pub fn zip_with(&self, other: &ScalarRaster, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_compatible(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_values(self.grid, self.unit, values)
    }

    pub fn add(&self, other: &ScalarRaster) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarRaster) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Root-mean-square of the pixelwise difference to `other`.
    pub fn rms_diff(&self, other: &ScalarRaster) -> Result<f64> {
        self.ensure_compatible(other)?;
        let ss: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        Ok((ss / self.values.len() as f64).sqrt())
    }

    /// Bilinear interpolation at a physical point; `None` outside the
    /// convex hull of pixel centers.
    pub fn bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let (fx, fy) = self.grid.fractional_index(x, y);
        let (nx, ny) = (self.grid.nx(), self.grid.ny());
        let eps = 1e-9;
        if fx < -eps || fy < -eps || fx > (nx - 1) as f64 + eps || fy > (ny - 1) as f64 + eps {
            return None;
        }
        let fx = fx.clamp(0.0, (nx - 1) as f64);
        let fy = fy.clamp(0.0, (ny - 1) as f64);
        let i0 = (fx.floor() as usize).min(nx.saturating_sub(2));
        let j0 = (fy.floor() as usize).min(ny.saturating_sub(2));
        let i1 = (i0 + 1).min(nx - 1);
        let j1 = (j0 + 1).min(ny - 1);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        let v00 = self.get(i0, j0);
        let v10 = self.get(i1, j0);
        let v01 = self.get(i0, j1);
        let v11 = self.get(i1, j1);
        Some(
            v00 * (1.0 - tx) * (1.0 - ty)
                + v10 * tx * (1.0 - ty)
                + v01 * (1.0 - tx) * ty
                + v11 * tx * ty,
        )
    }
}

/// NV ensemble sensor parameters. Frequencies in MHz, fields in mT,
/// angles in radians, thickness in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NvSensorParams {
    /// Zero-field splitting, MHz.
    pub d_mhz: f64,
    /// Gyromagnetic ratio, MHz/mT.
    pub gamma_mhz_per_mt: f64,
    /// Polar angle of the NV axis from the surface normal.
    pub theta: f64,
    /// Azimuthal angle of the NV axis in the sample plane.
    pub phi: f64,
    /// NV layer thickness, meters.
    pub h_nv: f64,
    /// Bias field along the NV axis, mT.
    pub bias_mt: f64,
    /// Hyperfine doublet splitting, MHz.
    pub hyperfine_mhz: f64,
}

impl Default for NvSensorParams {
    fn default() -> Self {
        Self {
            d_mhz: 2870.0,
            gamma_mhz_per_mt: 28.0,
            // [111] axis seen from a (001) surface
            theta: (1.0 / 3f64.sqrt()).acos(),
            phi: PI / 4.0,
            h_nv: 2.5e-6,
            bias_mt: 2.0,
            hyperfine_mhz: 3.03,
        }
    }
}

impl NvSensorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParam(m.to_string()));
        let finite = [
            self.d_mhz,
            self.gamma_mhz_per_mt,
            self.theta,
            self.phi,
            self.h_nv,
            self.bias_mt,
            self.hyperfine_mhz,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return bad("sensor parameters must be finite");
        }
        if self.d_mhz <= 0.0 {
            return bad("zero-field splitting must be positive");
        }
        if self.gamma_mhz_per_mt <= 0.0 {
            return bad("gyromagnetic ratio must be positive");
        }
        if self.h_nv < 0.0 {
            return bad("NV layer thickness must be non-negative");
        }
        if self.hyperfine_mhz < 0.0 {
            return bad("hyperfine splitting must be non-negative");
        }
        if !(0.0..=PI).contains(&self.theta) {
            return bad("theta must lie in [0, pi]");
        }
        if !(self.phi > -PI && self.phi <= PI) {
            return bad("phi must lie in (-pi, pi]");
        }
        Ok(())
    }

    /// Unit vector along the NV axis in the lab frame (z toward the conductor).
    pub fn axis(&self) -> [f64; 3] {
        [
            self.theta.sin() * self.phi.cos(),
            self.theta.sin() * self.phi.sin(),
            self.theta.cos(),
        ]
    }
}

/// Resonance frequencies `(f_minus, f_plus)` in MHz for a total field
/// `b_nv_mt` along the NV axis: `f± = D ± γ·B`.
pub fn resonance_pair(params: &NvSensorParams, b_nv_mt: f64) -> Result<(f64, f64)> {
    params.validate()?;
    if !b_nv_mt.is_finite() {
        return Err(Error::InvalidParam("field must be finite".into()));
    }
    let shift = params.gamma_mhz_per_mt * b_nv_mt;
    if shift.abs() >= params.d_mhz {
        return Err(Error::OutOfModel {
            shift_mhz: shift.abs(),
            d_mhz: params.d_mhz,
        });
    }
    Ok((params.d_mhz - shift, params.d_mhz + shift))
}

fn check_unit_vector(v: (f64, f64)) -> Result<()> {
    let n = v.0.hypot(v.1);
    if !((n - 1.0).abs() < 1e-9) {
        return Err(Error::InvalidParam(format!(
            "axis ({}, {}) is not unit length",
            v.0, v.1
        )));
    }
    Ok(())
}

/// Infinitely long, zero-thickness conducting strip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StripGeometry {
    /// Width, meters.
    pub width: f64,
    /// Distance from the diamond surface to the conductor sheet, meters.
    pub standoff: f64,
    /// Current, amperes, flowing along `axis`.
    pub current: f64,
    /// In-plane unit vector of current flow.
    pub axis: (f64, f64),
    /// A point on the strip centerline, meters.
    pub center: (f64, f64),
}

impl StripGeometry {
    /// Strip with current along `+y` through the origin.
    pub fn along_y(width: f64, standoff: f64, current: f64) -> Self {
        Self {
            width,
            standoff,
            current,
            axis: (0.0, 1.0),
            center: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::InvalidParam("strip width must be positive".into()));
        }
        if !(self.standoff.is_finite() && self.standoff >= 0.0) {
            return Err(Error::InvalidParam("stand-off must be non-negative".into()));
        }
        if !self.current.is_finite() {
            return Err(Error::InvalidParam("current must be finite".into()));
        }
        check_unit_vector(self.axis)
    }

    /// In-plane unit vector of the local lateral coordinate: the axis
    /// rotated by −90°, so a `+y` current has its lateral axis along `+x`.
    pub fn lateral(&self) -> (f64, f64) {
        (self.axis.1, -self.axis.0)
    }

    /// Signed lateral distance of a lab point from the centerline.
    pub fn lateral_offset(&self, x: f64, y: f64) -> f64 {
        let (lx, ly) = self.lateral();
        (x - self.center.0) * lx + (y - self.center.1) * ly
    }

    /// Whether the strip's conductor thickness is small enough for the
    /// sheet model: `t < w / 10`.
    pub fn thin_enough(&self, thickness: f64) -> bool {
        thickness < 0.1 * self.width
    }
}

/// Polyline ribbon conductor of constant width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentPath {
    /// Centerline vertices, meters. Current flows from first to last.
    pub vertices: Vec<(f64, f64)>,
    pub width: f64,
    pub current: f64,
    pub standoff: f64,
}

impl CurrentPath {
    pub fn validate(&self) -> Result<()> {
        if self.vertices.len() < 2 {
            return Err(Error::InvalidParam("path needs at least two vertices".into()));
        }
        if self.vertices.iter().any(|v| !(v.0.is_finite() && v.1.is_finite())) {
            return Err(Error::InvalidParam("path vertices must be finite".into()));
        }
        if self.vertices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParam("consecutive path vertices coincide".into()));
        }
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(Error::InvalidParam("path width must be positive".into()));
        }
        if !(self.standoff.is_finite() && self.standoff >= 0.0) {
            return Err(Error::InvalidParam("stand-off must be non-negative".into()));
        }
        if !self.current.is_finite() {
            return Err(Error::InvalidParam("current must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_fill_and_coords() {
        let g = Grid2D::new(4, 4, 1.0, (0.0, 0.0)).unwrap();
        let r = ScalarRaster::new(g, Unit::Tesla, 0.0).unwrap();
        assert_eq!(r.values().len(), 16);
        assert!(r.values().iter().all(|&v| v == 0.0));

        let g = Grid2D::new(1, 1, 1.0, (0.0, 0.0)).unwrap();
        let r = ScalarRaster::new(g, Unit::Dimensionless, 2.5).unwrap();
        assert_eq!(r.values(), &[2.5]);

        let g = Grid2D::new(3, 2, 260e-9, (1e-6, -2e-6)).unwrap();
        let r = ScalarRaster::new(g, Unit::Tesla, 1e-6).unwrap();
        assert_eq!(r.values().len(), 6);
        let (x, y) = g.coord(2, 1);
        assert_eq!(x, 1e-6 + 2.0 * 260e-9);
        assert_eq!(y, -2e-6 + 260e-9);
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(Grid2D::new(0, 3, 1.0, (0.0, 0.0)).is_err());
        assert!(Grid2D::new(3, 3, 0.0, (0.0, 0.0)).is_err());
        assert!(Grid2D::new(3, 3, -1.0, (0.0, 0.0)).is_err());
        let g = Grid2D::new(2, 2, 1.0, (0.0, 0.0)).unwrap();
        assert!(ScalarRaster::new(g, Unit::Tesla, f64::NAN).is_err());
        assert!(ScalarRaster::from_values(g, Unit::Tesla, vec![0.0; 3]).is_err());
    }

    #[test]
    fn index_round_trip_at_centers() {
        let g = Grid2D::new(37, 23, 260e-9, (-3.3e-6, 1.7e-6)).unwrap();
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let (x, y) = g.coord(i, j);
                assert_eq!(g.index_of(x, y), Some((i, j)));
                assert_eq!(g.coord(i, j), (x, y));
            }
        }
        assert_eq!(g.index_of(-1.0, 0.0), None);
    }

    #[test]
    fn resonance_examples() {
        let p = NvSensorParams::default();
        assert_eq!(resonance_pair(&p, 0.0).unwrap(), (2870.0, 2870.0));
        assert_eq!(resonance_pair(&p, 2.0).unwrap(), (2814.0, 2926.0));
        let (fm, fp) = resonance_pair(&p, 1.37).unwrap();
        assert!(((fp - fm) / (2.0 * p.gamma_mhz_per_mt) - 1.37).abs() < 1e-12);
        assert!(matches!(
            resonance_pair(&p, 2870.0 / 28.0),
            Err(Error::OutOfModel { .. })
        ));
    }

    #[test]
    fn unit_mixing_rejected() {
        let g = Grid2D::new(2, 2, 1.0, (0.0, 0.0)).unwrap();
        let b = ScalarRaster::new(g, Unit::Tesla, 1.0).unwrap();
        let k = ScalarRaster::new(g, Unit::AmperePerMeter, 1.0).unwrap();
        assert!(matches!(b.sub(&k), Err(Error::UnitMismatch { .. })));
        assert!(k.to_unit(Unit::Tesla).is_err());
        let mt = b.to_unit(Unit::Millitesla).unwrap();
        assert_eq!(mt.unit(), Unit::Millitesla);
        assert_eq!(mt.values()[0], 1e3);
    }

    #[test]
    fn bilinear_is_exact_on_planes() {
        let g = Grid2D::new(5, 4, 0.5, (1.0, 2.0)).unwrap();
        let r = ScalarRaster::from_fn(g, Unit::Dimensionless, |x, y| 3.0 * x - 2.0 * y + 1.0).unwrap();
        let v = r.bilinear(2.13, 2.71).unwrap();
        assert!((v - (3.0 * 2.13 - 2.0 * 2.71 + 1.0)).abs() < 1e-12);
        assert!(r.bilinear(0.0, 0.0).is_none());
        // far corner is inside
        assert!(r.bilinear(3.0, 3.5).is_some());
    }

    #[test]
    fn param_validation() {
        let mut p = NvSensorParams::default();
        assert!(p.validate().is_ok());
        p.theta = -0.1;
        assert!(p.validate().is_err());
        let p = NvSensorParams {
            phi: -PI,
            ..NvSensorParams::default()
        };
        assert!(p.validate().is_err());
        let s = StripGeometry {
            axis: (0.6, 0.6),
            ..StripGeometry::along_y(1e-6, 0.0, 1e-3)
        };
        assert!(s.validate().is_err());
        let path = CurrentPath {
            vertices: vec![(0.0, 0.0), (0.0, 0.0)],
            width: 1e-6,
            current: 1.0,
            standoff: 0.0,
        };
        assert!(path.validate().is_err());
    }
}
