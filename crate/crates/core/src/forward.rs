//! Oersted fields of sheet conductors.
//!
//! Frame: the NV layer occupies depths `l ∈ [0, h_NV]` below the diamond
//! surface, the conductor sheet sits at height `h` above it, and `z` points
//! from the sensor toward the conductor. The field point is therefore a
//! distance `d = l + h` below the sheet. With that convention a strip
//! carrying current along `+y` produces `Bz < 0` for `x > 0` and `Bx < 0`
//! directly underneath.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{CurrentPath, Grid2D, NvSensorParams, ScalarRaster, StripGeometry, Unit, MU0};

/// Default number of Simpson points across the NV layer.
pub const DEFAULT_LAYER_POINTS: usize = 33;

/// Magnetic flux density at one point, tesla.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldSample {
    pub bx: f64,
    pub by: f64,
    pub bz: f64,
}

impl FieldSample {
    pub fn norm(&self) -> f64 {
        (self.bx * self.bx + self.by * self.by + self.bz * self.bz).sqrt()
    }

    /// Projection onto the NV axis of `params`.
    pub fn project(&self, params: &NvSensorParams) -> f64 {
        let [ux, uy, uz] = params.axis();
        self.bx * ux + self.by * uy + self.bz * uz
    }
}

/// Co-registered field component rasters, tesla.
#[derive(Debug, Clone)]
pub struct VectorFieldMap {
    pub bx: ScalarRaster,
    pub by: ScalarRaster,
    pub bz: ScalarRaster,
}

/// Strip-local field components per unit current and their partial
/// derivatives with respect to the lateral coordinate and to `d = l + h`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StripPartials {
    pub bx: f64,
    pub bz: f64,
    pub dbx_dx: f64,
    pub dbz_dx: f64,
    pub dbx_dd: f64,
    pub dbz_dd: f64,
}

/// Local-frame field `(B_lateral, B_z)` of a strip of width `w` at lateral
/// offset `x`, distance `d` below the sheet, per ampere.
fn strip_local_unit(w: f64, x: f64, d: f64) -> (f64, f64) {
    let a = 0.5 * w;
    let pre = MU0 / (2.0 * std::f64::consts::PI * w);
    let d2 = d * d;
    let bz = -0.5 * pre * ((d2 + (x + a).powi(2)) / (d2 + (x - a).powi(2))).ln();
    let bx = if d > 0.0 {
        pre * (((x - a) / d).atan() - ((x + a) / d).atan())
    } else if x.abs() < a {
        -0.5 * MU0 / w
    } else {
        0.0
    };
    (bx, bz)
}

pub(crate) fn strip_partials_unit(w: f64, x: f64, d: f64) -> StripPartials {
    let a = 0.5 * w;
    let pre = MU0 / (2.0 * std::f64::consts::PI * w);
    let (bx, bz) = strip_local_unit(w, x, d);
    let d2 = d * d;
    let rp = d2 + (x + a).powi(2);
    let rm = d2 + (x - a).powi(2);
    StripPartials {
        bx,
        bz,
        dbx_dx: pre * (d / rm - d / rp),
        dbz_dx: -pre * ((x + a) / rp - (x - a) / rm),
        dbx_dd: pre * ((x + a) / rp - (x - a) / rm),
        dbz_dd: -pre * (d / rp - d / rm),
    }
}

/// Field of an infinite strip at lateral offset `x` from its centerline and
/// depth `depth` below the diamond surface, rotated into the lab frame.
pub fn strip_field(strip: &StripGeometry, x: f64, depth: f64) -> Result<FieldSample> {
    strip.validate()?;
    if !(depth.is_finite() && depth >= 0.0) || !x.is_finite() {
        return Err(Error::InvalidParam("depth must be non-negative and x finite".into()));
    }
    let d = depth + strip.standoff;
    if d == 0.0 && (x.abs() - 0.5 * strip.width).abs() == 0.0 {
        return Err(Error::SingularGeometry);
    }
    let (bl, bz) = strip_local_unit(strip.width, x, d);
    let (lx, ly) = strip.lateral();
    Ok(FieldSample {
        bx: strip.current * bl * lx,
        by: strip.current * bl * ly,
        bz: strip.current * bz,
    })
}

/// [`strip_field`] at a lab-frame point.
pub fn strip_field_at(strip: &StripGeometry, x: f64, y: f64, depth: f64) -> Result<FieldSample> {
    strip_field(strip, strip.lateral_offset(x, y), depth)
}

/// Mean of `f(l)` over `l ∈ [0, h_nv]` by composite Simpson quadrature with
/// `n` points (rounded up to odd). A zero-thickness layer returns `f(0)`.
pub fn layer_average(f: impl Fn(f64) -> f64, h_nv: f64, n: usize) -> Result<f64> {
    if !(h_nv.is_finite() && h_nv >= 0.0) {
        return Err(Error::InvalidParam("layer thickness must be non-negative".into()));
    }
    if n < 2 {
        return Err(Error::InvalidParam("layer quadrature needs at least 2 points".into()));
    }
    if h_nv == 0.0 {
        return Ok(f(0.0));
    }
    Ok(simpson_mean(f, h_nv, n))
}

pub(crate) fn simpson_mean(f: impl Fn(f64) -> f64, h_nv: f64, n: usize) -> f64 {
    let n = if n.is_multiple_of(2) { n + 1 } else { n.max(3) };
    let step = h_nv / (n - 1) as f64;
    let mut acc = f(0.0) + f(h_nv);
    for k in 1..n - 1 {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(k as f64 * step);
    }
    acc * step / 3.0 / h_nv
}

/// Wraps a depth-resolved projected field `B_NV(x, l)` into its layer
/// average `x ↦ B'_NV(x)`.
pub fn layer_averaged<F>(
    field: F,
    params: &NvSensorParams,
    n: usize,
) -> Result<impl Fn(f64) -> f64>
where
    F: Fn(f64, f64) -> f64,
{
    params.validate()?;
    if n < 2 {
        return Err(Error::InvalidParam("layer quadrature needs at least 2 points".into()));
    }
    let h_nv = params.h_nv;
    Ok(move |x: f64| {
        if h_nv == 0.0 {
            field(x, 0.0)
        } else {
            simpson_mean(|l| field(x, l), h_nv, n)
        }
    })
}

/// Layer-averaged NV projection of a strip field at lateral offset `x`.
pub fn strip_bnv_averaged(
    strip: &StripGeometry,
    params: &NvSensorParams,
    x: f64,
    n: usize,
) -> Result<f64> {
    strip.validate()?;
    params.validate()?;
    let f = |l: f64| {
        strip_field(strip, x, l)
            .map(|b| b.project(params))
            .unwrap_or(0.0)
    };
    layer_average(f, params.h_nv, n)
}

/// Layer-averaged `B_NV` raster (tesla) of an infinite strip.
pub fn strip_bnv_map(
    strip: &StripGeometry,
    params: &NvSensorParams,
    grid: &Grid2D,
    n: usize,
) -> Result<ScalarRaster> {
    strip.validate()?;
    params.validate()?;
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let (x, y) = grid.coord_of_index(k);
            strip_bnv_averaged(strip, params, strip.lateral_offset(x, y), n)
        })
        .collect::<Result<_>>()?;
    ScalarRaster::from_values(*grid, Unit::Tesla, values)
}

/// Field vector rasters of an infinite strip at a single depth.
pub fn strip_field_map(strip: &StripGeometry, grid: &Grid2D, depth: f64) -> Result<VectorFieldMap> {
    let samples: Vec<FieldSample> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let (x, y) = grid.coord_of_index(k);
            strip_field_at(strip, x, y, depth)
        })
        .collect::<Result<_>>()?;
    samples_to_map(grid, &samples)
}

fn samples_to_map(grid: &Grid2D, samples: &[FieldSample]) -> Result<VectorFieldMap> {
    let bx = samples.iter().map(|s| s.bx).collect();
    let by = samples.iter().map(|s| s.by).collect();
    let bz = samples.iter().map(|s| s.bz).collect();
    Ok(VectorFieldMap {
        bx: ScalarRaster::from_values(*grid, Unit::Tesla, bx)?,
        by: ScalarRaster::from_values(*grid, Unit::Tesla, by)?,
        bz: ScalarRaster::from_values(*grid, Unit::Tesla, bz)?,
    })
}

/// Field at `p` of a straight filament from `a` to `b` in the plane `z = 0`
/// carrying unit current, with `p` a distance `d` below that plane.
fn segment_field_unit(a: (f64, f64), b: (f64, f64), p: (f64, f64), d: f64) -> [f64; 3] {
    let av = [a.0 - p.0, a.1 - p.1, d];
    let bv = [b.0 - p.0, b.1 - p.1, d];
    let na = (av[0] * av[0] + av[1] * av[1] + av[2] * av[2]).sqrt();
    let nb = (bv[0] * bv[0] + bv[1] * bv[1] + bv[2] * bv[2]).sqrt();
    let dot = av[0] * bv[0] + av[1] * bv[1] + av[2] * bv[2];
    let denom = na * nb * (na * nb + dot);
    if denom <= 0.0 || !denom.is_finite() {
        return [0.0; 3];
    }
    let k = MU0 / (4.0 * std::f64::consts::PI) * (na + nb) / denom;
    let cross = [
        av[1] * bv[2] - av[2] * bv[1],
        av[2] * bv[0] - av[0] * bv[2],
        av[0] * bv[1] - av[1] * bv[0],
    ];
    [k * cross[0], k * cross[1], k * cross[2]]
}

/// Offset copies of the centerline, one per filament, joined with miter
/// corners so every filament is a continuous polyline.
fn ribbon_filaments(path: &CurrentPath, n_fil: usize) -> Result<Vec<Vec<(f64, f64)>>> {
    let v = &path.vertices;
    let dirs: Vec<(f64, f64)> = v
        .windows(2)
        .map(|w| {
            let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            let n = dx.hypot(dy);
            (dx / n, dy / n)
        })
        .collect();
    let normals: Vec<(f64, f64)> = dirs.iter().map(|&(ux, uy)| (uy, -ux)).collect();
    // offset direction and scale at each vertex
    let mut miters = Vec::with_capacity(v.len());
    miters.push(normals[0]);
    for k in 1..v.len() - 1 {
        let (n0, n1) = (normals[k - 1], normals[k]);
        let m = (n0.0 + n1.0, n0.1 + n1.1);
        let mn = m.0.hypot(m.1);
        if mn < 1e-9 {
            return Err(Error::InvalidParam("path reverses on itself".into()));
        }
        let m = (m.0 / mn, m.1 / mn);
        let cos = m.0 * n1.0 + m.1 * n1.1;
        if cos < 0.1 {
            return Err(Error::InvalidParam("path turns too sharply for a mitered ribbon".into()));
        }
        miters.push((m.0 / cos, m.1 / cos));
    }
    miters.push(*normals.last().unwrap());

    Ok((0..n_fil)
        .map(|f| {
            let s = path.width * ((f as f64 + 0.5) / n_fil as f64 - 0.5);
            v.iter()
                .zip(&miters)
                .map(|(p, m)| (p.0 + s * m.0, p.1 + s * m.1))
                .collect()
        })
        .collect())
}

fn filament_count(width: f64, d: f64) -> usize {
    let by_ratio = if d > 0.0 { (8.0 * width / d).ceil() } else { 4096.0 };
    (by_ratio as usize).clamp(64, 4096)
}

/// Field of a polyline ribbon at a lab point, depth `depth` below the
/// surface, summed over width filaments. `filaments` from [`ribbon_filaments`].
fn path_field_point(
    filaments: &[Vec<(f64, f64)>],
    current_per_filament: f64,
    p: (f64, f64),
    d: f64,
) -> FieldSample {
    let mut acc = [0.0; 3];
    for fil in filaments {
        for seg in fil.windows(2) {
            let b = segment_field_unit(seg[0], seg[1], p, d);
            acc[0] += b[0];
            acc[1] += b[1];
            acc[2] += b[2];
        }
    }
    FieldSample {
        bx: current_per_filament * acc[0],
        by: current_per_filament * acc[1],
        bz: current_per_filament * acc[2],
    }
}

struct Ribbon {
    filaments: Vec<Vec<(f64, f64)>>,
    per_filament: f64,
    min_d: f64,
}

impl Ribbon {
    fn new(path: &CurrentPath, depth: f64) -> Result<Self> {
        path.validate()?;
        let d = path.standoff + depth;
        let n = filament_count(path.width, d);
        Ok(Self {
            filaments: ribbon_filaments(path, n)?,
            per_filament: path.current / n as f64,
            // quadrature points never coincide with filaments
            min_d: 0.5 * path.width / n as f64,
        })
    }

    fn at(&self, p: (f64, f64), d: f64) -> FieldSample {
        path_field_point(&self.filaments, self.per_filament, p, d.max(self.min_d))
    }
}

/// Field vector rasters of a polyline ribbon conductor at one depth.
///
/// The ribbon is discretized into width filaments (midpoint rule across the
/// width); each filament segment uses the exact finite-wire Biot-Savart
/// integral along its length. Corners are mitered, so the corner current
/// distribution is approximate; agreement with [`strip_field`] is expected
/// only more than a few widths away from corners and ends.
pub fn polyline_field_map(path: &CurrentPath, grid: &Grid2D, depth: f64) -> Result<VectorFieldMap> {
    if !(depth.is_finite() && depth >= 0.0) {
        return Err(Error::InvalidParam("depth must be non-negative".into()));
    }
    let ribbon = Ribbon::new(path, depth)?;
    let d = path.standoff + depth;
    let samples: Vec<FieldSample> = (0..grid.len())
        .into_par_iter()
        .map(|k| ribbon.at(grid.coord_of_index(k), d))
        .collect();
    samples_to_map(grid, &samples)
}

/// Layer-averaged `B_NV` raster (tesla) of a polyline ribbon.
pub fn path_bnv_map(
    path: &CurrentPath,
    params: &NvSensorParams,
    grid: &Grid2D,
    n: usize,
) -> Result<ScalarRaster> {
    params.validate()?;
    let ribbon = Ribbon::new(path, 0.0)?;
    let h = path.standoff;
    let h_nv = params.h_nv;
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let p = grid.coord_of_index(k);
            let f = |l: f64| ribbon.at(p, h + l).project(params);
            layer_average(f, h_nv, n)
        })
        .collect::<Result<_>>()?;
    ScalarRaster::from_values(*grid, Unit::Tesla, values)
}

/// Projects co-registered field components onto the NV axis:
/// `B_NV = Bx·sinθ·cosφ + By·sinθ·sinφ + Bz·cosθ`.
pub fn project_nv(
    bx: &ScalarRaster,
    by: &ScalarRaster,
    bz: &ScalarRaster,
    params: &NvSensorParams,
) -> Result<ScalarRaster> {
    params.validate()?;
    bx.ensure_unit(Unit::Tesla)?;
    bx.ensure_compatible(by)?;
    bx.ensure_compatible(bz)?;
    let [ux, uy, uz] = params.axis();
    let values = bx
        .values()
        .iter()
        .zip(by.values())
        .zip(bz.values())
        .map(|((&x, &y), &z)| x * ux + y * uy + z * uz)
        .collect();
    ScalarRaster::from_values(*bx.grid(), Unit::Tesla, values)
}

impl VectorFieldMap {
    pub fn project(&self, params: &NvSensorParams) -> Result<ScalarRaster> {
        project_nv(&self.bx, &self.by, &self.bz, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table_strip() -> StripGeometry {
        StripGeometry::along_y(9.5e-6, 2.3e-6, 750e-6)
    }

    #[test]
    fn bz_vanishes_on_centerline() {
        for &l in &[0.0, 1e-6, 2.5e-6] {
            let b = strip_field(&table_strip(), 0.0, l).unwrap();
            assert_eq!(b.bz, 0.0);
        }
    }

    #[test]
    fn sign_convention() {
        let s = table_strip();
        let b = strip_field(&s, 3e-6, 0.0).unwrap();
        assert!(b.bz < 0.0);
        let b0 = strip_field(&s, 0.0, 0.0).unwrap();
        assert!(b0.bx < 0.0);
        let axial = NvSensorParams {
            theta: 0.0,
            ..NvSensorParams::default()
        };
        assert!(b.project(&axial) < 0.0);
    }

    #[test]
    fn wide_strip_approaches_sheet_limit() {
        // w / (l + h) = 1e4
        let w = 1e-2;
        let s = StripGeometry::along_y(w, 1e-6, 1e-3);
        let b = strip_field(&s, 0.0, 0.0).unwrap();
        let sheet = -MU0 * s.current / (2.0 * w);
        assert!(((b.bx - sheet) / sheet).abs() < 1e-3);
    }

    #[test]
    fn axis_rotation() {
        let s = StripGeometry {
            axis: (0.0, -1.0),
            ..table_strip()
        };
        // reversing the axis is the same as reversing the current
        let flipped = StripGeometry {
            current: -s.current,
            ..table_strip()
        };
        let a = strip_field_at(&s, 2e-6, 0.0, 1e-6).unwrap();
        let b = strip_field_at(&flipped, 2e-6, 0.0, 1e-6).unwrap();
        assert!((a.bx - b.bx).abs() < 1e-18 && (a.bz - b.bz).abs() < 1e-18);
        assert_eq!(a.by, 0.0);
    }

    #[test]
    fn singular_edge_rejected() {
        let s = StripGeometry::along_y(2e-6, 0.0, 1e-3);
        assert!(matches!(strip_field(&s, 1e-6, 0.0), Err(Error::SingularGeometry)));
        assert!(strip_field(&s, 0.5e-6, 0.0).is_ok());
    }

    #[test]
    fn partials_match_finite_differences() {
        let (w, x, d) = (9.5e-6, 3.1e-6, 3.0e-6);
        let p = strip_partials_unit(w, x, d);
        let e = 1e-10;
        let (bxp, bzp) = strip_local_unit(w, x + e, d);
        let (bxm, bzm) = strip_local_unit(w, x - e, d);
        assert!((p.dbx_dx - (bxp - bxm) / (2.0 * e)).abs() < 1e-6 * p.dbx_dx.abs());
        assert!((p.dbz_dx - (bzp - bzm) / (2.0 * e)).abs() < 1e-6 * p.dbz_dx.abs());
        let (bxp, bzp) = strip_local_unit(w, x, d + e);
        let (bxm, bzm) = strip_local_unit(w, x, d - e);
        assert!((p.dbx_dd - (bxp - bxm) / (2.0 * e)).abs() < 1e-6 * p.dbx_dd.abs());
        assert!((p.dbz_dd - (bzp - bzm) / (2.0 * e)).abs() < 1e-6 * p.dbz_dd.abs());
    }

    #[test]
    fn layer_average_rules() {
        assert!((layer_average(|_| 4.2, 2.5e-6, 33).unwrap() - 4.2).abs() < 1e-14);
        let c = 3.7e5;
        let h = 2.5e-6;
        let avg = layer_average(|l| c * l, h, 33).unwrap();
        assert!((avg - c * h / 2.0).abs() <= 1e-15 * c * h);
        assert_eq!(layer_average(|l| 1.0 + l, 0.0, 5).unwrap(), 1.0);
        assert!(layer_average(|l| l, 1.0, 1).is_err());
        assert!(layer_average(|l| l, -1.0, 5).is_err());
    }

    #[test]
    fn layer_average_converges_for_strip() {
        let s = table_strip();
        let p = NvSensorParams::default();
        for &x in &[0.0, 2e-6, 4.75e-6, 10e-6] {
            let fine = strip_bnv_averaged(&s, &p, x, 257).unwrap();
            let coarse = strip_bnv_averaged(&s, &p, x, 17).unwrap();
            let scale = strip_bnv_averaged(&s, &p, 4.75e-6, 257).unwrap().abs();
            assert!((fine - coarse).abs() < 1e-4 * scale, "x = {x}");
        }
    }

    #[test]
    fn projection_special_axes() {
        let g = Grid2D::new(3, 2, 1e-6, (0.0, 0.0)).unwrap();
        let bx = ScalarRaster::from_fn(g, Unit::Tesla, |x, y| x + 2.0 * y).unwrap();
        let by = ScalarRaster::from_fn(g, Unit::Tesla, |x, _| -x).unwrap();
        let bz = ScalarRaster::from_fn(g, Unit::Tesla, |x, y| 3.0 * x - y).unwrap();
        let mut p = NvSensorParams {
            theta: 0.0,
            phi: 0.0,
            ..NvSensorParams::default()
        };
        assert_eq!(project_nv(&bx, &by, &bz, &p).unwrap().values(), bz.values());
        p.theta = std::f64::consts::FRAC_PI_2;
        let out = project_nv(&bx, &by, &bz, &p).unwrap();
        for (a, b) in out.values().iter().zip(bx.values()) {
            assert!((a - b).abs() <= 1e-16 * b.abs().max(1.0));
        }
        let g2 = Grid2D::new(2, 2, 1e-6, (0.0, 0.0)).unwrap();
        let other = ScalarRaster::new(g2, Unit::Tesla, 0.0).unwrap();
        assert!(matches!(
            project_nv(&bx, &by, &other, &p),
            Err(Error::GridMismatch)
        ));
    }

    #[test]
    fn zero_current_path_is_zero() {
        let path = CurrentPath {
            vertices: vec![(0.0, -1e-4), (0.0, 1e-4)],
            width: 5e-6,
            current: 0.0,
            standoff: 2e-6,
        };
        let g = Grid2D::centered(8, 8, 1e-6).unwrap();
        let m = polyline_field_map(&path, &g, 0.0).unwrap();
        assert_eq!(m.bx.max_abs() + m.by.max_abs() + m.bz.max_abs(), 0.0);
    }

    #[test]
    fn straight_path_matches_strip_at_center() {
        let s = table_strip();
        let path = CurrentPath {
            vertices: vec![(0.0, -5e-3), (0.0, 5e-3)],
            width: s.width,
            current: s.current,
            standoff: s.standoff,
        };
        let g = Grid2D::new(5, 1, 2.6e-6, (-5.2e-6, 0.0)).unwrap();
        let m = polyline_field_map(&path, &g, 0.5e-6).unwrap();
        for i in 0..5 {
            let (x, y) = g.coord(i, 0);
            let b = strip_field_at(&s, x, y, 0.5e-6).unwrap();
            let scale = b.norm();
            assert!((m.bx.get(i, 0) - b.bx).abs() < 1e-3 * scale);
            assert!((m.bz.get(i, 0) - b.bz).abs() < 1e-3 * scale);
            assert!(m.by.get(i, 0).abs() < 1e-3 * scale);
        }
    }
}
