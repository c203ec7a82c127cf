//! Pipeline configuration.
//!
//! The file is TOML. Every dimensional key carries its unit in the name
//! (`width_um`, `pitch_nm`, `current_ua`, `theta_deg`, ...) and is converted
//! to SI when the file is parsed. Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [grid]
//! nx = 256
//! ny = 256
//! pitch_nm = 260.0
//!
//! [mirror]
//! i_in_ua = 50.0
//! n_parallel = 15
//!
//! [[geometry.strips]]
//! name = "A"
//! width_um = 9.5
//! standoff_um = 2.3
//! axis = [0.0, -1.0]
//! tap = "output"
//!
//! [[taps]]
//! name = "output"
//! multiplier = 15.0
//! p0_um = [14.0, 0.0]
//! p1_um = [-14.0, 0.0]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::TransectFitResult;
use crate::circuit::{ExternalRefs, MirrorSpec, Tap};
use crate::error::{Error, Result};
use crate::inversion::{InversionOptions, Transect, Window, WindowKind};
use crate::model::{CurrentPath, Grid2D, NvSensorParams, StripGeometry};
use crate::odmr::{AcquisitionParams, ExtractOptions, FitOptions};

const UM: f64 = 1e-6;
const NM: f64 = 1e-9;
const UA: f64 = 1e-6;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SensorSection {
    d_mhz: f64,
    gamma_mhz_per_mt: f64,
    theta_deg: f64,
    phi_deg: f64,
    h_nv_um: f64,
    bias_mt: f64,
    hyperfine_mhz: f64,
}

impl Default for SensorSection {
    fn default() -> Self {
        let p = NvSensorParams::default();
        Self {
            d_mhz: p.d_mhz,
            gamma_mhz_per_mt: p.gamma_mhz_per_mt,
            theta_deg: p.theta.to_degrees(),
            phi_deg: p.phi.to_degrees(),
            h_nv_um: p.h_nv / UM,
            bias_mt: p.bias_mt,
            hyperfine_mhz: p.hyperfine_mhz,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    nx: usize,
    ny: usize,
    pitch_nm: f64,
    /// Lower-left pixel center; the grid is centered on the origin when absent.
    origin_um: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AcquisitionSection {
    n_f: usize,
    span_mhz: f64,
    contrast: f64,
    linewidth_mhz: f64,
    offset: f64,
    noise_sigma: f64,
    sweeps_averaged: u32,
    tied_fit: bool,
    max_fit_iterations: usize,
    max_nonconverged_fraction: f64,
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        let a = AcquisitionParams::default();
        let e = ExtractOptions::default();
        Self {
            n_f: a.n_f,
            span_mhz: a.span_mhz,
            contrast: a.contrast,
            linewidth_mhz: a.linewidth_mhz,
            offset: a.offset,
            noise_sigma: a.noise_sigma,
            sweeps_averaged: a.sweeps_averaged,
            tied_fit: e.fit.tied,
            max_fit_iterations: e.fit.max_iterations,
            max_nonconverged_fraction: e.max_nonconverged_fraction,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct StripSection {
    name: String,
    width_um: f64,
    standoff_um: f64,
    /// Current along `axis`; taken from `tap` when absent.
    current_ua: Option<f64>,
    tap: Option<String>,
    #[serde(default = "default_axis")]
    axis: [f64; 2],
    #[serde(default)]
    center_um: [f64; 2],
}

fn default_axis() -> [f64; 2] {
    [0.0, 1.0]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathSection {
    name: String,
    vertices_um: Vec<[f64; 2]>,
    width_um: f64,
    standoff_um: f64,
    current_ua: Option<f64>,
    tap: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GeometrySection {
    strips: Vec<StripSection>,
    paths: Vec<PathSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct InversionSection {
    pad_factor: usize,
    window: WindowKind,
    cutoff_wavelength_um: f64,
    taper_pixels: usize,
    tikhonov: f64,
    /// Stand-off used for inversion; falls back to the calibrated value and
    /// then to the first conductor's stand-off.
    standoff_um: Option<f64>,
    glyph_threshold_a_per_m: f64,
    glyph_stride_px: usize,
}

impl Default for InversionSection {
    fn default() -> Self {
        let o = InversionOptions::default();
        Self {
            pad_factor: o.pad_factor,
            window: o.window.kind,
            cutoff_wavelength_um: o.window.cutoff_wavelength / UM,
            taper_pixels: o.taper_pixels,
            tikhonov: o.tikhonov,
            standoff_um: None,
            glyph_threshold_a_per_m: 12.0,
            glyph_stride_px: 8,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationSection {
    /// Name of the strip whose line cut is fitted.
    strip: String,
    #[serde(default)]
    fit_current: bool,
    #[serde(default = "default_half_length")]
    half_length_um: f64,
    /// Line cut to fit instead of sampling the field map.
    transect_csv: Option<PathBuf>,
    /// Use the fitted stand-off for inversion.
    #[serde(default = "default_true")]
    use_for_inversion: bool,
}

fn default_half_length() -> f64 {
    30.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct MirrorSection {
    i_in_ua: f64,
    #[serde(default = "default_aspect")]
    unit_aspect: f64,
    n_parallel: u32,
}

fn default_aspect() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TapSection {
    name: String,
    multiplier: f64,
    /// Integration transect; current crossing it toward its left-hand
    /// normal counts as positive.
    p0_um: Option<[f64; 2]>,
    p1_um: Option<[f64; 2]>,
    #[serde(default = "default_band_count")]
    band_count: usize,
    #[serde(default = "default_band_spacing")]
    band_spacing_um: f64,
    reference_ua: Option<f64>,
    conventional_ua: Option<f64>,
}

fn default_band_count() -> usize {
    11
}

fn default_band_spacing() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct IoSection {
    out_dir: Option<PathBuf>,
    /// Directory holding the branch stacks; defaults to `out_dir`.
    input_dir: Option<PathBuf>,
    /// Directory holding open-circuit branch stacks. When absent the bias
    /// is removed using the configured uniform bias field.
    open_circuit_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    sensor: SensorSection,
    grid: GridSection,
    #[serde(default)]
    acquisition: AcquisitionSection,
    #[serde(default)]
    geometry: GeometrySection,
    #[serde(default)]
    inversion: InversionSection,
    calibration: Option<CalibrationSection>,
    mirror: Option<MirrorSection>,
    #[serde(default)]
    taps: Vec<TapSection>,
    #[serde(default)]
    io: IoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedStrip {
    pub name: String,
    pub strip: StripGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedPath {
    pub name: String,
    pub path: CurrentPath,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationSpec {
    pub strip: String,
    pub fit_current: bool,
    pub half_length: f64,
    pub transect_csv: Option<PathBuf>,
    pub use_for_inversion: bool,
}

/// A current-integration transect with its reference values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TapTransect {
    pub name: String,
    pub transect: Transect,
    pub band_count: usize,
    pub band_spacing: f64,
    pub refs: ExternalRefs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IoPaths {
    pub out_dir: PathBuf,
    pub input_dir: PathBuf,
    pub open_circuit_dir: Option<PathBuf>,
}

/// Parsed configuration in SI units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub sensor: NvSensorParams,
    pub grid: Grid2D,
    pub acquisition: AcquisitionParams,
    pub extract: ExtractOptions,
    pub strips: Vec<NamedStrip>,
    pub paths: Vec<NamedPath>,
    pub inversion: InversionOptions,
    pub inversion_standoff: Option<f64>,
    pub glyph_threshold: f64,
    pub glyph_stride: usize,
    pub calibration: Option<CalibrationSpec>,
    pub mirror: Option<MirrorSpec>,
    pub taps: Vec<TapTransect>,
    /// Paths are excluded from the config hash.
    #[serde(skip)]
    pub io: IoPaths,
}

fn um2(v: [f64; 2]) -> (f64, f64) {
    (v[0] * UM, v[1] * UM)
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn resolve_current(
    what: &str,
    current_ua: Option<f64>,
    tap: Option<&str>,
    mirror: Option<&MirrorSpec>,
) -> Result<f64> {
    match (current_ua, tap) {
        (Some(_), Some(_)) => Err(cfg_err(format!("{what}: give either current_ua or tap, not both"))),
        (Some(i), None) => Ok(i * UA),
        (None, Some(t)) => {
            let m = mirror.ok_or_else(|| cfg_err(format!("{what}: tap `{t}` needs a [mirror] section")))?;
            crate::circuit::expected_current(m, t)
        }
        (None, None) => Err(cfg_err(format!("{what}: current_ua or tap is required"))),
    }
}

impl PipelineConfig {
    /// Parses a TOML document. Relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let raw: ConfigFile = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        Self::resolve(raw, base)
    }

    /// Reads and parses a config file; relative paths inside it are
    /// resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    fn resolve(raw: ConfigFile, base: &Path) -> Result<Self> {
        let s = &raw.sensor;
        let sensor = NvSensorParams {
            d_mhz: s.d_mhz,
            gamma_mhz_per_mt: s.gamma_mhz_per_mt,
            theta: s.theta_deg.to_radians(),
            phi: s.phi_deg.to_radians(),
            h_nv: s.h_nv_um * UM,
            bias_mt: s.bias_mt,
            hyperfine_mhz: s.hyperfine_mhz,
        };
        sensor.validate()?;

        let g = &raw.grid;
        let grid = match g.origin_um {
            Some(o) => Grid2D::new(g.nx, g.ny, g.pitch_nm * NM, um2(o))?,
            None => Grid2D::centered(g.nx, g.ny, g.pitch_nm * NM)?,
        };

        let a = &raw.acquisition;
        let acquisition = AcquisitionParams {
            n_f: a.n_f,
            span_mhz: a.span_mhz,
            contrast: a.contrast,
            linewidth_mhz: a.linewidth_mhz,
            offset: a.offset,
            noise_sigma: a.noise_sigma,
            sweeps_averaged: a.sweeps_averaged,
            seed: raw.seed,
        };
        acquisition.validate()?;
        let extract = ExtractOptions {
            fit: FitOptions {
                tied: a.tied_fit,
                max_iterations: a.max_fit_iterations,
            },
            max_nonconverged_fraction: a.max_nonconverged_fraction,
        };
        if !(0.0..=1.0).contains(&extract.max_nonconverged_fraction) {
            return Err(cfg_err("max_nonconverged_fraction must lie in [0, 1]"));
        }

        let mut seen = std::collections::BTreeSet::new();
        for t in &raw.taps {
            if !seen.insert(t.name.as_str()) {
                return Err(cfg_err(format!("duplicate tap `{}`", t.name)));
            }
        }
        let mirror = match &raw.mirror {
            Some(m) => {
                let taps = raw
                    .taps
                    .iter()
                    .map(|t| Tap {
                        name: t.name.clone(),
                        multiplier: t.multiplier,
                    })
                    .collect();
                Some(MirrorSpec::from_units(m.unit_aspect, m.n_parallel, m.i_in_ua * UA, taps)?)
            }
            None => None,
        };

        let mut names = std::collections::BTreeSet::new();
        let mut strips = Vec::new();
        for st in &raw.geometry.strips {
            if !names.insert(st.name.clone()) {
                return Err(cfg_err(format!("duplicate conductor name `{}`", st.name)));
            }
            let what = format!("strip `{}`", st.name);
            let norm = st.axis[0].hypot(st.axis[1]);
            if !(norm > 0.0) {
                return Err(cfg_err(format!("{what}: axis must be non-zero")));
            }
            let strip = StripGeometry {
                width: st.width_um * UM,
                standoff: st.standoff_um * UM,
                current: resolve_current(&what, st.current_ua, st.tap.as_deref(), mirror.as_ref())?,
                axis: (st.axis[0] / norm, st.axis[1] / norm),
                center: um2(st.center_um),
            };
            strip.validate()?;
            strips.push(NamedStrip {
                name: st.name.clone(),
                strip,
            });
        }
        let mut paths = Vec::new();
        for p in &raw.geometry.paths {
            if !names.insert(p.name.clone()) {
                return Err(cfg_err(format!("duplicate conductor name `{}`", p.name)));
            }
            let what = format!("path `{}`", p.name);
            let path = CurrentPath {
                vertices: p.vertices_um.iter().map(|&v| um2(v)).collect(),
                width: p.width_um * UM,
                current: resolve_current(&what, p.current_ua, p.tap.as_deref(), mirror.as_ref())?,
                standoff: p.standoff_um * UM,
            };
            path.validate()?;
            paths.push(NamedPath {
                name: p.name.clone(),
                path,
            });
        }

        let inv = &raw.inversion;
        let inversion = InversionOptions {
            pad_factor: inv.pad_factor,
            window: Window {
                kind: inv.window,
                cutoff_wavelength: inv.cutoff_wavelength_um * UM,
            },
            taper_pixels: inv.taper_pixels,
            tikhonov: inv.tikhonov,
        };
        if inversion.pad_factor == 0 || !(inversion.window.cutoff_wavelength > 0.0) {
            return Err(cfg_err("inversion needs pad_factor ≥ 1 and a positive cutoff"));
        }
        if let Some(h) = inv.standoff_um {
            if !(h > 0.0) {
                return Err(cfg_err("inversion standoff_um must be positive"));
            }
        }
        if inv.glyph_stride_px == 0 || !(inv.glyph_threshold_a_per_m >= 0.0) {
            return Err(cfg_err("glyph stride must be ≥ 1 and threshold ≥ 0"));
        }

        let resolve_path = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let calibration = match &raw.calibration {
            Some(c) => {
                if !raw.geometry.strips.iter().any(|s| s.name == c.strip) {
                    return Err(cfg_err(format!("calibration strip `{}` is not a configured strip", c.strip)));
                }
                let transect_csv = c.transect_csv.as_deref().map(resolve_path);
                if let Some(p) = &transect_csv {
                    if !p.is_file() {
                        return Err(cfg_err(format!("calibration transect {} does not exist", p.display())));
                    }
                }
                Some(CalibrationSpec {
                    strip: c.strip.clone(),
                    fit_current: c.fit_current,
                    half_length: c.half_length_um * UM,
                    transect_csv,
                    use_for_inversion: c.use_for_inversion,
                })
            }
            None => None,
        };

        let mut taps = Vec::new();
        for t in &raw.taps {
            let (Some(p0), Some(p1)) = (t.p0_um, t.p1_um) else {
                if t.p0_um.is_some() || t.p1_um.is_some() {
                    return Err(cfg_err(format!("tap `{}`: give both p0_um and p1_um", t.name)));
                }
                continue;
            };
            if t.band_count == 0 {
                return Err(cfg_err(format!("tap `{}`: band_count must be ≥ 1", t.name)));
            }
            taps.push(TapTransect {
                name: t.name.clone(),
                transect: Transect {
                    p0: um2(p0),
                    p1: um2(p1),
                },
                band_count: t.band_count,
                band_spacing: t.band_spacing_um * UM,
                refs: ExternalRefs {
                    reference: t.reference_ua.map(|v| v * UA),
                    conventional: t.conventional_ua.map(|v| v * UA),
                },
            });
        }

        let out_dir = resolve_path(raw.io.out_dir.as_deref().unwrap_or(Path::new("qdm_out")));
        let input_dir = raw.io.input_dir.as_deref().map(resolve_path).unwrap_or_else(|| out_dir.clone());
        let open_circuit_dir = raw.io.open_circuit_dir.as_deref().map(resolve_path);
        if let Some(d) = &open_circuit_dir {
            if !d.is_dir() {
                return Err(cfg_err(format!("open-circuit directory {} does not exist", d.display())));
            }
        }

        Ok(Self {
            seed: raw.seed,
            sensor,
            grid,
            acquisition,
            extract,
            strips,
            paths,
            inversion,
            inversion_standoff: inv.standoff_um.map(|h| h * UM),
            glyph_threshold: inv.glyph_threshold_a_per_m,
            glyph_stride: inv.glyph_stride_px,
            calibration,
            mirror,
            taps,
            io: IoPaths {
                out_dir,
                input_dir,
                open_circuit_dir,
            },
        })
    }

    /// Replaces the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.acquisition.seed = seed;
        self
    }

    /// Hex SHA-256 of the parsed configuration. Formatting, comments, key
    /// order and file paths do not affect it.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Stand-off to use for inversion: the explicit setting, then the
    /// calibration result, then the first conductor.
    pub fn standoff_for_inversion(&self, calibration: Option<&TransectFitResult>) -> Result<f64> {
        if let Some(h) = self.inversion_standoff {
            return Ok(h);
        }
        if let (Some(spec), Some(fit)) = (&self.calibration, calibration) {
            if spec.use_for_inversion {
                return Ok(fit.h);
            }
        }
        self.strips
            .first()
            .map(|s| s.strip.standoff)
            .or_else(|| self.paths.first().map(|p| p.path.standoff))
            .ok_or_else(|| cfg_err("no stand-off for inversion: set inversion.standoff_um"))
    }

    pub fn strip(&self, name: &str) -> Option<&StripGeometry> {
        self.strips.iter().find(|s| s.name == name).map(|s| &s.strip)
    }
}
