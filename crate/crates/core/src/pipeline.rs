//! Configured pipeline stages and the files they exchange.
//!
//! Each stage reads its inputs from and writes its products to the
//! configured directories, so stages can run one at a time or chained by
//! [`analyze`]. Errors are tagged with the stage name.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calib::{fit_standoff, strip_line_cut, TransectFitResult};
use crate::circuit::{build_report, render_table, ComparisonRow};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::forward::{path_bnv_map, strip_bnv_map, DEFAULT_LAYER_POINTS};
use crate::inversion::{
    integrate_current, invert_bnv, transect_profile, vector_glyphs, CurrentDensityMap, IntegrationOptions,
};
use crate::io::heatmap::emit_heatmap;
use crate::io::raster::{read_raster, read_stack, write_raster, write_stack};
use crate::io::table::{encode_report, read_line_cut, write_columns, write_line_cut, PROFILE_HEADER};
use crate::io::atomic_write;
use crate::model::{resonance_pair, Grid2D, ScalarRaster, Unit};
use crate::odmr::{bias_map, extract_bnv_map, subtract_bias, synth_stack, OdmrStack, SynthWarning};

/// File names inside the output directory.
pub mod files {
    pub const STACK_MINUS: &str = "stack_f_minus.qdms";
    pub const STACK_PLUS: &str = "stack_f_plus.qdms";
    pub const TRUTH_BNV: &str = "truth_bnv.qdmr";
    pub const TRUTH_KX: &str = "truth_kx.qdmr";
    pub const TRUTH_KY: &str = "truth_ky.qdmr";
    pub const TRUTH_KMAG: &str = "truth_kmag.qdmr";
    pub const BNV_TOTAL: &str = "bnv_total.qdmr";
    pub const BNV: &str = "bnv.qdmr";
    pub const FIT_INFILLED: &str = "fit_infilled.qdmr";
    pub const CALIBRATION: &str = "calibration.json";
    pub const CALIBRATION_CUT: &str = "calibration_line_cut.csv";
    pub const KX: &str = "kx.qdmr";
    pub const KY: &str = "ky.qdmr";
    pub const KMAG: &str = "kmag.qdmr";
    pub const INVERSION: &str = "inversion.json";
    pub const REPORT_TXT: &str = "report.txt";
    pub const REPORT_CSV: &str = "report.csv";
    pub const REPORT_JSON: &str = "report.json";
    pub const MANIFEST: &str = "manifest.json";
}

fn json_bytes<T: Serialize>(v: &T, path: &Path) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(|e| Error::format(path, e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    atomic_write(path, &json_bytes(v, path)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Bias-free `B_NV` (tesla) of every configured conductor, layer-averaged.
pub fn forward_bnv(cfg: &PipelineConfig) -> Result<ScalarRaster> {
    let mut total = ScalarRaster::new(cfg.grid, Unit::Tesla, 0.0)?;
    for s in &cfg.strips {
        total = total.add(&strip_bnv_map(&s.strip, &cfg.sensor, &cfg.grid, DEFAULT_LAYER_POINTS)?)?;
    }
    for p in &cfg.paths {
        total = total.add(&path_bnv_map(&p.path, &cfg.sensor, &cfg.grid, DEFAULT_LAYER_POINTS)?)?;
    }
    Ok(total)
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Ground-truth sheet current density `(Kx, Ky)` (A/m), area-weighted over
/// 4×4 sub-pixel samples. Inside a polyline ribbon the flow follows the
/// nearest centerline segment.
pub fn truth_current(cfg: &PipelineConfig) -> Result<(ScalarRaster, ScalarRaster)> {
    const SUB: usize = 4;
    let g = cfg.grid;
    let density_at = |x: f64, y: f64| -> (f64, f64) {
        let mut k = (0.0, 0.0);
        for s in &cfg.strips {
            let st = &s.strip;
            if st.lateral_offset(x, y).abs() < 0.5 * st.width {
                let j = st.current / st.width;
                k.0 += j * st.axis.0;
                k.1 += j * st.axis.1;
            }
        }
        for p in &cfg.paths {
            let path = &p.path;
            let nearest = path
                .vertices
                .windows(2)
                .map(|w| (segment_distance((x, y), w[0], w[1]), w[0], w[1]))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((d, a, b)) = nearest {
                if d < 0.5 * path.width {
                    let len = (b.0 - a.0).hypot(b.1 - a.1);
                    let j = path.current / path.width;
                    k.0 += j * (b.0 - a.0) / len;
                    k.1 += j * (b.1 - a.1) / len;
                }
            }
        }
        k
    };
    let mut kx = Vec::with_capacity(g.len());
    let mut ky = Vec::with_capacity(g.len());
    let step = g.pitch() / SUB as f64;
    for idx in 0..g.len() {
        let (cx, cy) = g.coord_of_index(idx);
        let mut acc = (0.0, 0.0);
        for sj in 0..SUB {
            for si in 0..SUB {
                let x = cx + (si as f64 + 0.5) * step - 0.5 * g.pitch();
                let y = cy + (sj as f64 + 0.5) * step - 0.5 * g.pitch();
                let k = density_at(x, y);
                acc.0 += k.0;
                acc.1 += k.1;
            }
        }
        let n = (SUB * SUB) as f64;
        kx.push(acc.0 / n);
        ky.push(acc.1 / n);
    }
    Ok((
        ScalarRaster::from_values(g, Unit::AmperePerMeter, kx)?,
        ScalarRaster::from_values(g, Unit::AmperePerMeter, ky)?,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub max_abs_bnv_t: f64,
    /// Resonances at the mean total field, MHz.
    pub f_minus_mhz: f64,
    pub f_plus_mhz: f64,
    pub max_truth_k_a_per_m: f64,
    pub warnings: Vec<String>,
    pub outputs: Vec<PathBuf>,
}

/// Forward model and ODMR synthesis: writes both branch stacks and the
/// ground-truth field and current maps.
pub fn synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    run_synth(cfg).map_err(|e| e.in_stage("synth"))
}

fn run_synth(cfg: &PipelineConfig) -> Result<SynthSummary> {
    let out = &cfg.io.out_dir;
    let bnv = forward_bnv(cfg)?;
    let total_mt = bnv.to_unit(Unit::Millitesla)?.map(|v| v + cfg.sensor.bias_mt)?;
    let stacks = synth_stack(&total_mt, &cfg.sensor, &cfg.acquisition)?;
    let (kx, ky) = truth_current(cfg)?;
    let kmag = kx.zip_with(&ky, f64::hypot)?;

    let mut outputs = Vec::new();
    let mut put = |name: &str, r: &ScalarRaster| -> Result<()> {
        let p = out.join(name);
        write_raster(&p, r)?;
        outputs.push(p);
        Ok(())
    };
    put(files::TRUTH_BNV, &bnv)?;
    put(files::TRUTH_KX, &kx)?;
    put(files::TRUTH_KY, &ky)?;
    put(files::TRUTH_KMAG, &kmag)?;
    for (name, s) in [(files::STACK_MINUS, &stacks.minus), (files::STACK_PLUS, &stacks.plus)] {
        let p = out.join(name);
        write_stack(&p, s)?;
        outputs.push(p);
    }

    let mean_mt = total_mt.values().iter().sum::<f64>() / total_mt.values().len() as f64;
    let (f_minus_mhz, f_plus_mhz) = resonance_pair(&cfg.sensor, mean_mt)?;
    let warnings = stacks
        .warnings
        .iter()
        .map(|w| match w {
            SynthWarning::DipsOutsideSpan { branch, pixels } => {
                format!("{pixels} pixels have {branch} dips outside the swept band")
            }
        })
        .collect();
    Ok(SynthSummary {
        max_abs_bnv_t: bnv.max_abs(),
        f_minus_mhz,
        f_plus_mhz,
        max_truth_k_a_per_m: kmag.max_abs(),
        warnings,
        outputs,
    })
}

fn read_pair(dir: &Path) -> Result<(OdmrStack, OdmrStack)> {
    Ok((read_stack(&dir.join(files::STACK_MINUS))?, read_stack(&dir.join(files::STACK_PLUS))?))
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub pixels: usize,
    pub infilled: usize,
    pub max_abs_bnv_t: f64,
    /// How the bias field was removed: `open_circuit` or `uniform`.
    pub bias_source: String,
    pub outputs: Vec<PathBuf>,
}

/// Per-pixel lineshape fits of both branches, bias removal, and the
/// bias-free `B_NV` map (tesla).
pub fn fit(cfg: &PipelineConfig) -> Result<FitSummary> {
    run_fit(cfg).map_err(|e| e.in_stage("fit"))
}

fn run_fit(cfg: &PipelineConfig) -> Result<FitSummary> {
    let (minus, plus) = read_pair(&cfg.io.input_dir)?;
    let ex = extract_bnv_map(&minus, &plus, &cfg.sensor, &cfg.extract)?;
    let (bias, bias_source) = match &cfg.io.open_circuit_dir {
        Some(dir) => {
            let (m0, p0) = read_pair(dir)?;
            (extract_bnv_map(&m0, &p0, &cfg.sensor, &cfg.extract)?.map, "open_circuit")
        }
        None => (bias_map(ex.map.grid(), &cfg.sensor)?, "uniform"),
    };
    let bnv = subtract_bias(&ex.map, &bias)?.to_unit(Unit::Tesla)?;
    let infilled = ScalarRaster::from_values(
        *ex.map.grid(),
        Unit::Dimensionless,
        ex.infilled.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )?;
    let out = &cfg.io.out_dir;
    let mut outputs = Vec::new();
    for (name, r) in [(files::BNV_TOTAL, &ex.map), (files::BNV, &bnv), (files::FIT_INFILLED, &infilled)] {
        let p = out.join(name);
        write_raster(&p, r)?;
        outputs.push(p);
    }
    Ok(FitSummary {
        pixels: ex.infilled.len(),
        infilled: ex.infilled_count(),
        max_abs_bnv_t: bnv.max_abs(),
        bias_source: bias_source.into(),
        outputs,
    })
}

/// Calibration record written to `calibration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub strip: String,
    pub h_m: f64,
    pub current_a: f64,
    pub center_offset_m: f64,
    pub residual_rms_t: f64,
    pub variance_h_m2: Option<f64>,
    pub converged: bool,
    pub samples: usize,
}

/// Stand-off fit on the configured strip. Returns `None` when no
/// calibration is configured.
pub fn calibrate(cfg: &PipelineConfig) -> Result<Option<CalibrationRecord>> {
    run_calibrate(cfg).map_err(|e| e.in_stage("calibrate"))
}

fn run_calibrate(cfg: &PipelineConfig) -> Result<Option<CalibrationRecord>> {
    let Some(spec) = &cfg.calibration else { return Ok(None) };
    let strip = cfg
        .strip(&spec.strip)
        .ok_or_else(|| Error::Config(format!("unknown strip `{}`", spec.strip)))?;
    let cut = match &spec.transect_csv {
        Some(p) => read_line_cut(p)?,
        None => {
            let bnv = read_raster(&cfg.io.out_dir.join(files::BNV))?;
            strip_line_cut(&bnv, strip, spec.half_length, bnv.grid().pitch())?
        }
    };
    let fit: TransectFitResult = fit_standoff(&cut, strip, &cfg.sensor, spec.fit_current)?;
    let record = CalibrationRecord {
        strip: spec.strip.clone(),
        h_m: fit.h,
        current_a: fit.current,
        center_offset_m: fit.center_offset,
        residual_rms_t: fit.residual_rms,
        variance_h_m2: fit.covariance_diag.map(|c| c[0]),
        converged: fit.converged,
        samples: cut.len(),
    };
    write_line_cut(&cfg.io.out_dir.join(files::CALIBRATION_CUT), &cut)?;
    write_json(&cfg.io.out_dir.join(files::CALIBRATION), &record)?;
    Ok(Some(record))
}

fn calibrated(cfg: &PipelineConfig) -> Result<Option<TransectFitResult>> {
    if cfg.calibration.is_none() {
        return Ok(None);
    }
    let p = cfg.io.out_dir.join(files::CALIBRATION);
    if !p.is_file() {
        return Ok(None);
    }
    let r: CalibrationRecord = read_json(&p)?;
    if !r.converged {
        return Ok(None);
    }
    Ok(Some(TransectFitResult {
        h: r.h_m,
        current: r.current_a,
        center_offset: r.center_offset_m,
        residual_rms: r.residual_rms_t,
        covariance_diag: None,
        converged: r.converged,
        iterations: 0,
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionRecord {
    pub standoff_m: f64,
    pub pad_factor: usize,
    pub cutoff_wavelength_m: f64,
    pub window: String,
    pub max_k_a_per_m: f64,
    pub warnings: Vec<String>,
}

/// Current-density reconstruction from `bnv.qdmr`.
pub fn invert(cfg: &PipelineConfig) -> Result<InversionRecord> {
    run_invert(cfg).map_err(|e| e.in_stage("invert"))
}

fn run_invert(cfg: &PipelineConfig) -> Result<InversionRecord> {
    let out = &cfg.io.out_dir;
    let bnv = read_raster(&out.join(files::BNV))?;
    let h = cfg.standoff_for_inversion(calibrated(cfg)?.as_ref())?;
    let map = invert_bnv(&bnv, &cfg.sensor, h, &cfg.inversion)?;
    write_raster(&out.join(files::KX), &map.kx)?;
    write_raster(&out.join(files::KY), &map.ky)?;
    write_raster(&out.join(files::KMAG), &map.kmag)?;
    let record = InversionRecord {
        standoff_m: h,
        pad_factor: cfg.inversion.pad_factor,
        cutoff_wavelength_m: cfg.inversion.window.cutoff_wavelength,
        window: format!("{:?}", cfg.inversion.window.kind).to_lowercase(),
        max_k_a_per_m: map.kmag.max_abs(),
        warnings: map.warnings.clone(),
    };
    write_json(&out.join(files::INVERSION), &record)?;
    Ok(record)
}

fn load_kmap(cfg: &PipelineConfig) -> Result<CurrentDensityMap> {
    let out = &cfg.io.out_dir;
    let kx = read_raster(&out.join(files::KX))?;
    let ky = read_raster(&out.join(files::KY))?;
    let h = read_json::<InversionRecord>(&out.join(files::INVERSION))
        .map(|r| r.standoff_m)
        .unwrap_or(f64::NAN);
    CurrentDensityMap::from_components(kx, ky, h, cfg.inversion)
}

/// Integrated current through one tap's transect band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapIntegral {
    pub tap: String,
    pub current_a: f64,
    pub current_std_a: f64,
    pub mean_density_a_per_m: f64,
    pub density_std_a_per_m: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub integrals: Vec<TapIntegral>,
    pub rows: Vec<ComparisonRow>,
    pub table: String,
}

/// Integrates the reconstructed current across every tap transect and
/// compares against the mirror expectation and external references.
pub fn report(cfg: &PipelineConfig) -> Result<Report> {
    run_report(cfg).map_err(|e| e.in_stage("report"))
}

fn run_report(cfg: &PipelineConfig) -> Result<Report> {
    let mirror = cfg
        .mirror
        .as_ref()
        .ok_or_else(|| Error::Config("report needs a [mirror] section".into()))?;
    if cfg.taps.is_empty() {
        return Err(Error::Config("report needs at least one tap with a transect".into()));
    }
    let kmap = load_kmap(cfg)?;
    let out = &cfg.io.out_dir;
    let mut integrals = Vec::new();
    let mut qdm = BTreeMap::new();
    let mut refs = BTreeMap::new();
    for tap in &cfg.taps {
        let opts = IntegrationOptions {
            band_count: tap.band_count,
            band_spacing: tap.band_spacing,
            baseline: true,
        };
        let r = integrate_current(&kmap, &tap.transect, &opts)?;
        let (s, k) = transect_profile(&kmap, &tap.transect)?;
        write_columns(&out.join(format!("transect_{}.csv", tap.name)), &PROFILE_HEADER, &[&s, &k])?;
        qdm.insert(tap.name.clone(), r.current);
        refs.insert(tap.name.clone(), tap.refs);
        integrals.push(TapIntegral {
            tap: tap.name.clone(),
            current_a: r.current,
            current_std_a: r.current_std,
            mean_density_a_per_m: r.mean_density,
            density_std_a_per_m: r.density_std,
        });
    }
    let rows = build_report(mirror, &qdm, &refs)?;
    let table = render_table(&rows);
    atomic_write(&out.join(files::REPORT_TXT), table.as_bytes())?;
    atomic_write(&out.join(files::REPORT_CSV), &encode_report(&rows)?)?;
    let report = Report { integrals, rows, table };
    write_json(&out.join(files::REPORT_JSON), &report)?;
    Ok(report)
}

/// Renders every available map product in the output directory to PNG;
/// the `|K|` map carries vector glyphs.
pub fn heatmap(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    run_heatmap(cfg).map_err(|e| e.in_stage("heatmap"))
}

fn run_heatmap(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let out = &cfg.io.out_dir;
    let mut written = Vec::new();
    for name in [files::TRUTH_BNV, files::TRUTH_KMAG, files::BNV, files::KX, files::KY] {
        let src = out.join(name);
        if src.is_file() {
            let png = src.with_extension("png");
            emit_heatmap(&read_raster(&src)?, None, &[], 0.0, &png)?;
            written.push(png);
        }
    }
    if out.join(files::KX).is_file() && out.join(files::KY).is_file() {
        let kmap = load_kmap(cfg)?;
        let glyphs = vector_glyphs(&kmap, cfg.glyph_threshold, cfg.glyph_stride)?;
        let png = out.join(files::KMAG).with_extension("png");
        emit_heatmap(&kmap.kmag, None, &glyphs, cfg.glyph_stride as f64, &png)?;
        written.push(png);
    }
    if written.is_empty() {
        return Err(Error::Config(format!("no rasters to render in {}", out.display())));
    }
    Ok(written)
}

/// Renders one raster file to `png` with the automatic scale.
pub fn heatmap_file(raster: &Path, png: &Path) -> Result<()> {
    let r = read_raster(raster).map_err(|e| e.in_stage("heatmap"))?;
    emit_heatmap(&r, None, &[], 0.0, png)
        .map(|_| ())
        .map_err(|e| e.in_stage("heatmap"))
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSummary {
    pub fit: FitSummary,
    pub calibration: Option<CalibrationRecord>,
    pub inversion: InversionRecord,
    pub report: Option<Report>,
    pub heatmaps: Vec<PathBuf>,
    pub timings: Vec<StageTiming>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let v = f()?;
    timings.push(StageTiming {
        stage: stage.into(),
        seconds: t0.elapsed().as_secs_f64(),
    });
    Ok(v)
}

/// fit → calibrate (if configured) → invert → report (if a mirror and taps
/// are configured) → heatmap.
pub fn analyze(cfg: &PipelineConfig) -> Result<AnalyzeSummary> {
    let mut timings = Vec::new();
    let fit = timed(&mut timings, "fit", || fit(cfg))?;
    let calibration = timed(&mut timings, "calibrate", || calibrate(cfg))?;
    let inversion = timed(&mut timings, "invert", || invert(cfg))?;
    let report = if cfg.mirror.is_some() && !cfg.taps.is_empty() {
        Some(timed(&mut timings, "report", || report(cfg))?)
    } else {
        None
    };
    let heatmaps = timed(&mut timings, "heatmap", || heatmap(cfg))?;
    Ok(AnalyzeSummary {
        fit,
        calibration,
        inversion,
        report,
        heatmaps,
        timings,
    })
}

/// Run record written to `manifest.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_sha256: String,
    pub seed: u64,
    pub threads: usize,
    pub grid: Grid2D,
    pub timings: Vec<StageTiming>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(cfg: &PipelineConfig, command: &str, config_path: Option<&Path>, threads: usize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            threads,
            grid: cfg.grid,
            timings: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Lists the output directory and writes the manifest into it.
    pub fn write(mut self, out_dir: &Path) -> Result<PathBuf> {
        let mut names: Vec<String> = std::fs::read_dir(out_dir)
            .map_err(|e| Error::io(out_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != files::MANIFEST && !n.starts_with('.'))
            .collect();
        names.sort();
        self.outputs = names;
        let p = out_dir.join(files::MANIFEST);
        write_json(&p, &self)?;
        Ok(p)
    }
}
