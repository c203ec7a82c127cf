//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use qdm_core::calib::fit_standoff;
use qdm_core::circuit::{build_report, expected_current, mirror_ratio, ExternalRefs, MirrorSpec, Tap};
use qdm_core::config::PipelineConfig;
use qdm_core::forward::{strip_bnv_averaged, strip_bnv_map, strip_field, DEFAULT_LAYER_POINTS};
use qdm_core::inversion::{
    integrate_current, invert_bnv, reconstruct_spectrum, vector_glyphs, CurrentDensityMap, IntegrationOptions,
    InversionOptions, Transect,
};
use qdm_core::io::raster::{decode_raster, encode_raster};
use qdm_core::model::{Grid2D, NvSensorParams, ScalarRaster, StripGeometry, Unit};
use qdm_core::odmr::{extract_bnv_map, synth_stack};
use qdm_core::pipeline::{self, forward_bnv};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::{scenario, sheet_quadrature, SHEET_FILAMENTS};

const UM: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Reference strip geometries: (width, stand-off).
const GEOMETRIES: [(f64, f64); 2] = [(9.5e-6, 2.3e-6), (15.5e-6, 2.8e-6)];

fn ac1() -> Outcome {
    let p = NvSensorParams::default();
    let mut worst: f64 = 0.0;
    for (w, h) in GEOMETRIES {
        let strip = StripGeometry::along_y(w, h, 750e-6);
        for ix in 0..=60 {
            let x = -3.0 * w + 6.0 * w * ix as f64 / 60.0;
            for il in 0..=8 {
                let l = p.h_nv * il as f64 / 8.0;
                let b = strip_field(&strip, x, l).unwrap();
                let (bx, bz) = sheet_quadrature(750e-6, w, x, h + l, SHEET_FILAMENTS);
                let scale = bx.hypot(bz);
                worst = worst.max((b.bx - bx).abs() / scale).max((b.bz - bz).abs() / scale);
            }
        }
    }
    outcome(worst < 1e-6, format!("max relative deviation {worst:.2e} (< 1e-6)"))
}

fn standoff_cut(strip: &StripGeometry, p: &NvSensorParams) -> Vec<(f64, f64)> {
    let half = 3.0 * strip.width;
    let n = (2.0 * half / 260e-9).round() as usize + 1;
    (0..n)
        .map(|k| {
            let x = -half + 2.0 * half * k as f64 / (n - 1) as f64;
            (x, strip_bnv_averaged(strip, p, x, DEFAULT_LAYER_POINTS).unwrap())
        })
        .collect()
}

fn ac2() -> Outcome {
    let p = NvSensorParams::default();
    let mut notes = Vec::new();
    let mut pass = true;
    for (w, h) in GEOMETRIES {
        let strip = StripGeometry::along_y(w, h, 750e-6);
        let r = fit_standoff(&standoff_cut(&strip, &p), &strip, &p, true).unwrap();
        let err = (r.h / h - 1.0).abs();
        pass &= err < 0.01;
        notes.push(format!("h {:.1} um err {err:.1e}", h / UM));
    }
    let (w, h) = GEOMETRIES[1];
    let strip = StripGeometry::along_y(w, h, 268e-6);
    let clean = standoff_cut(&strip, &p);
    let peak = clean.iter().fold(0.0_f64, |m, s| m.max(s.1.abs()));
    let noise = Normal::new(0.0, 0.01 * peak).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2_800);
    let trials = 500;
    let mut hits = 0;
    for _ in 0..trials {
        let noisy: Vec<_> = clean.iter().map(|&(x, b)| (x, b + noise.sample(&mut rng))).collect();
        if let Ok(r) = fit_standoff(&noisy, &strip, &p, true) {
            if (r.h / h - 1.0).abs() < 0.10 {
                hits += 1;
            }
        }
    }
    let rate = hits as f64 / trials as f64;
    pass &= rate >= 0.95;
    notes.push(format!("1% noise: {hits}/{trials} within 10%"));
    outcome(pass, notes.join(", "))
}

fn round_trip_rms_mt(cfg: &PipelineConfig) -> f64 {
    let total = forward_bnv(cfg)
        .unwrap()
        .to_unit(Unit::Millitesla)
        .unwrap()
        .map(|v| v + cfg.sensor.bias_mt)
        .unwrap();
    let s = synth_stack(&total, &cfg.sensor, &cfg.acquisition).unwrap();
    let out = extract_bnv_map(&s.minus, &s.plus, &cfg.sensor, &cfg.extract).unwrap();
    out.map.rms_diff(&total).unwrap()
}

fn ac3() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let clean = scenario("mirror.toml", dir.path());
    let noisy = scenario("mirror_noisy.toml", dir.path());
    let ok_setup = clean.acquisition.n_f == 71
        && noisy.acquisition.noise_sigma == 0.1 * noisy.acquisition.contrast
        && noisy.acquisition.sweeps_averaged == 110
        && clean.grid.len() == 256 * 256;
    let a = round_trip_rms_mt(&clean);
    let b = round_trip_rms_mt(&noisy);
    outcome(
        ok_setup && a < 1e-3 && b < 5e-3,
        format!("RMS {a:.2e} mT noiseless (< 1e-3), {:.2} uT noisy (< 5)", b * 1e3),
    )
}

fn mirror_current(name: &str) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario(name, dir.path());
    pipeline::synth(&cfg).unwrap();
    pipeline::fit(&cfg).unwrap();
    pipeline::calibrate(&cfg).unwrap();
    pipeline::invert(&cfg).unwrap();
    let report = pipeline::report(&cfg).unwrap();
    report.integrals.iter().find(|t| t.tap == "output").unwrap().current_a
}

fn ac4() -> Outcome {
    let a = mirror_current("mirror.toml");
    let b = mirror_current("mirror_noisy.toml");
    let ea = (a / 750e-6 - 1.0).abs();
    let eb = (b / 750e-6 - 1.0).abs();
    outcome(
        ea < 0.02 && eb < 0.10,
        format!(
            "{:.1} uA noiseless ({:.2}% < 2%), {:.1} uA noisy ({:.2}% < 10%)",
            a * 1e6,
            100.0 * ea,
            b * 1e6,
            100.0 * eb
        ),
    )
}

/// Uniform density across a strip of `width` along `+y`, area-weighted at
/// the edges.
fn uniform_strip(density: f64, width: f64) -> CurrentDensityMap {
    let g = Grid2D::centered(161, 9, 260e-9).unwrap();
    let p = g.pitch();
    let cover = |x: f64| ((0.5 * width).min(x + 0.5 * p) - (-0.5 * width).max(x - 0.5 * p)).max(0.0) / p;
    let ky = ScalarRaster::from_fn(g, Unit::AmperePerMeter, |x, _| density * cover(x)).unwrap();
    let kx = ScalarRaster::new(g, Unit::AmperePerMeter, 0.0).unwrap();
    CurrentDensityMap::from_components(kx, ky, 2.3e-6, InversionOptions::default()).unwrap()
}

fn ac5() -> Outcome {
    let t = Transect {
        p0: (-19.0 * UM, 0.0),
        p1: (19.0 * UM, 0.0),
    };
    let opts = IntegrationOptions::default();
    let a = integrate_current(&uniform_strip(79.5, 9.5 * UM), &t, &opts).unwrap().current;
    let b = integrate_current(&uniform_strip(17.3, 15.5 * UM), &t, &opts).unwrap().current;
    let ea = (a / 755.25e-6 - 1.0).abs();
    let eb = (b / 268.15e-6 - 1.0).abs();

    let spec = MirrorSpec::from_units(
        1.0,
        15,
        50e-6,
        vec![Tap {
            name: "ground".into(),
            multiplier: 6.0,
        }],
    )
    .unwrap();
    let qdm = [("output".to_string(), 755.2e-6), ("ground".to_string(), 268.2e-6)].into();
    let refs = [(
        "output".to_string(),
        ExternalRefs {
            reference: Some(750e-6),
            conventional: Some(746.1e-6),
        },
    )]
    .into();
    let rows = build_report(&spec, &qdm, &refs).unwrap();
    let conv = format!("{:.1}", rows[0].pct_error_vs_conventional.unwrap());
    let ground = format!("{:.1}", rows[1].pct_error_vs_expected.unwrap());
    outcome(
        ea < 1e-3 && eb < 1e-3 && conv == "1.2" && ground == "10.6",
        format!(
            "{:.3} uA, {:.3} uA; table errors {conv}% and {ground}%",
            a * 1e6,
            b * 1e6
        ),
    )
}

fn ac6() -> Outcome {
    let spec = MirrorSpec::from_units(
        1.0,
        15,
        50e-6,
        vec![Tap {
            name: "ground".into(),
            multiplier: 6.0,
        }],
    )
    .unwrap();
    let out = expected_current(&spec, "output").unwrap();
    let gnd = expected_current(&spec, "ground").unwrap();
    let pts: Vec<_> = (1..=10).map(|k| (5e-6 * k as f64, 14.92 * 5e-6 * k as f64)).collect();
    let slope = mirror_ratio(&pts).unwrap().slope;
    outcome(
        (out - 750e-6).abs() < 1e-18 && (gnd - 300e-6).abs() < 1e-18 && (slope - 14.92).abs() < 1e-6,
        format!("{:.6} uA, {:.6} uA, slope {slope:.9}", out * 1e6, gnd * 1e6),
    )
}

fn parity_holds() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let uniform = rand_distr::Uniform::new(0.0, 1.0).unwrap();
    (0..2000).all(|_| {
        let mut u = || uniform.sample(&mut rng);
        let strip = StripGeometry::along_y((1.0 + 19.0 * u()) * UM, (0.5 + 4.5 * u()) * UM, 1e-3 * (2.0 * u() - 1.0));
        let (x, l) = (60.0 * u() * UM, 2.5 * u() * UM);
        let a = strip_field(&strip, x, l).unwrap();
        let b = strip_field(&strip, -x, l).unwrap();
        let s = a.norm().max(1e-30);
        (a.bz + b.bz).abs() <= 1e-12 * s && (a.bx - b.bx).abs() <= 1e-12 * s
    })
}

fn pipeline_is_linear(p: &NvSensorParams) -> bool {
    let g = Grid2D::centered(128, 128, 260e-9).unwrap();
    let t = Transect {
        p0: (-12.0 * UM, 0.0),
        p1: (12.0 * UM, 0.0),
    };
    let current = |i: f64| {
        let strip = StripGeometry::along_y(9.5 * UM, 2.3 * UM, i);
        let b = strip_bnv_map(&strip, p, &g, DEFAULT_LAYER_POINTS).unwrap();
        let k = invert_bnv(&b, p, 2.3 * UM, &InversionOptions::default()).unwrap();
        integrate_current(&k, &t, &IntegrationOptions::default()).unwrap().current
    };
    let (a, b) = (current(250e-6), current(750e-6));
    (b - 3.0 * a).abs() < 1e-9 * b.abs()
}

fn continuity_holds(p: &NvSensorParams) -> bool {
    let g = Grid2D::centered(96, 96, 260e-9).unwrap();
    let strip = StripGeometry {
        axis: (0.6, -0.8),
        ..StripGeometry::along_y(6.0 * UM, 2.3 * UM, 500e-6)
    };
    let b = strip_bnv_map(&strip, p, &g, DEFAULT_LAYER_POINTS).unwrap();
    let s = reconstruct_spectrum(&b, p, 2.3 * UM, &InversionOptions::default()).unwrap();
    (0..s.ny).all(|j| {
        (0..s.nx).all(|i| {
            let m = j * s.nx + i;
            if !s.retained[m] {
                return true;
            }
            let (kx, ky) = (s.kx[i], s.ky[j]);
            let mag = (s.kx_hat[m].norm_sqr() + s.ky_hat[m].norm_sqr()).sqrt();
            (s.kx_hat[m] * kx + s.ky_hat[m] * ky).norm() <= 1e-8 * kx.hypot(ky) * mag
        })
    })
}

fn signs_hold(p: &NvSensorParams) -> bool {
    let g = Grid2D::centered(256, 256, 260e-9).unwrap();
    [(-1.0, -1.0), (1.0, 1.0)].iter().all(|&(dir, sign)| {
        let strip = StripGeometry {
            axis: (0.0, dir),
            ..StripGeometry::along_y(9.5 * UM, 2.3 * UM, 750e-6)
        };
        let b = strip_bnv_map(&strip, p, &g, DEFAULT_LAYER_POINTS).unwrap();
        let k = invert_bnv(&b, p, 2.3 * UM, &InversionOptions::default()).unwrap();
        (48..208).all(|j| {
            (0..g.nx()).all(|i| {
                let (x, _) = g.coord(i, j);
                x.abs() >= 3.0 * UM || k.ky.get(i, j) * sign > 0.0
            })
        })
    })
}

fn deterministic(p: &NvSensorParams) -> bool {
    let g = Grid2D::centered(24, 20, 1.0 * UM).unwrap();
    let strip = StripGeometry::along_y(9.5 * UM, 2.3 * UM, 750e-6);
    let total = strip_bnv_map(&strip, p, &g, DEFAULT_LAYER_POINTS)
        .unwrap()
        .to_unit(Unit::Millitesla)
        .unwrap()
        .map(|v| v + p.bias_mt)
        .unwrap();
    let acq = qdm_core::odmr::AcquisitionParams {
        noise_sigma: 0.002,
        sweeps_averaged: 4,
        seed: 7,
        ..Default::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let s = synth_stack(&total, p, &acq).unwrap();
            let b = extract_bnv_map(&s.minus, &s.plus, p, &Default::default()).unwrap().map;
            let k = invert_bnv(&b.to_unit(Unit::Tesla).unwrap().map(|v| v - 2e-3).unwrap(), p, 2.3 * UM, &Default::default()).unwrap();
            (encode_raster(&b), encode_raster(&k.kx), encode_raster(&k.ky))
        })
    };
    let one = run(1);
    one == run(8) && one == run(1)
}

fn raster_bits_round_trip() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Grid2D::new(13, 7, 260e-9, (-1.3e-6, 4.2e-6)).unwrap();
    let dist = rand_distr::StandardNormal;
    let v: Vec<f64> = (0..g.len()).map(|_| 1e-5 * Distribution::<f64>::sample(&dist, &mut rng)).collect();
    let r = ScalarRaster::from_values(g, Unit::Tesla, v).unwrap();
    let back = decode_raster(&encode_raster(&r), std::path::Path::new("r.qdmr")).unwrap();
    back.grid() == r.grid() && r.values().iter().zip(back.values()).all(|(a, b)| a.to_bits() == b.to_bits())
}

fn ac7() -> Outcome {
    let p = NvSensorParams::default();
    let checks = [
        ("parity", parity_holds()),
        ("linearity", pipeline_is_linear(&p)),
        ("continuity", continuity_holds(&p)),
        ("signs", signs_hold(&p)),
        ("determinism", deterministic(&p)),
        ("raster bits", raster_bits_round_trip()),
    ];
    let failed: Vec<_> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let names: Vec<_> = checks.iter().map(|c| c.0).collect();
    if failed.is_empty() {
        outcome(true, names.join(", "))
    } else {
        outcome(false, format!("failed: {}", failed.join(", ")))
    }
}

/// Arc length along a polyline of the point nearest to `q`, and the
/// distance to it.
fn arc_position(vertices: &[(f64, f64)], q: (f64, f64)) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    let mut s0 = 0.0;
    for w in vertices.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = dx.hypot(dy);
        let t = (((q.0 - a.0) * dx + (q.1 - a.1) * dy) / (len * len)).clamp(0.0, 1.0);
        let d = (q.0 - a.0 - t * dx).hypot(q.1 - a.1 - t * dy);
        if d < best.0 {
            best = (d, s0 + t * len);
        }
        s0 += len;
    }
    (best.1, best.0)
}

fn ac8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenario("corner.toml", dir.path());
    let path = &cfg.paths[0].path;
    let b = forward_bnv(&cfg).unwrap();
    let k = invert_bnv(&b, &cfg.sensor, path.standoff, &cfg.inversion).unwrap();
    let current = |name: &str| {
        let tap = cfg.taps.iter().find(|t| t.name == name).unwrap();
        let opts = IntegrationOptions {
            band_count: tap.band_count,
            band_spacing: tap.band_spacing,
            baseline: true,
        };
        integrate_current(&k, &tap.transect, &opts).unwrap().current
    };
    let (up, down) = (current("upstream"), current("downstream"));
    let mismatch = (up - down).abs() / up.abs().max(down.abs());

    let glyphs = vector_glyphs(&k, 12.0, 2).unwrap();
    let mut along: Vec<(f64, f64, f64)> = glyphs
        .iter()
        .filter(|g| g.x.abs() < 22.0 * UM && g.y.abs() < 22.0 * UM)
        .filter_map(|g| {
            let (s, d) = arc_position(&path.vertices, (g.x, g.y));
            (d < 0.3 * path.width).then_some((s, g.kx, g.ky))
        })
        .collect();
    along.sort_by(|a, b| a.0.total_cmp(&b.0));
    // mean direction in 2 µm bins of arc length
    let mut bins: Vec<(f64, f64, f64)> = Vec::new();
    for (s, kx, ky) in along {
        match bins.last_mut() {
            Some(last) if s - last.0 < 2.0 * UM => {
                last.1 += kx;
                last.2 += ky;
            }
            _ => bins.push((s, kx, ky)),
        }
    }
    let angles: Vec<f64> = bins.iter().map(|b| b.2.atan2(b.1).to_degrees()).collect();
    let monotone = angles.windows(2).all(|w| w[1] <= w[0] + 3.0);
    let first = angles.first().copied().unwrap_or(f64::NAN);
    let last = angles.last().copied().unwrap_or(f64::NAN);
    let turn = first - last;
    let pass = mismatch <= 0.05 && monotone && (turn - 90.0).abs() < 10.0 && angles.len() >= 8;
    outcome(
        pass,
        format!(
            "upstream {:.1} uA, downstream {:.1} uA (mismatch {:.2}% <= 5%); glyphs turn {first:.1} -> {last:.1} deg over {} bins, monotone {monotone}",
            up * 1e6,
            down * 1e6,
            100.0 * mismatch,
            angles.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 8] = [
        ("AC1 strip field vs filament quadrature", ac1, Duration::from_secs(10)),
        ("AC2 stand-off recovery", ac2, Duration::from_secs(60)),
        ("AC3 ODMR round trip 256x256", ac3, Duration::from_secs(300)),
        ("AC4 mirror output end-to-end current", ac4, Duration::from_secs(600)),
        ("AC5 region currents and report percentages", ac5, Duration::from_secs(60)),
        ("AC6 mirror currents and ratio", ac6, Duration::from_secs(60)),
        ("AC7 property suites", ac7, Duration::from_secs(300)),
        ("AC8 corner flow", ac8, Duration::from_secs(300)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, run, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| outcome(false, "panicked"));
        let elapsed = t0.elapsed();
        let pass = result.pass && elapsed <= budget;
        if !pass {
            failures += 1;
        }
        println!(
            "{} {name}: {} [{:.1} s, budget {} s]",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
