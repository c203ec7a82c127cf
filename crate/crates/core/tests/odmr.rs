mod common;

use qdm_core::forward::{strip_bnv_map, DEFAULT_LAYER_POINTS};
use qdm_core::model::{resonance_pair, Grid2D, NvSensorParams, ScalarRaster, StripGeometry, Unit};
use qdm_core::odmr::{
    bias_map, extract_bnv_map, fit_pixel, frequency_axis, subtract_bias, synth_stack, AcquisitionParams,
    ExtractOptions, FitOptions, Spectrum,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::doublet;

const UM: f64 = 1e-6;

fn strip_total_mt(current: f64, grid: &Grid2D, p: &NvSensorParams) -> (ScalarRaster, ScalarRaster) {
    let s = StripGeometry::along_y(9.5 * UM, 2.3 * UM, current);
    let sample = strip_bnv_map(&s, p, grid, DEFAULT_LAYER_POINTS)
        .unwrap()
        .to_unit(Unit::Millitesla)
        .unwrap();
    let total = sample.map(|v| v + p.bias_mt).unwrap();
    (sample, total)
}

fn round_trip(b_mt: &ScalarRaster, p: &NvSensorParams, acq: &AcquisitionParams) -> ScalarRaster {
    let s = synth_stack(b_mt, p, acq).unwrap();
    extract_bnv_map(&s.minus, &s.plus, p, &ExtractOptions::default()).unwrap().map
}

// 71 points over 10 MHz; the branch center is the quantity that enters B_NV.
#[test]
fn noisy_center_recovery_rate() {
    let freqs = frequency_axis(2926.0, 10.0, 71);
    let clean = doublet(&freqs, [2924.5, 2927.5], 0.02, 0.5, 0.0);
    let noise = Normal::new(0.0, 0.1 * 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_101);
    let trials = 1000;
    let mut hits = 0;
    for _ in 0..trials {
        let y: Vec<f64> = clean.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let fit = fit_pixel(Spectrum::new(&freqs, &y), None, &FitOptions::default()).unwrap();
        if fit.converged && (fit.branch_center - 2926.0).abs() < 0.05 {
            hits += 1;
        }
    }
    let rate = hits as f64 / trials as f64;
    assert!(rate >= 0.95, "recovery rate {rate}");
}

#[test]
fn noiseless_doublet_centers() {
    let freqs = frequency_axis(2926.0, 20.0, 71);
    let y = doublet(&freqs, [2924.5, 2927.5], 0.02, 0.5, 0.0);
    let fit = fit_pixel(Spectrum::new(&freqs, &y), None, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert!((fit.dips[0].center - 2924.5).abs() < 1e-3);
    assert!((fit.dips[1].center - 2927.5).abs() < 1e-3);
}

#[test]
fn uniform_field_round_trip() {
    let p = NvSensorParams::default();
    let g = Grid2D::centered(6, 5, 260e-9).unwrap();
    let b = ScalarRaster::new(g, Unit::Millitesla, 2.0).unwrap();
    let out = round_trip(&b, &p, &AcquisitionParams::default());
    assert!(out.values().iter().all(|v| (v - 2.0).abs() < 1e-3));
}

#[test]
fn strip_map_round_trip() {
    let p = NvSensorParams::default();
    let g = Grid2D::centered(48, 6, 0.8 * UM).unwrap();
    let (sample, total) = strip_total_mt(750e-6, &g, &p);
    let out = round_trip(&total, &p, &AcquisitionParams::default());
    let rms_mt = out.rms_diff(&total).unwrap();
    assert!(rms_mt < 1e-3, "rms {rms_mt} mT");
    let recovered = subtract_bias(&out, &bias_map(&g, &p).unwrap()).unwrap();
    assert!(recovered.rms_diff(&sample).unwrap() < 1e-3);
}

#[test]
fn opposite_currents_give_opposite_maps() {
    let p = NvSensorParams::default();
    let g = Grid2D::centered(32, 4, 1.0 * UM).unwrap();
    let bias = bias_map(&g, &p).unwrap();
    let (_, plus) = strip_total_mt(750e-6, &g, &p);
    let (_, minus) = strip_total_mt(-750e-6, &g, &p);
    let acq = AcquisitionParams::default();
    let a = subtract_bias(&round_trip(&plus, &p, &acq), &bias).unwrap();
    let b = subtract_bias(&round_trip(&minus, &p, &acq), &bias).unwrap();
    let sum = a.add(&b).unwrap();
    assert!(sum.max_abs() < 2e-3, "max |sum| {} mT", sum.max_abs());
}

#[test]
fn hyperfine_splitting_is_recovered() {
    let p = NvSensorParams::default();
    let g = Grid2D::centered(3, 3, 260e-9).unwrap();
    let b = ScalarRaster::from_fn(g, Unit::Millitesla, |x, y| 2.0 + 1e5 * (x + 2.0 * y)).unwrap();
    let s = synth_stack(&b, &p, &AcquisitionParams::default()).unwrap();
    for stack in [&s.minus, &s.plus] {
        for idx in 0..g.len() {
            let y = stack.spectrum(idx);
            let fit = fit_pixel(Spectrum::new(stack.freqs(), &y), None, &FitOptions::default()).unwrap();
            assert!(fit.converged);
            assert!((fit.splitting() - p.hyperfine_mhz).abs() < 1e-2, "{}", fit.splitting());
        }
    }
}

#[test]
fn dips_shift_by_the_peak_sample_field() {
    let p = NvSensorParams::default();
    let g = Grid2D::centered(40, 1, 0.5 * UM).unwrap();
    let (sample, total) = strip_total_mt(750e-6, &g, &p);
    let (k, peak) = sample
        .values()
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .unwrap();
    let s = synth_stack(&total, &p, &AcquisitionParams::default()).unwrap();
    let y = s.plus.spectrum(k);
    let fit = fit_pixel(Spectrum::new(s.plus.freqs(), &y), None, &FitOptions::default()).unwrap();
    let (_, f_bias) = resonance_pair(&p, p.bias_mt).unwrap();
    let shift = fit.branch_center - f_bias;
    assert!((shift - p.gamma_mhz_per_mt * peak).abs() < 1e-3, "{shift} vs {}", p.gamma_mhz_per_mt * peak);
}

#[test]
fn bias_subtraction_is_exact_and_linear() {
    let p = NvSensorParams::default();
    let g = Grid2D::centered(16, 3, 1.0 * UM).unwrap();
    let (sample, total) = strip_total_mt(750e-6, &g, &p);
    let bias = bias_map(&g, &p).unwrap();
    let diff = subtract_bias(&total, &bias).unwrap();
    assert!(diff.rms_diff(&sample).unwrap() < 1e-15);

    let a = ScalarRaster::from_fn(g, Unit::Millitesla, |x, y| 1e4 * x - 3e3 * y).unwrap();
    let b = ScalarRaster::from_fn(g, Unit::Millitesla, |x, _| (x * 1e5).sin()).unwrap();
    let lhs = subtract_bias(&a.add(&bias).unwrap(), &bias)
        .unwrap()
        .add(&subtract_bias(&b.add(&bias).unwrap(), &bias).unwrap())
        .unwrap();
    let rhs = subtract_bias(&a.add(&b).unwrap().add(&bias).unwrap(), &bias).unwrap();
    assert!(lhs.rms_diff(&rhs).unwrap() < 1e-12);

    let other = Grid2D::centered(15, 3, 1.0 * UM).unwrap();
    assert!(subtract_bias(&total, &bias_map(&other, &p).unwrap()).is_err());
}

#[test]
fn synthesis_is_independent_of_thread_count() {
    let p = NvSensorParams::default();
    let g = Grid2D::centered(12, 10, 1.0 * UM).unwrap();
    let (_, total) = strip_total_mt(750e-6, &g, &p);
    let acq = AcquisitionParams {
        noise_sigma: 0.002,
        sweeps_averaged: 4,
        seed: 99,
        ..AcquisitionParams::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let s = synth_stack(&total, &p, &acq).unwrap();
            let m = extract_bnv_map(&s.minus, &s.plus, &p, &ExtractOptions::default()).unwrap();
            (s.minus, s.plus, m.map)
        })
    };
    let (a, b, c) = (run(1), run(5), run(1));
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.0, c.0);
    let other = synth_stack(&total, &p, &AcquisitionParams { seed: 100, ..acq }).unwrap();
    assert_ne!(other.minus, a.0);
}
