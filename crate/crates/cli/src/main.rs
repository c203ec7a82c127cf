//! `qdm`: command-line driver for the magnetometry pipeline.
//!
//! Exit status: 0 on success, 1 for validation, configuration or I/O
//! errors, 2 when a data-quality gate fails.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use qdm_core::config::PipelineConfig;
use qdm_core::error::Error;
use qdm_core::pipeline::{self, Manifest, StageTiming};

#[derive(Debug, Parser)]
#[command(name = "qdm", version, about = "Wide-field NV magnetometry pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Forward model and ODMR stacks with ground truth.
    Synth,
    /// Per-pixel lineshape fits to a bias-free B_NV map.
    Fit,
    /// Stand-off fit on the configured strip line cut.
    Calibrate,
    /// Current-density reconstruction from the B_NV map.
    Invert,
    /// Transect integration and comparison report.
    Report,
    /// PNG heatmaps of the map products, or of one raster.
    Heatmap {
        /// Render only this raster file.
        #[arg(long, requires = "output")]
        raster: Option<PathBuf>,
        /// Image path for `--raster`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// fit, calibrate, invert, report and heatmap in sequence.
    Analyze,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Fit => "fit",
            Command::Calibrate => "calibrate",
            Command::Invert => "invert",
            Command::Report => "report",
            Command::Heatmap { .. } => "heatmap",
            Command::Analyze => "analyze",
        }
    }
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(dir) = &common.out_dir {
        if cfg.io.input_dir == cfg.io.out_dir {
            cfg.io.input_dir = dir.clone();
        }
        cfg.io.out_dir = dir.clone();
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) {
    match serde_json::to_string_pretty(v) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("warning: could not format summary: {e}"),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Command::Heatmap {
        raster: Some(raster),
        output: Some(output),
    } = &cli.command
    {
        return pipeline::heatmap_file(raster, output);
    }
    let cfg = load_config(&cli.common)?;
    std::fs::create_dir_all(&cfg.io.out_dir).map_err(|e| Error::Io {
        path: cfg.io.out_dir.clone(),
        source: e,
    })?;
    let name = cli.command.name();
    let t0 = Instant::now();
    let mut timings = Vec::new();
    match &cli.command {
        Command::Synth => {
            let s = pipeline::synth(&cfg)?;
            println!("max |B_NV| = {:.6e} T", s.max_abs_bnv_t);
            println!("dips: f- = {:.4} MHz, f+ = {:.4} MHz", s.f_minus_mhz, s.f_plus_mhz);
            println!("max |K| (ground truth) = {:.3} A/m", s.max_truth_k_a_per_m);
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Fit => print_json(&pipeline::fit(&cfg)?),
        Command::Calibrate => match pipeline::calibrate(&cfg)? {
            Some(r) => print_json(&r),
            None => eprintln!("no [calibration] section; nothing to do"),
        },
        Command::Invert => {
            let r = pipeline::invert(&cfg)?;
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&r);
        }
        Command::Report => print!("{}", pipeline::report(&cfg)?.table),
        Command::Heatmap { .. } => {
            for p in pipeline::heatmap(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Analyze => {
            let s = pipeline::analyze(&cfg)?;
            for w in &s.inversion.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "fit: {} of {} pixels infilled; bias removal: {}",
                s.fit.infilled, s.fit.pixels, s.fit.bias_source
            );
            if let Some(c) = &s.calibration {
                println!("calibrated stand-off: {:.4} um (converged: {})", c.h_m * 1e6, c.converged);
            }
            println!("inversion stand-off: {:.4} um", s.inversion.standoff_m * 1e6);
            if let Some(r) = &s.report {
                print!("{}", r.table);
            }
            timings = s.timings;
        }
    }
    if timings.is_empty() {
        timings.push(StageTiming {
            stage: name.into(),
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let mut manifest = Manifest::new(&cfg, name, cli.common.config.as_deref(), rayon::current_num_threads());
    manifest.timings = timings;
    manifest.write(&cfg.io.out_dir)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.common.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.threads)
            .build_global()
        {
            eprintln!("error: cannot start {} worker threads: {e}", cli.common.threads);
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_quality_gate() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

