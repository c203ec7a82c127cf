//! Wide-field NV-diamond magnetometry of planar circuits.
//!
//! * [`model`]: grids, unit-tagged rasters, sensor parameters, conductors.
//! * [`forward`]: strip and polyline fields, NV projection, layer averaging.
//! * [`odmr`]: two-branch spectrum synthesis and per-pixel Lorentzian fits.
//! * [`inversion`]: Fourier current-density reconstruction and integration.
//! * [`calib`]: stand-off fit to a strip line cut.
//! * [`circuit`]: current-mirror expectations and the comparison report.
//! * [`config`], [`pipeline`], [`io`]: configured runs and file formats.
//!
//! ```
//! use qdm_core::forward::{strip_bnv_map, DEFAULT_LAYER_POINTS};
//! use qdm_core::model::{Grid2D, NvSensorParams, StripGeometry};
//!
//! let p = NvSensorParams::default();
//! let g = Grid2D::centered(32, 32, 260e-9).unwrap();
//! let s = StripGeometry::along_y(2e-6, 1e-6, 100e-6);
//! let b = strip_bnv_map(&s, &p, &g, DEFAULT_LAYER_POINTS).unwrap();
//! assert!(b.max_abs() > 0.0);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod circuit;
pub mod config;
pub mod error;
pub mod forward;
pub mod inversion;
pub mod io;
pub mod lm;
pub mod model;
pub mod odmr;
pub mod pipeline;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/forward.md")]
    mod forward {}
    #[doc = include_str!("../../../book/src/odmr.md")]
    mod odmr {}
    #[doc = include_str!("../../../book/src/inversion.md")]
    mod inversion {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/circuit.md")]
    mod circuit {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
