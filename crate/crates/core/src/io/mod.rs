//! File formats and atomic file output.
//!
//! - `QDMR1` rasters: a short text header followed by little-endian `f64`
//!   samples ([`raster`]).
//! - `QDMS1` ODMR stacks: a text header followed by one `QDMR1` block per
//!   frequency ([`raster`]).
//! - CSV tables whose first row declares column units ([`table`]).
//! - 8-bit PNG heatmaps with a JSON scale sidecar ([`heatmap`]).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub mod heatmap;
pub mod raster;
pub mod table;

/// Writes `bytes` to `path` through a temporary file in the same directory
/// that is renamed into place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
