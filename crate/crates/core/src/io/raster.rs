//! `QDMR1` raster and `QDMS1` stack files.
//!
//! A raster file is
//!
//! ```text
//! QDMR1
//! nx 4
//! ny 3
//! pitch_m 0.00000026
//! origin_m -0.00000039 -0.00000026
//! unit tesla
//! order row-major-y-outer
//! end
//! ```
//!
//! followed by `nx·ny` little-endian `f64` values with `x` varying fastest.
//! Header numbers use shortest round-trip formatting, so a write/read cycle
//! is bit-exact. A stack file starts with
//!
//! ```text
//! QDMS1
//! branch f_minus
//! n_f 71
//! sweeps_averaged 1
//! freqs_mhz 2811.4 2811.6857142857144 ...
//! end
//! ```
//!
//! and continues with `n_f` complete raster blocks in frequency order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{atomic_write, read_file};
use crate::model::{Grid2D, ScalarRaster, Unit};
use crate::odmr::{Branch, OdmrStack};

pub const RASTER_MAGIC: &str = "QDMR1";
pub const STACK_MAGIC: &str = "QDMS1";
const ORDER: &str = "row-major-y-outer";

/// Serializes a raster to `QDMR1` bytes.
pub fn encode_raster(r: &ScalarRaster) -> Vec<u8> {
    let g = r.grid();
    let (ox, oy) = g.origin();
    let header = format!(
        "{RASTER_MAGIC}\nnx {}\nny {}\npitch_m {}\norigin_m {ox} {oy}\nunit {}\norder {ORDER}\nend\n",
        g.nx(),
        g.ny(),
        g.pitch(),
        r.unit()
    );
    let mut out = Vec::with_capacity(header.len() + 8 * r.values().len());
    out.extend_from_slice(header.as_bytes());
    for v in r.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Line-oriented cursor over a header followed by binary data.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.path, msg)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err("unterminated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| self.err("header is not UTF-8"))
    }

    /// Reads `key v1 v2 ...` and returns the values.
    fn field(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.line()?;
        let mut parts = line.split_ascii_whitespace();
        match parts.next() {
            Some(k) if k == key => Ok(parts.collect()),
            _ => Err(self.err(format!("expected `{key}`, found `{line}`"))),
        }
    }

    fn single<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let v = self.field(key)?;
        match v.as_slice() {
            [s] => s.parse().map_err(|_| self.err(format!("bad value for `{key}`: `{s}`"))),
            _ => Err(self.err(format!("`{key}` takes one value"))),
        }
    }

    fn floats(&mut self, key: &str) -> Result<Vec<f64>> {
        self.field(key)?
            .iter()
            .map(|s| s.parse().map_err(|_| self.err(format!("bad number in `{key}`: `{s}`"))))
            .collect()
    }

    fn expect(&mut self, text: &str) -> Result<()> {
        let line = self.line()?;
        if line == text {
            Ok(())
        } else {
            Err(self.err(format!("expected `{text}`, found `{line}`")))
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated data: {} bytes expected, {} present",
                n,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn raster(&mut self) -> Result<ScalarRaster> {
        self.expect(RASTER_MAGIC)?;
        let nx: usize = self.single("nx")?;
        let ny: usize = self.single("ny")?;
        let pitch: f64 = self.single("pitch_m")?;
        let origin = self.floats("origin_m")?;
        let [ox, oy] = origin[..] else {
            return Err(self.err("`origin_m` takes two values"));
        };
        let unit_name: String = self.single("unit")?;
        let unit = Unit::parse(&unit_name).ok_or_else(|| self.err(format!("unknown unit `{unit_name}`")))?;
        let order: String = self.single("order")?;
        if order != ORDER {
            return Err(self.err(format!("unsupported order `{order}`")));
        }
        self.expect("end")?;
        let grid = Grid2D::new(nx, ny, pitch, (ox, oy)).map_err(|e| self.err(e.to_string()))?;
        let n = nx
            .checked_mul(ny)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| self.err("raster size overflows"))?;
        let data = self.take(n)?;
        let values = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        ScalarRaster::from_values(grid, unit, values).map_err(|e| self.err(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)))
        }
    }
}

/// Parses `QDMR1` bytes; `path` is used only in error messages.
pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<ScalarRaster> {
    let mut c = Cursor { bytes, pos: 0, path };
    let r = c.raster()?;
    c.finish()?;
    Ok(r)
}

pub fn write_raster(path: &Path, r: &ScalarRaster) -> Result<()> {
    atomic_write(path, &encode_raster(r))
}

pub fn read_raster(path: &Path) -> Result<ScalarRaster> {
    decode_raster(&read_file(path)?, path)
}

/// Serializes a stack to `QDMS1` bytes.
pub fn encode_stack(s: &OdmrStack) -> Vec<u8> {
    let freqs: Vec<String> = s.freqs().iter().map(|f| f.to_string()).collect();
    let mut out = format!(
        "{STACK_MAGIC}\nbranch {}\nn_f {}\nsweeps_averaged {}\nfreqs_mhz {}\nend\n",
        s.branch(),
        s.freqs().len(),
        s.sweeps_averaged(),
        freqs.join(" ")
    )
    .into_bytes();
    for frame in s.frames() {
        out.extend_from_slice(&encode_raster(frame));
    }
    out
}

pub fn decode_stack(bytes: &[u8], path: &Path) -> Result<OdmrStack> {
    let mut c = Cursor { bytes, pos: 0, path };
    c.expect(STACK_MAGIC)?;
    let branch_name: String = c.single("branch")?;
    let branch = Branch::parse(&branch_name).ok_or_else(|| c.err(format!("unknown branch `{branch_name}`")))?;
    let n_f: usize = c.single("n_f")?;
    let sweeps: u32 = c.single("sweeps_averaged")?;
    let freqs = c.floats("freqs_mhz")?;
    if freqs.len() != n_f {
        return Err(c.err(format!("n_f is {n_f} but {} frequencies are listed", freqs.len())));
    }
    c.expect("end")?;
    let frames = (0..n_f).map(|_| c.raster()).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    let grid = *frames
        .first()
        .ok_or_else(|| c.err("stack has no frames"))?
        .grid();
    OdmrStack::new(grid, freqs, frames, branch, sweeps).map_err(|e| c.err(e.to_string()))
}

pub fn write_stack(path: &Path, s: &OdmrStack) -> Result<()> {
    atomic_write(path, &encode_stack(s))
}

pub fn read_stack(path: &Path) -> Result<OdmrStack> {
    decode_stack(&read_file(path)?, path)
}
