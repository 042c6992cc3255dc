//! Flat binary latent dumps, CSV writing, and portable graymap export.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use lab_core::probes::EdgeMap;
use lab_core::LatentGrid;

use crate::error::{LabError, Result};

/// Writes a grid as flat little-endian `f32`, channel-major.
pub fn write_f32(path: &Path, grid: &LatentGrid) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for &v in grid.as_slice() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a flat little-endian `f32` file into the given shape.
pub fn read_f32(path: &Path, channels: usize, m: usize, n: usize) -> Result<LatentGrid> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let expected = channels * m * n * 4;
    if bytes.len() != expected {
        return Err(LabError::data(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    LatentGrid::from_vec(channels, m, n, data).map_err(|e| LabError::data(format!("{}: {e}", path.display())))
}

/// Line-oriented CSV writer with a fixed header. Field formatting uses
/// Rust's shortest-roundtrip float display, so identical values always
/// serialize to identical bytes.
pub struct CsvWriter {
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{header}")?;
        Ok(Self { out })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.out, "{}", fields.join(","))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Formats a float for CSV output.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Exports an edge map as an ASCII portable graymap (P2), edges white.
pub fn write_pgm(path: &Path, edges: &EdgeMap) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "P2")?;
    writeln!(out, "{} {}", edges.cols(), edges.rows())?;
    writeln!(out, "255")?;
    for i in 0..edges.rows() {
        let row: Vec<&str> = (0..edges.cols())
            .map(|j| if edges.contains(i, j) { "255" } else { "0" })
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    out.flush()?;
    Ok(())
}
