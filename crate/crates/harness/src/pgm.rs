//! Binary PGM (P5) frame dumps.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Result};

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    ensure!(pixels.len() == width * height, "frame has {} bytes, expected {}", pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(width, height, pixels)?)?;
    Ok(())
}
