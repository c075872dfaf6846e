//! Grayscale images of the hidden state over time.
//!
//! Each map gets one binary PGM: row `t` is the state after `t` steps
//! (row 0 is the embedded input), column `i` is the sequence position.
//! Values in `[-1, 1]` map linearly onto `0..=255`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::cells::DiagonalSplit;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn pixel(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) };
    (255.0 * (v + 1.0) / 2.0).round() as u8
}

/// Binary PGM bytes for a `height x width` row-major image.
pub fn pgm_bytes(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::Shape(format!(
            "image {width}x{height} needs {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, pgm_bytes(width, height, pixels)?).map_err(|e| Error::io(path, e))
}

/// Pixels of one map across a trace of `[1, n, m]` states.
pub fn map_image<T: Real>(trace: &[Tensor<T>], map: usize) -> Result<(usize, usize, Vec<u8>)> {
    let first = trace.first().ok_or_else(|| Error::Usage("empty trace".into()))?;
    let shape = first.shape();
    if shape.len() != 3 || shape[0] != 1 || map >= shape[2] {
        return Err(Error::Shape(format!("trace states must be [1, n, m] with map < m, got {shape:?}")));
    }
    let (n, m) = (shape[1], shape[2]);
    let mut pixels = Vec::with_capacity(trace.len() * n);
    for state in trace {
        if state.shape() != shape {
            return Err(Error::Shape("trace states differ in shape".into()));
        }
        pixels.extend((0..n).map(|i| pixel(state.data()[i * m + map].as_f64())));
    }
    Ok((n, trace.len(), pixels))
}

/// Write `map_<group>_<idx>.pgm` for every map plus `index.txt`, where the
/// group is the map's shift direction. Returns the image paths.
pub fn write_trace<T: Real>(
    dir: &Path,
    trace: &[Tensor<T>],
    split: &DiagonalSplit,
    input: &str,
    output: &str,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = format!("input  {input}\noutput {output}\n");
    let mut paths = Vec::new();
    for map in 0..split.maps() {
        let (w, h, px) = map_image(trace, map)?;
        let group = split.direction_of(map).label();
        let name = format!("map_{group}_{map:03}.pgm");
        let path = dir.join(&name);
        write_pgm(&path, w, h, &px)?;
        let _ = writeln!(index, "{name} map={map} direction={group}");
        paths.push(path);
    }
    let index_path = dir.join("index.txt");
    fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    Ok(paths)
}
