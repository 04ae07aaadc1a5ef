//! Plain-text tensor format.
//!
//! ```text
//! shape: 2 3
//! 1 0.5 0
//! 0 0.5 1
//! ```
//!
//! The first line carries the extents. Values follow in row-major order, one
//! line per innermost row (a single line for rank 0 and rank 1). Every value
//! is written with the shortest decimal that parses back to the same `f64`.

use std::fmt::Write as _;

use super::tensor::DenseTensor;
use crate::error::{Error, Result};

/// Shortest round-trip decimal for an `f64`; exponent form outside `[1e-5, 1e16)`.
pub fn fmt_real(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn parse_real(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

pub fn render_tensor(t: &DenseTensor) -> String {
    let mut out = String::from("shape:");
    for d in t.shape() {
        write!(out, " {d}").unwrap();
    }
    out.push('\n');
    let width = t.shape().last().copied().unwrap_or(1);
    for row in t.values().chunks(width) {
        let line: Vec<String> = row.iter().map(|&v| fmt_real(v)).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parses one tensor from `lines`, starting at `first_line` (1-based, used in errors).
pub fn parse_tensor_lines<'a, I>(location: &str, first_line: usize, lines: I) -> Result<DenseTensor>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut lines = lines.into_iter();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(location, first_line, "missing shape line"))?;
    let dims = header
        .strip_prefix("shape:")
        .ok_or_else(|| Error::parse(location, first_line, "expected 'shape:' header"))?;
    let shape = dims
        .split_whitespace()
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::parse(location, first_line, format!("bad extent: {e}")))?;
    let mut values = Vec::with_capacity(shape.iter().product());
    for (offset, line) in lines.enumerate() {
        for tok in line.split_whitespace() {
            let v = parse_real(tok).ok_or_else(|| {
                Error::parse(
                    location,
                    first_line + 1 + offset,
                    format!("bad value '{tok}'"),
                )
            })?;
            values.push(v);
        }
    }
    DenseTensor::new(&shape, values).map_err(|e| Error::parse(location, first_line, e.to_string()))
}

pub fn parse_tensor(location: &str, text: &str) -> Result<DenseTensor> {
    parse_tensor_lines(location, 1, text.lines().filter(|l| !l.trim().is_empty()))
}

/// Splits a multi-tensor document on blank lines, keeping the 1-based start line of each block.
pub fn split_blocks(text: &str) -> Vec<(usize, Vec<&str>)> {
    let mut blocks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut start = 1;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push((start, std::mem::take(&mut current)));
            }
        } else {
            if current.is_empty() {
                start = i + 1;
            }
            current.push(line);
        }
    }
    if !current.is_empty() {
        blocks.push((start, current));
    }
    blocks
}

pub fn parse_tensor_blocks(location: &str, text: &str) -> Result<Vec<DenseTensor>> {
    split_blocks(text)
        .into_iter()
        .map(|(start, lines)| parse_tensor_lines(location, start, lines))
        .collect()
}

pub fn render_tensor_blocks(tensors: &[DenseTensor]) -> String {
    tensors
        .iter()
        .map(render_tensor)
        .collect::<Vec<_>>()
        .join("\n")
}
