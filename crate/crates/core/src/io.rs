//! Plain-text PGM/PBM bitmaps and small CSV helpers.

use std::fs;
use std::path::Path;

use crate::error::{Result, SteerError};

/// A parsed ASCII bitmap: `P1` (0/1) or `P2` (grayscale, nonzero = set).
#[derive(Debug, Clone)]
pub struct PgmImage {
    pub height: usize,
    pub width: usize,
    /// Row-major pixel values, already normalized to the raw sample range.
    pub pixels: Vec<u16>,
}

impl PgmImage {
    pub fn to_bits(&self) -> Vec<bool> {
        self.pixels.iter().map(|&p| p > 0).collect()
    }
}

/// Parse a `P1` or `P2` ASCII image, ignoring `#` comments.
pub fn parse_pgm(text: &str) -> Result<PgmImage> {
    let mut tokens = text.lines().flat_map(|line| {
        let body = line.split('#').next().unwrap_or("");
        body.split_whitespace()
    });
    let magic = tokens
        .next()
        .ok_or_else(|| SteerError::parse("pgm", "empty file"))?;
    if magic != "P1" && magic != "P2" {
        return Err(SteerError::parse("pgm", format!("unsupported magic {magic}")));
    }
    let mut next_num = |what: &str| -> Result<usize> {
        tokens
            .next()
            .ok_or_else(|| SteerError::parse("pgm", format!("missing {what}")))?
            .parse::<usize>()
            .map_err(|e| SteerError::parse("pgm", format!("bad {what}: {e}")))
    };
    let width = next_num("width")?;
    let height = next_num("height")?;
    if magic == "P2" {
        let _maxval = next_num("maxval")?;
    }
    let mut pixels = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        pixels.push(next_num("pixel")? as u16);
    }
    Ok(PgmImage {
        height,
        width,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<PgmImage> {
    let text = fs::read_to_string(path)
        .map_err(|e| SteerError::io(format!("reading {}", path.display()), e))?;
    parse_pgm(&text)
}

/// Render a non-negative row-major map as ASCII `P2`, scaling so the maximum
/// value maps to 255. An all-zero map renders as all black.
pub fn write_pgm_scaled(values: &[f64], height: usize, width: usize) -> Result<String> {
    if values.len() != height * width {
        return Err(SteerError::invalid(
            "pgm",
            format!("{} values for {}x{}", values.len(), height, width),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SteerError::NonFinite { op: "pgm" });
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{width} {height}\n255\n");
    for r in 0..height {
        let row: Vec<String> = (0..width)
            .map(|c| {
                let v = values[r * width + c];
                let px = if max > 0.0 {
                    ((v / max) * 255.0).round().clamp(0.0, 255.0) as u32
                } else {
                    0
                };
                px.to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    Ok(out)
}

/// One CSV line per grid row, full float precision.
pub fn write_csv_grid(values: &[f64], height: usize, width: usize) -> String {
    let mut out = String::new();
    for r in 0..height {
        let row: Vec<String> = (0..width)
            .map(|c| format_float(values[r * width + c]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Shortest round-trippable decimal representation; keeps report files
/// byte-stable across runs.
pub fn format_float(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// Parse a CSV grid written by [`write_csv_grid`]; returns (height, width,
/// row-major values).
pub fn parse_csv_grid(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut width = None;
    let mut values = Vec::new();
    let mut height = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .map_err(|e| SteerError::parse("csv", format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(SteerError::parse(
                    "csv",
                    format!("line {} has {} fields, expected {w}", lineno + 1, row.len()),
                ));
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    let width = width.ok_or_else(|| SteerError::parse("csv", "no rows"))?;
    Ok((height, width, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_p1_with_comments() {
        let img = parse_pgm("P1\n# a comment\n3 2\n0 1 0\n1 1 0\n").unwrap();
        assert_eq!((img.height, img.width), (2, 3));
        assert_eq!(img.to_bits(), vec![false, true, false, true, true, false]);
    }

    #[test]
    fn parses_p2() {
        let img = parse_pgm("P2\n2 2\n255\n0 128\n255 0\n").unwrap();
        assert_eq!(img.to_bits(), vec![false, true, true, false]);
    }

    #[test]
    fn constant_map_renders_constant_gray() {
        let pgm = write_pgm_scaled(&[2.0, 2.0, 2.0, 2.0], 2, 2).unwrap();
        let body: Vec<&str> = pgm.lines().skip(3).collect();
        assert_eq!(body, vec!["255 255", "255 255"]);
    }

    #[test]
    fn zero_map_renders_black() {
        let pgm = write_pgm_scaled(&[0.0, 0.0], 1, 2).unwrap();
        assert!(pgm.ends_with("0 0\n"));
    }

    #[test]
    fn csv_grid_round_trips() {
        let text = write_csv_grid(&[1.5, -2.0, 0.25, 1e-9], 2, 2);
        let (h, w, values) = parse_csv_grid(&text).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(values, vec![1.5, -2.0, 0.25, 1e-9]);
    }
}
