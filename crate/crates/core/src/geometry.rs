//! Visual prompts and their token-grid geometry.
//!
//! A referring prompt arrives in normalized image coordinates (x right, y
//! down, both in [0, 1]) and is converted to structures over the decoder's
//! token grid: a binary region mask for box/mask prompts, and a distance
//! matrix plus Gaussian soft weights for scribble/point prompts.
//!
//! Distances are measured between cell centers in cell units and normalized
//! by the grid diagonal, so values stay in [0, 1] and a sigma of 0.1 spans a
//! meaningful neighborhood regardless of grid size.

use std::path::Path;

use serde_json::Value;

use crate::error::{Result, SteerError};
use crate::io;

/// Token grid dimensions. Token index is `row * width + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Self {
        Grid { height, width }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width * self.width + self.height * self.height) as f64).sqrt()
    }

    /// Normalized coordinates of a cell center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) / self.width as f64,
            (row as f64 + 0.5) / self.height as f64,
        )
    }

    /// Cell containing a normalized point (clamped to the last cell so that
    /// x = 1.0 maps inside the grid).
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let col = ((x * self.width as f64) as usize).min(self.width - 1);
        let row = ((y * self.height as f64) as usize).min(self.height - 1);
        (row, col)
    }
}

/// A user referring input in normalized image coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum VisualPrompt {
    Box {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
    Mask {
        height: usize,
        width: usize,
        bits: Vec<bool>,
    },
    Scribble {
        points: Vec<(f64, f64)>,
    },
    Point {
        x: f64,
        y: f64,
    },
}

impl VisualPrompt {
    pub fn kind(&self) -> &'static str {
        match self {
            VisualPrompt::Box { .. } => "box",
            VisualPrompt::Mask { .. } => "mask",
            VisualPrompt::Scribble { .. } => "scribble",
            VisualPrompt::Point { .. } => "point",
        }
    }

    /// True for the prompt kinds that carry a region; scribbles and points
    /// are handled through the soft distance weighting instead.
    pub fn is_region(&self) -> bool {
        matches!(self, VisualPrompt::Box { .. } | VisualPrompt::Mask { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let check_unit = |v: f64, what: &str| -> Result<()> {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(SteerError::invalid(
                    "prompt",
                    format!("{what} = {v} outside [0, 1]"),
                ));
            }
            Ok(())
        };
        match self {
            VisualPrompt::Box { x0, y0, x1, y1 } => {
                check_unit(*x0, "x0")?;
                check_unit(*y0, "y0")?;
                check_unit(*x1, "x1")?;
                check_unit(*y1, "y1")?;
                if x0 > x1 || y0 > y1 {
                    return Err(SteerError::invalid("prompt", "box corners out of order"));
                }
            }
            VisualPrompt::Mask {
                height,
                width,
                bits,
            } => {
                if bits.len() != height * width {
                    return Err(SteerError::invalid(
                        "prompt",
                        format!("mask bits {} != {height}x{width}", bits.len()),
                    ));
                }
            }
            VisualPrompt::Scribble { points } => {
                if points.len() < 2 {
                    return Err(SteerError::invalid("prompt", "scribble needs >= 2 points"));
                }
                for (i, (x, y)) in points.iter().enumerate() {
                    check_unit(*x, &format!("scribble[{i}].x"))?;
                    check_unit(*y, &format!("scribble[{i}].y"))?;
                }
            }
            VisualPrompt::Point { x, y } => {
                check_unit(*x, "x")?;
                check_unit(*y, "y")?;
            }
        }
        Ok(())
    }

    /// Parse the structured text record `{type: ..., coords: [...]}`.
    ///
    /// Masks accept either inline `height`/`width`/`bits` or a `pgm` path to
    /// a P1/P2 bitmap, resolved relative to the current directory.
    pub fn from_json(text: &str) -> Result<VisualPrompt> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| SteerError::parse("prompt json", e.to_string()))?;
        let kind = value
            .get("type")
            .and_then(Value::as_str)
            .ok_or_else(|| SteerError::parse("prompt json", "missing \"type\""))?;
        let coords = |n: usize| -> Result<Vec<f64>> {
            let arr = value
                .get("coords")
                .and_then(Value::as_array)
                .ok_or_else(|| SteerError::parse("prompt json", "missing \"coords\""))?;
            let nums: Vec<f64> = arr.iter().filter_map(Value::as_f64).collect();
            if nums.len() != arr.len() || (n > 0 && nums.len() != n) {
                return Err(SteerError::parse(
                    "prompt json",
                    format!("expected {n} numeric coords, got {}", arr.len()),
                ));
            }
            Ok(nums)
        };
        let prompt = match kind {
            "box" => {
                let c = coords(4)?;
                VisualPrompt::Box {
                    x0: c[0],
                    y0: c[1],
                    x1: c[2],
                    y1: c[3],
                }
            }
            "point" => {
                let c = coords(2)?;
                VisualPrompt::Point { x: c[0], y: c[1] }
            }
            "scribble" => {
                let c = coords(0)?;
                if c.len() % 2 != 0 {
                    return Err(SteerError::parse(
                        "prompt json",
                        "scribble coords must be x,y pairs",
                    ));
                }
                VisualPrompt::Scribble {
                    points: c.chunks(2).map(|p| (p[0], p[1])).collect(),
                }
            }
            "mask" => {
                if let Some(path) = value.get("pgm").and_then(Value::as_str) {
                    let img = io::read_pgm(Path::new(path))?;
                    VisualPrompt::Mask {
                        height: img.height,
                        width: img.width,
                        bits: img.to_bits(),
                    }
                } else {
                    let height = value.get("height").and_then(Value::as_u64).ok_or_else(|| {
                        SteerError::parse("prompt json", "mask needs height/width or pgm")
                    })? as usize;
                    let width = value
                        .get("width")
                        .and_then(Value::as_u64)
                        .ok_or_else(|| SteerError::parse("prompt json", "mask missing width"))?
                        as usize;
                    let bits = value
                        .get("bits")
                        .and_then(Value::as_array)
                        .ok_or_else(|| SteerError::parse("prompt json", "mask missing bits"))?
                        .iter()
                        .map(|v| v.as_u64().map(|b| b != 0))
                        .collect::<Option<Vec<bool>>>()
                        .ok_or_else(|| SteerError::parse("prompt json", "bits must be 0/1"))?;
                    VisualPrompt::Mask {
                        height,
                        width,
                        bits,
                    }
                }
            }
            other => {
                return Err(SteerError::parse(
                    "prompt json",
                    format!("unknown prompt type {other:?}"),
                ));
            }
        };
        prompt.validate()?;
        Ok(prompt)
    }
}

/// Binary membership of visual tokens in the referring region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMask {
    grid: Grid,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn from_bits(grid: Grid, bits: Vec<bool>) -> Result<RegionMask> {
        if bits.len() != grid.tokens() {
            return Err(SteerError::invalid(
                "region",
                format!("{} bits for {} tokens", bits.len(), grid.tokens()),
            ));
        }
        if !bits.iter().any(|&b| b) {
            return Err(SteerError::EmptyRegion);
        }
        Ok(RegionMask { grid, bits })
    }

    pub fn from_indices(grid: Grid, indices: &[usize]) -> Result<RegionMask> {
        let mut bits = vec![false; grid.tokens()];
        for &i in indices {
            if i >= bits.len() {
                return Err(SteerError::invalid("region", format!("token {i} out of range")));
            }
            bits[i] = true;
        }
        RegionMask::from_bits(grid, bits)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn contains(&self, token: usize) -> bool {
        self.bits[token]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// 0/1 indicator as f64, for use as a matmul operand.
    pub fn indicator(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Normalized Euclidean distance from every token to the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    grid: Grid,
    values: Vec<f64>,
}

impl DistanceMatrix {
    /// Wrap externally computed distances (already diagonal-normalized).
    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<DistanceMatrix> {
        if values.len() != grid.tokens() {
            return Err(SteerError::invalid(
                "distance matrix",
                format!("{} values for {} tokens", values.len(), grid.tokens()),
            ));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SteerError::invalid(
                "distance matrix",
                "distances must be finite and non-negative",
            ));
        }
        Ok(DistanceMatrix { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Gaussian density weight per token, peaked on the prompt cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftWeights {
    grid: Grid,
    sigma: f64,
    values: Vec<f64>,
}

impl SoftWeights {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Convert a prompt to its binary token mask.
///
/// A token belongs to the region iff its cell center lies inside the box /
/// on a set mask pixel; scribbles walk their segments cell-by-cell; a point
/// lands in exactly one cell.
pub fn rasterize_prompt(prompt: &VisualPrompt, grid: Grid) -> Result<RegionMask> {
    prompt.validate()?;
    let mut bits = vec![false; grid.tokens()];
    match prompt {
        VisualPrompt::Box { x0, y0, x1, y1 } => {
            for r in 0..grid.height {
                for c in 0..grid.width {
                    let (cx, cy) = grid.cell_center(r, c);
                    if cx >= *x0 && cx <= *x1 && cy >= *y0 && cy <= *y1 {
                        bits[r * grid.width + c] = true;
                    }
                }
            }
        }
        VisualPrompt::Mask {
            height,
            width,
            bits: mask_bits,
        } => {
            for r in 0..grid.height {
                for c in 0..grid.width {
                    let (cx, cy) = grid.cell_center(r, c);
                    let px = ((cx * *width as f64) as usize).min(width - 1);
                    let py = ((cy * *height as f64) as usize).min(height - 1);
                    if mask_bits[py * width + px] {
                        bits[r * grid.width + c] = true;
                    }
                }
            }
        }
        VisualPrompt::Scribble { points } => {
            let cells: Vec<(usize, usize)> =
                points.iter().map(|&(x, y)| grid.cell_of(x, y)).collect();
            for pair in cells.windows(2) {
                for (r, c) in line_cells(pair[0], pair[1]) {
                    bits[r * grid.width + c] = true;
                }
            }
        }
        VisualPrompt::Point { x, y } => {
            let (r, c) = grid.cell_of(*x, *y);
            bits[r * grid.width + c] = true;
        }
    }
    RegionMask::from_bits(grid, bits)
}

/// Cells visited by a Bresenham walk between two cells, inclusive.
fn line_cells(from: (usize, usize), to: (usize, usize)) -> Vec<(usize, usize)> {
    let (mut r0, mut c0) = (from.0 as i64, from.1 as i64);
    let (r1, c1) = (to.0 as i64, to.1 as i64);
    let dr = (r1 - r0).abs();
    let dc = (c1 - c0).abs();
    let sr = if r0 < r1 { 1 } else { -1 };
    let sc = if c0 < c1 { 1 } else { -1 };
    let mut err = dc - dr;
    let mut cells = Vec::new();
    loop {
        cells.push((r0 as usize, c0 as usize));
        if r0 == r1 && c0 == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 > -dr {
            err -= dr;
            c0 += sc;
        }
        if e2 < dc {
            err += dc;
            r0 += sr;
        }
    }
    cells
}

/// Exact Euclidean distance from each cell center to the nearest prompt
/// cell center, in cell units divided by the grid diagonal.
///
/// Scans every prompt cell per token; the squared distances are integers so
/// the result is exact, and desk-scale grids keep the O(V * |r|) cost
/// trivial.
pub fn distance_transform(prompt: &VisualPrompt, grid: Grid) -> Result<DistanceMatrix> {
    match prompt {
        VisualPrompt::Scribble { .. } | VisualPrompt::Point { .. } => {}
        other => {
            return Err(SteerError::invalid(
                "distance_transform",
                format!("expected scribble or point, got {}", other.kind()),
            ));
        }
    }
    let mask = rasterize_prompt(prompt, grid)?;
    Ok(distance_transform_from_cells(&mask))
}

/// Distance transform seeded from an explicit cell set.
pub fn distance_transform_from_cells(mask: &RegionMask) -> DistanceMatrix {
    let grid = mask.grid();
    let sources: Vec<(i64, i64)> = mask
        .indices()
        .map(|i| ((i / grid.width) as i64, (i % grid.width) as i64))
        .collect();
    let diag = grid.diagonal();
    let mut values = vec![0.0; grid.tokens()];
    for r in 0..grid.height {
        for c in 0..grid.width {
            let mut best = i64::MAX;
            for &(sr, sc) in &sources {
                let dr = sr - r as i64;
                let dc = sc - c as i64;
                let d2 = dr * dr + dc * dc;
                if d2 < best {
                    best = d2;
                }
            }
            values[r * grid.width + c] = (best as f64).sqrt() / diag;
        }
    }
    DistanceMatrix { grid, values }
}

/// Gaussian density weights `exp(-D^2 / (2 sigma^2)) / (sqrt(2 pi) sigma)`.
pub fn soft_weights(distances: &DistanceMatrix, sigma: f64) -> Result<SoftWeights> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(SteerError::invalid("soft_weights", "sigma must be positive"));
    }
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
    let values = distances
        .values
        .iter()
        .map(|&d| (-d * d / (2.0 * sigma * sigma)).exp() * norm)
        .collect();
    Ok(SoftWeights {
        grid: distances.grid,
        sigma,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID8: Grid = Grid {
        height: 8,
        width: 8,
    };

    #[test]
    fn full_box_covers_every_token() {
        let mask = rasterize_prompt(
            &VisualPrompt::Box {
                x0: 0.0,
                y0: 0.0,
                x1: 1.0,
                y1: 1.0,
            },
            GRID8,
        )
        .unwrap();
        assert_eq!(mask.count(), 64);
    }

    #[test]
    fn quarter_box_matches_cell_center_oracle() {
        let prompt = VisualPrompt::Box {
            x0: 0.0,
            y0: 0.0,
            x1: 0.5,
            y1: 0.5,
        };
        let mask = rasterize_prompt(&prompt, GRID8).unwrap();
        // brute-force cell-center membership
        let mut expected = 0;
        for r in 0..8 {
            for c in 0..8 {
                let (cx, cy) = GRID8.cell_center(r, c);
                let inside = cx <= 0.5 && cy <= 0.5;
                assert_eq!(mask.contains(r * 8 + c), inside);
                expected += inside as usize;
            }
        }
        assert_eq!(mask.count(), expected);
        assert_eq!(mask.count(), 16);
    }

    #[test]
    fn corner_point_hits_last_token() {
        let mask = rasterize_prompt(&VisualPrompt::Point { x: 0.99, y: 0.99 }, GRID8).unwrap();
        assert_eq!(mask.indices().collect::<Vec<_>>(), vec![63]);
    }

    #[test]
    fn box_enlargement_is_monotone() {
        let small = rasterize_prompt(
            &VisualPrompt::Box {
                x0: 0.2,
                y0: 0.3,
                x1: 0.5,
                y1: 0.6,
            },
            GRID8,
        )
        .unwrap();
        let large = rasterize_prompt(
            &VisualPrompt::Box {
                x0: 0.1,
                y0: 0.2,
                x1: 0.7,
                y1: 0.8,
            },
            GRID8,
        )
        .unwrap();
        for i in 0..64 {
            assert!(!small.contains(i) || large.contains(i));
        }
    }

    #[test]
    fn empty_region_is_rejected() {
        // a box that contains no cell center
        let err = rasterize_prompt(
            &VisualPrompt::Box {
                x0: 0.0,
                y0: 0.0,
                x1: 0.01,
                y1: 0.01,
            },
            GRID8,
        );
        assert!(matches!(err, Err(SteerError::EmptyRegion)));
    }

    #[test]
    fn scribble_connects_its_endpoints() {
        let prompt = VisualPrompt::Scribble {
            points: vec![(0.05, 0.05), (0.95, 0.95)],
        };
        let mask = rasterize_prompt(&prompt, GRID8).unwrap();
        assert!(mask.contains(0));
        assert!(mask.contains(63));
        // a diagonal walk touches at least one cell per row
        assert!(mask.count() >= 8);
    }

    #[test]
    fn distance_is_zero_on_prompt_cells() {
        let prompt = VisualPrompt::Point { x: 0.05, y: 0.05 };
        let d = distance_transform(&prompt, GRID8).unwrap();
        assert_eq!(d.values()[0], 0.0);
    }

    #[test]
    fn classic_3_4_5_distance() {
        // point at cell (0,0); query (3,4): 5 cell units before normalization
        let prompt = VisualPrompt::Point { x: 0.01, y: 0.01 };
        let d = distance_transform(&prompt, GRID8).unwrap();
        let q = 3 * 8 + 4;
        assert!((d.values()[q] * GRID8.diagonal() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_points_take_pointwise_minimum() {
        let a = VisualPrompt::Point { x: 0.05, y: 0.05 };
        let b = VisualPrompt::Point { x: 0.95, y: 0.95 };
        let both = VisualPrompt::Scribble {
            points: vec![(0.05, 0.05), (0.05, 0.05), (0.95, 0.95)],
        };
        // degenerate scribble: both endpoints plus the diagonal walk; compare
        // only against cells on the two endpoints' transforms
        let da = distance_transform(&a, GRID8).unwrap();
        let db = distance_transform(&b, GRID8).unwrap();
        let dboth = distance_transform(&both, GRID8).unwrap();
        for i in 0..64 {
            assert!(dboth.values()[i] <= da.values()[i].min(db.values()[i]) + 1e-15);
        }
    }

    #[test]
    fn soft_weight_peak_value() {
        let prompt = VisualPrompt::Point { x: 0.5, y: 0.5 };
        let d = distance_transform(&prompt, GRID8).unwrap();
        let w = soft_weights(&d, 0.1).unwrap();
        let peak = w
            .values()
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        assert!((peak - 3.98942).abs() < 1e-5);
    }

    #[test]
    fn soft_weight_at_one_sigma() {
        // w(sigma) = exp(-1/2) / (sqrt(2 pi) sigma)
        let expected = (-0.5f64).exp() / ((2.0 * std::f64::consts::PI).sqrt() * 0.1);
        assert!((expected - 2.41971).abs() < 1e-5);
    }

    #[test]
    fn soft_weights_decrease_with_distance() {
        let prompt = VisualPrompt::Point { x: 0.05, y: 0.05 };
        let d = distance_transform(&prompt, GRID8).unwrap();
        let w = soft_weights(&d, 0.1).unwrap();
        let mut pairs: Vec<(f64, f64)> = d
            .values()
            .iter()
            .cloned()
            .zip(w.values().iter().cloned())
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for win in pairs.windows(2) {
            if win[1].0 > win[0].0 {
                assert!(win[1].1 < win[0].1);
            }
        }
    }

    #[test]
    fn sigma_must_be_positive() {
        let prompt = VisualPrompt::Point { x: 0.5, y: 0.5 };
        let d = distance_transform(&prompt, GRID8).unwrap();
        assert!(soft_weights(&d, 0.0).is_err());
        assert!(soft_weights(&d, -1.0).is_err());
    }

    #[test]
    fn box_prompt_rejected_by_distance_transform() {
        let prompt = VisualPrompt::Box {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        };
        assert!(distance_transform(&prompt, GRID8).is_err());
    }

    #[test]
    fn prompt_json_round_trips() {
        let p = VisualPrompt::from_json(r#"{"type":"box","coords":[0.1,0.2,0.5,0.6]}"#).unwrap();
        assert_eq!(
            p,
            VisualPrompt::Box {
                x0: 0.1,
                y0: 0.2,
                x1: 0.5,
                y1: 0.6
            }
        );
        let p = VisualPrompt::from_json(r#"{"type":"point","coords":[0.3,0.4]}"#).unwrap();
        assert_eq!(p, VisualPrompt::Point { x: 0.3, y: 0.4 });
        let p = VisualPrompt::from_json(
            r#"{"type":"scribble","coords":[0.1,0.1,0.2,0.15,0.3,0.3]}"#,
        )
        .unwrap();
        assert!(matches!(p, VisualPrompt::Scribble { ref points } if points.len() == 3));
        let p = VisualPrompt::from_json(
            r#"{"type":"mask","height":2,"width":2,"bits":[0,1,1,0]}"#,
        )
        .unwrap();
        assert!(matches!(p, VisualPrompt::Mask { .. }));
        assert!(VisualPrompt::from_json(r#"{"type":"blob"}"#).is_err());
        assert!(VisualPrompt::from_json(r#"{"type":"box","coords":[0.5,0.2,0.1,0.6]}"#).is_err());
    }
}
