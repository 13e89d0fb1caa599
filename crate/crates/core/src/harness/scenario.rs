//! Synthetic referring scenes.
//!
//! Pretraining scenes hold a single object and an unambiguous question.
//! Evaluation scenes hold two objects of distinct classes with the
//! distractor deliberately placed next to the target (a hard negative), a
//! visual prompt pointing at the target, and the question "is the object
//! <loc> a A or a B" whose mention order is randomized per seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PromptKind;
use crate::error::{Result, SteerError};
use crate::geometry::{Grid, RegionMask, VisualPrompt};
use crate::model::{question_tokens, SyntheticImage};

/// Channel noise amplitude baked into every generated scene.
pub const SCENE_NOISE: f64 = 0.02;

const MAX_PLACEMENT_ATTEMPTS: u64 = 16;

/// Axis-aligned block of cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl CellRect {
    pub fn center(&self) -> (f64, f64) {
        (
            self.row as f64 + self.height as f64 / 2.0,
            self.col as f64 + self.width as f64 / 2.0,
        )
    }

    pub fn overlaps(&self, other: &CellRect) -> bool {
        self.row < other.row + other.height
            && other.row < self.row + self.height
            && self.col < other.col + other.width
            && other.col < self.col + self.width
    }

    pub fn cells(&self, grid: Grid) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in self.row..self.row + self.height {
            for c in self.col..self.col + self.width {
                out.push(r * grid.width + c);
            }
        }
        out
    }

    /// Normalized box exactly covering these cells.
    pub fn to_box(&self, grid: Grid) -> VisualPrompt {
        VisualPrompt::Box {
            x0: self.col as f64 / grid.width as f64,
            y0: self.row as f64 / grid.height as f64,
            x1: (self.col + self.width) as f64 / grid.width as f64,
            y1: (self.row + self.height) as f64 / grid.height as f64,
        }
    }
}

/// A two-object evaluation scene.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub image: SyntheticImage,
    /// The user prompt, in the configured variant.
    pub prompt: VisualPrompt,
    /// Ground-truth cells of the referred object.
    pub target_region: RegionMask,
    pub target_rect: CellRect,
    pub distractor_rect: CellRect,
    pub question: Vec<usize>,
    /// Class mentioned first in the question.
    pub class_first: usize,
    pub class_second: usize,
    /// Class of the referred object.
    pub truth: usize,
}

/// A single-object pretraining example.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: SyntheticImage,
    pub question: Vec<usize>,
    pub truth: usize,
    pub class_first: usize,
    pub class_second: usize,
}

fn sample_rect(rng: &mut ChaCha8Rng, grid: Grid) -> CellRect {
    let max_h = 3.min(grid.height.saturating_sub(1)).max(1);
    let max_w = 3.min(grid.width.saturating_sub(1)).max(1);
    let height = rng.random_range(2..=max_h.max(2)).min(grid.height);
    let width = rng.random_range(2..=max_w.max(2)).min(grid.width);
    let row = rng.random_range(0..=grid.height - height);
    let col = rng.random_range(0..=grid.width - width);
    CellRect {
        row,
        col,
        height,
        width,
    }
}

/// Place a distractor rectangle near the target: all non-overlapping
/// placements are ranked by center distance and one of the closest fifth is
/// drawn, mirroring hard-negative selection.
fn place_distractor(rng: &mut ChaCha8Rng, grid: Grid, target: &CellRect) -> Option<CellRect> {
    let height = rng.random_range(2..=3.min(grid.height).max(2)).min(grid.height);
    let width = rng.random_range(2..=3.min(grid.width).max(2)).min(grid.width);
    let mut candidates = Vec::new();
    for row in 0..=grid.height - height {
        for col in 0..=grid.width - width {
            let rect = CellRect {
                row,
                col,
                height,
                width,
            };
            if !rect.overlaps(target) {
                let (tr, tc) = target.center();
                let (dr, dc) = rect.center();
                let dist2 = (tr - dr) * (tr - dr) + (tc - dc) * (tc - dc);
                candidates.push((rect, dist2));
            }
        }
    }
    if candidates.is_empty() {
        return None;
    }
    candidates.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"));
    let pool = (candidates.len() / 5).max(1);
    Some(candidates[rng.random_range(0..pool)].0)
}

fn class_pair(rng: &mut ChaCha8Rng, classes: usize) -> (usize, usize) {
    let a = rng.random_range(0..classes);
    let mut b = rng.random_range(0..classes - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Pick a cell uniformly inside a rectangle; returns its center in
/// normalized coordinates.
fn cell_center_in(rng: &mut ChaCha8Rng, rect: &CellRect, grid: Grid) -> (f64, f64) {
    let r = rng.random_range(rect.row..rect.row + rect.height);
    let c = rng.random_range(rect.col..rect.col + rect.width);
    grid.cell_center(r, c)
}

fn prompt_for(
    rng: &mut ChaCha8Rng,
    kind: PromptKind,
    target: &CellRect,
    grid: Grid,
) -> VisualPrompt {
    match kind {
        PromptKind::Box => target.to_box(grid),
        PromptKind::Mask => {
            let mut bits = vec![false; grid.tokens()];
            for cell in target.cells(grid) {
                bits[cell] = true;
            }
            VisualPrompt::Mask {
                height: grid.height,
                width: grid.width,
                bits,
            }
        }
        PromptKind::Scribble => {
            let n = rng.random_range(2..=4usize);
            let points = (0..n).map(|_| cell_center_in(rng, target, grid)).collect();
            VisualPrompt::Scribble { points }
        }
        PromptKind::Point => {
            let (x, y) = cell_center_in(rng, target, grid);
            VisualPrompt::Point { x, y }
        }
    }
}

/// Deterministic two-object scenario. Identical seeds yield bit-identical
/// scenarios; placement failures reseed a bounded number of times.
pub fn gen_scenario(
    seed: u64,
    grid: Grid,
    classes: usize,
    prompt_kind: PromptKind,
) -> Result<Scenario> {
    if classes < 2 {
        return Err(SteerError::invalid("scenario", "need at least 2 classes"));
    }
    for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt.wrapping_mul(0x9E3779B97F4A7C15)));
        let target = sample_rect(&mut rng, grid);
        let Some(distractor) = place_distractor(&mut rng, grid, &target) else {
            continue;
        };
        let (target_class, distractor_class) = class_pair(&mut rng, classes);
        let target_first = rng.random_bool(0.5);
        let (class_first, class_second) = if target_first {
            (target_class, distractor_class)
        } else {
            (distractor_class, target_class)
        };
        let mut image = SyntheticImage::background(grid, classes);
        image.paint_object(target_class, target.row, target.col, target.height, target.width);
        image.paint_object(
            distractor_class,
            distractor.row,
            distractor.col,
            distractor.height,
            distractor.width,
        );
        image.add_noise(SCENE_NOISE, &mut rng);
        let prompt = prompt_for(&mut rng, prompt_kind, &target, grid);
        let target_region = RegionMask::from_indices(grid, &target.cells(grid))?;
        return Ok(Scenario {
            seed,
            image,
            prompt,
            target_region,
            target_rect: target,
            distractor_rect: distractor,
            question: question_tokens(class_first, class_second),
            class_first,
            class_second,
            truth: target_class,
        });
    }
    Err(SteerError::invalid(
        "scenario",
        format!("placement failed after {MAX_PLACEMENT_ATTEMPTS} reseeds (seed {seed})"),
    ))
}

/// Deterministic single-object pretraining example: one object, a question
/// naming its class and one other, answer the object's class.
pub fn gen_single_object(seed: u64, grid: Grid, classes: usize) -> Result<TrainExample> {
    if classes < 2 {
        return Err(SteerError::invalid("scenario", "need at least 2 classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = sample_rect(&mut rng, grid);
    let (truth, other) = class_pair(&mut rng, classes);
    let truth_first = rng.random_bool(0.5);
    let (class_first, class_second) = if truth_first {
        (truth, other)
    } else {
        (other, truth)
    };
    let mut image = SyntheticImage::background(grid, classes);
    image.paint_object(truth, rect.row, rect.col, rect.height, rect.width);
    image.add_noise(SCENE_NOISE, &mut rng);
    Ok(TrainExample {
        image,
        question: question_tokens(class_first, class_second),
        truth,
        class_first,
        class_second,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize_prompt;

    const GRID: Grid = Grid {
        height: 8,
        width: 8,
    };

    #[test]
    fn scenarios_are_deterministic() {
        let a = gen_scenario(42, GRID, 6, PromptKind::Box).unwrap();
        let b = gen_scenario(42, GRID, 6, PromptKind::Box).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.prompt, b.prompt);
        assert_eq!(a.question, b.question);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn objects_do_not_overlap() {
        for seed in 0..200 {
            let s = gen_scenario(seed, GRID, 6, PromptKind::Box).unwrap();
            assert!(!s.target_rect.overlaps(&s.distractor_rect), "seed {seed}");
            assert_ne!(s.class_first, s.class_second);
        }
    }

    #[test]
    fn point_prompt_lands_inside_the_target() {
        for seed in 0..100 {
            let s = gen_scenario(seed, GRID, 6, PromptKind::Point).unwrap();
            let mask = rasterize_prompt(&s.prompt, GRID).unwrap();
            for cell in mask.indices() {
                assert!(s.target_region.contains(cell), "seed {seed} cell {cell}");
            }
        }
    }

    #[test]
    fn scribble_prompts_stay_inside_the_target() {
        for seed in 0..100 {
            let s = gen_scenario(seed, GRID, 6, PromptKind::Scribble).unwrap();
            let mask = rasterize_prompt(&s.prompt, GRID).unwrap();
            for cell in mask.indices() {
                assert!(s.target_region.contains(cell), "seed {seed} cell {cell}");
            }
        }
    }

    #[test]
    fn box_prompt_rasterizes_to_exactly_the_target_cells() {
        for seed in 0..100 {
            let s = gen_scenario(seed, GRID, 6, PromptKind::Box).unwrap();
            let mask = rasterize_prompt(&s.prompt, GRID).unwrap();
            let cells: Vec<usize> = mask.indices().collect();
            let expected: Vec<usize> = s.target_region.indices().collect();
            assert_eq!(cells, expected, "seed {seed}");
        }
    }

    #[test]
    fn mention_order_is_roughly_balanced() {
        let mut target_first = 0usize;
        let n = 1000;
        for seed in 0..n {
            let s = gen_scenario(seed, GRID, 6, PromptKind::Box).unwrap();
            if s.class_first == s.truth {
                target_first += 1;
            }
        }
        let frac = target_first as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.05, "target-first fraction {frac}");
    }

    #[test]
    fn distractor_sits_near_the_target() {
        // hard negatives: the mean center distance over many seeds stays
        // well under the grid diagonal's half
        let mut total = 0.0;
        let n = 200;
        for seed in 0..n {
            let s = gen_scenario(seed, GRID, 6, PromptKind::Box).unwrap();
            let (tr, tc) = s.target_rect.center();
            let (dr, dc) = s.distractor_rect.center();
            total += ((tr - dr).powi(2) + (tc - dc).powi(2)).sqrt();
        }
        let mean = total / n as f64;
        assert!(mean < 4.0, "mean center distance {mean}");
    }

    #[test]
    fn single_object_truth_is_always_mentioned() {
        for seed in 0..100 {
            let ex = gen_single_object(seed, GRID, 6).unwrap();
            assert!(ex.truth == ex.class_first || ex.truth == ex.class_second);
            assert_ne!(ex.class_first, ex.class_second);
        }
    }
}
