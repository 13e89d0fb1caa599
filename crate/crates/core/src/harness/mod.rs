//! Synthetic Referring Object Classification harness.
//!
//! Pretrains the toy decoder on unambiguous single-object scenes, then
//! evaluates steering, edit-attention, and image-manipulation baselines on
//! ambiguous two-object scenes.

pub mod pretrain;
pub mod roc;
pub mod scenario;

pub use pretrain::{pretrain_toy, single_object_accuracy, PretrainConfig, PretrainReport};
pub use roc::{run_roc, Method, MethodSummary, RocOptions, RocReport, ScenarioOutcome};
pub use scenario::{gen_scenario, gen_single_object, CellRect, Scenario, TrainExample};

use std::path::Path;

use rayon::prelude::*;

use crate::config::LabConfig;
use crate::error::{Result, SteerError};
use crate::geometry::{Grid, RegionMask};
use crate::io;
use crate::model::{DecoderWeights, SyntheticImage};
use crate::relevancy::{relevancy_map, relevancy_score};
use crate::steering::{steer, EnergyKind};
use crate::tensor::Tensor;

/// Pick between the two mentioned classes by their answer logits.
pub fn answer_from_logits(logits: &Tensor, class_a: usize, class_b: usize) -> usize {
    if logits.get(0, class_b) > logits.get(0, class_a) {
        class_b
    } else {
        class_a
    }
}

/// Highlight-region baseline: set the highlight channel to 1 inside the
/// region, leaving everything else untouched.
pub fn apply_color_baseline(image: &SyntheticImage, region: &RegionMask) -> SyntheticImage {
    let mut out = image.clone();
    let highlight = image.classes() + 1;
    for token in region.indices() {
        out.channels_mut().set(token, highlight, 1.0);
    }
    out
}

/// Background-blur baseline: every out-of-region cell's channel vector is
/// replaced by the mean out-of-region channel vector.
pub fn apply_blur_baseline(image: &SyntheticImage, region: &RegionMask) -> SyntheticImage {
    let mut out = image.clone();
    let channels = image.channels().cols();
    let outside: Vec<usize> = (0..image.grid().tokens())
        .filter(|&t| !region.contains(t))
        .collect();
    if outside.is_empty() {
        return out;
    }
    let mut mean = vec![0.0; channels];
    for &t in &outside {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += image.channels().get(t, c);
        }
    }
    for m in &mut mean {
        *m /= outside.len() as f64;
    }
    for &t in &outside {
        for (c, &m) in mean.iter().enumerate() {
            out.channels_mut().set(t, c, m);
        }
    }
    out
}

/// Write a token-grid vector as a scaled P2 PGM plus a raw CSV sidecar
/// (same path with a `.csv` extension).
pub fn emit_heatmap(values: &[f64], grid: Grid, path: &Path) -> Result<()> {
    if values.len() != grid.tokens() {
        return Err(SteerError::invalid(
            "heatmap",
            format!("{} values for {} tokens", values.len(), grid.tokens()),
        ));
    }
    let pgm = io::write_pgm_scaled(values, grid.height, grid.width)?;
    std::fs::write(path, pgm)
        .map_err(|e| SteerError::io(format!("writing {}", path.display()), e))?;
    let csv_path = path.with_extension("csv");
    std::fs::write(&csv_path, io::write_csv_grid(values, grid.height, grid.width))
        .map_err(|e| SteerError::io(format!("writing {}", csv_path.display()), e))?;
    Ok(())
}

/// Mean relevancy score over the pinned scenario set for each iteration cap
/// in `t_values`, steering with the hard energy on the ground-truth region.
pub fn relevancy_over_iterations(
    weights: &DecoderWeights,
    lab: &LabConfig,
    seed_base: u64,
    n_scenarios: usize,
    t_values: &[usize],
) -> Result<Vec<f64>> {
    let grid = weights.config.grid();
    let classes = weights.config.classes;
    let mut means = Vec::with_capacity(t_values.len());
    for &t in t_values {
        let scores: Vec<f64> = (0..n_scenarios)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let scenario = gen_scenario(seed_base + i as u64, grid, classes, lab.prompt)?;
                let mut config = lab.steering()?;
                config.energy = EnergyKind::Hard;
                config.iterations = t;
                let prompt = if scenario.prompt.is_region() {
                    scenario.prompt.clone()
                } else {
                    crate::geometry::VisualPrompt::Mask {
                        height: grid.height,
                        width: grid.width,
                        bits: scenario.target_region.bits().to_vec(),
                    }
                };
                let state = steer(weights, &scenario.image, &scenario.question, &prompt, &config)?;
                let map = relevancy_map(
                    weights,
                    &scenario.image,
                    &scenario.question,
                    Some(state.effective_latent()),
                    None,
                )?;
                Ok(relevancy_score(&map, &scenario.target_region))
            })
            .collect::<Result<_>>()?;
        means.push(scores.iter().sum::<f64>() / scores.len() as f64);
    }
    Ok(means)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;

    fn image_with_two_objects() -> (SyntheticImage, RegionMask) {
        let grid = Grid::new(4, 4);
        let mut image = SyntheticImage::background(grid, 3);
        image.paint_object(0, 0, 0, 2, 2);
        image.paint_object(1, 2, 2, 2, 2);
        let region = RegionMask::from_indices(grid, &[0, 1, 4, 5]).unwrap();
        (image, region)
    }

    #[test]
    fn color_sets_highlight_only_inside() {
        let (image, region) = image_with_two_objects();
        let colored = apply_color_baseline(&image, &region);
        let highlight = image.classes() + 1;
        for t in 0..16 {
            let expected = if region.contains(t) {
                1.0
            } else {
                image.channels().get(t, highlight)
            };
            assert_eq!(colored.channels().get(t, highlight), expected);
        }
    }

    #[test]
    fn full_region_highlights_every_cell() {
        let (image, _) = image_with_two_objects();
        let all = RegionMask::from_indices(Grid::new(4, 4), &(0..16).collect::<Vec<_>>()).unwrap();
        let colored = apply_color_baseline(&image, &all);
        let highlight = image.classes() + 1;
        for t in 0..16 {
            assert_eq!(colored.channels().get(t, highlight), 1.0);
        }
    }

    #[test]
    fn blur_with_full_region_is_identity() {
        let (image, _) = image_with_two_objects();
        let all = RegionMask::from_indices(Grid::new(4, 4), &(0..16).collect::<Vec<_>>()).unwrap();
        assert_eq!(apply_blur_baseline(&image, &all), image);
    }

    #[test]
    fn blur_flattens_the_outside() {
        let (image, region) = image_with_two_objects();
        let blurred = apply_blur_baseline(&image, &region);
        // all outside cells share one channel vector
        let outside: Vec<usize> = (0..16).filter(|&t| !region.contains(t)).collect();
        let first = outside[0];
        for &t in &outside[1..] {
            for c in 0..image.channels().cols() {
                assert_eq!(
                    blurred.channels().get(t, c),
                    blurred.channels().get(first, c)
                );
            }
        }
        // inside cells are untouched
        for t in region.indices() {
            for c in 0..image.channels().cols() {
                assert_eq!(blurred.channels().get(t, c), image.channels().get(t, c));
            }
        }
    }

    #[test]
    fn blur_keeps_uniform_background_nearly_unchanged() {
        let grid = Grid::new(4, 4);
        let image = SyntheticImage::background(grid, 3);
        let region = RegionMask::from_indices(grid, &[5]).unwrap();
        let blurred = apply_blur_baseline(&image, &region);
        for (a, b) in blurred.channels().data().iter().zip(image.channels().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn heatmap_emits_pgm_and_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let grid = Grid::new(2, 2);
        emit_heatmap(&[0.0, 0.5, 1.0, 0.25], grid, &path).unwrap();
        let pgm = std::fs::read_to_string(&path).unwrap();
        assert!(pgm.starts_with("P2\n2 2\n255\n"));
        let csv = std::fs::read_to_string(dir.path().join("map.csv")).unwrap();
        let (h, w, values) = io::parse_csv_grid(&csv).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(values, vec![0.0, 0.5, 1.0, 0.25]);
    }

    #[test]
    fn answer_prefers_higher_logit() {
        let logits = Tensor::row(&[0.1, 0.9, 0.5]);
        assert_eq!(answer_from_logits(&logits, 0, 1), 1);
        assert_eq!(answer_from_logits(&logits, 1, 2), 1);
        // ties go to the first mentioned
        let tied = Tensor::row(&[0.4, 0.4, 0.0]);
        assert_eq!(answer_from_logits(&tied, 0, 1), 0);
    }
}
