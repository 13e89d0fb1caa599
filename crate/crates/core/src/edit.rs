//! The edit-attention baseline: an additive pre-softmax score bias eta on
//! in-region visual-token columns, applied in every layer at the 0-th step.
//!
//! This is the analyzed-and-rejected alternative to latent optimization:
//! cheap, but it needs a hand-picked eta per example and bypasses the
//! relationships between attention layers.

use crate::error::{Result, SteerError};
use crate::geometry::RegionMask;
use crate::model::{forward_with_attention, AttentionRecord, DecoderWeights, SyntheticImage};
use crate::tensor::Tensor;

/// Sequence layout the bias is realized against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub visual_tokens: usize,
    pub text_len: usize,
}

impl SeqLayout {
    pub fn seq_len(&self) -> usize {
        self.visual_tokens + self.text_len
    }
}

/// A realized additive attention bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBias {
    pub eta: f64,
    pub region: RegionMask,
    pub layout: SeqLayout,
    /// Bias only text-token rows (the semantically meaningful ones) or every
    /// row that may causally attend into the region.
    pub all_rows: bool,
    matrix: Tensor,
}

impl AttentionBias {
    /// The realized seq x seq matrix M.
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn nonzero_entries(&self) -> usize {
        self.matrix.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Build M: eta on in-region visual columns for the biased rows, zero
/// elsewhere and everywhere the causal mask forbids attention.
pub fn build_bias(region: &RegionMask, eta: f64, layout: SeqLayout) -> Result<AttentionBias> {
    build_bias_rows(region, eta, layout, false)
}

pub fn build_bias_rows(
    region: &RegionMask,
    eta: f64,
    layout: SeqLayout,
    all_rows: bool,
) -> Result<AttentionBias> {
    if region.grid().tokens() != layout.visual_tokens {
        return Err(SteerError::invalid(
            "build_bias",
            format!(
                "region over {} tokens, layout has {}",
                region.grid().tokens(),
                layout.visual_tokens
            ),
        ));
    }
    if !eta.is_finite() {
        return Err(SteerError::invalid("build_bias", "eta must be finite"));
    }
    let seq = layout.seq_len();
    let mut matrix = Tensor::zeros(seq, seq);
    if eta != 0.0 {
        let rows: Vec<usize> = if all_rows {
            (0..seq).collect()
        } else {
            (layout.visual_tokens..seq).collect()
        };
        for r in rows {
            for col in region.indices() {
                // respect causality: never bias a position it cannot see
                if col <= r {
                    matrix.set(r, col, eta);
                }
            }
        }
    }
    Ok(AttentionBias {
        eta,
        region: region.clone(),
        layout,
        all_rows,
        matrix,
    })
}

/// Forward pass with the bias added to every layer's pre-softmax scores.
/// An eta of zero skips the addition so the output stays bit-identical to
/// the unbiased forward.
pub fn forward_with_bias(
    weights: &DecoderWeights,
    image: &SyntheticImage,
    text_ids: &[usize],
    bias: &AttentionBias,
) -> Result<(Tensor, AttentionRecord)> {
    let expected = SeqLayout {
        visual_tokens: weights.config.visual_tokens(),
        text_len: text_ids.len(),
    };
    if bias.layout != expected {
        return Err(SteerError::invalid(
            "forward_with_bias",
            format!(
                "bias laid out for {}+{} tokens, sequence is {}+{}",
                bias.layout.visual_tokens,
                bias.layout.text_len,
                expected.visual_tokens,
                expected.text_len
            ),
        ));
    }
    let score_bias = if bias.eta == 0.0 {
        None
    } else {
        Some(&bias.matrix)
    };
    forward_with_attention(weights, image, text_ids, None, score_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rasterize_prompt, Grid, VisualPrompt};
    use crate::model::{question_tokens, ModelConfig};
    use crate::steering::{pool_context_attention, HeadReduction, LayerSet};

    fn setup() -> (DecoderWeights, SyntheticImage, Vec<usize>, RegionMask) {
        let config = ModelConfig {
            grid_height: 4,
            grid_width: 4,
            classes: 3,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_hidden: 16,
        };
        let weights = DecoderWeights::init(config, 31).unwrap();
        let mut image = SyntheticImage::background(config.grid(), config.classes);
        image.paint_object(0, 0, 0, 2, 2);
        image.paint_object(1, 2, 2, 2, 2);
        let region = rasterize_prompt(
            &VisualPrompt::Box {
                x0: 0.0,
                y0: 0.0,
                x1: 0.5,
                y1: 0.5,
            },
            Grid::new(4, 4),
        )
        .unwrap();
        (weights, image, question_tokens(0, 1), region)
    }

    #[test]
    fn zero_eta_matches_base_bitwise() {
        let (weights, image, text, region) = setup();
        let layout = SeqLayout {
            visual_tokens: 16,
            text_len: text.len(),
        };
        let bias = build_bias(&region, 0.0, layout).unwrap();
        assert_eq!(bias.nonzero_entries(), 0);
        let (base, _) = forward_with_attention(&weights, &image, &text, None, None).unwrap();
        let (biased, _) = forward_with_bias(&weights, &image, &text, &bias).unwrap();
        for (a, b) in base.data().iter().zip(biased.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bias_has_region_times_text_rows_entries() {
        let (_, _, text, region) = setup();
        let layout = SeqLayout {
            visual_tokens: 16,
            text_len: text.len(),
        };
        let bias = build_bias(&region, 10.0, layout).unwrap();
        assert_eq!(bias.nonzero_entries(), region.count() * text.len());
    }

    #[test]
    fn bias_rows_remain_stochastic() {
        let (weights, image, text, region) = setup();
        let layout = SeqLayout {
            visual_tokens: 16,
            text_len: text.len(),
        };
        let bias = build_bias(&region, 10.0, layout).unwrap();
        let (_, record) = forward_with_bias(&weights, &image, &text, &bias).unwrap();
        for heads in &record.layers {
            for map in heads {
                for r in 0..map.rows() {
                    let sum: f64 = map.row_slice(r).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                    for c in r + 1..map.cols() {
                        assert_eq!(map.get(r, c), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn in_region_mass_is_monotone_in_eta() {
        let (weights, image, text, region) = setup();
        let layout = SeqLayout {
            visual_tokens: 16,
            text_len: text.len(),
        };
        let mut last = -1.0;
        for eta in [0.0, 0.5, 2.0, 10.0, 100.0] {
            let bias = build_bias(&region, eta, layout).unwrap();
            let (_, record) = forward_with_bias(&weights, &image, &text, &bias).unwrap();
            let rows: Vec<usize> = record.text_rows().collect();
            let pooled =
                pool_context_attention(&record, &rows, &LayerSet::All, HeadReduction::Mean)
                    .unwrap();
            let mass = pooled.in_region_ratio(&region).unwrap();
            assert!(
                mass >= last,
                "mass {mass} dropped below {last} at eta {eta}"
            );
            last = mass;
        }
    }

    #[test]
    fn saturating_eta_concentrates_all_mass() {
        let (weights, image, text, region) = setup();
        let layout = SeqLayout {
            visual_tokens: 16,
            text_len: text.len(),
        };
        let bias = build_bias(&region, 1e4, layout).unwrap();
        let (_, record) = forward_with_bias(&weights, &image, &text, &bias).unwrap();
        // every text row's visual mass collapses into the region
        for heads in &record.layers {
            for map in heads {
                for r in record.text_rows() {
                    let in_mass: f64 = region.indices().map(|c| map.get(r, c)).sum();
                    let visual_mass: f64 = (0..16).map(|c| map.get(r, c)).sum();
                    assert!(in_mass / visual_mass > 0.999);
                }
            }
        }
    }

    #[test]
    fn biased_region_mass_exceeds_unbiased() {
        let (weights, image, text, region) = setup();
        let layout = SeqLayout {
            visual_tokens: 16,
            text_len: text.len(),
        };
        let (_, base) = forward_with_attention(&weights, &image, &text, None, None).unwrap();
        let rows: Vec<usize> = base.text_rows().collect();
        let base_mass = pool_context_attention(&base, &rows, &LayerSet::All, HeadReduction::Mean)
            .unwrap()
            .in_region_ratio(&region)
            .unwrap();
        let bias = build_bias(&region, 10.0, layout).unwrap();
        let (_, biased) = forward_with_bias(&weights, &image, &text, &bias).unwrap();
        let biased_mass =
            pool_context_attention(&biased, &rows, &LayerSet::All, HeadReduction::Mean)
                .unwrap()
                .in_region_ratio(&region)
                .unwrap();
        assert!(biased_mass > base_mass);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let (weights, image, text, region) = setup();
        let wrong = SeqLayout {
            visual_tokens: 16,
            text_len: text.len() + 1,
        };
        let bias = build_bias(&region, 10.0, wrong).unwrap();
        assert!(forward_with_bias(&weights, &image, &text, &bias).is_err());
    }
}
