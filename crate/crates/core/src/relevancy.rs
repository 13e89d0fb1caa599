//! Gradient-weighted attention rollout from the first output token to the
//! visual tokens.
//!
//! Starting from an identity relevance matrix, each layer contributes the
//! positive part of `grad(A) * A` (elementwise, averaged over heads) and the
//! relevance is propagated multiplicatively: `R <- R + A_bar R`. The first
//! output token's row, restricted to visual columns, is the map; its maximum
//! inside the referring region is the scalar relevancy score. Absolute
//! magnitudes are implementation-defined; only relative trends are
//! meaningful.

use crate::error::Result;
use crate::geometry::{Grid, RegionMask};
use crate::io;
use crate::model::{forward_on_tape, DecoderWeights, ForwardOptions, SyntheticImage, WeightIds};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Non-negative relevance of each visual token to the first output token.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevancyMap {
    grid: Grid,
    values: Vec<f64>,
}

impl RelevancyMap {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<RelevancyMap> {
        if values.len() != grid.tokens() {
            return Err(crate::error::SteerError::invalid(
                "relevancy map",
                format!("{} values for {} tokens", values.len(), grid.tokens()),
            ));
        }
        Ok(RelevancyMap { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// ASCII PGM rendering scaled by the map maximum.
    pub fn to_pgm(&self) -> Result<String> {
        io::write_pgm_scaled(&self.values, self.grid.height, self.grid.width)
    }

    /// Raw CSV: one line per grid row.
    pub fn to_csv(&self) -> String {
        io::write_csv_grid(&self.values, self.grid.height, self.grid.width)
    }
}

/// Maximum relevance inside the referring region. Localized peaks carry the
/// signal, so the max is used rather than a mean that would dilute it.
pub fn relevancy_score(map: &RelevancyMap, region: &RegionMask) -> f64 {
    region
        .indices()
        .map(|i| map.values[i])
        .fold(0.0f64, f64::max)
}

/// The rollout rule on captured (attention, gradient) pairs per layer/head.
/// Exposed for direct verification against hand-computed cases.
pub fn rollout(layers: &[Vec<(Tensor, Tensor)>], seq: usize) -> Result<Tensor> {
    let mut relevance = Tensor::identity(seq);
    for heads in layers {
        let mut bar: Option<Tensor> = None;
        for (attn, grad) in heads {
            let weighted = attn.mul_elem(grad)?.map(|v| v.max(0.0));
            bar = Some(match bar {
                None => weighted,
                Some(prev) => prev.add(&weighted)?,
            });
        }
        let bar = bar
            .ok_or_else(|| crate::error::SteerError::invalid("rollout", "layer with no heads"))?
            .scale(1.0 / heads.len() as f64);
        let update = bar.matmul(&relevance)?;
        relevance = relevance.add(&update)?;
    }
    Ok(relevance)
}

/// Compute the relevancy map for one forward pass, optionally with a steered
/// latent added to the visual tokens and/or an additive score bias (so the
/// edit-attention baseline can be diagnosed with the same tool).
///
/// The root of the backward pass is the predicted (argmax) first-token
/// logit; gradients with respect to every captured attention matrix come
/// from the same tape.
pub fn relevancy_map(
    weights: &DecoderWeights,
    image: &SyntheticImage,
    text_ids: &[usize],
    latent: Option<&Tensor>,
    score_bias: Option<&Tensor>,
) -> Result<RelevancyMap> {
    let grid = weights.config.grid();
    let v = weights.config.visual_tokens();
    let d = weights.config.dim;

    let mut tape = Tape::new();
    let ids = WeightIds::register(weights, &mut tape, false)?;
    // the latent leaf is the gradient root of the graph; registering it even
    // when unsteered (zeros) keeps every attention node on the gradient path
    let zeros;
    let latent_input = match latent {
        Some(p) => p,
        None => {
            zeros = Tensor::zeros(v, d);
            &zeros
        }
    };
    let artifacts = forward_on_tape(
        &mut tape,
        &ids,
        &weights.config,
        image,
        text_ids,
        &ForwardOptions {
            latent: Some(latent_input),
            latent_grad: true,
            score_bias,
        },
    )?;

    let logits = tape.value(artifacts.logits);
    let predicted = logits
        .row_slice(0)
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
        .map(|(i, _)| i)
        .expect("non-empty logits");
    let root = tape.slice(artifacts.logits, 0, 1, predicted, predicted + 1)?;
    let grads = tape.backward(root)?;

    let seq = artifacts.seq_len();
    let captured: Vec<Vec<(Tensor, Tensor)>> = artifacts
        .attention
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|&id| (tape.value(id).clone(), grads.get(id)))
                .collect()
        })
        .collect();
    let relevance = rollout(&captured, seq)?;

    // the first output token is produced at the last sequence position
    let row = relevance.row_slice(seq - 1);
    RelevancyMap::new(grid, row[..v].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{question_tokens, ModelConfig};

    #[test]
    fn uniform_attention_and_grads_give_uniform_map() {
        // one layer, one head, uniform A and uniform positive grads: the
        // first output row of R is uniform over the other positions
        let seq = 4;
        let a = Tensor::filled(seq, seq, 1.0 / seq as f64);
        let g = Tensor::filled(seq, seq, 0.5);
        let r = rollout(&[vec![(a, g)]], seq).unwrap();
        let last = r.row_slice(seq - 1);
        for c in 0..seq - 1 {
            assert!((last[c] - last[0]).abs() < 1e-15);
        }
        // diagonal contribution makes the own-position entry larger
        assert!(last[seq - 1] > last[0]);
    }

    #[test]
    fn negative_gradient_contributions_are_clipped() {
        let seq = 2;
        let a = Tensor::filled(seq, seq, 0.5);
        let g = Tensor::filled(seq, seq, -1.0);
        let r = rollout(&[vec![(a, g)]], seq).unwrap();
        assert_eq!(r, Tensor::identity(seq));
    }

    #[test]
    fn score_is_max_in_region() {
        let grid = Grid::new(2, 2);
        let map = RelevancyMap::new(grid, vec![0.1, 0.7, 0.3, 0.5]).unwrap();
        let all = RegionMask::from_indices(grid, &[0, 1, 2, 3]).unwrap();
        assert_eq!(relevancy_score(&map, &all), 0.7);
        let corner = RegionMask::from_indices(grid, &[2, 3]).unwrap();
        assert_eq!(relevancy_score(&map, &corner), 0.5);
    }

    #[test]
    fn zero_map_scores_zero() {
        let grid = Grid::new(2, 2);
        let map = RelevancyMap::new(grid, vec![0.0; 4]).unwrap();
        let all = RegionMask::from_indices(grid, &[0, 1, 2, 3]).unwrap();
        assert_eq!(relevancy_score(&map, &all), 0.0);
    }

    #[test]
    fn union_score_is_max_of_parts() {
        let grid = Grid::new(2, 2);
        let map = RelevancyMap::new(grid, vec![0.2, 0.9, 0.4, 0.6]).unwrap();
        let r1 = RegionMask::from_indices(grid, &[0, 1]).unwrap();
        let r2 = RegionMask::from_indices(grid, &[2, 3]).unwrap();
        let union = RegionMask::from_indices(grid, &[0, 1, 2, 3]).unwrap();
        assert_eq!(
            relevancy_score(&map, &union),
            relevancy_score(&map, &r1).max(relevancy_score(&map, &r2))
        );
    }

    fn tied_class_setup() -> (DecoderWeights, ModelConfig) {
        let config = ModelConfig {
            grid_height: 4,
            grid_width: 4,
            classes: 3,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_hidden: 16,
        };
        let mut weights = DecoderWeights::init(config, 77).unwrap();
        // tie classes 0 and 1 everywhere the class identity enters the model
        for c in 0..config.dim {
            let v = weights.alignment.get(0, c);
            weights.alignment.set(1, c, v);
            let e = weights.embedding.get(crate::model::class_token(0), c);
            weights.embedding.set(crate::model::class_token(1), c, e);
        }
        for r in 0..config.dim {
            let v = weights.readout.get(r, 0);
            weights.readout.set(r, 1, v);
        }
        (weights, config)
    }

    #[test]
    fn map_invariant_under_tied_class_relabeling() {
        // when two classes are indistinguishable to the model, relabeling an
        // out-of-region object between them cannot change the map
        let (weights, config) = tied_class_setup();
        let mut image_a = SyntheticImage::background(config.grid(), config.classes);
        image_a.paint_object(2, 0, 0, 2, 2); // in-region target, class 2
        image_a.paint_object(0, 2, 2, 2, 2); // out-region object, class 0
        let mut image_b = SyntheticImage::background(config.grid(), config.classes);
        image_b.paint_object(2, 0, 0, 2, 2);
        image_b.paint_object(1, 2, 2, 2, 2); // relabeled to tied class 1

        let text = question_tokens(2, 0);
        let map_a = relevancy_map(&weights, &image_a, &text, None, None).unwrap();
        let map_b = relevancy_map(&weights, &image_b, &text, None, None).unwrap();
        for (a, b) in map_a.values().iter().zip(map_b.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn real_forward_produces_finite_nonnegative_map() {
        let config = ModelConfig {
            grid_height: 4,
            grid_width: 4,
            classes: 3,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_hidden: 16,
        };
        let weights = DecoderWeights::init(config, 5).unwrap();
        let mut image = SyntheticImage::background(config.grid(), config.classes);
        image.paint_object(0, 0, 0, 2, 2);
        image.paint_object(1, 2, 2, 2, 2);
        let map = relevancy_map(&weights, &image, &question_tokens(0, 1), None, None).unwrap();
        assert_eq!(map.values().len(), 16);
        for &v in map.values() {
            assert!(v.is_finite() && v >= 0.0);
        }
        // the map should not be identically zero on a real forward
        assert!(map.values().iter().any(|&v| v > 0.0));
    }
}
