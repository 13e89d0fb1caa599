//! Taped forward passes through the decoder.
//!
//! The same recording path serves three callers: plain inference (weights
//! constant), latent-variable steering (weights constant, latent is the
//! gradient leaf), and harness pretraining (weights trainable). Causal
//! masking and any additive attention bias are folded into one constant
//! score offset per sequence length.

use crate::error::{Result, SteerError};
use crate::model::{
    positional_encoding, AttentionRecord, DecoderWeights, ModelConfig, SyntheticImage,
    TokenSequence,
};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Large negative score standing in for "masked"; exp underflows to exactly
/// zero after row-max subtraction, keeping every tensor finite.
const MASKED_SCORE: f64 = -1e30;

/// Tape handles for every decoder parameter, in [`DecoderWeights::matrices`]
/// order.
#[derive(Debug, Clone)]
pub struct WeightIds {
    pub alignment: TensorId,
    pub embedding: TensorId,
    pub layers: Vec<LayerIds>,
    pub final_norm_gamma: TensorId,
    pub final_norm_beta: TensorId,
    pub readout: TensorId,
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub attn_norm_gamma: TensorId,
    pub attn_norm_beta: TensorId,
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
    pub mlp_norm_gamma: TensorId,
    pub mlp_norm_beta: TensorId,
    pub w1: TensorId,
    pub w2: TensorId,
}

impl WeightIds {
    pub fn register(weights: &DecoderWeights, tape: &mut Tape, trainable: bool) -> Result<WeightIds> {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), trainable);
        Ok(WeightIds {
            alignment: leaf(&weights.alignment)?,
            embedding: leaf(&weights.embedding)?,
            layers: weights
                .layers
                .iter()
                .map(|l| {
                    Ok(LayerIds {
                        attn_norm_gamma: leaf(&l.attn_norm_gamma)?,
                        attn_norm_beta: leaf(&l.attn_norm_beta)?,
                        wq: leaf(&l.wq)?,
                        wk: leaf(&l.wk)?,
                        wv: leaf(&l.wv)?,
                        wo: leaf(&l.wo)?,
                        mlp_norm_gamma: leaf(&l.mlp_norm_gamma)?,
                        mlp_norm_beta: leaf(&l.mlp_norm_beta)?,
                        w1: leaf(&l.w1)?,
                        w2: leaf(&l.w2)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            final_norm_gamma: leaf(&weights.final_norm_gamma)?,
            final_norm_beta: leaf(&weights.final_norm_beta)?,
            readout: leaf(&weights.readout)?,
        })
    }

    /// Flat id list matching [`DecoderWeights::matrices`] order.
    pub fn all(&self) -> Vec<TensorId> {
        let mut out = vec![self.alignment, self.embedding];
        for l in &self.layers {
            out.extend([
                l.attn_norm_gamma,
                l.attn_norm_beta,
                l.wq,
                l.wk,
                l.wv,
                l.wo,
                l.mlp_norm_gamma,
                l.mlp_norm_beta,
                l.w1,
                l.w2,
            ]);
        }
        out.extend([self.final_norm_gamma, self.final_norm_beta, self.readout]);
        out
    }
}

/// Inputs that vary per forward pass.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Latent variable added to the visual tokens. `None` skips the addition
    /// entirely so an unsteered pass stays bit-identical.
    pub latent: Option<&'a Tensor>,
    /// Record the latent as a gradient leaf.
    pub latent_grad: bool,
    /// Additive pre-softmax score offset (seq x seq), applied in every
    /// layer on top of the causal mask.
    pub score_bias: Option<&'a Tensor>,
}

/// Node handles produced by one forward pass.
pub struct ForwardArtifacts {
    /// 1 x classes answer logits at the last position.
    pub logits: TensorId,
    /// `attention[layer][head]`: row-stochastic seq x seq matrices.
    pub attention: Vec<Vec<TensorId>>,
    /// The latent leaf, when one was supplied.
    pub latent: Option<TensorId>,
    pub visual_tokens: usize,
    pub text_len: usize,
}

impl ForwardArtifacts {
    pub fn seq_len(&self) -> usize {
        self.visual_tokens + self.text_len
    }
}

fn one_hot_rows(ids: &[usize], vocab: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(ids.len(), vocab);
    for (r, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(SteerError::UnknownToken { id, vocab });
        }
        t.set(r, id, 1.0);
    }
    Ok(t)
}

fn causal_mask(seq: usize) -> Tensor {
    let mut mask = Tensor::zeros(seq, seq);
    for r in 0..seq {
        for c in r + 1..seq {
            mask.set(r, c, MASKED_SCORE);
        }
    }
    mask
}

/// Record the full decoder on `tape`: encode image and text, run the
/// attention blocks, read answer logits from the last position.
pub fn forward_on_tape(
    tape: &mut Tape,
    ids: &WeightIds,
    config: &ModelConfig,
    image: &SyntheticImage,
    text_ids: &[usize],
    opts: &ForwardOptions,
) -> Result<ForwardArtifacts> {
    let grid = config.grid();
    if image.grid() != grid {
        return Err(SteerError::GridMismatch {
            got_h: image.grid().height,
            got_w: image.grid().width,
            want_h: grid.height,
            want_w: grid.width,
        });
    }
    let v = grid.tokens();
    let d = config.dim;
    let seq = v + text_ids.len();

    // visual tokens: channels -> alignment -> + positions (+ latent)
    let channels = tape.constant(image.channels().clone())?;
    let projected = tape.matmul(channels, ids.alignment)?;
    let vis_pos = tape.constant(positional_encoding(0, v, d))?;
    let mut e_v = tape.add(projected, vis_pos)?;
    let latent = match opts.latent {
        Some(p) => {
            if p.rows() != v || p.cols() != d {
                return Err(SteerError::ShapeMismatch {
                    op: "latent",
                    left_rows: p.rows(),
                    left_cols: p.cols(),
                    right_rows: v,
                    right_cols: d,
                });
            }
            let p_v = tape.leaf(p.clone(), opts.latent_grad)?;
            e_v = tape.add(e_v, p_v)?;
            Some(p_v)
        }
        None => None,
    };

    // text tokens: one-hot lookup keeps the embedding table differentiable
    let mut x = if text_ids.is_empty() {
        e_v
    } else {
        let one_hot = tape.constant(one_hot_rows(text_ids, config.vocab())?)?;
        let emb = tape.matmul(one_hot, ids.embedding)?;
        let text_pos = tape.constant(positional_encoding(v, text_ids.len(), d))?;
        let e_t = tape.add(emb, text_pos)?;
        tape.concat(e_v, e_t, 0)?
    };

    // causal mask plus optional bias, one constant shared by all layers
    let mut mask = causal_mask(seq);
    if let Some(bias) = opts.score_bias {
        if bias.rows() != seq || bias.cols() != seq {
            return Err(SteerError::ShapeMismatch {
                op: "score_bias",
                left_rows: bias.rows(),
                left_cols: bias.cols(),
                right_rows: seq,
                right_cols: seq,
            });
        }
        mask = mask.add(bias)?;
    }
    let mask = tape.constant(mask)?;

    let dk = config.head_dim();
    let scale = 1.0 / (dk as f64).sqrt();
    let mut attention = Vec::with_capacity(config.layers);

    for layer in &ids.layers {
        let normed = tape.layer_norm(x, layer.attn_norm_gamma, layer.attn_norm_beta)?;
        let q = tape.matmul(normed, layer.wq)?;
        let k = tape.matmul(normed, layer.wk)?;
        let vv = tape.matmul(normed, layer.wv)?;
        let mut head_maps = Vec::with_capacity(config.heads);
        let mut ctx: Option<TensorId> = None;
        for h in 0..config.heads {
            let (c0, c1) = (h * dk, (h + 1) * dk);
            let qh = tape.slice(q, 0, seq, c0, c1)?;
            let kh = tape.slice(k, 0, seq, c0, c1)?;
            let vh = tape.slice(vv, 0, seq, c0, c1)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, scale)?;
            let masked = tape.add(scaled, mask)?;
            let attn = tape.row_softmax(masked)?;
            head_maps.push(attn);
            let ctx_h = tape.matmul(attn, vh)?;
            ctx = Some(match ctx {
                None => ctx_h,
                Some(prev) => tape.concat(prev, ctx_h, 1)?,
            });
        }
        attention.push(head_maps);
        let attn_out = tape.matmul(ctx.expect("at least one head"), layer.wo)?;
        x = tape.add(x, attn_out)?;

        let normed2 = tape.layer_norm(x, layer.mlp_norm_gamma, layer.mlp_norm_beta)?;
        let h1 = tape.matmul(normed2, layer.w1)?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.matmul(h1, layer.w2)?;
        x = tape.add(x, h2)?;
    }

    let final_normed = tape.layer_norm(x, ids.final_norm_gamma, ids.final_norm_beta)?;
    let last = tape.slice(final_normed, seq - 1, seq, 0, d)?;
    let logits = tape.matmul(last, ids.readout)?;

    Ok(ForwardArtifacts {
        logits,
        attention,
        latent,
        visual_tokens: v,
        text_len: text_ids.len(),
    })
}

/// One inference forward with frozen weights; returns the answer logits and
/// every captured attention map.
pub fn forward_with_attention(
    weights: &DecoderWeights,
    image: &SyntheticImage,
    text_ids: &[usize],
    latent: Option<&Tensor>,
    score_bias: Option<&Tensor>,
) -> Result<(Tensor, AttentionRecord)> {
    let mut tape = Tape::new();
    let ids = WeightIds::register(weights, &mut tape, false)?;
    let artifacts = forward_on_tape(
        &mut tape,
        &ids,
        &weights.config,
        image,
        text_ids,
        &ForwardOptions {
            latent,
            latent_grad: false,
            score_bias,
        },
    )?;
    let record = AttentionRecord {
        layers: artifacts
            .attention
            .iter()
            .map(|heads| heads.iter().map(|&id| tape.value(id).clone()).collect())
            .collect(),
        visual_tokens: artifacts.visual_tokens,
        text_len: artifacts.text_len,
    };
    Ok((tape.value(artifacts.logits).clone(), record))
}

/// Greedy autoregressive readout. The optional latent is reused at every
/// step; the optional score bias applies to the 0-th step only, where the
/// sequence length matches its layout.
pub fn generate(
    weights: &DecoderWeights,
    image: &SyntheticImage,
    prompt: &[usize],
    latent: Option<&Tensor>,
    score_bias: Option<&Tensor>,
    steps: usize,
) -> Result<TokenSequence> {
    if steps == 0 {
        return Err(SteerError::invalid("generate", "steps must be >= 1"));
    }
    let mut generated = Vec::with_capacity(steps);
    let mut text: Vec<usize> = prompt.to_vec();
    for step in 0..steps {
        let bias = if step == 0 { score_bias } else { None };
        let (logits, _) = forward_with_attention(weights, image, &text, latent, bias)?;
        let row = logits.row_slice(0);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
            .map(|(i, _)| i)
            .expect("non-empty answer vocabulary");
        let token = crate::model::class_token(best);
        generated.push(token);
        text.push(token);
    }
    Ok(TokenSequence {
        visual_tokens: weights.config.visual_tokens(),
        prompt: prompt.to_vec(),
        generated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{question_tokens, SyntheticImage};

    fn small_config() -> ModelConfig {
        ModelConfig {
            grid_height: 4,
            grid_width: 4,
            classes: 3,
            dim: 8,
            layers: 2,
            heads: 2,
            mlp_hidden: 16,
        }
    }

    fn test_image(config: &ModelConfig) -> SyntheticImage {
        let mut image = SyntheticImage::background(config.grid(), config.classes);
        image.paint_object(0, 0, 0, 2, 2);
        image.paint_object(1, 2, 2, 2, 2);
        image
    }

    #[test]
    fn attention_rows_are_stochastic_and_causal() {
        let config = small_config();
        let weights = DecoderWeights::init(config, 11).unwrap();
        let image = test_image(&config);
        let (_, record) = forward_with_attention(
            &weights,
            &image,
            &question_tokens(0, 1),
            None,
            None,
        )
        .unwrap();
        assert_eq!(record.layers.len(), config.layers);
        for heads in &record.layers {
            assert_eq!(heads.len(), config.heads);
            for map in heads {
                for r in 0..map.rows() {
                    let sum: f64 = map.row_slice(r).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "row {r} sums to {sum}");
                    for c in r + 1..map.cols() {
                        assert_eq!(map.get(r, c), 0.0, "causal leak at ({r},{c})");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_latent_skip_matches_bit_exactly() {
        let config = small_config();
        let weights = DecoderWeights::init(config, 11).unwrap();
        let image = test_image(&config);
        let q = question_tokens(0, 1);
        let (base, _) = forward_with_attention(&weights, &image, &q, None, None).unwrap();
        let zeros = Tensor::zeros(config.visual_tokens(), config.dim);
        let (steered, _) =
            forward_with_attention(&weights, &image, &q, Some(&zeros), None).unwrap();
        for (a, b) in base.data().iter().zip(steered.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn repeated_forwards_are_bit_identical() {
        let config = small_config();
        let weights = DecoderWeights::init(config, 11).unwrap();
        let image = test_image(&config);
        let q = question_tokens(1, 2);
        let (a, _) = forward_with_attention(&weights, &image, &q, None, None).unwrap();
        let (b, _) = forward_with_attention(&weights, &image, &q, None, None).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn uniform_rows_when_queries_and_keys_collapse() {
        // Zero q/k projections make every visible score equal, so each row
        // is uniform over its causal prefix.
        let config = small_config();
        let mut weights = DecoderWeights::init(config, 11).unwrap();
        for layer in &mut weights.layers {
            layer.wq = Tensor::zeros(config.dim, config.dim);
            layer.wk = Tensor::zeros(config.dim, config.dim);
        }
        let image = test_image(&config);
        let (_, record) =
            forward_with_attention(&weights, &image, &question_tokens(0, 1), None, None).unwrap();
        let map = &record.layers[0][0];
        for r in 0..map.rows() {
            let expected = 1.0 / (r + 1) as f64;
            for c in 0..=r {
                assert!((map.get(r, c) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn score_shift_invariance() {
        // Adding a constant to a full score row leaves its softmax unchanged.
        let config = small_config();
        let weights = DecoderWeights::init(config, 3).unwrap();
        let image = test_image(&config);
        let q = question_tokens(0, 2);
        let seq = config.visual_tokens() + q.len();
        let (base, base_rec) = forward_with_attention(&weights, &image, &q, None, None).unwrap();
        // shift the last row's scores everywhere it is allowed to attend
        let mut bias = Tensor::zeros(seq, seq);
        for c in 0..seq {
            bias.set(seq - 1, c, 7.5);
        }
        let (shifted, rec) =
            forward_with_attention(&weights, &image, &q, None, Some(&bias)).unwrap();
        let last = seq - 1;
        for (a, b) in base_rec.layers[0][0]
            .row_slice(last)
            .iter()
            .zip(rec.layers[0][0].row_slice(last))
        {
            assert!((a - b).abs() < 1e-12);
        }
        // the logits follow the first layer only through that row, but other
        // rows are untouched too, so outputs agree
        for (a, b) in base.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn generate_is_deterministic_and_greedy() {
        let config = small_config();
        let weights = DecoderWeights::init(config, 5).unwrap();
        let image = test_image(&config);
        let q = question_tokens(0, 1);
        let one = generate(&weights, &image, &q, None, None, 1).unwrap();
        assert_eq!(one.generated.len(), 1);
        let (logits, _) = forward_with_attention(&weights, &image, &q, None, None).unwrap();
        let best = logits
            .row_slice(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(one.generated[0], crate::model::class_token(best));

        let three_a = generate(&weights, &image, &q, None, None, 3).unwrap();
        let three_b = generate(&weights, &image, &q, None, None, 3).unwrap();
        assert_eq!(three_a, three_b);
    }

    #[test]
    fn latent_shape_mismatch_is_rejected() {
        let config = small_config();
        let weights = DecoderWeights::init(config, 5).unwrap();
        let image = test_image(&config);
        let bad = Tensor::zeros(3, config.dim);
        assert!(forward_with_attention(
            &weights,
            &image,
            &question_tokens(0, 1),
            Some(&bad),
            None
        )
        .is_err());
    }

    #[test]
    fn weights_untouched_by_forward() {
        let config = small_config();
        let weights = DecoderWeights::init(config, 5).unwrap();
        let snapshot = weights.clone();
        let image = test_image(&config);
        let latent = Tensor::filled(config.visual_tokens(), config.dim, 0.25);
        let _ = forward_with_attention(
            &weights,
            &image,
            &question_tokens(0, 1),
            Some(&latent),
            None,
        )
        .unwrap();
        assert_eq!(weights, snapshot);
    }
}
