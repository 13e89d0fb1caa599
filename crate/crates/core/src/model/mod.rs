//! A miniature LLaVA-shaped multimodal decoder.
//!
//! A synthetic image grid is encoded into visual tokens by a linear
//! alignment map plus sinusoidal positions; text tokens follow from an
//! embedding table. The concatenated sequence `[visual, text]` runs through
//! pre-norm causal attention blocks, every attention map is captured, and
//! answer logits are read from the last position's hidden state.
//!
//! The decoder is deliberately tiny (defaults: 2 layers, 2 heads, d = 32,
//! an 8x8 token grid) so that full-forward gradient checks and hundreds of
//! steering scenarios run in seconds on a CPU.

mod forward;
mod weights_io;

pub use forward::{
    forward_on_tape, forward_with_attention, generate, ForwardArtifacts, ForwardOptions,
    WeightIds,
};
pub use weights_io::sha256_hex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};
use crate::geometry::Grid;
use crate::tensor::Tensor;

// Fixed word ids shared by every question template.
pub const TOK_IS: usize = 0;
pub const TOK_THE: usize = 1;
pub const TOK_OBJECT: usize = 2;
pub const TOK_LOC: usize = 3;
pub const TOK_A: usize = 4;
pub const TOK_OR: usize = 5;
pub const BASE_VOCAB: usize = 6;

/// Token id of a class answer word.
pub fn class_token(class: usize) -> usize {
    BASE_VOCAB + class
}

/// "is the object <loc> a <A> or a <B>"
pub fn question_tokens(class_a: usize, class_b: usize) -> Vec<usize> {
    vec![
        TOK_IS,
        TOK_THE,
        TOK_OBJECT,
        TOK_LOC,
        TOK_A,
        class_token(class_a),
        TOK_OR,
        TOK_A,
        class_token(class_b),
    ]
}

/// Architecture hyperparameters. `channels` and `vocab` are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub classes: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            grid_height: 8,
            grid_width: 8,
            classes: 6,
            dim: 32,
            layers: 2,
            heads: 2,
            mlp_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Grid {
        Grid::new(self.grid_height, self.grid_width)
    }

    pub fn visual_tokens(&self) -> usize {
        self.grid_height * self.grid_width
    }

    /// Per-cell channel vector length: one-hot class channels plus a
    /// background flag and a highlight flag.
    pub fn channels(&self) -> usize {
        self.classes + 2
    }

    pub fn vocab(&self) -> usize {
        BASE_VOCAB + self.classes
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim % self.heads != 0 {
            return Err(SteerError::invalid(
                "model config",
                format!("dim {} not divisible by heads {}", self.dim, self.heads),
            ));
        }
        if self.visual_tokens() == 0 || self.classes < 2 || self.layers == 0 {
            return Err(SteerError::invalid("model config", "degenerate dimensions"));
        }
        Ok(())
    }
}

/// A grid image where each cell carries a channel vector:
/// `[class one-hots.., background, highlight]` plus sampling noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    grid: Grid,
    classes: usize,
    channels: Tensor, // V x (classes + 2)
}

impl SyntheticImage {
    /// All-background image (background channel 1 everywhere, no noise).
    pub fn background(grid: Grid, classes: usize) -> SyntheticImage {
        let mut channels = Tensor::zeros(grid.tokens(), classes + 2);
        for t in 0..grid.tokens() {
            channels.set(t, classes, 1.0);
        }
        SyntheticImage {
            grid,
            classes,
            channels,
        }
    }

    pub fn from_channels(grid: Grid, classes: usize, channels: Tensor) -> Result<SyntheticImage> {
        if channels.rows() != grid.tokens() || channels.cols() != classes + 2 {
            return Err(SteerError::invalid(
                "image",
                format!(
                    "channels {}x{} for grid {}x{} with {} classes",
                    channels.rows(),
                    channels.cols(),
                    grid.height,
                    grid.width,
                    classes
                ),
            ));
        }
        Ok(SyntheticImage {
            grid,
            classes,
            channels,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> &Tensor {
        &self.channels
    }

    pub fn channels_mut(&mut self) -> &mut Tensor {
        &mut self.channels
    }

    /// Paint a rectangle of cells with a class one-hot, clearing background.
    pub fn paint_object(&mut self, class: usize, r0: usize, c0: usize, h: usize, w: usize) {
        for r in r0..(r0 + h).min(self.grid.height) {
            for c in c0..(c0 + w).min(self.grid.width) {
                let t = r * self.grid.width + c;
                for ch in 0..self.classes + 2 {
                    self.channels.set(t, ch, 0.0);
                }
                self.channels.set(t, class, 1.0);
            }
        }
    }

    /// Add i.i.d. uniform noise in [-amplitude, amplitude] to every channel.
    pub fn add_noise(&mut self, amplitude: f64, rng: &mut ChaCha8Rng) {
        use rand::Rng;
        for v in self.channels.data_mut() {
            *v += rng.random_range(-amplitude..=amplitude);
        }
    }
}

/// One attention block's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm_gamma: Tensor,
    pub attn_norm_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm_gamma: Tensor,
    pub mlp_norm_beta: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Frozen decoder parameters. Steering never mutates these; only the latent
/// variable added to the visual tokens changes at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub config: ModelConfig,
    pub seed: u64,
    pub alignment: Tensor, // channels x dim
    pub embedding: Tensor, // vocab x dim
    pub layers: Vec<LayerWeights>,
    pub final_norm_gamma: Tensor,
    pub final_norm_beta: Tensor,
    pub readout: Tensor, // dim x classes
}

impl DecoderWeights {
    /// Seeded random initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<DecoderWeights> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("std is positive");
            Tensor::new(
                rows,
                cols,
                (0..rows * cols).map(|_| dist.sample(&mut rng)).collect(),
            )
            .expect("shape matches data")
        };
        let proj_std = 1.0 / (d as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                attn_norm_gamma: Tensor::filled(1, d, 1.0),
                attn_norm_beta: Tensor::zeros(1, d),
                wq: normal(d, d, proj_std),
                wk: normal(d, d, proj_std),
                wv: normal(d, d, proj_std),
                wo: normal(d, d, proj_std),
                mlp_norm_gamma: Tensor::filled(1, d, 1.0),
                mlp_norm_beta: Tensor::zeros(1, d),
                w1: normal(d, config.mlp_hidden, proj_std),
                w2: normal(config.mlp_hidden, d, 1.0 / (config.mlp_hidden as f64).sqrt()),
            })
            .collect();
        Ok(DecoderWeights {
            seed,
            alignment: normal(config.channels(), d, 1.0 / (config.channels() as f64).sqrt()),
            embedding: normal(config.vocab(), d, 0.5),
            layers,
            final_norm_gamma: Tensor::filled(1, d, 1.0),
            final_norm_beta: Tensor::zeros(1, d),
            readout: normal(d, config.classes, proj_std),
            config,
        })
    }

    /// All parameter matrices in serialization order, with stable names.
    pub fn matrices(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("alignment".into(), &self.alignment),
            ("embedding".into(), &self.embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.attn_norm_gamma"), &layer.attn_norm_gamma));
            out.push((format!("layer{i}.attn_norm_beta"), &layer.attn_norm_beta));
            out.push((format!("layer{i}.wq"), &layer.wq));
            out.push((format!("layer{i}.wk"), &layer.wk));
            out.push((format!("layer{i}.wv"), &layer.wv));
            out.push((format!("layer{i}.wo"), &layer.wo));
            out.push((format!("layer{i}.mlp_norm_gamma"), &layer.mlp_norm_gamma));
            out.push((format!("layer{i}.mlp_norm_beta"), &layer.mlp_norm_beta));
            out.push((format!("layer{i}.w1"), &layer.w1));
            out.push((format!("layer{i}.w2"), &layer.w2));
        }
        out.push(("final_norm_gamma".into(), &self.final_norm_gamma));
        out.push(("final_norm_beta".into(), &self.final_norm_beta));
        out.push(("readout".into(), &self.readout));
        out
    }

    pub(crate) fn matrices_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.alignment, &mut self.embedding];
        for layer in &mut self.layers {
            out.push(&mut layer.attn_norm_gamma);
            out.push(&mut layer.attn_norm_beta);
            out.push(&mut layer.wq);
            out.push(&mut layer.wk);
            out.push(&mut layer.wv);
            out.push(&mut layer.wo);
            out.push(&mut layer.mlp_norm_gamma);
            out.push(&mut layer.mlp_norm_beta);
            out.push(&mut layer.w1);
            out.push(&mut layer.w2);
        }
        out.push(&mut self.final_norm_gamma);
        out.push(&mut self.final_norm_beta);
        out.push(&mut self.readout);
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        weights_io::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<DecoderWeights> {
        weights_io::load(path)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        weights_io::to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DecoderWeights> {
        weights_io::from_bytes(bytes)
    }
}

/// Sinusoidal positional encoding rows for positions `[start, start + len)`.
pub fn positional_encoding(start: usize, len: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(len, dim);
    for i in 0..len {
        let pos = (start + i) as f64;
        for j in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * j as f64 / dim as f64);
            pe.set(i, 2 * j, (pos * freq).sin());
            pe.set(i, 2 * j + 1, (pos * freq).cos());
        }
    }
    pe
}

/// Visual tokens: per-cell channels through the alignment map, plus
/// positions. Deterministic in its inputs.
pub fn encode_image(image: &SyntheticImage, weights: &DecoderWeights) -> Result<Tensor> {
    let grid = weights.config.grid();
    if image.grid() != grid {
        return Err(SteerError::GridMismatch {
            got_h: image.grid().height,
            got_w: image.grid().width,
            want_h: grid.height,
            want_w: grid.width,
        });
    }
    if image.classes() != weights.config.classes {
        return Err(SteerError::invalid(
            "encode_image",
            format!(
                "image has {} classes, decoder expects {}",
                image.classes(),
                weights.config.classes
            ),
        ));
    }
    let projected = image.channels().matmul(&weights.alignment)?;
    projected.add(&positional_encoding(0, grid.tokens(), weights.config.dim))
}

/// Text tokens: embedding lookup plus positions offset by the visual block.
pub fn encode_text(token_ids: &[usize], weights: &DecoderWeights) -> Result<Tensor> {
    let vocab = weights.config.vocab();
    let d = weights.config.dim;
    let mut rows = Vec::with_capacity(token_ids.len() * d);
    for &id in token_ids {
        if id >= vocab {
            return Err(SteerError::UnknownToken { id, vocab });
        }
        rows.extend_from_slice(weights.embedding.row_slice(id));
    }
    let emb = Tensor::new(token_ids.len(), d, rows)?;
    emb.add(&positional_encoding(
        weights.config.visual_tokens(),
        token_ids.len(),
        d,
    ))
}

/// Per-layer, per-head attention matrices captured during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// `layers[layer][head]` is a row-stochastic seq x seq matrix.
    pub layers: Vec<Vec<Tensor>>,
    pub visual_tokens: usize,
    pub text_len: usize,
}

impl AttentionRecord {
    pub fn seq_len(&self) -> usize {
        self.visual_tokens + self.text_len
    }

    /// Positions of the text prompt tokens in the concatenated sequence.
    pub fn text_rows(&self) -> std::ops::Range<usize> {
        self.visual_tokens..self.visual_tokens + self.text_len
    }
}

/// A decoded token sequence: prompt ids plus greedily generated answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub visual_tokens: usize,
    pub prompt: Vec<usize>,
    pub generated: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn question_template_has_expected_length() {
        let q = question_tokens(0, 1);
        assert_eq!(q.len(), 9);
        assert_eq!(q[5], class_token(0));
        assert_eq!(q[8], class_token(1));
    }

    #[test]
    fn background_image_projects_to_positions_under_zero_alignment() {
        let config = ModelConfig::default();
        let mut weights = DecoderWeights::init(config, 7).unwrap();
        weights.alignment = Tensor::zeros(config.channels(), config.dim);
        let image = SyntheticImage::background(config.grid(), config.classes);
        let ev = encode_image(&image, &weights).unwrap();
        let pe = positional_encoding(0, config.visual_tokens(), config.dim);
        assert_eq!(ev, pe);
    }

    #[test]
    fn identical_cells_differ_only_by_position() {
        let config = ModelConfig::default();
        let weights = DecoderWeights::init(config, 7).unwrap();
        let image = SyntheticImage::background(config.grid(), config.classes);
        let ev = encode_image(&image, &weights).unwrap();
        let pe = positional_encoding(0, config.visual_tokens(), config.dim);
        let detrended_first: Vec<f64> = (0..config.dim)
            .map(|c| ev.get(0, c) - pe.get(0, c))
            .collect();
        for t in 1..config.visual_tokens() {
            for c in 0..config.dim {
                assert!((ev.get(t, c) - pe.get(t, c) - detrended_first[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_prompt_encodes_to_zero_rows() {
        let weights = DecoderWeights::init(ModelConfig::default(), 7).unwrap();
        let et = encode_text(&[], &weights).unwrap();
        assert_eq!(et.rows(), 0);
        assert_eq!(et.cols(), weights.config.dim);
    }

    #[test]
    fn single_token_is_table_row_plus_position() {
        let weights = DecoderWeights::init(ModelConfig::default(), 7).unwrap();
        let et = encode_text(&[0], &weights).unwrap();
        let pe = positional_encoding(weights.config.visual_tokens(), 1, weights.config.dim);
        for c in 0..weights.config.dim {
            let expected = weights.embedding.get(0, c) + pe.get(0, c);
            assert!((et.get(0, c) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_token_is_rejected() {
        let weights = DecoderWeights::init(ModelConfig::default(), 7).unwrap();
        let bad = weights.config.vocab();
        assert!(matches!(
            encode_text(&[bad], &weights),
            Err(SteerError::UnknownToken { .. })
        ));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let weights = DecoderWeights::init(ModelConfig::default(), 7).unwrap();
        let image = SyntheticImage::background(Grid::new(4, 4), weights.config.classes);
        assert!(matches!(
            encode_image(&image, &weights),
            Err(SteerError::GridMismatch { .. })
        ));
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let a = DecoderWeights::init(ModelConfig::default(), 42).unwrap();
        let b = DecoderWeights::init(ModelConfig::default(), 42).unwrap();
        assert_eq!(a, b);
        let c = DecoderWeights::init(ModelConfig::default(), 43).unwrap();
        assert_ne!(a, c);
    }
}
