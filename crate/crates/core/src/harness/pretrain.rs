//! Pretraining the toy decoder on unambiguous single-object scenes.
//!
//! Plain batch SGD with cross-entropy over the answer classes. The scenes
//! carry no region information at all, so the frozen result genuinely
//! cannot resolve two-object ambiguity; that referring ability is exactly
//! what steering adds later without touching these weights.

use rayon::prelude::*;

use crate::error::{Result, SteerError};
use crate::harness::scenario::gen_single_object;
use crate::harness::answer_from_logits;
use crate::model::{
    forward_on_tape, DecoderWeights, ForwardOptions, ModelConfig, SyntheticImage, WeightIds,
};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch: 16,
            lr: 0.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean batch loss at every step.
    pub losses: Vec<f64>,
    /// Accuracy on fresh single-object scenes after training.
    pub val_accuracy: f64,
}

/// Cross-entropy of one example, with gradients into the weights.
fn example_loss_and_grads(
    weights: &DecoderWeights,
    image: &SyntheticImage,
    question: &[usize],
    truth: usize,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let ids = WeightIds::register(weights, &mut tape, true)?;
    let artifacts = forward_on_tape(
        &mut tape,
        &ids,
        &weights.config,
        image,
        question,
        &ForwardOptions::default(),
    )?;
    let probs = tape.row_softmax(artifacts.logits)?;
    let target = tape.slice(probs, 0, 1, truth, truth + 1)?;
    let log_p = tape.ln(target)?;
    let loss = tape.scale(log_p, -1.0)?;
    let grads = tape.backward(loss)?;
    let weight_grads = ids.all().into_iter().map(|id| grads.get(id)).collect();
    Ok((tape.value(loss).item(), weight_grads))
}

fn example_seed(base: u64, index: u64) -> u64 {
    // splitmix-style decorrelation of sequential indices
    let mut z = base ^ index.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Train fresh weights and report the loss curve plus validation accuracy.
/// The returned weights are frozen from here on: every evaluation path
/// treats them as immutable.
pub fn pretrain_toy(
    model: ModelConfig,
    config: &PretrainConfig,
) -> Result<(DecoderWeights, PretrainReport)> {
    if config.steps == 0 || config.batch == 0 {
        return Err(SteerError::invalid("pretrain", "steps and batch must be >= 1"));
    }
    let mut weights = DecoderWeights::init(model, config.seed)?;
    let grid = model.grid();
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let examples: Vec<_> = (0..config.batch)
            .map(|i| {
                let seed = example_seed(config.seed, (step * config.batch + i) as u64);
                gen_single_object(seed, grid, model.classes)
            })
            .collect::<Result<_>>()?;

        let per_example: Vec<(f64, Vec<Tensor>)> = examples
            .par_iter()
            .map(|ex| example_loss_and_grads(&weights, &ex.image, &ex.question, ex.truth))
            .collect::<Result<_>>()
            .map_err(|e| match e {
                // a cross-entropy hitting ln(0) is the divergence signature
                SteerError::NonFinite { .. } => SteerError::Diverged { step },
                other => other,
            })?;

        // fixed-order reduction keeps training bit-deterministic
        let mut batch_loss = 0.0;
        let mut grad_acc: Option<Vec<Tensor>> = None;
        for (loss, grads) in per_example {
            batch_loss += loss;
            grad_acc = Some(match grad_acc {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.add_assign(g)?;
                    }
                    acc
                }
            });
        }
        batch_loss /= config.batch as f64;
        if !batch_loss.is_finite() {
            return Err(SteerError::Diverged { step });
        }
        losses.push(batch_loss);

        let scale = config.lr / config.batch as f64;
        for (slot, grad) in weights.matrices_mut().into_iter().zip(grad_acc.unwrap()) {
            *slot = slot.sub(&grad.scale(scale))?;
        }
    }

    let val_accuracy = single_object_accuracy(&weights, config.seed ^ 0xACCE55, 200)?;
    let report = PretrainReport {
        initial_loss: losses.first().copied().unwrap_or(0.0),
        final_loss: losses.last().copied().unwrap_or(0.0),
        losses,
        val_accuracy,
    };
    Ok((weights, report))
}

/// Accuracy on `n` fresh single-object scenes, reading only the two
/// candidate class logits.
pub fn single_object_accuracy(weights: &DecoderWeights, seed: u64, n: usize) -> Result<f64> {
    let grid = weights.config.grid();
    let correct: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<bool> {
            let ex = gen_single_object(example_seed(seed, i as u64), grid, weights.config.classes)?;
            let (logits, _) = crate::model::forward_with_attention(
                weights,
                &ex.image,
                &ex.question,
                None,
                None,
            )?;
            let answer = answer_from_logits(&logits, ex.class_first, ex.class_second);
            Ok(answer == ex.truth)
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            grid_height: 4,
            grid_width: 4,
            classes: 3,
            dim: 8,
            layers: 1,
            heads: 2,
            mlp_hidden: 16,
        }
    }

    #[test]
    fn loss_decreases_during_training() {
        let config = PretrainConfig {
            steps: 40,
            batch: 8,
            lr: 0.5,
            seed: 3,
        };
        let (_, report) = pretrain_toy(tiny_model(), &config).unwrap();
        assert!(
            report.final_loss < report.initial_loss,
            "loss went {} -> {}",
            report.initial_loss,
            report.final_loss
        );
    }

    #[test]
    fn pretraining_is_deterministic() {
        let config = PretrainConfig {
            steps: 5,
            batch: 4,
            lr: 0.5,
            seed: 11,
        };
        let (w1, r1) = pretrain_toy(tiny_model(), &config).unwrap();
        let (w2, r2) = pretrain_toy(tiny_model(), &config).unwrap();
        assert_eq!(w1, w2);
        assert_eq!(r1.losses, r2.losses);
    }

    #[test]
    fn zero_steps_rejected() {
        let config = PretrainConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(pretrain_toy(tiny_model(), &config).is_err());
    }
}
