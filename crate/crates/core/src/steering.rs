//! Inference-time latent-variable steering.
//!
//! All the work happens at the 0-th decoding step: the context attention
//! over visual tokens is pooled from every captured map, an energy measures
//! how much of that attention misses the referring region, and plain
//! gradient descent on a zero-initialized latent variable (added to the
//! visual tokens) pushes the attention where the prompt points. An EMA
//! shadow of the latent smooths the updates and an early-stop rule caps
//! overfitting. Decoder weights are never touched.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SteerError};
use crate::geometry::{
    distance_transform_from_cells, rasterize_prompt, soft_weights, RegionMask, SoftWeights,
    VisualPrompt,
};
use crate::model::{
    forward_on_tape, AttentionRecord, DecoderWeights, ForwardOptions, SyntheticImage, WeightIds,
};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// The paper-scale step size; far too large for the toy decoder but kept
/// available for the divergence-handling path.
pub const PAPER_ALPHA: f64 = 400.0;

/// Step size tuned for the toy decoder during bring-up (see the descent
/// property in the acceptance suite).
pub const TOY_ALPHA: f64 = 25.0;

/// Which energy couples the attention to the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyKind {
    /// Squared deficit of in-region attention mass; for box/mask prompts.
    Hard,
    /// Squared deficit of Gaussian-distance-weighted mass; for
    /// scribble/point prompts.
    Soft,
}

/// Attention layers pooled into the context attention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSet {
    All,
    Indices(Vec<usize>),
}

impl LayerSet {
    fn resolve(&self, layer_count: usize) -> Result<Vec<usize>> {
        let layers = match self {
            LayerSet::All => (0..layer_count).collect::<Vec<_>>(),
            LayerSet::Indices(idx) => {
                for &i in idx {
                    if i >= layer_count {
                        return Err(SteerError::invalid(
                            "layer_set",
                            format!("layer {i} out of range ({layer_count} layers)"),
                        ));
                    }
                }
                idx.clone()
            }
        };
        if layers.is_empty() {
            return Err(SteerError::invalid("layer_set", "no layers selected"));
        }
        Ok(layers)
    }
}

/// Head pooling mode. Heads are averaged before any row pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadReduction {
    #[default]
    Mean,
}

/// Hyperparameters of one steering session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    /// Iteration cap T.
    pub iterations: usize,
    /// Gradient step size.
    pub alpha: f64,
    /// EMA smoothing factor; weights the current raw latent.
    pub beta: f64,
    /// Gaussian std for the soft energy.
    pub sigma: f64,
    /// Early-stop threshold on relative energy change.
    pub delta: f64,
    pub energy: EnergyKind,
    pub layers: LayerSet,
    pub head_reduction: HeadReduction,
    /// Use the raw latent (not the EMA shadow) in the forward pass; the
    /// shadow is still maintained and returned.
    pub raw_forward: bool,
    /// Experimental: pool only these rows of the text block (indices into
    /// the prompt) instead of all of them.
    pub text_rows: Option<Vec<usize>>,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            iterations: 4,
            alpha: TOY_ALPHA,
            beta: 0.5,
            sigma: 0.1,
            delta: 0.25,
            energy: EnergyKind::Hard,
            layers: LayerSet::All,
            head_reduction: HeadReduction::Mean,
            raw_forward: false,
            text_rows: None,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(SteerError::invalid("config", "alpha must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(SteerError::invalid("config", "beta must be in [0, 1]"));
        }
        if self.delta <= 0.0 {
            return Err(SteerError::invalid("config", "delta must be positive"));
        }
        if self.sigma <= 0.0 {
            return Err(SteerError::invalid("config", "sigma must be positive"));
        }
        Ok(())
    }
}

/// The learnable tensor added to the visual tokens, with its EMA shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVariable {
    pub value: Tensor,
    pub ema_shadow: Tensor,
    pub iteration: usize,
}

impl LatentVariable {
    /// Zero-initialized, matching the visual token block's shape.
    pub fn zeros(visual_tokens: usize, dim: usize) -> LatentVariable {
        LatentVariable {
            value: Tensor::zeros(visual_tokens, dim),
            ema_shadow: Tensor::zeros(visual_tokens, dim),
            iteration: 0,
        }
    }

    /// The copy downstream forwards consume: the EMA shadow.
    pub fn effective(&self) -> &Tensor {
        &self.ema_shadow
    }
}

/// One gradient-descent step on the raw latent value.
pub fn latent_step(latent: &mut LatentVariable, grad: &Tensor, alpha: f64) -> Result<()> {
    if !latent.value.same_shape(grad) {
        return Err(SteerError::ShapeMismatch {
            op: "latent_step",
            left_rows: latent.value.rows(),
            left_cols: latent.value.cols(),
            right_rows: grad.rows(),
            right_cols: grad.cols(),
        });
    }
    if !grad.all_finite() {
        return Err(SteerError::NonFinite { op: "latent_step" });
    }
    latent.value = latent.value.sub(&grad.scale(alpha))?;
    latent.iteration += 1;
    Ok(())
}

/// EMA update: `shadow' = beta * current + (1 - beta) * shadow`.
pub fn ema_update(shadow: &Tensor, current: &Tensor, beta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(SteerError::invalid("ema_update", "beta must be in [0, 1]"));
    }
    if !shadow.same_shape(current) {
        return Err(SteerError::ShapeMismatch {
            op: "ema_update",
            left_rows: shadow.rows(),
            left_cols: shadow.cols(),
            right_rows: current.rows(),
            right_cols: current.cols(),
        });
    }
    current.scale(beta).add(&shadow.scale(1.0 - beta))
}

/// Why a steering run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// All T iterations ran.
    Completed,
    /// The relative energy change crossed delta (or the initial energy was
    /// already zero).
    EarlyStopped,
    /// A forward or backward pass produced non-finite values; the last
    /// finite state is returned.
    Diverged,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Completed => "completed",
            StopReason::EarlyStopped => "early_stopped",
            StopReason::Diverged => "diverged",
        }
    }
}

/// One recorded optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub energy: f64,
    pub in_region_ratio: f64,
}

/// Per-iteration energies driving early stop and regression checks.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyTrace {
    rows: Vec<TraceRow>,
    reason: StopReason,
}

impl EnergyTrace {
    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn energies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.energy).collect()
    }

    pub fn reason(&self) -> StopReason {
        self.reason
    }

    pub fn first_energy(&self) -> f64 {
        self.rows.first().map(|r| r.energy).unwrap_or(0.0)
    }

    pub fn last_energy(&self) -> f64 {
        self.rows.last().map(|r| r.energy).unwrap_or(0.0)
    }

    /// Count of iterations whose energy rose above the previous one; a
    /// nonzero count is the logged signature of an oversized step.
    pub fn rebounds(&self) -> usize {
        self.rows
            .windows(2)
            .filter(|w| w[1].energy > w[0].energy)
            .count()
    }

    pub fn is_non_increasing(&self) -> bool {
        self.rebounds() == 0
    }

    /// CSV export: `iteration,energy,in_region_ratio,stopped` with the stop
    /// reason on the final row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,energy,in_region_ratio,stopped\n");
        for (i, row) in self.rows.iter().enumerate() {
            let stopped = if i + 1 == self.rows.len() {
                self.reason.as_str()
            } else {
                "-"
            };
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.iteration,
                crate::io::format_float(row.energy),
                crate::io::format_float(row.in_region_ratio),
                stopped
            ));
        }
        out
    }
}

/// Early-stop rule: halt once `|last - first| / first >= delta`. A zero
/// initial energy stops immediately (already at the minimum).
pub fn early_stop(trace: &[f64], delta: f64) -> bool {
    let Some(&first) = trace.first() else {
        return false;
    };
    if first == 0.0 {
        return true;
    }
    let Some(&last) = trace.last() else {
        return false;
    };
    (last - first).abs() / first >= delta
}

/// The pooled attention from the text prompt's global context to every
/// visual token.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextAttention {
    values: Vec<f64>,
    provenance: PoolProvenance,
}

/// Which maps went into a pooled context attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolProvenance {
    pub layers: Vec<usize>,
    pub heads: usize,
    /// Absolute sequence positions of the pooled text rows.
    pub text_rows: Vec<usize>,
}

impl ContextAttention {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provenance(&self) -> &PoolProvenance {
        &self.provenance
    }

    pub fn total_mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Share of the pooled attention mass inside the region.
    pub fn in_region_ratio(&self, region: &RegionMask) -> Result<f64> {
        let total = self.total_mass();
        if total <= 0.0 {
            return Err(SteerError::ZeroAttention);
        }
        let inside: f64 = region.indices().map(|i| self.values[i]).sum();
        Ok(inside / total)
    }
}

/// Pool a captured attention record into the context attention vector:
/// mean over heads, then mean over the selected text rows restricted to
/// visual columns, then mean over layers.
pub fn pool_context_attention(
    record: &AttentionRecord,
    text_rows: &[usize],
    layers: &LayerSet,
    _head_reduction: HeadReduction,
) -> Result<ContextAttention> {
    if text_rows.is_empty() {
        return Err(SteerError::invalid("pool", "no text rows selected"));
    }
    let v = record.visual_tokens;
    let seq = record.seq_len();
    for &r in text_rows {
        if r < v || r >= seq {
            return Err(SteerError::invalid(
                "pool",
                format!("row {r} is not a text row (text block is {v}..{seq})"),
            ));
        }
    }
    let selected = layers.resolve(record.layers.len())?;
    let mut pooled = vec![0.0; v];
    for &l in &selected {
        let heads = &record.layers[l];
        for col in 0..v {
            let mut acc = 0.0;
            for head in heads {
                for &r in text_rows {
                    acc += head.get(r, col);
                }
            }
            pooled[col] += acc / (heads.len() * text_rows.len()) as f64;
        }
    }
    for p in &mut pooled {
        *p /= selected.len() as f64;
    }
    Ok(ContextAttention {
        values: pooled,
        provenance: PoolProvenance {
            layers: selected,
            heads: record.layers.first().map(|h| h.len()).unwrap_or(0),
            text_rows: text_rows.to_vec(),
        },
    })
}

/// Hard mask energy `(1 - sum_in A / sum A)^2`; zero iff all mass is inside.
pub fn hard_energy(attention: &ContextAttention, region: &RegionMask) -> Result<f64> {
    let ratio = attention.in_region_ratio(region)?;
    Ok((1.0 - ratio) * (1.0 - ratio))
}

/// Soft mask energy `(1 - sum w_i A_i / sum A_i)^2` with the Gaussian
/// distance weights. The numerator runs over every visual token: restricting
/// it to the prompt cells would make the weight a constant there and
/// collapse soft onto hard, losing the distance shaping.
pub fn soft_energy(attention: &ContextAttention, weights: &SoftWeights) -> Result<f64> {
    let total = attention.total_mass();
    if total <= 0.0 {
        return Err(SteerError::ZeroAttention);
    }
    let weighted: f64 = attention
        .values
        .iter()
        .zip(weights.values())
        .map(|(&a, &w)| a * w)
        .sum();
    let deficit = 1.0 - weighted / total;
    Ok(deficit * deficit)
}

/// Final state of one steering session.
#[derive(Debug, Clone)]
pub struct SteeredState {
    pub latent: LatentVariable,
    pub trace: EnergyTrace,
    /// The context attention at the last recorded forward.
    pub context: ContextAttention,
}

impl SteeredState {
    /// The latent to add to visual tokens downstream: the EMA shadow.
    pub fn effective_latent(&self) -> &Tensor {
        self.latent.effective()
    }
}

/// The numerator weighting of the energy, as a constant column operand.
enum EnergyTarget {
    Hard(Vec<f64>),
    Soft(Vec<f64>),
}

impl EnergyTarget {
    fn column(&self) -> Tensor {
        match self {
            EnergyTarget::Hard(v) | EnergyTarget::Soft(v) => Tensor::column(v),
        }
    }
}

struct EnergyForward {
    energy: f64,
    ratio: f64,
    context: ContextAttention,
    latent_grad: Option<Tensor>,
}

/// One taped forward: decoder, pooled context attention, energy, and
/// (optionally) the gradient of the energy with respect to the latent.
#[allow(clippy::too_many_arguments)]
fn energy_forward(
    weights: &DecoderWeights,
    image: &SyntheticImage,
    text: &[usize],
    latent_input: &Tensor,
    want_grad: bool,
    target: &EnergyTarget,
    ratio_region: &RegionMask,
    config: &SteeringConfig,
) -> Result<EnergyForward> {
    let mut tape = Tape::new();
    let ids = WeightIds::register(weights, &mut tape, false)?;
    let artifacts = forward_on_tape(
        &mut tape,
        &ids,
        &weights.config,
        image,
        text,
        &ForwardOptions {
            latent: Some(latent_input),
            latent_grad: want_grad,
            score_bias: None,
        },
    )?;
    let (a_ct, provenance) = pool_on_tape(&mut tape, &artifacts.attention, &artifacts, config)?;

    // energy = (1 - (a . target) / (a . 1))^2
    let v = artifacts.visual_tokens;
    let target_col = tape.constant(target.column())?;
    let ones = tape.constant(Tensor::filled(v, 1, 1.0))?;
    let num = tape.matmul(a_ct, target_col)?;
    let den = tape.matmul(a_ct, ones)?;
    if tape.value(den).item() <= 0.0 {
        return Err(SteerError::ZeroAttention);
    }
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -1.0)?;
    let one = tape.scalar(1.0)?;
    let deficit = tape.add(one, neg)?;
    let energy_root = tape.square(deficit)?;

    let context = ContextAttention {
        values: tape.value(a_ct).data().to_vec(),
        provenance,
    };
    let ratio_val = context.in_region_ratio(ratio_region)?;
    let energy = tape.value(energy_root).item();

    let latent_grad = if want_grad {
        let grads = tape.backward(energy_root)?;
        let latent_id = artifacts.latent.expect("latent was supplied");
        Some(grads.get(latent_id))
    } else {
        None
    };

    Ok(EnergyForward {
        energy,
        ratio: ratio_val,
        context,
        latent_grad,
    })
}

/// The differentiable mirror of [`pool_context_attention`], recorded on the
/// session tape so the energy gradient reaches the latent.
fn pool_on_tape(
    tape: &mut Tape,
    attention: &[Vec<TensorId>],
    artifacts: &crate::model::ForwardArtifacts,
    config: &SteeringConfig,
) -> Result<(TensorId, PoolProvenance)> {
    let v = artifacts.visual_tokens;
    let seq = artifacts.seq_len();
    let text_rows = resolve_text_rows(config, v, artifacts.text_len)?;
    let layer_sel = config.layers.resolve(attention.len())?;

    let mut selector = Tensor::zeros(1, seq);
    for &r in &text_rows {
        selector.set(0, r, 1.0 / text_rows.len() as f64);
    }
    let selector = tape.constant(selector)?;

    let mut pooled: Option<TensorId> = None;
    for &l in &layer_sel {
        let heads = &attention[l];
        let mut head_sum: Option<TensorId> = None;
        for &h in heads {
            head_sum = Some(match head_sum {
                None => h,
                Some(prev) => tape.add(prev, h)?,
            });
        }
        let head_mean =
            tape.scale(head_sum.expect("at least one head"), 1.0 / heads.len() as f64)?;
        let row = tape.matmul(selector, head_mean)?; // 1 x seq
        let visual = tape.slice(row, 0, 1, 0, v)?; // 1 x V
        pooled = Some(match pooled {
            None => visual,
            Some(prev) => tape.add(prev, visual)?,
        });
    }
    let a_ct = tape.scale(
        pooled.expect("at least one layer"),
        1.0 / layer_sel.len() as f64,
    )?;
    Ok((
        a_ct,
        PoolProvenance {
            layers: layer_sel,
            heads: attention.first().map(|h| h.len()).unwrap_or(0),
            text_rows,
        },
    ))
}

fn resolve_text_rows(
    config: &SteeringConfig,
    visual_tokens: usize,
    text_len: usize,
) -> Result<Vec<usize>> {
    if text_len == 0 {
        return Err(SteerError::invalid("steer", "empty text prompt"));
    }
    match &config.text_rows {
        None => Ok((visual_tokens..visual_tokens + text_len).collect()),
        Some(rows) => {
            if rows.is_empty() {
                return Err(SteerError::invalid("steer", "text_rows selection is empty"));
            }
            rows.iter()
                .map(|&r| {
                    if r >= text_len {
                        Err(SteerError::invalid(
                            "steer",
                            format!("text row {r} out of range (prompt length {text_len})"),
                        ))
                    } else {
                        Ok(visual_tokens + r)
                    }
                })
                .collect()
        }
    }
}

/// Build the energy operand and the region used for ratio reporting.
fn build_target(
    prompt: &VisualPrompt,
    config: &SteeringConfig,
    grid: crate::geometry::Grid,
) -> Result<(EnergyTarget, RegionMask)> {
    match config.energy {
        EnergyKind::Hard => {
            if !prompt.is_region() {
                return Err(SteerError::invalid(
                    "steer",
                    format!(
                        "hard energy needs a box or mask prompt, got {}; supply an explicit mask",
                        prompt.kind()
                    ),
                ));
            }
            let region = rasterize_prompt(prompt, grid)?;
            Ok((EnergyTarget::Hard(region.indicator()), region))
        }
        EnergyKind::Soft => {
            if prompt.is_region() {
                return Err(SteerError::invalid(
                    "steer",
                    format!(
                        "soft energy needs a scribble or point prompt, got {}",
                        prompt.kind()
                    ),
                ));
            }
            let cells = rasterize_prompt(prompt, grid)?;
            let distances = distance_transform_from_cells(&cells);
            let weights = soft_weights(&distances, config.sigma)?;
            Ok((EnergyTarget::Soft(weights.values().to_vec()), cells))
        }
    }
}

/// Evaluate the steering energy (and optionally its gradient) at an
/// arbitrary latent value. This is the single forward/backward the steering
/// loop iterates; exposing it lets finite-difference checks probe the exact
/// computation the optimizer uses.
pub fn energy_at(
    weights: &DecoderWeights,
    image: &SyntheticImage,
    prompt_text: &[usize],
    visual_prompt: &VisualPrompt,
    config: &SteeringConfig,
    latent_value: &Tensor,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    config.validate()?;
    let (target, ratio_region) = build_target(visual_prompt, config, weights.config.grid())?;
    let step = energy_forward(
        weights,
        image,
        prompt_text,
        latent_value,
        want_grad,
        &target,
        &ratio_region,
        config,
    )?;
    Ok((step.energy, step.latent_grad))
}

/// Run the full steering loop at the 0-th inference step.
///
/// Per iteration: forward with attention capture, pool the context
/// attention, evaluate the energy, backpropagate to the latent, take a
/// gradient step, fold it into the EMA shadow, and check the early-stop
/// rule. Returns the EMA shadow as the final latent. A non-finite forward
/// or gradient ends the run with [`StopReason::Diverged`] and the last
/// finite state intact.
pub fn steer(
    weights: &DecoderWeights,
    image: &SyntheticImage,
    prompt_text: &[usize],
    visual_prompt: &VisualPrompt,
    config: &SteeringConfig,
) -> Result<SteeredState> {
    config.validate()?;
    let grid = weights.config.grid();
    let (target, ratio_region) = build_target(visual_prompt, config, grid)?;
    let v = weights.config.visual_tokens();
    let d = weights.config.dim;

    let mut latent = LatentVariable::zeros(v, d);
    let mut rows: Vec<TraceRow> = Vec::with_capacity(config.iterations + 1);
    let mut reason = StopReason::Completed;
    let mut context: Option<ContextAttention> = None;

    for t in 0..=config.iterations {
        let forward_latent = if config.raw_forward {
            latent.value.clone()
        } else {
            latent.ema_shadow.clone()
        };
        let want_grad = t < config.iterations;
        let step = match energy_forward(
            weights,
            image,
            prompt_text,
            &forward_latent,
            want_grad,
            &target,
            &ratio_region,
            config,
        ) {
            Ok(step) => step,
            Err(SteerError::NonFinite { .. }) if t > 0 => {
                reason = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        rows.push(TraceRow {
            iteration: t,
            energy: step.energy,
            in_region_ratio: step.ratio,
        });
        context = Some(step.context);

        let energies: Vec<f64> = rows.iter().map(|r| r.energy).collect();
        if early_stop(&energies, config.delta) {
            reason = StopReason::EarlyStopped;
            break;
        }
        if t == config.iterations {
            break;
        }

        let grad = step.latent_grad.expect("gradient requested");
        match latent_step(&mut latent, &grad, config.alpha) {
            Ok(()) => {}
            Err(SteerError::NonFinite { .. }) => {
                reason = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        }
        latent.ema_shadow = ema_update(&latent.ema_shadow, &latent.value, config.beta)?;
    }

    Ok(SteeredState {
        latent,
        trace: EnergyTrace { rows, reason },
        context: context.expect("at least one forward ran"),
    })
}
