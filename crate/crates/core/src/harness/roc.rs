//! Referring Object Classification at desk scale.
//!
//! Evaluates the frozen decoder on pinned two-object scenarios under each
//! method: unsteered, hard/soft steering, the edit-attention baseline, and
//! the image-manipulation baselines (highlight color, background blur).
//! Scenarios run in parallel; aggregation order is fixed by scenario index
//! so reports are byte-stable.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::LabConfig;
use crate::edit::{build_bias_rows, forward_with_bias, SeqLayout};
use crate::error::{Result, SteerError};
use crate::geometry::VisualPrompt;
use crate::harness::scenario::{gen_scenario, Scenario};
use crate::harness::{answer_from_logits, apply_blur_baseline, apply_color_baseline};
use crate::io::format_float;
use crate::model::{forward_with_attention, DecoderWeights};
use crate::relevancy::{relevancy_map, relevancy_score};
use crate::steering::{
    pool_context_attention, steer, EnergyKind, HeadReduction, LayerSet, SteeringConfig,
};

/// Evaluation methods, named as they appear in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    None,
    SteerHard,
    SteerSoft,
    EditAtt,
    Color,
    Blur,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::None,
        Method::SteerHard,
        Method::SteerSoft,
        Method::EditAtt,
        Method::Color,
        Method::Blur,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::None => "none",
            Method::SteerHard => "steer-hard",
            Method::SteerSoft => "steer-soft",
            Method::EditAtt => "edit-att",
            Method::Color => "color",
            Method::Blur => "blur",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.trim() {
            "none" => Ok(Method::None),
            "steer-hard" => Ok(Method::SteerHard),
            "steer-soft" => Ok(Method::SteerSoft),
            "edit-att" => Ok(Method::EditAtt),
            "color" => Ok(Method::Color),
            "blur" => Ok(Method::Blur),
            other => Err(SteerError::invalid(
                "method",
                format!("unknown method {other:?}"),
            )),
        }
    }
}

/// One method's result on one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub seed: u64,
    pub method: String,
    pub predicted: usize,
    pub truth: usize,
    pub correct: bool,
    /// In-region context-attention mass of the unsteered forward.
    pub mass_before: f64,
    /// In-region context-attention mass under the method.
    pub mass_after: f64,
    pub relevancy: f64,
    pub energy_first: Option<f64>,
    pub energy_last: Option<f64>,
    pub stop_reason: Option<String>,
    pub trace_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub accuracy: f64,
    pub mean_mass_before: f64,
    pub mean_mass_after: f64,
    pub mean_relevancy: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct RocReport {
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<ScenarioOutcome>,
}

impl RocReport {
    /// Per-method summary CSV.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("method,accuracy,mean_mass_before,mean_mass_after,mean_relevancy,n\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.method,
                format_float(s.accuracy),
                format_float(s.mean_mass_before),
                format_float(s.mean_mass_after),
                format_float(s.mean_relevancy),
                s.n
            ));
        }
        out
    }

    /// One JSON object per scenario record.
    pub fn records_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method.as_str())
    }

    pub fn records_for(&self, method: Method) -> impl Iterator<Item = &ScenarioOutcome> {
        self.records
            .iter()
            .filter(move |r| r.method == method.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct RocOptions {
    pub methods: Vec<Method>,
    pub n_scenarios: usize,
    /// Scenario seeds are `seed_base .. seed_base + n_scenarios`.
    pub seed_base: u64,
    pub lab: LabConfig,
}

impl Default for RocOptions {
    fn default() -> Self {
        RocOptions {
            methods: Method::ALL.to_vec(),
            n_scenarios: 200,
            seed_base: 1000,
            lab: LabConfig::default(),
        }
    }
}

/// The steering prompt for hard energy: the scenario prompt when it already
/// carries a region, otherwise the ground-truth mask stands in as the
/// explicit mask.
fn hard_prompt(scenario: &Scenario) -> VisualPrompt {
    if scenario.prompt.is_region() {
        scenario.prompt.clone()
    } else {
        let grid = scenario.target_region.grid();
        VisualPrompt::Mask {
            height: grid.height,
            width: grid.width,
            bits: scenario.target_region.bits().to_vec(),
        }
    }
}

/// The steering prompt for soft energy: the scenario prompt when it is a
/// scribble/point, otherwise a point at the target's center cell.
fn soft_prompt(scenario: &Scenario) -> VisualPrompt {
    if !scenario.prompt.is_region() {
        scenario.prompt.clone()
    } else {
        let grid = scenario.target_region.grid();
        let rect = scenario.target_rect;
        let (x, y) = grid.cell_center(
            rect.row + rect.height / 2,
            rect.col + rect.width / 2,
        );
        VisualPrompt::Point { x, y }
    }
}

fn steering_for(lab: &LabConfig, energy: EnergyKind) -> Result<SteeringConfig> {
    let mut config = lab.steering()?;
    config.energy = energy;
    Ok(config)
}

struct BaseForward {
    logits: crate::tensor::Tensor,
    mass_before: f64,
}

fn base_forward(weights: &DecoderWeights, scenario: &Scenario) -> Result<BaseForward> {
    let (logits, record) =
        forward_with_attention(weights, &scenario.image, &scenario.question, None, None)?;
    let rows: Vec<usize> = record.text_rows().collect();
    let pooled = pool_context_attention(&record, &rows, &LayerSet::All, HeadReduction::Mean)?;
    Ok(BaseForward {
        logits,
        mass_before: pooled.in_region_ratio(&scenario.target_region)?,
    })
}

fn evaluate_method(
    weights: &DecoderWeights,
    scenario: &Scenario,
    base: &BaseForward,
    method: Method,
    lab: &LabConfig,
) -> Result<ScenarioOutcome> {
    let region = &scenario.target_region;
    let question = &scenario.question;
    let mut energy_first = None;
    let mut energy_last = None;
    let mut stop_reason = None;
    let mut trace_len = 0;

    let (predicted, mass_after, relevancy) = match method {
        Method::None => {
            let map = relevancy_map(weights, &scenario.image, question, None, None)?;
            (
                answer_from_logits(&base.logits, scenario.class_first, scenario.class_second),
                base.mass_before,
                relevancy_score(&map, region),
            )
        }
        Method::SteerHard | Method::SteerSoft => {
            let (config, prompt) = if method == Method::SteerHard {
                (steering_for(lab, EnergyKind::Hard)?, hard_prompt(scenario))
            } else {
                (steering_for(lab, EnergyKind::Soft)?, soft_prompt(scenario))
            };
            let state = steer(weights, &scenario.image, question, &prompt, &config)?;
            energy_first = Some(state.trace.first_energy());
            energy_last = Some(state.trace.last_energy());
            stop_reason = Some(state.trace.reason().as_str().to_string());
            trace_len = state.trace.rows().len();
            let latent = state.effective_latent();
            let (logits, _) =
                forward_with_attention(weights, &scenario.image, question, Some(latent), None)?;
            let map = relevancy_map(weights, &scenario.image, question, Some(latent), None)?;
            (
                answer_from_logits(&logits, scenario.class_first, scenario.class_second),
                state.context.in_region_ratio(region)?,
                relevancy_score(&map, region),
            )
        }
        Method::EditAtt => {
            let layout = SeqLayout {
                visual_tokens: weights.config.visual_tokens(),
                text_len: question.len(),
            };
            let bias = build_bias_rows(region, lab.eta, layout, lab.bias_all_rows)?;
            let (logits, record) = forward_with_bias(weights, &scenario.image, question, &bias)?;
            let rows: Vec<usize> = record.text_rows().collect();
            let pooled =
                pool_context_attention(&record, &rows, &LayerSet::All, HeadReduction::Mean)?;
            let map = relevancy_map(
                weights,
                &scenario.image,
                question,
                None,
                if lab.eta == 0.0 { None } else { Some(bias.matrix()) },
            )?;
            (
                answer_from_logits(&logits, scenario.class_first, scenario.class_second),
                pooled.in_region_ratio(region)?,
                relevancy_score(&map, region),
            )
        }
        Method::Color | Method::Blur => {
            let modified = if method == Method::Color {
                apply_color_baseline(&scenario.image, region)
            } else {
                apply_blur_baseline(&scenario.image, region)
            };
            let (logits, record) =
                forward_with_attention(weights, &modified, question, None, None)?;
            let rows: Vec<usize> = record.text_rows().collect();
            let pooled =
                pool_context_attention(&record, &rows, &LayerSet::All, HeadReduction::Mean)?;
            let map = relevancy_map(weights, &modified, question, None, None)?;
            (
                answer_from_logits(&logits, scenario.class_first, scenario.class_second),
                pooled.in_region_ratio(region)?,
                relevancy_score(&map, region),
            )
        }
    };

    Ok(ScenarioOutcome {
        seed: scenario.seed,
        method: method.as_str().to_string(),
        predicted,
        truth: scenario.truth,
        correct: predicted == scenario.truth,
        mass_before: base.mass_before,
        mass_after,
        relevancy,
        energy_first,
        energy_last,
        stop_reason,
        trace_len,
    })
}

/// Evaluate every requested method on the pinned scenario set.
pub fn run_roc(weights: &DecoderWeights, options: &RocOptions) -> Result<RocReport> {
    if options.methods.is_empty() {
        return Err(SteerError::invalid("roc", "no methods requested"));
    }
    if options.n_scenarios == 0 {
        return Err(SteerError::invalid("roc", "n_scenarios must be >= 1"));
    }
    let grid = weights.config.grid();
    let classes = weights.config.classes;

    let per_scenario: Vec<Vec<ScenarioOutcome>> = (0..options.n_scenarios)
        .into_par_iter()
        .map(|i| -> Result<Vec<ScenarioOutcome>> {
            let seed = options.seed_base + i as u64;
            let scenario = gen_scenario(seed, grid, classes, options.lab.prompt)?;
            let base = base_forward(weights, &scenario)?;
            options
                .methods
                .iter()
                .map(|&m| evaluate_method(weights, &scenario, &base, m, &options.lab))
                .collect()
        })
        .collect::<Result<_>>()?;

    let records: Vec<ScenarioOutcome> = per_scenario.into_iter().flatten().collect();
    let summaries = options
        .methods
        .iter()
        .map(|&m| {
            let rows: Vec<&ScenarioOutcome> = records
                .iter()
                .filter(|r| r.method == m.as_str())
                .collect();
            let n = rows.len();
            let mean = |f: &dyn Fn(&ScenarioOutcome) -> f64| -> f64 {
                rows.iter().map(|r| f(r)).sum::<f64>() / n as f64
            };
            MethodSummary {
                method: m.as_str().to_string(),
                accuracy: rows.iter().filter(|r| r.correct).count() as f64 / n as f64,
                mean_mass_before: mean(&|r| r.mass_before),
                mean_mass_after: mean(&|r| r.mass_after),
                mean_relevancy: mean(&|r| r.relevancy),
                n,
            }
        })
        .collect();

    Ok(RocReport { summaries, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_weights() -> DecoderWeights {
        let config = ModelConfig {
            grid_height: 4,
            grid_width: 4,
            classes: 3,
            dim: 8,
            layers: 1,
            heads: 2,
            mlp_hidden: 16,
        };
        DecoderWeights::init(config, 17).unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("nope").is_err());
    }

    #[test]
    fn report_structure_is_consistent() {
        let weights = tiny_weights();
        let options = RocOptions {
            methods: vec![Method::None, Method::EditAtt],
            n_scenarios: 4,
            seed_base: 50,
            lab: LabConfig::default(),
        };
        let report = run_roc(&weights, &options).unwrap();
        assert_eq!(report.records.len(), 8);
        assert_eq!(report.summaries.len(), 2);
        for s in &report.summaries {
            assert!(s.accuracy >= 0.0 && s.accuracy <= 1.0);
            assert_eq!(s.n, 4);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("method,accuracy"));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(report.records_jsonl().lines().count(), 8);
    }

    #[test]
    fn roc_runs_are_byte_identical() {
        let weights = tiny_weights();
        let options = RocOptions {
            methods: vec![Method::None, Method::SteerHard],
            n_scenarios: 3,
            seed_base: 9,
            lab: LabConfig {
                alpha: 5.0,
                t: 2,
                ..Default::default()
            },
        };
        let a = run_roc(&weights, &options).unwrap();
        let b = run_roc(&weights, &options).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.records_jsonl(), b.records_jsonl());
    }

    #[test]
    fn steering_runs_for_every_prompt_kind() {
        let weights = tiny_weights();
        for prompt in [
            crate::config::PromptKind::Box,
            crate::config::PromptKind::Mask,
            crate::config::PromptKind::Scribble,
            crate::config::PromptKind::Point,
        ] {
            let options = RocOptions {
                methods: vec![Method::SteerHard, Method::SteerSoft],
                n_scenarios: 2,
                seed_base: 77,
                lab: LabConfig {
                    prompt,
                    t: 1,
                    alpha: 2.0,
                    ..Default::default()
                },
            };
            let report = run_roc(&weights, &options).unwrap();
            assert_eq!(report.records.len(), 4, "prompt {prompt:?}");
        }
    }
}
