//! Scratch bring-up probe: gradient checks, pretrain tuning, alpha sweep.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use steerlab::config::{LabConfig, PromptKind};
use steerlab::gradcheck::{relative_error, top_gradient_coords};
use steerlab::harness::{
    gen_scenario, pretrain_toy, relevancy_over_iterations, run_roc, Method, PretrainConfig,
    RocOptions, Scenario,
};
use steerlab::geometry::VisualPrompt;
use steerlab::model::{DecoderWeights, ModelConfig};
use steerlab::steering::{energy_at, steer, EnergyKind, SteeringConfig};
use steerlab::Tensor;

fn scenario_prompt_for_energy(scenario: &Scenario, energy: EnergyKind) -> VisualPrompt {
    let grid = scenario.target_region.grid();
    match energy {
        EnergyKind::Hard => {
            if scenario.prompt.is_region() {
                scenario.prompt.clone()
            } else {
                VisualPrompt::Mask {
                    height: grid.height,
                    width: grid.width,
                    bits: scenario.target_region.bits().to_vec(),
                }
            }
        }
        EnergyKind::Soft => {
            let rect = scenario.target_rect;
            let (x, y) = grid.cell_center(rect.row + rect.height / 2, rect.col + rect.width / 2);
            VisualPrompt::Point { x, y }
        }
    }
}

fn gradcheck_probe(weights_pool: &[DecoderWeights]) {
    println!("=== gradcheck through the default decoder ===");
    let config = ModelConfig::default();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let eps = 1e-6;
    for seed in 0..20u64 {
        let weights = &weights_pool[(seed % weights_pool.len() as u64) as usize];
        let scenario = gen_scenario(seed, config.grid(), config.classes, PromptKind::Box).unwrap();
        let energy = if seed % 2 == 0 {
            EnergyKind::Hard
        } else {
            EnergyKind::Soft
        };
        let prompt = scenario_prompt_for_energy(&scenario, energy);
        let steering = SteeringConfig {
            energy,
            ..Default::default()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = config.visual_tokens();
        let d = config.dim;
        let mut p0 = Tensor::new(
            v,
            d,
            (0..v * d).map(|_| rng.random_range(-0.05..0.05)).collect(),
        )
        .unwrap();

        let (e0, grad) = energy_at(
            weights,
            &scenario.image,
            &scenario.question,
            &prompt,
            &steering,
            &p0,
            true,
        )
        .unwrap();
        let grad = grad.unwrap();
        let coords = top_gradient_coords(&grad, 6);
        for &i in &coords {
            let orig = p0.data()[i];
            p0.data_mut()[i] = orig + eps;
            let (ep, _) = energy_at(
                weights,
                &scenario.image,
                &scenario.question,
                &prompt,
                &steering,
                &p0,
                false,
            )
            .unwrap();
            p0.data_mut()[i] = orig - eps;
            let (em, _) = energy_at(
                weights,
                &scenario.image,
                &scenario.question,
                &prompt,
                &steering,
                &p0,
                false,
            )
            .unwrap();
            p0.data_mut()[i] = orig;
            let cd = (ep - em) / (2.0 * eps);
            let err = relative_error(grad.data()[i], cd);
            if err > worst {
                worst = err;
            }
        }
        if seed == 0 {
            println!("  e0 sample: {e0:.6}, |grad|_inf = {:.3e}", grad.max_abs());
        }
    }
    println!(
        "  worst rel err over 20 configs x 6 coords: {worst:.3e}  ({:?})",
        start.elapsed()
    );
}

fn pretrain_probe() -> DecoderWeights {
    println!("=== pretrain (pinned defaults) ===");
    let model = ModelConfig::default();
    let config = PretrainConfig::default();
    let start = Instant::now();
    let (weights, report) = pretrain_toy(model, &config).unwrap();
    println!(
        "  steps={} batch={} lr={}: loss {:.4} -> {:.4}, val acc {:.3}  ({:?})",
        config.steps,
        config.batch,
        config.lr,
        report.initial_loss,
        report.final_loss,
        report.val_accuracy,
        start.elapsed()
    );
    weights
}

fn ambiguity_probe(weights: &DecoderWeights) {
    println!("=== two-object ambiguity (unsteered) ===");
    let options = RocOptions {
        methods: vec![Method::None],
        n_scenarios: 200,
        seed_base: 1000,
        lab: LabConfig::default(),
    };
    let start = Instant::now();
    let report = run_roc(weights, &options).unwrap();
    let s = &report.summaries[0];
    println!(
        "  unsteered acc {:.3}, mean in-region mass {:.4}  ({:?})",
        s.accuracy,
        s.mean_mass_before,
        start.elapsed()
    );
}

fn alpha_probe(weights: &DecoderWeights) {
    let model = weights.config;
    for es_on in [false, true] {
        println!(
            "=== alpha sweep (hard energy, T=4, beta=0.5, ES {}) on pinned 200 ===",
            if es_on { "on (0.25)" } else { "off" }
        );
        for alpha in [0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 25.0, 400.0] {
            let mut non_increasing = 0usize;
            let mut flips_to_truth = 0usize;
            let mut mass_up = 0usize;
            let mut early_stops = 0usize;
            let n = 200;
            for i in 0..n {
                let scenario =
                    gen_scenario(1000 + i, model.grid(), model.classes, PromptKind::Box).unwrap();
                let config = SteeringConfig {
                    iterations: 4,
                    alpha,
                    beta: 0.5,
                    delta: if es_on { 0.25 } else { 1e18 },
                    ..Default::default()
                };
                let state = steer(
                    weights,
                    &scenario.image,
                    &scenario.question,
                    &scenario.prompt,
                    &config,
                )
                .unwrap();
                if state.trace.is_non_increasing() {
                    non_increasing += 1;
                }
                if state.trace.reason() == steerlab::steering::StopReason::EarlyStopped {
                    early_stops += 1;
                }
                let rows = state.trace.rows();
                if rows.last().unwrap().in_region_ratio > rows[0].in_region_ratio {
                    mass_up += 1;
                }
                let (logits, _) = steerlab::model::forward_with_attention(
                    weights,
                    &scenario.image,
                    &scenario.question,
                    Some(state.effective_latent()),
                    None,
                )
                .unwrap();
                let answer = steerlab::harness::answer_from_logits(
                    &logits,
                    scenario.class_first,
                    scenario.class_second,
                );
                if answer == scenario.truth {
                    flips_to_truth += 1;
                }
            }
            println!(
                "  alpha={alpha:>6}: non-incr {non_increasing}/{n}, mass-up {mass_up}/{n}, ES {early_stops}/{n}, acc {:.3}",
                flips_to_truth as f64 / n as f64
            );
        }
    }
}

fn relevancy_probe(weights: &DecoderWeights) {
    println!("=== relevancy vs T (pinned 200) across alphas ===");
    for alpha in [5.0, 10.0, 15.0, 20.0, 25.0, 40.0] {
        let lab = LabConfig {
            alpha,
            ..Default::default()
        };
        let start = Instant::now();
        let means = relevancy_over_iterations(weights, &lab, 1000, 200, &[0, 1, 2, 3]).unwrap();
        let monotone = means.windows(2).all(|w| w[1] >= w[0]);
        println!(
            "  alpha={alpha:>4}: means {:?} monotone={monotone}  ({:?})",
            means
                .iter()
                .map(|m| format!("{m:.4}"))
                .collect::<Vec<_>>(),
            start.elapsed()
        );
    }
}

fn full_roc_probe(weights: &DecoderWeights) {
    println!("=== full ROC, six methods, pinned 200 ===");
    let start = Instant::now();
    let options = RocOptions::default();
    let report = run_roc(weights, &options).unwrap();
    print!("{}", report.to_csv());
    println!("  ({:?})", start.elapsed());

    println!("=== edit-att saturation: eta=10 vs eta=1e4 ===");
    for eta in [10.0, 1e4] {
        let options = RocOptions {
            methods: vec![Method::EditAtt],
            lab: LabConfig {
                eta,
                ..Default::default()
            },
            ..Default::default()
        };
        let report = run_roc(weights, &options).unwrap();
        let s = &report.summaries[0];
        println!(
            "  eta={eta}: acc {:.3}, mean mass after {:.4}",
            s.accuracy, s.mean_mass_after
        );
    }
}

fn early_stop_probe(weights: &DecoderWeights) {
    println!("=== early-stop case hunt (alpha=400, ES 0.25) ===");
    let model = weights.config;
    for seed in 1000..1010u64 {
        let scenario = gen_scenario(seed, model.grid(), model.classes, PromptKind::Box).unwrap();
        let config = SteeringConfig {
            iterations: 4,
            alpha: 400.0,
            ..Default::default()
        };
        let state = steer(
            weights,
            &scenario.image,
            &scenario.question,
            &scenario.prompt,
            &config,
        )
        .unwrap();
        println!(
            "  seed {seed}: len {} reason {:?} energies {:?}",
            state.trace.rows().len(),
            state.trace.reason(),
            state
                .trace
                .energies()
                .iter()
                .map(|e| format!("{e:.4}"))
                .collect::<Vec<_>>()
        );
    }
}

fn golden_probe(weights: &DecoderWeights) {
    use steerlab::model::{encode_image, forward_with_attention};
    println!("=== golden values ===");
    let model = weights.config;
    // encode_image checksum on init weights (unit-test scale)
    let init = DecoderWeights::init(ModelConfig::default(), 42).unwrap();
    let scenario = gen_scenario(42, model.grid(), model.classes, PromptKind::Box).unwrap();
    let ev = encode_image(&scenario.image, &init).unwrap();
    println!("  encode_image sha256 (init w seed42, scenario 42): {}", sha256_hex(&ev.to_le_bytes()));

    // unsteered relevancy map golden on pretrained weights, scenario 1000
    let s1000 = gen_scenario(1000, model.grid(), model.classes, PromptKind::Box).unwrap();
    let map = steerlab::relevancy::relevancy_map(weights, &s1000.image, &s1000.question, None, None)
        .unwrap();
    let csv = map.to_csv();
    println!("  relevancy csv sha256 (scenario 1000): {}", sha256_hex(csv.as_bytes()));
    println!(
        "  relevancy first row: {:?}",
        &map.values()[..4]
    );
    let pgm = map.to_pgm().unwrap();
    println!("  relevancy pgm sha256: {}", sha256_hex(pgm.as_bytes()));

    // steer trace golden on scenario 1000 with pinned defaults
    let state = steer(
        weights,
        &s1000.image,
        &s1000.question,
        &s1000.prompt,
        &SteeringConfig::default(),
    )
    .unwrap();
    println!(
        "  steer scenario 1000: len {}, reason {:?}, energies {:?}, ratios {:?}",
        state.trace.rows().len(),
        state.trace.reason(),
        state.trace.energies(),
        state
            .trace
            .rows()
            .iter()
            .map(|r| r.in_region_ratio)
            .collect::<Vec<_>>()
    );

    // pretrained weights file checksum
    let bytes = weights.to_bytes();
    println!("  pretrained weights sha256: {}", sha256_hex(&bytes));

    // base forward logits on scenario 1000
    let (logits, _) = forward_with_attention(weights, &s1000.image, &s1000.question, None, None).unwrap();
    println!("  base logits scenario 1000: {:?}", logits.data());
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("all");

    if which == "grad" || which == "all" {
        let config = ModelConfig::default();
        let pool: Vec<DecoderWeights> = (0..4u64)
            .map(|s| DecoderWeights::init(config, 1000 + s).unwrap())
            .collect();
        gradcheck_probe(&pool);
    }
    if which == "train" || which == "all" {
        let weights = pretrain_probe();
        ambiguity_probe(&weights);
        alpha_probe(&weights);
        relevancy_probe(&weights);
        full_roc_probe(&weights);
        early_stop_probe(&weights);
        golden_probe(&weights);
    }
    if which == "golden" {
        let weights = pretrain_probe();
        relevancy_probe(&weights);
        full_roc_probe(&weights);
        early_stop_probe(&weights);
        golden_probe(&weights);
    }
}
