//! Built-in verification suites behind the `verify` subcommand: fast,
//! deterministic checks that the core machinery holds — analytic
//! gradients against finite differences, adapter transparency at
//! attachment, parameter parity across the three wirings, the ranking
//! metric against its pair-counting definition, and golden-fixture
//! replay.
//!
//! Every suite reports a machine-readable line; any failure is a build
//! you should not trust. The `MMFX_VERIFY_FAULT` environment variable
//! names a suite to sabotage deliberately — a negative control proving
//! the harness can actually fail.

use crate::fusion::{build_model, FusionVariant, ModelConfig};
use crate::lora::{wrap_model, LoraConfig};
use crate::nn::ForwardCtx;
use crate::rng::Rng;
use crate::tensor::{grad_check_many, Tensor};
use crate::tolerances::{EXACT_F64, GRAD_REL, GRAD_STEP, LORA_INIT};
use crate::train::roc_auc;

/// Outcome of one suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error where the suite measures one.
    pub worst: Option<f64>,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        let verdict = if self.passed { "ok" } else { "FAIL" };
        match self.worst {
            Some(w) => format!("verify {}: {verdict} (worst {w:.3e}) — {}", self.name, self.detail),
            None => format!("verify {}: {verdict} — {}", self.name, self.detail),
        }
    }
}

pub const SUITE_NAMES: [&str; 5] =
    ["grad_check", "lora_transparency", "parameter_parity", "auc_oracle", "golden_replay"];

fn tiny_cfg(variant: FusionVariant) -> ModelConfig {
    ModelConfig {
        d_model: 4,
        n_heads: 2,
        n_levels: 2,
        hidden_dim: 8,
        head_hidden: 4,
        vocab_size: 16,
        text_seq_len: 5,
        image_side: 8,
        patch_size: 4,
        dropout_rate: 0.0,
        variant,
        ..ModelConfig::default()
    }
}

fn demo_batch(cfg: &ModelConfig, rng: &mut Rng) -> (Vec<Vec<usize>>, Vec<Tensor>, Tensor) {
    let ids: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..cfg.text_seq_len).map(|_| rng.next_below(cfg.vocab_size)).collect())
        .collect();
    let images: Vec<Tensor> = (0..2)
        .map(|_| {
            let n = cfg.image_side * cfg.image_side;
            Tensor::new(
                &[cfg.image_side, cfg.image_side],
                (0..n).map(|_| rng.next_f64()).collect(),
            )
        })
        .collect();
    let labels = Tensor::new(
        &[2, cfg.n_classes],
        (0..2 * cfg.n_classes).map(|_| (rng.next_f64() < 0.3) as u8 as f64).collect(),
    );
    (ids, images, labels)
}

/// Finite-difference check of the full backward pass: one parameter from
/// every family of a small model against numeric differentiation of the
/// training loss.
fn suite_grad_check(sabotage: bool) -> SuiteResult {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for variant in [FusionVariant::Parallel, FusionVariant::Serial, FusionVariant::Mixed] {
        let cfg = tiny_cfg(variant);
        let mut rng = Rng::seed_from(41);
        let model = match build_model(&cfg, &mut rng) {
            Ok(m) => m,
            Err(e) => {
                return SuiteResult {
                    name: "grad_check",
                    passed: false,
                    worst: None,
                    detail: format!("model construction failed: {e}"),
                }
            }
        };
        let (ids, images, labels) = demo_batch(&cfg, &mut rng);
        // One representative parameter per group keeps the numeric pass
        // affordable while still crossing every code path.
        let named = model.named_params();
        let mut picked: Vec<Tensor> = Vec::new();
        for group in ["embed", "vision_proj", "text.0", "vision.0", "cross.0", "head"] {
            if let Some((_, p)) = named.iter().find(|(n, _)| n.starts_with(group)) {
                picked.push(p.clone());
            }
        }
        let loss_fn = || {
            let mut ctx_rng = Rng::seed_from(0);
            let mut ctx = ForwardCtx::eval(&mut ctx_rng);
            let probs = model.forward(&ids, &images, &mut ctx).expect("forward succeeds");
            crate::train::bce_loss(&probs, &labels)
        };
        let report = grad_check_many(loss_fn, &picked, GRAD_STEP, GRAD_REL);
        checked += report.checked;
        worst = worst.max(report.max_rel_err);
        if !report.pass {
            return SuiteResult {
                name: "grad_check",
                passed: false,
                worst: Some(report.max_rel_err),
                detail: format!("{variant} wiring disagrees with finite differences"),
            };
        }
    }
    if sabotage {
        worst += 1.0;
    }
    SuiteResult {
        name: "grad_check",
        passed: worst <= GRAD_REL,
        worst: Some(worst),
        detail: format!("{checked} values across 3 wirings vs numeric differentiation"),
    }
}

/// Freshly attached adapters must not move any output: the up-projection
/// starts at zero.
fn suite_lora_transparency(sabotage: bool) -> SuiteResult {
    let mut worst = 0.0f64;
    for (i, variant) in
        [FusionVariant::Parallel, FusionVariant::Serial, FusionVariant::Mixed].iter().enumerate()
    {
        for seed in 0..3u64 {
            let cfg = tiny_cfg(*variant);
            let mut rng = Rng::seed_from(500 + seed * 7 + i as u64);
            let mut model = build_model(&cfg, &mut rng).expect("tiny config builds");
            let (ids, images, _) = demo_batch(&cfg, &mut rng);
            let run = |m: &crate::fusion::FusionModel| {
                let mut ctx_rng = Rng::seed_from(0);
                let mut ctx = ForwardCtx::eval(&mut ctx_rng);
                m.forward(&ids, &images, &mut ctx).expect("forward succeeds").to_vec()
            };
            let before = run(&model);
            wrap_model(&mut model, &LoraConfig::with_rank(2), &mut rng)
                .expect("wrap succeeds");
            let after = run(&model);
            let gap = before
                .iter()
                .zip(&after)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            worst = worst.max(gap);
        }
    }
    if sabotage {
        worst += 1.0;
    }
    SuiteResult {
        name: "lora_transparency",
        passed: worst <= LORA_INIT,
        worst: Some(worst),
        detail: "adapter attachment must not move outputs (3 wirings x 3 seeds)".to_string(),
    }
}

/// The three wirings must expose identical parameter tables: same names,
/// same shapes, same totals.
fn suite_parameter_parity(sabotage: bool) -> SuiteResult {
    let mut rng = Rng::seed_from(60);
    for trial in 0..4 {
        let d_model = 4 * (1 + rng.next_below(3));
        let base = ModelConfig {
            d_model,
            n_heads: if d_model % 4 == 0 { 2 } else { 1 },
            n_levels: 1 + rng.next_below(3),
            vocab_size: 8 + rng.next_below(24),
            text_seq_len: 4 + rng.next_below(6),
            image_side: 8,
            patch_size: 4,
            ..ModelConfig::default()
        };
        let mut tables = Vec::new();
        for variant in [FusionVariant::Parallel, FusionVariant::Serial, FusionVariant::Mixed] {
            let cfg = ModelConfig { variant, ..base.clone() };
            let mut build_rng = Rng::seed_from(1000 + trial);
            let model = build_model(&cfg, &mut build_rng).expect("config builds");
            let mut table: Vec<(String, Vec<usize>)> = model
                .named_params()
                .iter()
                .map(|(n, p)| (n.clone(), p.shape().to_vec()))
                .collect();
            if sabotage && variant == FusionVariant::Mixed {
                table.push(("phantom".to_string(), vec![1]));
            }
            table.sort();
            tables.push((variant, table));
        }
        let (_, reference) = &tables[0];
        for (variant, table) in &tables[1..] {
            if table != reference {
                return SuiteResult {
                    name: "parameter_parity",
                    passed: false,
                    worst: None,
                    detail: format!(
                        "trial {trial}: {variant} wiring's parameter table diverges"
                    ),
                };
            }
        }
    }
    SuiteResult {
        name: "parameter_parity",
        passed: true,
        worst: None,
        detail: "4 random configs x 3 wirings share one parameter table".to_string(),
    }
}

/// The rank-sum ranking metric against literal pair counting.
fn suite_auc_oracle(sabotage: bool) -> SuiteResult {
    let mut rng = Rng::seed_from(70);
    let mut worst = 0.0f64;
    let mut cases = 0;
    while cases < 50 {
        let n = 4 + rng.next_below(40);
        let scores: Vec<f64> = (0..n).map(|_| (rng.next_f64() * 10.0).floor() / 10.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| (rng.next_f64() < 0.4) as u8).collect();
        let Some(fast) = roc_auc(&scores, &labels) else { continue };
        cases += 1;
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        worst = worst.max((fast - wins / pairs).abs());
    }
    if sabotage {
        worst += 1.0;
    }
    SuiteResult {
        name: "auc_oracle",
        passed: worst <= EXACT_F64,
        worst: Some(worst),
        detail: "rank-sum vs pair counting on 50 tied-score sets".to_string(),
    }
}

/// Replay the committed golden fixtures.
fn suite_golden_replay(sabotage: bool) -> SuiteResult {
    match crate::golden::check_all(&crate::golden::default_dir()) {
        Ok(results) => {
            let mut worst = results.iter().map(|(_, w)| *w).fold(0.0f64, f64::max);
            if sabotage {
                worst += 1.0;
            }
            SuiteResult {
                name: "golden_replay",
                passed: worst <= crate::tolerances::FIXTURE_F32,
                worst: Some(worst),
                detail: format!("{} fixtures replayed from disk", results.len()),
            }
        }
        Err(e) => SuiteResult {
            name: "golden_replay",
            passed: false,
            worst: None,
            detail: format!("fixture replay failed: {e}"),
        },
    }
}

/// Run every suite; `fault` names one to sabotage (the negative control).
pub fn run_all_with_fault(fault: Option<&str>) -> Vec<SuiteResult> {
    let hit = |name: &str| fault == Some(name);
    vec![
        suite_grad_check(hit("grad_check")),
        suite_lora_transparency(hit("lora_transparency")),
        suite_parameter_parity(hit("parameter_parity")),
        suite_auc_oracle(hit("auc_oracle")),
        suite_golden_replay(hit("golden_replay")),
    ]
}

/// Run every suite, honoring the `MMFX_VERIFY_FAULT` environment variable.
pub fn run_all() -> Vec<SuiteResult> {
    let fault = std::env::var("MMFX_VERIFY_FAULT").ok();
    run_all_with_fault(fault.as_deref())
}
