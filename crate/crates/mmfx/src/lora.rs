//! Low-rank adapter fine-tuning.
//!
//! A wrapped weight `W0 ∈ R^{d×k}` stays frozen; training moves only a
//! low-rank residual `ΔW = (alpha/r) · B · A` with `A ∈ R^{r×k}` (Gaussian
//! init) and `B ∈ R^{d×r}` (zero init), so the wrapped map starts exactly
//! equal to the base map. Adapter dropout applies to the adapter's *input*
//! path only; the frozen base path always sees the raw input.
//!
//! The embedding table is wrapped in its transposed role (the map from a
//! one-hot token to its embedding row), which puts the vocabulary dimension
//! on `A`'s input side: `A ∈ R^{r×vocab}`, `B ∈ R^{d_model×r}`. Dropout on a
//! one-hot input degenerates to dropping whole token positions, and is
//! implemented exactly that way.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::nn::ForwardCtx;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gaussian width for adapter down-projections, matching the base init.
/// The scale of `A` sets how fast the adapter's contribution can grow
/// under a per-coordinate-normalized optimizer, and the right speed is
/// the one the surrounding residual streams were initialized for: wider
/// draws make every fine-tuning step jumpier without adding capacity.
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Which weight matrices receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LoraTarget {
    Wq,
    Wk,
    Wv,
    Wo,
    W2,
    Embeddings,
    VisionProj,
}

pub const ALL_TARGETS: [LoraTarget; 7] = [
    LoraTarget::Wq,
    LoraTarget::Wk,
    LoraTarget::Wv,
    LoraTarget::Wo,
    LoraTarget::W2,
    LoraTarget::Embeddings,
    LoraTarget::VisionProj,
];

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LoraTarget::Wq => "wq",
            LoraTarget::Wk => "wk",
            LoraTarget::Wv => "wv",
            LoraTarget::Wo => "wo",
            LoraTarget::W2 => "w2",
            LoraTarget::Embeddings => "embeddings",
            LoraTarget::VisionProj => "vision_proj",
        };
        f.write_str(s)
    }
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wq" => Ok(LoraTarget::Wq),
            "wk" => Ok(LoraTarget::Wk),
            "wv" => Ok(LoraTarget::Wv),
            "wo" => Ok(LoraTarget::Wo),
            "w2" => Ok(LoraTarget::W2),
            "embeddings" => Ok(LoraTarget::Embeddings),
            "vision_proj" => Ok(LoraTarget::VisionProj),
            other => Err(Error::Config(format!(
                "unknown adapter target {other:?}; valid targets: wq, wk, wv, wo, w2, embeddings, vision_proj"
            ))),
        }
    }
}

impl serde::Serialize for LoraTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for LoraTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Adapter hyperparameters. Omitted fields take the rank-4 standard setup
/// (so partial config documents stay valid).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    /// Adapter rank.
    pub r: usize,
    /// Numerator of the `alpha/r` scaling on the adapter path.
    pub alpha: f64,
    /// Dropout rate on the adapter input path.
    pub dropout: f64,
    /// Which weights get adapters. Everything else stays frozen-only.
    pub targets: BTreeSet<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig::with_rank(4)
    }
}

impl LoraConfig {
    /// Standard setup at a given rank: `alpha` 32, dropout 0.1, adapters on
    /// all attention projections, the feed-forward down-projection, the
    /// embedding table, and the patch projection.
    pub fn with_rank(r: usize) -> Self {
        LoraConfig { r, alpha: 32.0, dropout: 0.1, targets: ALL_TARGETS.into_iter().collect() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.r == 0 {
            problems.push("rank r must be at least 1".to_string());
        }
        if !(self.alpha > 0.0) {
            problems.push(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.targets.is_empty() {
            problems.push("targets must name at least one weight family".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

/// Trainable-to-frozen parameter ratio of one wrapped `d×k` matrix at rank
/// `r`. Computed as the exact count quotient `(r·k + d·r) / (d·k)`, which is
/// algebraically `r · (1/d + 1/k)`.
pub fn reduction_factor(d: usize, k: usize, r: usize) -> Result<f64> {
    if r > d.min(k) {
        return Err(Error::Config(format!(
            "rank {r} exceeds min({d}, {k}); the adapter would have more parameters than the base"
        )));
    }
    Ok((r * k + d * r) as f64 / (d * k) as f64)
}

// ----------------------------------------------------------------------
// Adapter
// ----------------------------------------------------------------------

/// Low-rank residual attached to one frozen weight.
pub struct LoraAdapter {
    /// Down-projection `[r, k]`, Gaussian init.
    pub a: Tensor,
    /// Up-projection `[d, r]`, zero init — the adapter starts transparent.
    pub b: Tensor,
    /// `alpha / r`.
    pub scale: f64,
    /// Dropout rate on the adapter input.
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn new(d_out: usize, k_in: usize, cfg: &LoraConfig, rng: &mut Rng) -> Self {
        LoraAdapter {
            a: Tensor::param_gaussian(&[cfg.r, k_in], ADAPTER_INIT_STD, rng),
            b: Tensor::param(&[d_out, cfg.r], vec![0.0; d_out * cfg.r]),
            scale: cfg.scale(),
            dropout: cfg.dropout,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// Adapter contribution for a dense input `x ∈ [s, k]`:
    /// `(alpha/r) · dropout(x) · A^T · B^T ∈ [s, d]`.
    pub fn delta(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        let dropped = x.dropout(self.dropout, ctx.training, ctx.rng);
        dropped.matmul(&self.a.t()).matmul(&self.b.t()).scale(self.scale)
    }

    /// Adapter contribution for a row-lookup input (ids selecting one-hot
    /// rows): `[len(ids), d]`. Input dropout degenerates to zeroing whole
    /// positions, since each one-hot row has a single live element.
    pub fn delta_rows(&self, ids: &[usize], ctx: &mut ForwardCtx) -> Tensor {
        let r = self.rank();
        let mut gathered = Tensor::gather_rows(&self.a.t(), ids);
        if ctx.training && self.dropout > 0.0 {
            let keep_scale = 1.0 / (1.0 - self.dropout);
            let mut mask = Vec::with_capacity(ids.len() * r);
            for _ in ids {
                let m = if ctx.rng.next_f64() < self.dropout { 0.0 } else { keep_scale };
                mask.extend(std::iter::repeat(m).take(r));
            }
            gathered = gathered.mul(&Tensor::new(&[ids.len(), r], mask));
        }
        gathered.matmul(&self.b.t()).scale(self.scale)
    }

    /// Fold the adapter into its base weight: `W0 + (alpha/r) · B · A`.
    /// Pure value computation, detached from any graph.
    pub fn merged(&self, base: &Tensor) -> Tensor {
        self.b.detach().matmul(&self.a.detach()).scale(self.scale).add(&base.detach())
    }
}

// ----------------------------------------------------------------------
// Model wrapping
// ----------------------------------------------------------------------

/// Attach adapters to `model` per `cfg` and freeze everything except the
/// adapters and the classifier head. Errors if the model is already wrapped
/// or the rank does not fit some targeted matrix.
pub fn wrap_model(model: &mut FusionModel, cfg: &LoraConfig, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    if model.lora.is_some() {
        return Err(Error::Config("model already carries adapters; wrap once".to_string()));
    }

    // Rank must fit every targeted matrix before any state changes.
    let check = |d: usize, k: usize| reduction_factor(d, k, cfg.r).map(|_| ());
    let d_model = model.cfg.d_model;
    if cfg.targets.contains(&LoraTarget::Embeddings) {
        check(d_model, model.cfg.vocab_size)?;
    }
    if cfg.targets.contains(&LoraTarget::VisionProj) {
        check(d_model, model.cfg.patch_dim())?;
    }
    for t in [LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv, LoraTarget::Wo] {
        if cfg.targets.contains(&t) {
            check(d_model, d_model)?;
        }
    }
    if cfg.targets.contains(&LoraTarget::W2) {
        check(d_model, model.cfg.hidden_dim)?;
    }

    // Freeze the full base; the head is re-opened below.
    model.visit_params(&mut |_, t| t.set_requires_grad(false));

    if cfg.targets.contains(&LoraTarget::Embeddings) {
        model.embedder.adapter =
            Some(LoraAdapter::new(d_model, model.cfg.vocab_size, cfg, rng));
    }
    if cfg.targets.contains(&LoraTarget::VisionProj) {
        model.projector.adapter =
            Some(LoraAdapter::new(d_model, model.cfg.patch_dim(), cfg, rng));
    }

    let wrap_layer = |layer: &mut crate::nn::TransformerLayer, rng: &mut Rng| {
        let attn = &mut layer.attn;
        for (target, lin) in [
            (LoraTarget::Wq, &mut attn.wq),
            (LoraTarget::Wk, &mut attn.wk),
            (LoraTarget::Wv, &mut attn.wv),
            (LoraTarget::Wo, &mut attn.wo),
        ] {
            if cfg.targets.contains(&target) {
                lin.adapter = Some(LoraAdapter::new(lin.out_dim(), lin.in_dim(), cfg, rng));
            }
        }
        if cfg.targets.contains(&LoraTarget::W2) {
            let w2 = &mut layer.ff.w2;
            w2.adapter = Some(LoraAdapter::new(w2.out_dim(), w2.in_dim(), cfg, rng));
        }
    };
    for layer in &mut model.text_stack {
        wrap_layer(layer, rng);
    }
    for layer in &mut model.vision_stack {
        wrap_layer(layer, rng);
    }
    for block in &mut model.cross_blocks {
        wrap_layer(&mut block.text_from_vision, rng);
        wrap_layer(&mut block.vision_from_text, rng);
    }

    // The classifier head fine-tunes in full alongside the adapters.
    model.head.visit_params("head", &mut |_, t| t.set_requires_grad(true));

    model.lora = Some(cfg.clone());
    Ok(())
}

/// Per-group accounting of what trains and what stays frozen.
#[derive(Debug, Clone)]
pub struct TrainableReport {
    /// `(group, trainable, frozen)` element counts in a fixed group order.
    pub groups: Vec<(String, usize, usize)>,
    pub trainable: usize,
    pub total: usize,
}

impl TrainableReport {
    pub fn frozen_fraction(&self) -> f64 {
        (self.total - self.trainable) as f64 / self.total as f64
    }
}

/// Count trainable vs frozen parameters per model group (embeddings, text,
/// vision, cross, head).
pub fn trainable_param_report(model: &FusionModel) -> TrainableReport {
    let order = ["embeddings", "text", "vision", "cross", "head"];
    let mut groups: Vec<(String, usize, usize)> =
        order.iter().map(|g| (g.to_string(), 0, 0)).collect();
    model.visit_params(&mut |name, t| {
        let group = crate::fusion::param_group(&name);
        let slot = groups.iter_mut().find(|(g, _, _)| g == group).unwrap();
        if t.requires_grad() {
            slot.1 += t.numel();
        } else {
            slot.2 += t.numel();
        }
    });
    let trainable = groups.iter().map(|(_, tr, _)| tr).sum();
    let total = groups.iter().map(|(_, tr, fr)| tr + fr).sum::<usize>();
    TrainableReport { groups, trainable, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{build_model, FusionVariant, ModelConfig};
    use crate::nn::ForwardCtx;
    use crate::tensor::Tensor;
    use crate::tolerances::{EXACT_F64, LORA_INIT};

    fn small_config(n_levels: usize) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_levels,
            hidden_dim: 16,
            head_hidden: 8,
            vocab_size: 12,
            text_seq_len: 5,
            image_side: 8,
            patch_size: 4,
            n_classes: 3,
            dropout_rate: 0.1,
            variant: FusionVariant::Serial,
            ..ModelConfig::default()
        }
    }

    fn bare_adapter(d: usize, k: usize, r: usize, alpha: f64, rng: &mut Rng) -> LoraAdapter {
        let cfg = LoraConfig { r, alpha, dropout: 0.0, targets: ALL_TARGETS.into_iter().collect() };
        LoraAdapter::new(d, k, &cfg, rng)
    }

    #[test]
    fn config_validation_reports_every_problem_at_once() {
        let cfg = LoraConfig { r: 0, alpha: -1.0, dropout: 1.5, targets: BTreeSet::new() };
        let msg = cfg.validate().unwrap_err().to_string();
        for needle in ["rank", "alpha", "dropout", "targets"] {
            assert!(msg.contains(needle), "missing {needle:?} in: {msg}");
        }
    }

    #[test]
    fn target_names_round_trip_and_unknowns_list_the_valid_set() {
        for t in ALL_TARGETS {
            assert_eq!(t.to_string().parse::<LoraTarget>().unwrap(), t);
        }
        let msg = "wx".parse::<LoraTarget>().unwrap_err().to_string();
        assert!(msg.contains("wq") && msg.contains("vision_proj"), "got: {msg}");
    }

    #[test]
    fn standard_setup_covers_all_seven_families() {
        let cfg = LoraConfig::with_rank(4);
        assert_eq!(cfg.r, 4);
        assert_eq!(cfg.alpha, 32.0);
        assert_eq!(cfg.dropout, 0.1);
        assert_eq!(cfg.targets.len(), 7);
        assert_eq!(cfg.scale(), 8.0);
    }

    #[test]
    fn reduction_factor_is_the_exact_count_quotient() {
        for (d, k, r) in [(8, 8, 1), (8, 16, 2), (64, 512, 8), (100, 7, 3)] {
            let got = reduction_factor(d, k, r).unwrap();
            let want = (r * k + d * r) as f64 / (d * k) as f64;
            assert_eq!(got, want, "d={d} k={k} r={r}");
        }
        // A square 4096 matrix at rank 2 keeps exactly 1/1024 of the count.
        assert_eq!(reduction_factor(4096, 4096, 2).unwrap(), 1.0 / 1024.0);
    }

    #[test]
    fn reduction_factor_rejects_rank_above_either_side() {
        assert!(reduction_factor(4, 100, 5).is_err());
        assert!(reduction_factor(100, 4, 5).is_err());
        assert!(reduction_factor(4, 4, 4).is_ok());
    }

    #[test]
    fn fresh_adapter_is_transparent() {
        let mut rng = Rng::seed_from(7);
        let ad = bare_adapter(6, 4, 2, 32.0, &mut rng);
        let x = Tensor::param_gaussian(&[3, 4], 1.0, &mut rng);
        let mut ctx_rng = Rng::seed_from(0);
        let mut ctx = ForwardCtx::eval(&mut ctx_rng);
        for v in ad.delta(&x, &mut ctx).to_vec() {
            assert!(v.abs() <= LORA_INIT, "nonzero delta {v} before training");
        }
        let base = Tensor::param_gaussian(&[6, 4], 1.0, &mut rng);
        let merged = ad.merged(&base);
        assert_eq!(merged.to_vec(), base.to_vec());
    }

    #[test]
    fn adapter_matches_a_hand_computed_example() {
        let mut rng = Rng::seed_from(0);
        let cfg = LoraConfig {
            r: 1,
            alpha: 1.0,
            dropout: 0.0,
            targets: ALL_TARGETS.into_iter().collect(),
        };
        let ad = LoraAdapter::new(2, 2, &cfg, &mut rng);
        ad.a.data_mut().copy_from_slice(&[1.0, 0.0]);
        ad.b.data_mut().copy_from_slice(&[0.0, 1.0]);
        let mut lin = crate::nn::LinearLayer::gaussian(2, 2, false, 0.0, &mut rng);
        lin.weight.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        lin.adapter = Some(ad);
        let mut ctx_rng = Rng::seed_from(0);
        let mut ctx = ForwardCtx::eval(&mut ctx_rng);
        // x·W0^T = [3, 5]; the low-rank path moves x[0] into output slot 1.
        let y = lin.forward(&Tensor::new(&[1, 2], vec![3.0, 5.0]), &mut ctx);
        assert_eq!(y.to_vec(), [3.0, 8.0]);
    }

    #[test]
    fn adapter_path_scales_linearly_with_alpha() {
        let mut rng = Rng::seed_from(8);
        let ad32 = bare_adapter(5, 4, 2, 32.0, &mut rng);
        ad32.b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i + 1) as f64 * 0.1);
        let ad64 = LoraAdapter {
            a: Tensor::new(&[2, 4], ad32.a.to_vec()),
            b: Tensor::new(&[5, 2], ad32.b.to_vec()),
            scale: 64.0 / 2.0,
            dropout: 0.0,
        };
        let x = Tensor::param_gaussian(&[3, 4], 1.0, &mut rng);
        let mut ctx_rng = Rng::seed_from(0);
        let mut ctx = ForwardCtx::eval(&mut ctx_rng);
        let d32 = ad32.delta(&x, &mut ctx).to_vec();
        let d64 = ad64.delta(&x, &mut ctx).to_vec();
        for (a, b) in d32.iter().zip(&d64) {
            assert!((2.0 * a - b).abs() <= 1e-12, "alpha doubling: {a} vs {b}");
        }
    }

    #[test]
    fn merged_weight_reproduces_the_adapter_path() {
        let mut rng = Rng::seed_from(9);
        let ad = bare_adapter(5, 4, 2, 16.0, &mut rng);
        {
            let mut b = ad.b.data_mut();
            for v in b.iter_mut() {
                *v = rng.next_gaussian();
            }
        }
        let base = Tensor::param_gaussian(&[5, 4], 0.5, &mut rng);
        let x = Tensor::param_gaussian(&[3, 4], 1.0, &mut rng);
        let mut ctx_rng = Rng::seed_from(0);
        let mut ctx = ForwardCtx::eval(&mut ctx_rng);
        let split = x.matmul(&base.t()).add(&ad.delta(&x, &mut ctx)).to_vec();
        let folded = x.matmul(&ad.merged(&base).t()).to_vec();
        for (p, q) in split.iter().zip(&folded) {
            assert!((p - q).abs() <= EXACT_F64, "split {p} vs folded {q}");
        }
    }

    #[test]
    fn delta_has_rank_at_most_r() {
        let mut rng = Rng::seed_from(10);
        let ad = bare_adapter(6, 6, 2, 8.0, &mut rng);
        {
            let mut b = ad.b.data_mut();
            for v in b.iter_mut() {
                *v = rng.next_gaussian();
            }
        }
        // Dense update the adapter path is equivalent to: scale · B · A.
        let a = ad.a.to_vec();
        let b = ad.b.to_vec();
        let mut m = vec![vec![0.0f64; 6]; 6];
        for i in 0..6 {
            for j in 0..6 {
                for t in 0..2 {
                    m[i][j] += ad.scale * b[i * 2 + t] * a[t * 6 + j];
                }
            }
        }
        assert_eq!(matrix_rank(&mut m), 2);
    }

    /// Row-reduction rank with partial pivoting.
    fn matrix_rank(m: &mut [Vec<f64>]) -> usize {
        let rows = m.len();
        let cols = m[0].len();
        let mut rank = 0;
        for col in 0..cols {
            let pivot = (rank..rows).max_by(|&a, &b| {
                m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap()
            });
            let Some(p) = pivot else { break };
            if m[p][col].abs() < 1e-9 {
                continue;
            }
            m.swap(rank, p);
            for r in 0..rows {
                if r != rank {
                    let f = m[r][col] / m[rank][col];
                    for c in 0..cols {
                        m[r][c] -= f * m[rank][c];
                    }
                }
            }
            rank += 1;
            if rank == rows {
                break;
            }
        }
        rank
    }

    #[test]
    fn row_lookup_delta_matches_dense_delta_on_one_hot_input() {
        let mut rng = Rng::seed_from(11);
        let ad = bare_adapter(4, 6, 2, 8.0, &mut rng);
        {
            let mut b = ad.b.data_mut();
            for v in b.iter_mut() {
                *v = rng.next_gaussian();
            }
        }
        let mut ctx_rng = Rng::seed_from(0);
        let mut ctx = ForwardCtx::eval(&mut ctx_rng);
        let by_rows = ad.delta_rows(&[3, 0], &mut ctx).to_vec();
        let mut one_hot = vec![0.0; 2 * 6];
        one_hot[3] = 1.0;
        one_hot[6] = 1.0;
        let dense = ad.delta(&Tensor::new(&[2, 6], one_hot), &mut ctx).to_vec();
        for (p, q) in by_rows.iter().zip(&dense) {
            assert!((p - q).abs() <= EXACT_F64, "{p} vs {q}");
        }
    }

    #[test]
    fn row_lookup_dropout_blanks_whole_positions() {
        let mut rng = Rng::seed_from(12);
        let cfg = LoraConfig { r: 2, alpha: 8.0, dropout: 0.5, targets: ALL_TARGETS.into_iter().collect() };
        let ad = LoraAdapter::new(3, 6, &cfg, &mut rng);
        {
            let mut b = ad.b.data_mut();
            for v in b.iter_mut() {
                *v = rng.next_gaussian();
            }
        }
        let ids: Vec<usize> = (0..6).cycle().take(60).collect();
        let mut eval_rng = Rng::seed_from(0);
        let mut eval_ctx = ForwardCtx::eval(&mut eval_rng);
        let clean = ad.delta_rows(&ids, &mut eval_ctx).to_vec();
        let mut train_rng = Rng::seed_from(99);
        let mut train_ctx = ForwardCtx::train(&mut train_rng);
        let noisy = ad.delta_rows(&ids, &mut train_ctx).to_vec();
        let (mut zeroed, mut kept) = (0, 0);
        for (row, (c, n)) in clean.chunks(3).zip(noisy.chunks(3)).enumerate() {
            let all_zero = n.iter().all(|v| v.abs() <= 1e-12);
            let all_scaled = c.iter().zip(n).all(|(cv, nv)| (2.0 * cv - nv).abs() <= 1e-9);
            assert!(
                all_zero || all_scaled,
                "row {row} is neither blanked nor kept-and-rescaled: {n:?} vs {c:?}"
            );
            if all_zero {
                zeroed += 1;
            } else {
                kept += 1;
            }
        }
        assert!(zeroed > 5 && kept > 5, "dropout never took both branches: {zeroed}/{kept}");
    }

    #[test]
    fn wrapping_freezes_the_base_and_opens_adapters_and_head() {
        let mut rng = Rng::seed_from(20);
        let mut model = build_model(&small_config(1), &mut rng).unwrap();
        wrap_model(&mut model, &LoraConfig::with_rank(2), &mut rng).unwrap();
        assert!(model.lora.is_some());
        let mut adapters = 0;
        model.visit_params(&mut |name, t| {
            let should_train = name.contains(".lora_") || name.starts_with("head.");
            assert_eq!(
                t.requires_grad(),
                should_train,
                "{name} has requires_grad = {}",
                t.requires_grad()
            );
            if name.ends_with(".lora_a") {
                adapters += 1;
            }
        });
        // 1 level: 2 stack layers + 2 cross directions = 4 layers × 5
        // adapted matrices, plus the token table and the patch projection.
        assert_eq!(adapters, 22);
    }

    #[test]
    fn three_level_model_carries_sixty_two_adapters() {
        let mut rng = Rng::seed_from(21);
        let mut model = build_model(&small_config(3), &mut rng).unwrap();
        wrap_model(&mut model, &LoraConfig::with_rank(2), &mut rng).unwrap();
        let mut adapters = 0;
        model.visit_params(&mut |name, _| {
            if name.ends_with(".lora_a") {
                adapters += 1;
            }
        });
        // 12 adapted layers × 5 matrices + embeddings + patch projection.
        assert_eq!(adapters, 62);
    }

    #[test]
    fn wrapping_twice_is_rejected() {
        let mut rng = Rng::seed_from(22);
        let mut model = build_model(&small_config(1), &mut rng).unwrap();
        wrap_model(&mut model, &LoraConfig::with_rank(2), &mut rng).unwrap();
        let err = wrap_model(&mut model, &LoraConfig::with_rank(2), &mut rng).unwrap_err();
        assert!(err.to_string().contains("already"), "got: {err}");
    }

    #[test]
    fn oversized_rank_fails_before_any_state_changes() {
        let mut rng = Rng::seed_from(23);
        let mut cfg = small_config(1);
        cfg.patch_size = 2; // patch dim 4 < r = 5
        let mut model = build_model(&cfg, &mut rng).unwrap();
        let err = wrap_model(&mut model, &LoraConfig::with_rank(5), &mut rng).unwrap_err();
        assert!(err.to_string().contains("rank"), "got: {err}");
        assert!(model.lora.is_none());
        assert!(model.embedder.adapter.is_none());
        model.visit_params(&mut |name, t| {
            assert!(t.requires_grad(), "{name} was frozen by a failed wrap");
        });
    }

    #[test]
    fn partial_target_sets_leave_other_weights_bare() {
        let mut rng = Rng::seed_from(24);
        let mut model = build_model(&small_config(1), &mut rng).unwrap();
        let cfg = LoraConfig {
            r: 2,
            alpha: 32.0,
            dropout: 0.1,
            targets: [LoraTarget::Wq, LoraTarget::W2].into_iter().collect(),
        };
        wrap_model(&mut model, &cfg, &mut rng).unwrap();
        model.visit_params(&mut |name, _| {
            if name.ends_with(".lora_a") {
                assert!(
                    name.contains(".wq.") || name.contains(".w2."),
                    "unexpected adapter at {name}"
                );
            }
        });
        assert!(model.embedder.adapter.is_none());
        assert!(model.projector.adapter.is_none());
    }

    #[test]
    fn trainable_report_measures_the_frozen_base() {
        let mut rng = Rng::seed_from(25);
        let mut model = build_model(&small_config(2), &mut rng).unwrap();
        let base_total = model.count_parameters().total;
        wrap_model(&mut model, &LoraConfig::with_rank(2), &mut rng).unwrap();
        let report = trainable_param_report(&model);
        let mut want_trainable = 0;
        model.visit_params(&mut |name, t| {
            if name.contains(".lora_") || name.starts_with("head.") {
                want_trainable += t.numel();
            }
        });
        assert_eq!(report.trainable, want_trainable);
        assert_eq!(report.total, model.count_parameters().total);
        assert!(report.total > base_total, "adapters should add parameters");
        assert!(report.frozen_fraction() > 0.5, "most of the model should be frozen");
        let head = report.groups.iter().find(|(g, _, _)| g == "head").unwrap();
        assert_eq!(head.2, 0, "the head must be fully trainable");
    }

    #[test]
    fn measured_embedding_reduction_equals_the_formula() {
        let mut rng = Rng::seed_from(26);
        let mut model = build_model(&small_config(1), &mut rng).unwrap();
        let d = model.cfg.d_model;
        let vocab = model.cfg.vocab_size;
        let r = 3;
        wrap_model(&mut model, &LoraConfig::with_rank(r), &mut rng).unwrap();
        let ad = model.embedder.adapter.as_ref().unwrap();
        let measured = (ad.a.numel() + ad.b.numel()) as f64 / model.embedder.token_table.numel() as f64;
        assert_eq!(measured, reduction_factor(d, vocab, r).unwrap());
    }
}
