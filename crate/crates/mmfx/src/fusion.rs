//! The multimodal classifier: configuration, construction, the three fusion
//! wirings, and the sigmoid classification head.
//!
//! All three variants own identical components — text embedder, patch
//! projector, one transformer stack per modality, a chain of bidirectional
//! cross blocks, and the head — so parameter counts and initial weights
//! match across variants given the same config and seed. The variant decides
//! only how data flows:
//!
//! - **parallel**: the cross chain consumes the raw embedded features
//!   directly and feeds the head; the modality stacks are not on the path.
//! - **serial**: each modality runs through its own stack first, then the
//!   cross chain fuses the stack outputs.
//! - **mixed**: all but the last cross block run parallel-style from the raw
//!   features; the final cross block consumes the elementwise mean of the
//!   cross chain's outputs and the modality stacks' outputs.
//!
//! Each final stream is RMS-normalized per position (gain-free, as the
//! head's first dense layer absorbs any diagonal rescale), pooled over its
//! sequence positions, and joined; the head then maps the joined vector
//! through a dense layer, tanh, dropout, a dense class layer, and a
//! per-class sigmoid.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::features::{PatchProjector, TextEmbedder, RESERVED_IDS};
use crate::lora::LoraConfig;
use crate::nn::{CrossBlock, FfForm, ForwardCtx, LinearLayer, TransformerLayer, NORM_EPS};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gaussian width for all weight-matrix initialization.
pub const INIT_STD: f64 = 0.02;

/// Gaussian width for the image patch positional table. Patch content
/// reaches the stream as `weight · pixels` with pixel-vector norms well
/// above one, so at `INIT_STD` the positional rows would be several
/// times fainter than what the patches contain. Image classes are told
/// apart by *which* region is bright, and that location signal survives
/// mean pooling only through position-content interaction terms — so the
/// positional rows start at the projected-content scale instead.
pub const PATCH_POS_STD: f64 = 0.1;

/// Factor applied at build time to every layer's residual-writing
/// projections (attention output, feed-forward down-projection). Zero
/// starts each residual branch silent: the stream a frozen random stack
/// hands to the readout is then the embeddings themselves rather than
/// embeddings buried under six layers of accumulated random mixing, and
/// the low-rank adapters (plus the head) decide from the first step what
/// the branches should contribute.
pub const RESIDUAL_WRITE_SCALE: f64 = 0.0;

/// Number of label classes in the classification schema.
pub const N_CLASSES: usize = 14;

/// Class names in label-index order. Index 8 is the mutually-exclusive
/// "nothing found" class.
pub const CLASS_NAMES: [&str; N_CLASSES] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged-Cardiomediastinum",
    "Fracture",
    "Lung-Lesion",
    "Lung-Opacity",
    "No-Finding",
    "Pleural-Effusion",
    "Pleural-Other",
    "Pneumonia",
    "Pneumothorax",
    "Support-Devices",
];

/// Label index of the "No-Finding" class.
pub const NO_FINDING: usize = 8;

// ----------------------------------------------------------------------
// Config
// ----------------------------------------------------------------------

/// How the cross blocks and modality stacks are wired together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    Parallel,
    Serial,
    Mixed,
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionVariant::Parallel => "parallel",
            FusionVariant::Serial => "serial",
            FusionVariant::Mixed => "mixed",
        })
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(FusionVariant::Parallel),
            "serial" => Ok(FusionVariant::Serial),
            "mixed" => Ok(FusionVariant::Mixed),
            other => Err(Error::Config(format!(
                "unknown fusion variant {other:?}; valid: parallel, serial, mixed"
            ))),
        }
    }
}

fn d_model_default() -> usize {
    64
}
fn n_heads_default() -> usize {
    4
}
fn n_levels_default() -> usize {
    3
}
fn vocab_default() -> usize {
    512
}
fn seq_len_default() -> usize {
    24
}
fn side_default() -> usize {
    32
}
fn patch_default() -> usize {
    8
}
fn n_classes_default() -> usize {
    N_CLASSES
}
fn dropout_default() -> f64 {
    0.1
}
fn variant_default() -> FusionVariant {
    FusionVariant::Parallel
}

/// Model hyperparameters. `hidden_dim` and `head_hidden` accept `0` as
/// "derive from `d_model`" (the resolved values are `4·d_model` rounded up
/// to a multiple of 8, and `d_model`, respectively).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d_model_default")]
    pub d_model: usize,
    #[serde(default = "n_heads_default")]
    pub n_heads: usize,
    /// Depth of each modality stack and of the cross chain.
    #[serde(default = "n_levels_default")]
    pub n_levels: usize,
    /// Feed-forward width; 0 means derive.
    #[serde(default)]
    pub hidden_dim: usize,
    /// Width of the head's intermediate dense layer; 0 means derive.
    #[serde(default)]
    pub head_hidden: usize,
    #[serde(default = "vocab_default")]
    pub vocab_size: usize,
    /// Token positions per report, class token included.
    #[serde(default = "seq_len_default")]
    pub text_seq_len: usize,
    #[serde(default = "side_default")]
    pub image_side: usize,
    #[serde(default = "patch_default")]
    pub patch_size: usize,
    #[serde(default = "n_classes_default")]
    pub n_classes: usize,
    /// Dropout in the head (and anywhere else a rate is needed).
    #[serde(default = "dropout_default")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub ff_form: FfForm,
    #[serde(default = "variant_default")]
    pub variant: FusionVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: d_model_default(),
            n_heads: n_heads_default(),
            n_levels: n_levels_default(),
            hidden_dim: 0,
            head_hidden: 0,
            vocab_size: vocab_default(),
            text_seq_len: seq_len_default(),
            image_side: side_default(),
            patch_size: patch_default(),
            n_classes: n_classes_default(),
            dropout_rate: dropout_default(),
            ff_form: FfForm::default(),
            variant: variant_default(),
        }
    }
}

impl ModelConfig {
    /// Fill derived fields (`hidden_dim`, `head_hidden`) where left at 0.
    pub fn resolved(mut self) -> Self {
        if self.hidden_dim == 0 {
            self.hidden_dim = (4 * self.d_model).div_ceil(8) * 8;
        }
        if self.head_hidden == 0 {
            self.head_hidden = self.d_model;
        }
        self
    }

    /// Check every field, collecting all problems into one message.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_model == 0 {
            problems.push("d_model must be positive".to_string());
        }
        if self.n_heads == 0 {
            problems.push("n_heads must be positive".to_string());
        } else if self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.n_levels == 0 {
            problems.push("n_levels must be at least 1".to_string());
        }
        if self.hidden_dim == 0 {
            problems.push("hidden_dim unresolved; call resolved() or set it".to_string());
        }
        if self.head_hidden == 0 {
            problems.push("head_hidden unresolved; call resolved() or set it".to_string());
        }
        if self.vocab_size <= RESERVED_IDS {
            problems.push(format!(
                "vocab_size {} leaves no room beyond the {} reserved ids",
                self.vocab_size, RESERVED_IDS
            ));
        }
        if self.text_seq_len == 0 {
            problems.push("text_seq_len must fit at least the class token".to_string());
        }
        if self.patch_size == 0 {
            problems.push("patch_size must be positive".to_string());
        } else if self.image_side == 0 || self.image_side % self.patch_size != 0 {
            problems.push(format!(
                "patch_size {} must divide image_side {}",
                self.patch_size, self.image_side
            ));
        }
        if self.n_classes == 0 {
            problems.push("n_classes must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            problems.push(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Flattened pixels per patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }
}

// ----------------------------------------------------------------------
// Head
// ----------------------------------------------------------------------

/// Pooled features to per-class probabilities:
/// dense → tanh → dropout → dense → sigmoid.
pub struct ClassifierHead {
    pub dense_linear: LinearLayer,
    pub dense_cls: LinearLayer,
    pub dropout_rate: f64,
}

impl ClassifierHead {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        // The hidden layer is fan-in-scaled so the RMS-normalized pooled
        // input yields unit-scale activations. The class layer starts
        // near zero: large enough that logits respond to the input from
        // step zero, small enough that the random initial structure stays
        // well under what a short adapter-tuning run can accumulate, so
        // the optimizer spends its budget on gradient-aligned structure
        // instead of unwinding noise.
        let std1 = 1.0 / (2.0 * cfg.d_model as f64).sqrt();
        let dense_cls = LinearLayer::gaussian(cfg.n_classes, cfg.head_hidden, true, 0.001, rng);
        // Class biases start at a rare-positive prior rather than zero.
        // In multi-label screening most labels are negative; starting
        // every sigmoid near 0.5 makes each class's early gradient a
        // uniform push toward "predict less", and with sign-normalized
        // Adam that push anti-aligns every class row with the mean
        // activity direction as fast as it aligns true feature
        // detectors. Biasing the logits low from the start removes that
        // shared pressure so the budget goes to label-correlated
        // structure.
        if let Some(b) = &dense_cls.bias {
            b.data_mut().fill(-1.5);
        }
        ClassifierHead {
            dense_linear: LinearLayer::gaussian(cfg.head_hidden, 2 * cfg.d_model, true, std1, rng),
            dense_cls,
            dropout_rate: cfg.dropout_rate,
        }
    }

    pub fn forward(&self, pooled: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        let h = self.dense_linear.forward(pooled, ctx).tanh();
        let h = h.dropout(self.dropout_rate, ctx.training, ctx.rng);
        self.dense_cls.forward(&h, ctx).sigmoid()
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.dense_linear.visit_params(&format!("{prefix}.dense_linear"), f);
        self.dense_cls.visit_params(&format!("{prefix}.dense_cls"), f);
    }
}

// ----------------------------------------------------------------------
// Model
// ----------------------------------------------------------------------

/// The full classifier. Component set is identical across fusion variants;
/// see the module docs for how each variant wires them.
pub struct FusionModel {
    pub cfg: ModelConfig,
    pub embedder: TextEmbedder,
    pub projector: PatchProjector,
    pub text_stack: Vec<TransformerLayer>,
    pub vision_stack: Vec<TransformerLayer>,
    pub cross_blocks: Vec<CrossBlock>,
    pub head: ClassifierHead,
    /// Adapter setup once wrapped; `None` for a bare model.
    pub lora: Option<LoraConfig>,
}

/// Build a model with Gaussian weights (zero biases, unit norm gains). The
/// draw order is fixed — embedder, projector, text stack, vision stack,
/// cross blocks, head — and never consults the fusion variant, so identical
/// config and seed give identical weights for all three variants.
pub fn build_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<FusionModel> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let embedder = TextEmbedder::new(cfg.vocab_size, cfg.text_seq_len, cfg.d_model, INIT_STD, rng);
    let projector =
        PatchProjector::new(cfg.image_side, cfg.patch_size, cfg.d_model, INIT_STD, PATCH_POS_STD, rng);
    let layer = |rng: &mut Rng| {
        let mut l =
            TransformerLayer::new(cfg.d_model, cfg.n_heads, cfg.hidden_dim, cfg.ff_form, INIT_STD, rng);
        l.damp_residual_writes(RESIDUAL_WRITE_SCALE);
        l
    };
    let text_stack: Vec<_> = (0..cfg.n_levels).map(|_| layer(rng)).collect();
    let vision_stack: Vec<_> = (0..cfg.n_levels).map(|_| layer(rng)).collect();
    let cross_blocks: Vec<_> = (0..cfg.n_levels)
        .map(|_| {
            let text_from_vision = layer(rng);
            let vision_from_text = layer(rng);
            CrossBlock::from_layers(text_from_vision, vision_from_text)
        })
        .collect();
    let head = ClassifierHead::new(&cfg, rng);
    Ok(FusionModel {
        cfg,
        embedder,
        projector,
        text_stack,
        vision_stack,
        cross_blocks,
        head,
        lora: None,
    })
}

impl FusionModel {
    /// Class probabilities for one example: `[1, n_classes]`.
    pub fn forward_one(&self, ids: &[usize], image: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let t0 = self.embedder.forward(ids, ctx)?;
        let v0 = self.projector.forward(image, ctx)?;

        let (t, v) = match self.cfg.variant {
            FusionVariant::Parallel => {
                // Cross chain straight over the raw features; the modality
                // stacks exist but are not on the path to the head.
                let mut pair = (t0, v0);
                for block in &self.cross_blocks {
                    pair = block.forward(&pair.0, &pair.1, ctx);
                }
                pair
            }
            FusionVariant::Serial => {
                let mut t = t0;
                for layer in &self.text_stack {
                    t = layer.self_forward(&t, ctx);
                }
                let mut v = v0;
                for layer in &self.vision_stack {
                    v = layer.self_forward(&v, ctx);
                }
                let mut pair = (t, v);
                for block in &self.cross_blocks {
                    pair = block.forward(&pair.0, &pair.1, ctx);
                }
                pair
            }
            FusionVariant::Mixed => {
                let mut pair = (t0.clone(), v0.clone());
                let (last, front) =
                    self.cross_blocks.split_last().expect("n_levels >= 1 is validated");
                for block in front {
                    pair = block.forward(&pair.0, &pair.1, ctx);
                }
                let mut ts = t0;
                for layer in &self.text_stack {
                    ts = layer.self_forward(&ts, ctx);
                }
                let mut vs = v0;
                for layer in &self.vision_stack {
                    vs = layer.self_forward(&vs, ctx);
                }
                // Merge each stream with its stack twin by elementwise mean,
                // then run the final cross block serial-style on the merge.
                let mt = pair.0.add(&ts).scale(0.5);
                let mv = pair.1.add(&vs).scale(0.5);
                last.forward(&mt, &mv, ctx)
            }
        };

        // Final normalization before the readout: the pre-norm residual
        // streams stay near embedding scale, so each position is rescaled
        // to unit RMS here. No gain parameter — the head's first dense
        // layer absorbs any diagonal rescale.
        let unit = Tensor::full(&[self.cfg.d_model], 1.0);
        let pooled = Tensor::concat_cols(&[
            t.rms_norm(&unit, NORM_EPS).mean_rows(),
            v.rms_norm(&unit, NORM_EPS).mean_rows(),
        ]);
        Ok(self.head.forward(&pooled, ctx))
    }

    /// Class probabilities for a batch: `[len(batch), n_classes]`.
    pub fn forward(
        &self,
        ids: &[Vec<usize>],
        images: &[Tensor],
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        if ids.len() != images.len() {
            return Err(Error::Data(format!(
                "batch mismatch: {} token sequences vs {} images",
                ids.len(),
                images.len()
            )));
        }
        if ids.is_empty() {
            return Err(Error::Data("empty batch".to_string()));
        }
        let rows: Vec<Tensor> = ids
            .iter()
            .zip(images)
            .map(|(seq, img)| self.forward_one(seq, img, ctx))
            .collect::<Result<_>>()?;
        Ok(Tensor::stack_rows(&rows))
    }

    /// Walk every named parameter (adapters included) in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        self.embedder.visit_params("embed", f);
        self.projector.visit_params("vision_proj", f);
        for (i, layer) in self.text_stack.iter().enumerate() {
            layer.visit_params(&format!("text.{i}"), f);
        }
        for (i, layer) in self.vision_stack.iter().enumerate() {
            layer.visit_params(&format!("vision.{i}"), f);
        }
        for (i, block) in self.cross_blocks.iter().enumerate() {
            block.visit_params(&format!("cross.{i}"), f);
        }
        self.head.visit_params("head", f);
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Parameters the optimizer may move: everything with gradient tracking
    /// still on (for a wrapped model: adapters and the head).
    pub fn trainable_params(&self) -> Vec<(String, Tensor)> {
        self.named_params().into_iter().filter(|(_, t)| t.requires_grad()).collect()
    }

    /// Total parameter elements per group and overall.
    pub fn count_parameters(&self) -> ParamCounts {
        let order = ["embeddings", "text", "vision", "cross", "head"];
        let mut groups: Vec<(String, usize)> = order.iter().map(|g| (g.to_string(), 0)).collect();
        let mut total = 0;
        self.visit_params(&mut |name, t| {
            let g = param_group(&name);
            let slot = groups.iter_mut().find(|(name, _)| name == g).unwrap();
            slot.1 += t.numel();
            total += t.numel();
        });
        ParamCounts { groups, total }
    }

    /// Set every parameter whose name starts with `prefix` to zero (used by
    /// the single-modality ablations to blank the cross blocks).
    pub fn zero_params_with_prefix(&mut self, prefix: &str) {
        self.visit_params(&mut |name, t| {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        });
    }

    /// Snapshot all parameters as plain (name, shape, values) rows, in
    /// visit order. The result is `Send` and feeds checkpoints and
    /// cross-thread rebuilds.
    pub fn to_state(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t| out.push((name, t.shape().to_vec(), t.to_vec())));
        out
    }

    /// Overwrite parameter values from a state snapshot. The name sets must
    /// match exactly; shapes must agree.
    pub fn load_state(&mut self, state: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        use std::collections::HashMap;
        let mut by_name: HashMap<&str, (&Vec<usize>, &Vec<f64>)> =
            state.iter().map(|(n, s, v)| (n.as_str(), (s, v))).collect();
        let mut missing = Vec::new();
        let mut shape_err = None;
        self.visit_params(&mut |name, t| {
            match by_name.remove(name.as_str()) {
                None => missing.push(name),
                Some((shape, values)) => {
                    if shape != t.shape() {
                        shape_err.get_or_insert(format!(
                            "tensor {name} has shape {:?} but the snapshot holds {:?}",
                            t.shape(),
                            shape
                        ));
                    } else {
                        t.data_mut().copy_from_slice(values);
                    }
                }
            }
        });
        if let Some(e) = shape_err {
            return Err(Error::Checkpoint(e));
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "snapshot lacks tensors: {}",
                missing.join(", ")
            )));
        }
        if !by_name.is_empty() {
            let mut extra: Vec<&str> = by_name.into_keys().collect();
            extra.sort_unstable();
            return Err(Error::Checkpoint(format!(
                "snapshot has tensors this model does not: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }

    /// Rebuild a model from config + adapter setup + state. Used by
    /// checkpoint loading and by evaluation worker threads.
    pub fn from_parts(
        cfg: &ModelConfig,
        lora: Option<&LoraConfig>,
        state: &[(String, Vec<usize>, Vec<f64>)],
    ) -> Result<FusionModel> {
        // Any seed works: every value is overwritten by the snapshot.
        let mut rng = Rng::seed_from(0);
        let mut model = build_model(cfg, &mut rng)?;
        if let Some(lcfg) = lora {
            crate::lora::wrap_model(&mut model, lcfg, &mut rng)?;
        }
        model.load_state(state)?;
        Ok(model)
    }
}

/// Reporting group for a parameter name.
pub fn param_group(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "embed" | "vision_proj" => "embeddings",
        "text" => "text",
        "vision" => "vision",
        "cross" => "cross",
        "head" => "head",
        other => panic!("unexpected parameter group in {other:?}"),
    }
}

/// Parameter totals per group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    pub groups: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamCounts {
    pub fn group(&self, name: &str) -> usize {
        self.groups.iter().find(|(g, _)| g == name).map(|(_, n)| *n).unwrap_or(0)
    }
}
