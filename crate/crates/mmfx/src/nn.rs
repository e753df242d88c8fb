//! Neural network building blocks: linear maps, scaled dot-product
//! attention, gated feed-forward networks, pre-norm transformer layers, and
//! bidirectional cross-attention blocks.
//!
//! Every block is built from [`Tensor`] ops, so gradients flow through all
//! of them. Weight matrices are stored `[out, in]` and applied to row-major
//! sequence matrices `[seq, in]` as `x · W^T`.

use crate::lora::LoraAdapter;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Epsilon inside the RMS normalizer's square root.
pub const NORM_EPS: f64 = 1e-5;

/// State threaded through every forward pass: whether stochastic pieces
/// (dropout) are live, and the generator they draw from.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: &'a mut Rng,
}

impl<'a> ForwardCtx<'a> {
    pub fn train(rng: &'a mut Rng) -> Self {
        ForwardCtx { training: true, rng }
    }

    pub fn eval(rng: &'a mut Rng) -> Self {
        ForwardCtx { training: false, rng }
    }
}

// ----------------------------------------------------------------------
// Linear
// ----------------------------------------------------------------------

/// Dense affine map `y = x · W^T (+ b)`, with an optional low-rank adapter
/// attached after wrapping (see [`crate::lora`]).
pub struct LinearLayer {
    /// `[out_dim, in_dim]`.
    pub weight: Tensor,
    /// `[out_dim]`, present only where the architecture calls for a bias.
    pub bias: Option<Tensor>,
    /// Low-rank residual path; `None` until the model is wrapped.
    pub adapter: Option<LoraAdapter>,
}

impl LinearLayer {
    /// Gaussian-initialized weight, zero bias.
    pub fn gaussian(out_dim: usize, in_dim: usize, with_bias: bool, std: f64, rng: &mut Rng) -> Self {
        LinearLayer {
            weight: Tensor::param_gaussian(&[out_dim, in_dim], std, rng),
            bias: with_bias.then(|| Tensor::param(&[out_dim], vec![0.0; out_dim])),
            adapter: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        let mut y = x.matmul(&self.weight.t());
        if let Some(ad) = &self.adapter {
            y = y.add(&ad.delta(x, ctx));
        }
        match &self.bias {
            Some(b) => y.add_row(b),
            None => y,
        }
    }

    /// Walk the named parameter entries under `prefix`.
    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
        if let Some(ad) = &self.adapter {
            // Adapter entries hang off the wrapped tensor's name.
            f(format!("{prefix}.weight.lora_a"), &ad.a);
            f(format!("{prefix}.weight.lora_b"), &ad.b);
        }
    }
}

// ----------------------------------------------------------------------
// Attention
// ----------------------------------------------------------------------

/// Scaled dot-product attention over already-projected streams:
/// `softmax(q · k^T / sqrt(d_k)) · v`. Softmax runs per query row.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let d_k = q.shape()[1];
    let scores = q.matmul(&k.t()).scale(1.0 / (d_k as f64).sqrt());
    scores.softmax_last().matmul(v)
}

/// Multi-head attention: four bias-free projections, heads formed by column
/// slicing, outputs re-concatenated and mixed by the output projection.
pub struct AttentionBlock {
    pub wq: LinearLayer,
    pub wk: LinearLayer,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub n_heads: usize,
}

impl AttentionBlock {
    pub fn new(d_model: usize, n_heads: usize, std: f64, rng: &mut Rng) -> Self {
        assert!(
            n_heads > 0 && d_model % n_heads == 0,
            "n_heads {n_heads} must divide d_model {d_model}"
        );
        AttentionBlock {
            wq: LinearLayer::gaussian(d_model, d_model, false, std, rng),
            wk: LinearLayer::gaussian(d_model, d_model, false, std, rng),
            wv: LinearLayer::gaussian(d_model, d_model, false, std, rng),
            wo: LinearLayer::gaussian(d_model, d_model, false, std, rng),
            n_heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.wq.out_dim() / self.n_heads
    }

    /// `x_q` supplies the queries, `x_kv` the keys and values. Self-attention
    /// passes the same tensor for both.
    pub fn forward(&self, x_q: &Tensor, x_kv: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        let q = self.wq.forward(x_q, ctx);
        let k = self.wk.forward(x_kv, ctx);
        let v = self.wv.forward(x_kv, ctx);
        let dh = self.head_dim();
        let heads: Vec<Tensor> = (0..self.n_heads)
            .map(|h| {
                scaled_dot_attention(
                    &q.narrow_cols(h * dh, dh),
                    &k.narrow_cols(h * dh, dh),
                    &v.narrow_cols(h * dh, dh),
                )
            })
            .collect();
        self.wo.forward(&Tensor::concat_cols(&heads), ctx)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.wq.visit_params(&format!("{prefix}.wq"), f);
        self.wk.visit_params(&format!("{prefix}.wk"), f);
        self.wv.visit_params(&format!("{prefix}.wv"), f);
        self.wo.visit_params(&format!("{prefix}.wo"), f);
    }
}

// ----------------------------------------------------------------------
// Feed-forward
// ----------------------------------------------------------------------

/// Which way the gated feed-forward composes its two branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfForm {
    /// `W2( silu(W1 x ⊙ W3 x) )`: the activation wraps the elementwise
    /// product of both branches. Default.
    #[default]
    SiluOfProduct,
    /// `W2( silu(W1 x) ⊙ W3 x )`: the activation gates one branch, which
    /// then multiplies the other.
    SiluGatedProduct,
}

/// Two-branch gated feed-forward with a down-projection, all bias-free.
pub struct FeedForward {
    pub w1: LinearLayer,
    pub w2: LinearLayer,
    pub w3: LinearLayer,
    pub form: FfForm,
}

impl FeedForward {
    pub fn new(d_model: usize, hidden_dim: usize, form: FfForm, std: f64, rng: &mut Rng) -> Self {
        FeedForward {
            w1: LinearLayer::gaussian(hidden_dim, d_model, false, std, rng),
            w2: LinearLayer::gaussian(d_model, hidden_dim, false, std, rng),
            w3: LinearLayer::gaussian(hidden_dim, d_model, false, std, rng),
            form,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        let b1 = self.w1.forward(x, ctx);
        let b3 = self.w3.forward(x, ctx);
        let hidden = match self.form {
            FfForm::SiluOfProduct => b1.mul(&b3).silu(),
            FfForm::SiluGatedProduct => b1.silu().mul(&b3),
        };
        self.w2.forward(&hidden, ctx)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.w1.visit_params(&format!("{prefix}.w1"), f);
        self.w2.visit_params(&format!("{prefix}.w2"), f);
        self.w3.visit_params(&format!("{prefix}.w3"), f);
    }
}

// ----------------------------------------------------------------------
// Transformer layer
// ----------------------------------------------------------------------

/// Pre-norm residual layer: attention then feed-forward, each applied to a
/// normalized view and added back onto the running stream.
///
/// In cross mode the query and key/value streams are distinct tensors; both
/// are normalized with this layer's first norm gain before attention.
pub struct TransformerLayer {
    pub attn: AttentionBlock,
    pub ff: FeedForward,
    /// Gain of the norm in front of attention.
    pub norm1_gain: Tensor,
    /// Gain of the norm in front of the feed-forward.
    pub norm2_gain: Tensor,
}

impl TransformerLayer {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        hidden_dim: usize,
        form: FfForm,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        TransformerLayer {
            attn: AttentionBlock::new(d_model, n_heads, std, rng),
            ff: FeedForward::new(d_model, hidden_dim, form, std, rng),
            norm1_gain: Tensor::param(&[d_model], vec![1.0; d_model]),
            norm2_gain: Tensor::param(&[d_model], vec![1.0; d_model]),
        }
    }

    /// General form: queries from `x_q`, keys/values from `x_kv`.
    pub fn forward(&self, x_q: &Tensor, x_kv: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        let nq = x_q.rms_norm(&self.norm1_gain, NORM_EPS);
        let nkv = if x_kv.ptr_eq(x_q) { nq.clone() } else { x_kv.rms_norm(&self.norm1_gain, NORM_EPS) };
        let y = x_q.add(&self.attn.forward(&nq, &nkv, ctx));
        let ny = y.rms_norm(&self.norm2_gain, NORM_EPS);
        y.add(&self.ff.forward(&ny, ctx))
    }

    /// Self-attention over a single stream.
    pub fn self_forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Tensor {
        self.forward(x, x, ctx)
    }

    /// Scale the two projections that write into the residual stream
    /// (attention output, feed-forward down-projection) in place. A deep
    /// stack of randomly initialized layers buries the embedding-level
    /// signal under accumulated random mixing; damping the writes makes
    /// each layer start near the identity so the stream stays readable
    /// and fine-tuning decides what the branches should add.
    pub fn damp_residual_writes(&mut self, factor: f64) {
        for t in [&self.attn.wo.weight, &self.ff.w2.weight] {
            for v in t.data_mut().iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.attn.visit_params(&format!("{prefix}.attn"), f);
        self.ff.visit_params(&format!("{prefix}.ff"), f);
        f(format!("{prefix}.norm1.gain"), &self.norm1_gain);
        f(format!("{prefix}.norm2.gain"), &self.norm2_gain);
    }
}

// ----------------------------------------------------------------------
// Cross block
// ----------------------------------------------------------------------

/// One bidirectional fusion unit: two directional transformer layers that
/// both read the *same* input pair. One sends text queries against vision
/// keys/values, the other vision queries against text keys/values, so
/// neither direction sees the other's output at the same depth.
pub struct CrossBlock {
    /// Queries: text stream. Keys/values: vision stream.
    pub text_from_vision: TransformerLayer,
    /// Queries: vision stream. Keys/values: text stream.
    pub vision_from_text: TransformerLayer,
}

impl CrossBlock {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        hidden_dim: usize,
        form: FfForm,
        std: f64,
        rng: &mut Rng,
    ) -> Self {
        CrossBlock {
            text_from_vision: TransformerLayer::new(d_model, n_heads, hidden_dim, form, std, rng),
            vision_from_text: TransformerLayer::new(d_model, n_heads, hidden_dim, form, std, rng),
        }
    }

    pub fn from_layers(text_from_vision: TransformerLayer, vision_from_text: TransformerLayer) -> Self {
        CrossBlock { text_from_vision, vision_from_text }
    }

    /// See [`TransformerLayer::damp_residual_writes`]; applies to both
    /// directions.
    pub fn damp_residual_writes(&mut self, factor: f64) {
        self.text_from_vision.damp_residual_writes(factor);
        self.vision_from_text.damp_residual_writes(factor);
    }

    /// `(text', vision')`, both derived from the incoming `(text, vision)`.
    pub fn forward(&self, text: &Tensor, vision: &Tensor, ctx: &mut ForwardCtx) -> (Tensor, Tensor) {
        let t_out = self.text_from_vision.forward(text, vision, ctx);
        let v_out = self.vision_from_text.forward(vision, text, ctx);
        (t_out, v_out)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        self.text_from_vision.visit_params(&format!("{prefix}.text_from_vision"), f);
        self.vision_from_text.visit_params(&format!("{prefix}.vision_from_text"), f);
    }
}
