//! Feature extraction: word-level tokenization for reports and patch
//! projection for images, each ending in rows of width `d_model`.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::nn::ForwardCtx;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Reserved token ids. Real vocabulary entries start after these.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const RESERVED_IDS: usize = 3;

// ----------------------------------------------------------------------
// Tokenizer
// ----------------------------------------------------------------------

/// Frequency-ranked word-level tokenizer. Text is lowercased and split on
/// everything that is not alphanumeric; the most frequent words get the
/// smallest ids (ties broken lexicographically), starting right after the
/// reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    /// `words[i]` holds the token with id `i + RESERVED_IDS`.
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased alphanumeric runs of `text`, in order.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Tokenizer {
    /// Rank words of `corpus` by frequency (descending), ties broken by the
    /// word itself (ascending), and keep the top `max_vocab - RESERVED_IDS`.
    pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_vocab: usize) -> Tokenizer {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in split_words(line.as_ref()) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|(wa, ca), (wb, cb)| cb.cmp(ca).then(wa.cmp(wb)));
        let keep = max_vocab.saturating_sub(RESERVED_IDS);
        ranked.truncate(keep);
        Tokenizer::from_words(ranked.into_iter().map(|(w, _)| w).collect())
    }

    /// Rebuild a tokenizer from an already-ordered word list, e.g. the one
    /// a checkpoint carries. Ids are positions offset by the reserved ids.
    pub fn from_words(words: Vec<String>) -> Tokenizer {
        let index =
            words.iter().enumerate().map(|(i, w)| (w.clone(), i + RESERVED_IDS)).collect();
        Tokenizer { words, index }
    }

    /// Total id space: reserved ids plus vocabulary entries.
    pub fn vocab_size(&self) -> usize {
        self.words.len() + RESERVED_IDS
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Class-token id first, then word ids (unknowns mapped to [`UNK_ID`]),
    /// truncated or pad-filled so the result is exactly `seq_len` long.
    pub fn encode(&self, text: &str, seq_len: usize) -> Vec<usize> {
        assert!(seq_len >= 1, "seq_len must fit at least the class token");
        let mut ids = Vec::with_capacity(seq_len);
        ids.push(CLS_ID);
        for w in split_words(text) {
            if ids.len() == seq_len {
                break;
            }
            ids.push(self.id_of(&w));
        }
        ids.resize(seq_len, PAD_ID);
        ids
    }

    /// Inverse of `encode` for display: reserved ids are skipped except the
    /// unknown marker.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                PAD_ID | CLS_ID => {}
                UNK_ID => out.push("<unk>".to_string()),
                _ => match self.words.get(id - RESERVED_IDS) {
                    Some(w) => out.push(w.clone()),
                    None => out.push("<unk>".to_string()),
                },
            }
        }
        out.join(" ")
    }

    /// One token per line; the word on (0-based) line `n` has id
    /// `n + RESERVED_IDS`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.words.join("\n");
        if !self.words.is_empty() {
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let words: Vec<String> = body.lines().map(str::to_string).collect();
        for w in &words {
            if w.is_empty() {
                return Err(Error::Data(format!(
                    "vocabulary file {} contains an empty line",
                    path.display()
                )));
            }
        }
        Ok(Tokenizer::from_words(words))
    }

    /// Words in id order (id = position + RESERVED_IDS).
    pub fn words(&self) -> &[String] {
        &self.words
    }
}

// ----------------------------------------------------------------------
// Text embedder
// ----------------------------------------------------------------------

/// Token-id sequence to `[seq, d_model]` features: learned token table plus
/// learned positional table.
pub struct TextEmbedder {
    /// `[vocab_size, d_model]`.
    pub token_table: Tensor,
    /// `[max_len, d_model]`, added by position.
    pub pos_table: Tensor,
    /// Low-rank residual on the token table; `None` until wrapped.
    pub adapter: Option<LoraAdapter>,
}

impl TextEmbedder {
    pub fn new(vocab_size: usize, max_len: usize, d_model: usize, std: f64, rng: &mut Rng) -> Self {
        TextEmbedder {
            token_table: Tensor::param_gaussian(&[vocab_size, d_model], std, rng),
            pos_table: Tensor::param_gaussian(&[max_len, d_model], std, rng),
            adapter: None,
        }
    }

    pub fn forward(&self, ids: &[usize], ctx: &mut ForwardCtx) -> Result<Tensor> {
        let vocab = self.token_table.shape()[0];
        let max_len = self.pos_table.shape()[0];
        if ids.len() > max_len {
            return Err(Error::Data(format!(
                "sequence of {} ids exceeds the positional table ({max_len} rows)",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut out = Tensor::gather_rows(&self.token_table, ids);
        if let Some(ad) = &self.adapter {
            out = out.add(&ad.delta_rows(ids, ctx));
        }
        Ok(out.add(&Tensor::gather_rows(&self.pos_table, &positions)))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.token_table"), &self.token_table);
        f(format!("{prefix}.pos_table"), &self.pos_table);
        if let Some(ad) = &self.adapter {
            f(format!("{prefix}.token_table.lora_a"), &ad.a);
            f(format!("{prefix}.token_table.lora_b"), &ad.b);
        }
    }
}

// ----------------------------------------------------------------------
// Patch projector
// ----------------------------------------------------------------------

/// Square image to `[n_patches, d_model]` features: non-overlapping patches
/// flattened row-major, linearly projected, plus a learned positional table.
/// Patch `(pr, pc)` lands at row `pr * (side/p) + pc`.
pub struct PatchProjector {
    /// `[d_model, patch_size^2]`.
    pub weight: Tensor,
    /// `[n_patches, d_model]`.
    pub pos_table: Tensor,
    /// Low-rank residual on the projection; `None` until wrapped.
    pub adapter: Option<LoraAdapter>,
    pub image_side: usize,
    pub patch_size: usize,
}

impl PatchProjector {
    /// `std` scales the projection weight; `pos_std` scales the positional
    /// table. They are separate because the projection is applied to raw
    /// pixel vectors whose norm is well above one, so matching the
    /// positional scale to the *projected* content — not to the weight —
    /// keeps where-a-patch-sits visible next to what-it-contains.
    pub fn new(
        image_side: usize,
        patch_size: usize,
        d_model: usize,
        std: f64,
        pos_std: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(
            patch_size > 0 && image_side % patch_size == 0,
            "patch size {patch_size} must divide image side {image_side}"
        );
        let per_side = image_side / patch_size;
        let n_patches = per_side * per_side;
        PatchProjector {
            weight: Tensor::param_gaussian(&[d_model, patch_size * patch_size], std, rng),
            pos_table: Tensor::param_gaussian(&[n_patches, d_model], pos_std, rng),
            adapter: None,
            image_side,
            patch_size,
        }
    }

    pub fn n_patches(&self) -> usize {
        let per_side = self.image_side / self.patch_size;
        per_side * per_side
    }

    /// Cut a `[side, side]` image into `[n_patches, p^2]` rows. Pure data
    /// movement — the result is a leaf tensor.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let side = self.image_side;
        if image.shape() != [side, side] {
            return Err(Error::Data(format!(
                "expected a [{side}, {side}] image, got shape {:?}",
                image.shape()
            )));
        }
        let p = self.patch_size;
        let per_side = side / p;
        let pixels = image.data();
        let mut out = Vec::with_capacity(side * side);
        for pr in 0..per_side {
            for pc in 0..per_side {
                for dy in 0..p {
                    let row = pr * p + dy;
                    let start = row * side + pc * p;
                    out.extend_from_slice(&pixels[start..start + p]);
                }
            }
        }
        drop(pixels);
        Ok(Tensor::new(&[per_side * per_side, p * p], out))
    }

    pub fn forward(&self, image: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let patches = self.patchify(image)?;
        let mut out = patches.matmul(&self.weight.t());
        if let Some(ad) = &self.adapter {
            out = out.add(&ad.delta(&patches, ctx));
        }
        Ok(out.add(&self.pos_table))
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.pos_table"), &self.pos_table);
        if let Some(ad) = &self.adapter {
            f(format!("{prefix}.weight.lora_a"), &ad.a);
            f(format!("{prefix}.weight.lora_b"), &ad.b);
        }
    }
}
