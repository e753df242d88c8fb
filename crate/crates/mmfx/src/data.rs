//! Dataset plumbing: the example schema (square grayscale image, free-text
//! report, 14 binary labels), manifest and image file I/O, a synthetic
//! multimodal generator for desk-scale experiments, and batching.
//!
//! On-disk layout produced by the generator (and consumed by training):
//!
//! ```text
//! <dir>/train.jsonl        one JSON object per line: id, image, report, labels
//! <dir>/validation.jsonl
//! <dir>/test.jsonl
//! <dir>/corpus.txt         training reports, one per line (vocabulary source)
//! <dir>/images/<id>.pgm    binary PGM, maxval 255
//! ```
//!
//! Image paths inside a manifest are relative to the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::Tokenizer;
use crate::fusion::{CLASS_NAMES, NO_FINDING, N_CLASSES};
use crate::rng::Rng;
use crate::tensor::Tensor;

// ----------------------------------------------------------------------
// Schema
// ----------------------------------------------------------------------

/// One image+report item with its 14 binary labels.
pub struct Example {
    pub id: String,
    /// `[side, side]`, values in [0, 1].
    pub image: Tensor,
    pub report: String,
    /// Exactly 14 entries of 0/1.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

pub struct Dataset {
    pub split: Split,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Check one label vector: 14 entries, each 0/1, and the nothing-found
/// class may not coexist with any disease class. The support-devices class
/// (index 13) is not a disease, so the pair (8, 13) is allowed.
pub fn validate_labels(labels: &[u8]) -> Result<()> {
    if labels.len() != N_CLASSES {
        return Err(Error::Data(format!(
            "label vector has {} entries, expected {N_CLASSES}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&v| v > 1) {
        return Err(Error::Data(format!("label value {bad} is not 0/1")));
    }
    if labels[NO_FINDING] == 1 {
        let conflict = (0..N_CLASSES)
            .filter(|&c| c != NO_FINDING && c != 13)
            .find(|&c| labels[c] == 1);
        if let Some(c) = conflict {
            return Err(Error::Data(format!(
                "labels mark {} together with disease class {} ({})",
                CLASS_NAMES[NO_FINDING], c, CLASS_NAMES[c]
            )));
        }
    }
    Ok(())
}

// ----------------------------------------------------------------------
// PGM images
// ----------------------------------------------------------------------

/// Write `image` (values in [0, 1]) as a binary PGM with maxval 255. Values
/// are rounded to the nearest byte.
pub fn save_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Data(format!("image to save must be square, got {shape:?}")));
    }
    let side = shape[0];
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    for &v in image.data().iter() {
        bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a binary PGM ("P5", maxval 255, square) into a `[side, side]`
/// tensor with pixels scaled to [0, 1] by /255. `#` comment lines in the
/// header are accepted.
pub fn load_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));

    // Header: three whitespace-separated tokens (magic, width, height,
    // maxval — magic counted separately), then one whitespace byte, then
    // raw pixel data. '#' starts a comment running to end of line.
    let mut at = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while at < bytes.len() {
            match bytes[at] {
                b' ' | b'\t' | b'\r' | b'\n' => at += 1,
                b'#' => {
                    while at < bytes.len() && bytes[at] != b'\n' {
                        at += 1;
                    }
                }
                _ => break,
            }
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::Data("unexpected end of header".to_string()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..at]).into_owned())
    };

    let magic = token(&bytes).map_err(|e| bad(e.to_string()))?;
    if magic != "P5" {
        return Err(bad(format!("wrong magic {magic:?}, expected binary graymap \"P5\"")));
    }
    let width: usize = token(&bytes)
        .map_err(|e| bad(e.to_string()))?
        .parse()
        .map_err(|_| bad("unreadable width".to_string()))?;
    let height: usize = token(&bytes)
        .map_err(|e| bad(e.to_string()))?
        .parse()
        .map_err(|_| bad("unreadable height".to_string()))?;
    let maxval: usize = token(&bytes)
        .map_err(|e| bad(e.to_string()))?
        .parse()
        .map_err(|_| bad("unreadable maxval".to_string()))?;
    if width != height {
        return Err(bad(format!("image is {width}x{height}, expected square")));
    }
    if maxval != 255 {
        return Err(bad(format!("maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if at >= bytes.len() || !bytes[at].is_ascii_whitespace() {
        return Err(bad("missing separator before pixel data".to_string()));
    }
    at += 1;
    let pixels = &bytes[at..];
    if pixels.len() != width * height {
        return Err(bad(format!(
            "pixel payload holds {} bytes, expected {}",
            pixels.len(),
            width * height
        )));
    }
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(&[height, width], data))
}

// ----------------------------------------------------------------------
// Manifests
// ----------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct ManifestLine {
    id: String,
    image: String,
    report: String,
    labels: Vec<u8>,
}

/// Load a JSON-lines manifest; image paths resolve relative to the
/// manifest's directory. Examples keep file order.
pub fn load_manifest(path: &Path, split: Split) -> Result<Dataset> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let row: ManifestLine = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{} line {lineno}: malformed entry: {e}", path.display()))
        })?;
        validate_labels(&row.labels).map_err(|e| {
            Error::Data(format!("{} line {lineno}: {e}", path.display()))
        })?;
        if !seen.insert(row.id.clone()) {
            return Err(Error::Data(format!(
                "{} line {lineno}: duplicate id {:?}",
                path.display(),
                row.id
            )));
        }
        let image = load_pgm(&dir.join(&row.image))?;
        examples.push(Example { id: row.id, image, report: row.report, labels: row.labels });
    }
    Ok(Dataset { split, examples })
}

/// Write a dataset as `<dir>/<split>.jsonl` plus one PGM per example under
/// `<dir>/images/`. Returns the manifest path.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<std::path::PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut body = String::new();
    for ex in &dataset.examples {
        let rel = format!("images/{}.pgm", ex.id);
        save_pgm(&dir.join(&rel), &ex.image)?;
        let line = ManifestLine {
            id: ex.id.clone(),
            image: rel,
            report: ex.report.clone(),
            labels: ex.labels.clone(),
        };
        body.push_str(&serde_json::to_string(&line).expect("manifest line serializes"));
        body.push('\n');
    }
    let manifest = dir.join(format!("{}.jsonl", dataset.split));
    std::fs::write(&manifest, body).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

// ----------------------------------------------------------------------
// Synthetic generator
// ----------------------------------------------------------------------

/// Recipe for a synthetic multimodal dataset. Each configurable class
/// carries its evidence in exactly one channel set: report text only,
/// image patches only, or both. The nothing-found class is not
/// configurable: it always announces itself in the report text, the way
/// a clean study is dictated rather than left implicit.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Training-split size; validation and test scale as 3% and 12%.
    pub n_examples: usize,
    /// Image side length in pixels.
    pub side: usize,
    /// Classes whose evidence appears only in the report text.
    pub text_classes: Vec<usize>,
    /// Classes whose evidence appears only in the image.
    pub vision_classes: Vec<usize>,
    /// Classes with evidence in both channels.
    pub both_classes: Vec<usize>,
    /// Per-class, per-channel chance that evidence presence is flipped.
    pub noise_rate: f64,
    /// Independent per-class positive rate (nothing-found is derived).
    pub positive_rate: f64,
    /// Chance an example is forced all-negative before the per-class
    /// draws, so the nothing-found class keeps a learnable prevalence.
    pub blank_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_examples: 400,
            side: 32,
            text_classes: vec![0, 2, 5, 7, 11],
            vision_classes: vec![1, 3, 6, 10, 12],
            both_classes: vec![4, 9, 13],
            noise_rate: 0.05,
            positive_rate: 0.25,
            blank_rate: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// The three channel sets must partition all classes except the
    /// nothing-found index.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = HashSet::new();
        for (name, set) in [
            ("text_classes", &self.text_classes),
            ("vision_classes", &self.vision_classes),
            ("both_classes", &self.both_classes),
        ] {
            for &c in set {
                if c >= N_CLASSES {
                    problems.push(format!("{name} holds out-of-range class {c}"));
                } else if c == NO_FINDING {
                    problems.push(format!(
                        "{name} may not claim the nothing-found class ({NO_FINDING})"
                    ));
                } else if !seen.insert(c) {
                    problems.push(format!("class {c} appears in more than one channel set"));
                }
            }
        }
        if problems.is_empty() && seen.len() != N_CLASSES - 1 {
            problems.push(format!(
                "channel sets cover {} classes, expected {} (all but the nothing-found index)",
                seen.len(),
                N_CLASSES - 1
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            problems.push(format!("noise_rate {} outside [0, 1)", self.noise_rate));
        }
        if !(0.0 < self.positive_rate && self.positive_rate < 1.0) {
            problems.push(format!("positive_rate {} outside (0, 1)", self.positive_rate));
        }
        if !(0.0..1.0).contains(&self.blank_rate) {
            problems.push(format!("blank_rate {} outside [0, 1)", self.blank_rate));
        }
        if self.side == 0 || self.side % PATCH_GRID != 0 {
            problems.push(format!("side {} must be a positive multiple of {PATCH_GRID}", self.side));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn validation_size(&self) -> usize {
        self.n_examples * 3 / 100
    }

    pub fn test_size(&self) -> usize {
        self.n_examples * 12 / 100
    }

    fn has_text_channel(&self, class: usize) -> bool {
        self.text_classes.contains(&class) || self.both_classes.contains(&class)
    }

    fn has_vision_channel(&self, class: usize) -> bool {
        self.vision_classes.contains(&class) || self.both_classes.contains(&class)
    }
}

/// The image is divided into a 4×4 grid of evidence regions regardless of
/// resolution; each vision-channel class owns one region.
const PATCH_GRID: usize = 4;

/// Signal word for a class: its name lowercased with separators removed, so
/// it always survives tokenization as a single distinctive token.
pub fn theme_word(class: usize) -> String {
    CLASS_NAMES[class].to_lowercase().replace('-', "")
}

/// Rank of a vision-channel class among all vision-channel classes in
/// ascending class order; indexes both its evidence region and its texture.
fn vision_rank(spec: &SyntheticSpec, class: usize) -> usize {
    let mut vision_ranked: Vec<usize> =
        (0..N_CLASSES).filter(|&c| spec.has_vision_channel(c)).collect();
    vision_ranked.sort_unstable();
    vision_ranked.iter().position(|&c| c == class).expect("class has vision channel")
}

/// Evidence region (grid cell index in 0..16) for a vision-channel class.
/// Classes take even cells in ascending class order, leaving dark cells
/// between bright ones.
fn evidence_cell(spec: &SyntheticSpec, class: usize) -> usize {
    vision_rank(spec, class) * 2
}

/// Class-specific texture value at offset `j` within an evidence region:
/// pixel j of class-rank k follows the Walsh function of index k+1, half
/// the pixels at 0.3 and half at 0.9. Distinct ranks give orthogonal
/// patterns, so each finding has its own visual character — and the sum
/// of a region's pixels identifies the finding, which keeps class
/// identity visible even to a readout that collapses positions.
fn texture_value(rank: usize, j: usize) -> f64 {
    let bit = ((j & (rank + 1)).count_ones() & 1) as f64;
    0.3 + 0.6 * bit
}

/// Neutral report filler; disjoint from every theme word.
const FILLER: [&str; 20] = [
    "the", "chest", "image", "shows", "stable", "appearance", "with", "clear", "margins",
    "noted", "overall", "review", "exam", "radiograph", "views", "comparison", "prior",
    "unchanged", "mild", "moderate",
];

fn generate_example(spec: &SyntheticSpec, id: String, rng: &mut Rng) -> Example {
    // 1. Labels: a blank draw may force the all-negative outcome up front;
    // otherwise every class except nothing-found draws independently.
    // Nothing-found marks the all-negative result either way.
    let blank = rng.next_f64() < spec.blank_rate;
    let mut labels = vec![0u8; N_CLASSES];
    if !blank {
        for c in 0..N_CLASSES {
            if c != NO_FINDING && rng.next_f64() < spec.positive_rate {
                labels[c] = 1;
            }
        }
    }
    if labels.iter().all(|&v| v == 0) {
        labels[NO_FINDING] = 1;
    }

    // 2. Evidence presence per class and channel: the label, flipped with
    // probability noise_rate. Draw order is fixed (class asc, text first).
    // The nothing-found class always speaks through the report — a clean
    // study says so in words — so its absence-of-findings label carries
    // positive evidence instead of being a pure negation the readout
    // would have to reconstruct from every other class.
    let mut text_evidence = Vec::new();
    let mut vision_evidence = Vec::new();
    for c in 0..N_CLASSES {
        if c == NO_FINDING || spec.has_text_channel(c) {
            let flip = rng.next_f64() < spec.noise_rate;
            if (labels[c] == 1) != flip {
                text_evidence.push(c);
            }
        }
        if spec.has_vision_channel(c) {
            let flip = rng.next_f64() < spec.noise_rate;
            if (labels[c] == 1) != flip {
                vision_evidence.push(c);
            }
        }
    }

    // 3. Report: each evident theme word appears twice among neutral
    // filler, shuffled. Sized to fit the position budget (class token +
    // 23 words) without truncation.
    let mut words: Vec<String> = vec!["findings".to_string()];
    let n_filler = 3 + rng.next_below(3); // 3..=5
    let n_filler = n_filler.min(22usize.saturating_sub(2 * text_evidence.len()));
    for _ in 0..n_filler {
        words.push(FILLER[rng.next_below(FILLER.len())].to_string());
    }
    for &c in &text_evidence {
        words.push(theme_word(c));
        words.push(theme_word(c));
    }
    rng.shuffle(&mut words[1..]);
    let report = words.join(" ");

    // 4. Image: dim uniform background; each evident class fills its
    // region with its own half-bright texture (see texture_value).
    // Pixels are byte-quantized so file round trips are exact.
    let cell = spec.side / PATCH_GRID;
    let mut pixels = vec![0.0f64; spec.side * spec.side];
    for p in pixels.iter_mut() {
        *p = rng.next_f64() * 0.2;
    }
    for &c in &vision_evidence {
        let rank = vision_rank(spec, c);
        let idx = rank * 2;
        let (row0, col0) = (idx / PATCH_GRID * cell, idx % PATCH_GRID * cell);
        for (j, (r, col)) in
            (row0..row0 + cell).flat_map(|r| (col0..col0 + cell).map(move |c| (r, c))).enumerate()
        {
            pixels[r * spec.side + col] = texture_value(rank, j);
        }
    }
    for p in pixels.iter_mut() {
        *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }

    Example { id, image: Tensor::new(&[spec.side, spec.side], pixels), report, labels }
}

/// Generate the three splits from one seed. Identical specs give identical
/// datasets, pixel for pixel.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = Rng::seed_from(spec.seed);
    let split = |tag: Split, n: usize, rng: &mut Rng| Dataset {
        split: tag,
        examples: (0..n).map(|i| generate_example(spec, format!("{tag}_{i:04}"), rng)).collect(),
    };
    let train = split(Split::Train, spec.n_examples, &mut rng);
    let validation = split(Split::Validation, spec.validation_size(), &mut rng);
    let test = split(Split::Test, spec.test_size(), &mut rng);
    Ok((train, validation, test))
}

/// Vocabulary corpus for a dataset: its reports, one per line.
pub fn corpus_lines(dataset: &Dataset) -> Vec<String> {
    dataset.examples.iter().map(|e| e.report.clone()).collect()
}

// ----------------------------------------------------------------------
// Batching
// ----------------------------------------------------------------------

/// One training/evaluation batch in dataset order (or shuffled order).
pub struct Batch {
    pub ids: Vec<String>,
    /// Token-id rows, each `seq_len` long.
    pub tokens: Vec<Vec<usize>>,
    pub images: Vec<Tensor>,
    /// 0/1 rows, each `n_classes` long.
    pub labels: Vec<Vec<u8>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Labels as a constant `[len, n_classes]` tensor for the loss.
    pub fn label_tensor(&self) -> Tensor {
        let rows = self.labels.len();
        let cols = self.labels.first().map_or(0, Vec::len);
        let data = self.labels.iter().flatten().map(|&v| v as f64).collect();
        Tensor::new(&[rows, cols], data)
    }
}

/// Cut a dataset into batches of `batch_size` (final partial batch kept).
/// With `shuffle`, the example order is permuted by `rng` first.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    tokenizer: &Tokenizer,
    seq_len: usize,
    shuffle: bool,
    rng: &mut Rng,
) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch = Batch {
                ids: Vec::with_capacity(chunk.len()),
                tokens: Vec::with_capacity(chunk.len()),
                images: Vec::with_capacity(chunk.len()),
                labels: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let ex = &dataset.examples[i];
                batch.ids.push(ex.id.clone());
                batch.tokens.push(tokenizer.encode(&ex.report, seq_len));
                batch.images.push(ex.image.clone());
                batch.labels.push(ex.labels.clone());
            }
            batch
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec { n_examples: 24, side: 8, seed: 42, ..SyntheticSpec::default() }
    }

    fn load_err(path: &Path, split: Split) -> Error {
        match load_manifest(path, split) {
            Ok(_) => panic!("manifest {} loaded unexpectedly", path.display()),
            Err(e) => e,
        }
    }

    #[test]
    fn label_validation_enforces_schema_and_exclusivity() {
        let mut ok = vec![0u8; N_CLASSES];
        ok[0] = 1;
        ok[9] = 1;
        validate_labels(&ok).unwrap();

        let err = validate_labels(&vec![0u8; 13]).unwrap_err();
        assert!(err.to_string().contains("13"), "got: {err}");

        let mut bad_value = vec![0u8; N_CLASSES];
        bad_value[2] = 2;
        assert!(validate_labels(&bad_value).is_err());

        let mut conflict = vec![0u8; N_CLASSES];
        conflict[NO_FINDING] = 1;
        conflict[3] = 1;
        let err = validate_labels(&conflict).unwrap_err();
        assert!(err.to_string().contains(CLASS_NAMES[3]), "got: {err}");

        // Support devices are not a disease: the pair is legal.
        let mut devices = vec![0u8; N_CLASSES];
        devices[NO_FINDING] = 1;
        devices[13] = 1;
        validate_labels(&devices).unwrap();
    }

    #[test]
    fn pgm_bytes_scale_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        std::fs::write(&path, [b"P5\n2 2\n255\n".as_slice(), &[0u8, 128, 255, 64]].concat())
            .unwrap();
        let img = load_pgm(&path).unwrap();
        assert_eq!(img.shape(), &[2, 2]);
        assert_eq!(img.to_vec(), [0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn pgm_extremes_map_to_zero_and_one() {
        let dir = tempfile::tempdir().unwrap();
        for (byte, want) in [(0u8, 0.0), (255u8, 1.0)] {
            let path = dir.path().join(format!("v{byte}.pgm"));
            std::fs::write(&path, [b"P5\n2 2\n255\n".as_slice(), &[byte; 4]].concat()).unwrap();
            assert_eq!(load_pgm(&path).unwrap().to_vec(), [want; 4]);
        }
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(
            &path,
            [b"P5\n# made by hand\n2 2\n# maxval next\n255\n".as_slice(), &[9u8; 4]].concat(),
        )
        .unwrap();
        assert_eq!(load_pgm(&path).unwrap().shape(), &[2, 2]);
    }

    #[test]
    fn pgm_rejects_wrong_magic_shape_maxval_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let cases: [(&str, Vec<u8>); 4] = [
            ("magic", [b"P2\n2 2\n255\n".as_slice(), &[0u8; 4]].concat()),
            ("square", [b"P5\n2 3\n255\n".as_slice(), &[0u8; 6]].concat()),
            ("maxval", [b"P5\n2 2\n128\n".as_slice(), &[0u8; 4]].concat()),
            ("payload", [b"P5\n2 2\n255\n".as_slice(), &[0u8; 3]].concat()),
        ];
        for (what, bytes) in cases {
            let path = dir.path().join(format!("{what}.pgm"));
            std::fs::write(&path, bytes).unwrap();
            assert!(load_pgm(&path).is_err(), "{what} case loaded");
        }
    }

    #[test]
    fn pgm_round_trip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.pgm");
        let img = Tensor::new(&[2, 2], vec![0.0, 64.0 / 255.0, 128.0 / 255.0, 1.0]);
        save_pgm(&path, &img).unwrap();
        assert_eq!(load_pgm(&path).unwrap().to_vec(), img.to_vec());
    }

    #[test]
    fn empty_manifest_loads_as_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = load_manifest(&path, Split::Train).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn manifest_errors_name_the_offending_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"id":"a","image":"a.pgm","report":"fine","labels":[0,0,0,0,0,0,0,0,1,0,0,0,0,0]}"#;
        let short = r#"{"id":"b","image":"a.pgm","report":"fine","labels":[0,0,0,0,0,0,0,0,1,0,0,0,0]}"#;
        std::fs::write(&path, format!("{good}\n{short}\n")).unwrap();
        save_pgm(&dir.path().join("a.pgm"), &Tensor::zeros(&[2, 2])).unwrap();
        let err = load_err(&path, Split::Train);
        assert!(err.to_string().contains("line 2"), "got: {err}");

        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        let err = load_err(&path, Split::Train);
        assert!(err.to_string().contains("line 2"), "got: {err}");

        std::fs::write(&path, format!("{good}\n{good}\n")).unwrap();
        let err = load_err(&path, Split::Train);
        assert!(err.to_string().contains("duplicate"), "got: {err}");
    }

    #[test]
    fn manifest_missing_image_is_an_io_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let line = r#"{"id":"a","image":"gone.pgm","report":"x","labels":[0,0,0,0,0,0,0,0,1,0,0,0,0,0]}"#;
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_err(&path, Split::Train);
        assert!(err.to_string().contains("gone.pgm"), "got: {err}");
    }

    #[test]
    fn dataset_save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _, _) = generate_synthetic(&tiny_spec()).unwrap();
        let manifest = save_dataset(dir.path(), &train).unwrap();
        let loaded = load_manifest(&manifest, Split::Train).unwrap();
        assert_eq!(loaded.len(), train.len());
        for (a, b) in train.examples.iter().zip(&loaded.examples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.report, b.report);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.image.to_vec(), b.image.to_vec(), "pixels drifted for {}", a.id);
        }
    }

    #[test]
    fn generator_is_deterministic_and_sized_by_the_split_rule() {
        let spec = SyntheticSpec { n_examples: 100, side: 8, seed: 9, ..Default::default() };
        let (tr1, va1, te1) = generate_synthetic(&spec).unwrap();
        let (tr2, va2, te2) = generate_synthetic(&spec).unwrap();
        assert_eq!((tr1.len(), va1.len(), te1.len()), (100, 3, 12));
        for (a, b) in [(&tr1, &tr2), (&va1, &va2), (&te1, &te2)] {
            for (x, y) in a.examples.iter().zip(&b.examples) {
                assert_eq!(x.id, y.id);
                assert_eq!(x.report, y.report);
                assert_eq!(x.labels, y.labels);
                assert_eq!(x.image.to_vec(), y.image.to_vec());
            }
        }
        // The reference scale: 400 training examples give 12 and 48.
        let spec = SyntheticSpec { n_examples: 400, ..Default::default() };
        assert_eq!((spec.validation_size(), spec.test_size()), (12, 48));
        // Empty generation is legal and empty.
        let spec = SyntheticSpec { n_examples: 0, side: 8, ..Default::default() };
        let (tr, va, te) = generate_synthetic(&spec).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (0, 0, 0));
    }

    #[test]
    fn generator_rejects_broken_partitions() {
        let mut spec = tiny_spec();
        spec.text_classes.push(1); // already a vision class
        assert!(generate_synthetic(&spec).is_err());

        let mut spec = tiny_spec();
        spec.vision_classes.retain(|&c| c != 12); // 12 now uncovered
        let Err(err) = generate_synthetic(&spec) else { panic!("uncovered class accepted") };
        assert!(err.to_string().contains("cover"), "got: {err}");

        let mut spec = tiny_spec();
        spec.both_classes.push(NO_FINDING);
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn every_generated_label_vector_satisfies_the_invariants() {
        let spec = SyntheticSpec { n_examples: 300, side: 8, seed: 3, ..Default::default() };
        let (train, val, test) = generate_synthetic(&spec).unwrap();
        for ds in [&train, &val, &test] {
            for ex in &ds.examples {
                validate_labels(&ex.labels).unwrap();
            }
        }
    }

    #[test]
    fn label_marginals_match_the_positive_rate() {
        let spec = SyntheticSpec { n_examples: 10_000, side: 8, seed: 17, ..Default::default() };
        let (train, _, _) = generate_synthetic(&spec).unwrap();
        for c in 0..N_CLASSES {
            let rate = train.examples.iter().filter(|e| e.labels[c] == 1).count() as f64
                / train.len() as f64;
            if c == NO_FINDING {
                // Forced blanks (10%) plus natural all-negative draws:
                // 0.1 + 0.9 · 0.75^13 ≈ 0.121.
                assert!((0.09..0.16).contains(&rate), "nothing-found rate {rate}");
            } else {
                // Positive only on non-blank examples: 0.9 · 0.25 = 0.225.
                assert!((rate - 0.225).abs() < 0.02, "class {c} rate {rate}");
            }
        }
    }

    #[test]
    fn noiseless_evidence_tracks_labels_exactly() {
        let spec = SyntheticSpec {
            n_examples: 200,
            side: 8,
            noise_rate: 0.0,
            seed: 5,
            ..Default::default()
        };
        let (train, _, _) = generate_synthetic(&spec).unwrap();
        let both_class = spec.both_classes[0];
        let word = theme_word(both_class);
        let cell = evidence_cell(&spec, both_class);
        let cell_px = spec.side / PATCH_GRID;
        let (r0, c0) = (cell / PATCH_GRID * cell_px, cell % PATCH_GRID * cell_px);
        let vision_only = spec.vision_classes[0];
        let clean_word = theme_word(NO_FINDING);
        for ex in &train.examples {
            let has_word = ex.report.split(' ').any(|w| w == word);
            // A painted region is textured in [0.3, 0.9]; background stays
            // under 0.21 even after byte rounding, so the region's dimmest
            // pixel separates the two cases.
            let px = ex.image.to_vec();
            let cell_min = (r0..r0 + cell_px)
                .flat_map(|r| {
                    let px = &px;
                    (c0..c0 + cell_px).map(move |c| px[r * spec.side + c])
                })
                .fold(f64::INFINITY, f64::min);
            let bright = cell_min > 0.25;
            assert_eq!(has_word, ex.labels[both_class] == 1, "text channel broke for {}", ex.id);
            assert_eq!(bright, ex.labels[both_class] == 1, "vision channel broke for {}", ex.id);
            // Channel exclusivity: a vision-only class never leaks into text.
            assert!(!ex.report.contains(&theme_word(vision_only)));
            // The nothing-found class states itself in the report.
            let says_clean = ex.report.split(' ').any(|w| w == clean_word);
            assert_eq!(says_clean, ex.labels[NO_FINDING] == 1, "clean-study phrase broke for {}", ex.id);
        }
        // A text-only class has no evidence region at all: the image stays
        // dim outside the vision-channel cells in every negative example.
        let vision_cells: Vec<usize> = (0..N_CLASSES)
            .filter(|&c| spec.has_vision_channel(c))
            .map(|c| evidence_cell(&spec, c))
            .collect();
        for ex in &train.examples {
            let px = ex.image.to_vec();
            for cell in 0..PATCH_GRID * PATCH_GRID {
                if !vision_cells.contains(&cell) {
                    let (r0, c0) = (cell / PATCH_GRID * cell_px, cell % PATCH_GRID * cell_px);
                    // Background tops out at 0.2 before byte quantization,
                    // which can nudge it up by at most half a byte step.
                    assert!(px[r0 * spec.side + c0] <= 0.21, "non-evidence cell brightened");
                }
            }
        }
    }

    #[test]
    fn reports_fit_the_position_budget() {
        let (train, _, _) = generate_synthetic(&tiny_spec()).unwrap();
        for ex in &train.examples {
            assert!(
                ex.report.split(' ').count() <= 23,
                "report overflows the 24-position budget: {}",
                ex.report
            );
        }
    }

    #[test]
    fn batches_cover_the_dataset_exactly_for_all_sizes() {
        let (train, _, _) = generate_synthetic(&tiny_spec()).unwrap();
        let small = Dataset { split: Split::Train, examples: train.examples.into_iter().take(7).collect() };
        let tok = Tokenizer::build_vocab(&corpus_lines(&small), 64);
        for bs in 1..=8 {
            let mut rng = Rng::seed_from(1);
            let batches = batch_iter(&small, bs, &tok, 24, true, &mut rng);
            let mut ids: Vec<String> =
                batches.iter().flat_map(|b| b.ids.iter().cloned()).collect();
            assert_eq!(ids.len(), 7, "batch size {bs} dropped or duplicated examples");
            ids.sort();
            let mut want: Vec<String> = small.examples.iter().map(|e| e.id.clone()).collect();
            want.sort();
            assert_eq!(ids, want);
        }
        // 7 examples at size 3 → 3, 3, 1.
        let mut rng = Rng::seed_from(1);
        let sizes: Vec<usize> =
            batch_iter(&small, 3, &tok, 24, false, &mut rng).iter().map(Batch::len).collect();
        assert_eq!(sizes, [3, 3, 1]);
    }

    #[test]
    fn unshuffled_batches_keep_dataset_order_and_shuffles_repeat_by_seed() {
        let (train, _, _) = generate_synthetic(&tiny_spec()).unwrap();
        let tok = Tokenizer::build_vocab(&corpus_lines(&train), 64);
        let mut rng = Rng::seed_from(2);
        let plain = batch_iter(&train, 5, &tok, 24, false, &mut rng);
        let flat: Vec<&String> = plain.iter().flat_map(|b| b.ids.iter()).collect();
        let want: Vec<&String> = train.examples.iter().map(|e| &e.id).collect();
        assert_eq!(flat, want);

        let shuffled = |seed: u64| -> Vec<String> {
            let mut rng = Rng::seed_from(seed);
            batch_iter(&train, 5, &tok, 24, true, &mut rng)
                .iter()
                .flat_map(|b| b.ids.iter().cloned())
                .collect()
        };
        assert_eq!(shuffled(7), shuffled(7));
        assert_ne!(shuffled(7), shuffled(8));
    }

    #[test]
    fn label_tensor_lays_out_rows_in_batch_order() {
        let (train, _, _) = generate_synthetic(&tiny_spec()).unwrap();
        let tok = Tokenizer::build_vocab(&corpus_lines(&train), 64);
        let mut rng = Rng::seed_from(3);
        let batch = &batch_iter(&train, 4, &tok, 24, false, &mut rng)[0];
        let t = batch.label_tensor();
        assert_eq!(t.shape(), &[4, N_CLASSES]);
        let flat = t.to_vec();
        for (i, labels) in batch.labels.iter().enumerate() {
            for (j, &v) in labels.iter().enumerate() {
                assert_eq!(flat[i * N_CLASSES + j], v as f64);
            }
        }
    }
}
