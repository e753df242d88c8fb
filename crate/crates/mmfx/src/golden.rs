//! Golden fixtures: six frozen input/output pairs covering the core
//! forward-pass formulas — scaled dot-product attention, multi-head
//! attention, the gated feed-forward, the residual attention half-layer,
//! one full pre-norm layer, and a low-rank-adapted linear layer.
//!
//! Each fixture is one MMFX container under `fixtures/` holding `in.*`
//! tensors and one `out.*` tensor, plus `index.json` listing the set. A
//! check loads the file, reruns the library math on the stored inputs, and
//! compares against the stored output. Inputs are quantized to f32 before
//! outputs are computed, so recomputation from the (f32) file reproduces
//! the stored result to within output-side f32 rounding alone.
//!
//! Regenerate with `cargo run -p mmfx --example regen_goldens`; the files
//! are byte-stable, so a regeneration after any refactor should produce
//! zero diffs.

use std::collections::HashMap;
use std::path::Path;

use crate::checkpoint::{load_file, save_file, StateEntries};
use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::nn::{
    scaled_dot_attention, AttentionBlock, FeedForward, ForwardCtx, LinearLayer,
    TransformerLayer, NORM_EPS,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tolerances::FIXTURE_F32;

/// Names of the six cases, in index order.
pub const CASE_NAMES: [&str; 6] = [
    "attention",
    "multi_head",
    "feed_forward",
    "half_layer",
    "full_layer",
    "lora_update",
];

/// One line of `index.json`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub file: String,
    pub tolerance: f64,
    pub note: String,
}

fn note_for(name: &str) -> &'static str {
    match name {
        "attention" => "softmax(q kT / sqrt(d)) v on one head",
        "multi_head" => "projected heads attending side by side, then re-mixed",
        "feed_forward" => "silu(x w1T) * (x w3T) pushed through w2",
        "half_layer" => "x + attention over the rms-normed x",
        "full_layer" => "pre-norm attention residual then pre-norm feed-forward residual",
        "lora_update" => "dense forward plus scale * x aT bT from a rank-3 adapter",
        _ => unreachable!("unknown case"),
    }
}

// ----------------------------------------------------------------------
// Deterministic inputs
// ----------------------------------------------------------------------

/// Round through f32 so a value survives container storage bit-for-bit.
fn q32(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| q32(rng.next_gaussian() * std)).collect();
    Tensor::new(shape, data)
}

fn entry(name: &str, t: &Tensor) -> (String, Vec<usize>, Vec<f64>) {
    (name.to_string(), t.shape().to_vec(), t.to_vec())
}

/// The frozen inputs for one case. Each case draws from its own seed, so
/// cases can be edited independently without disturbing the others.
pub fn case_inputs(name: &str) -> StateEntries {
    let mut entries = Vec::new();
    match name {
        "attention" => {
            let mut rng = Rng::seed_from(101);
            entries.push(entry("in.q", &gaussian(&[3, 4], 0.5, &mut rng)));
            entries.push(entry("in.k", &gaussian(&[5, 4], 0.5, &mut rng)));
            entries.push(entry("in.v", &gaussian(&[5, 4], 0.5, &mut rng)));
        }
        "multi_head" => {
            let mut rng = Rng::seed_from(102);
            entries.push(entry("in.x_q", &gaussian(&[4, 8], 0.5, &mut rng)));
            entries.push(entry("in.x_kv", &gaussian(&[6, 8], 0.5, &mut rng)));
            for w in ["wq", "wk", "wv", "wo"] {
                entries.push(entry(&format!("in.{w}.weight"), &gaussian(&[8, 8], 0.2, &mut rng)));
                entries.push(entry(&format!("in.{w}.bias"), &gaussian(&[8], 0.1, &mut rng)));
            }
        }
        "feed_forward" => {
            let mut rng = Rng::seed_from(103);
            entries.push(entry("in.x", &gaussian(&[3, 6], 0.5, &mut rng)));
            for (w, shape) in [("w1", [10, 6]), ("w3", [10, 6]), ("w2", [6, 10])] {
                entries.push(entry(&format!("in.{w}.weight"), &gaussian(&shape, 0.2, &mut rng)));
                entries.push(entry(&format!("in.{w}.bias"), &gaussian(&[shape[0]], 0.1, &mut rng)));
            }
        }
        "half_layer" => {
            let mut rng = Rng::seed_from(104);
            entries.push(entry("in.x", &gaussian(&[4, 8], 0.5, &mut rng)));
            entries.push(entry("in.norm_gain", &gaussian(&[8], 0.2, &mut rng).affine(1.0, 1.0)));
            for w in ["wq", "wk", "wv", "wo"] {
                entries.push(entry(&format!("in.{w}.weight"), &gaussian(&[8, 8], 0.2, &mut rng)));
                entries.push(entry(&format!("in.{w}.bias"), &gaussian(&[8], 0.1, &mut rng)));
            }
        }
        "full_layer" => {
            let mut rng = Rng::seed_from(105);
            entries.push(entry("in.x", &gaussian(&[4, 8], 0.5, &mut rng)));
            entries.push(entry("in.norm1_gain", &gaussian(&[8], 0.2, &mut rng).affine(1.0, 1.0)));
            entries.push(entry("in.norm2_gain", &gaussian(&[8], 0.2, &mut rng).affine(1.0, 1.0)));
            for w in ["wq", "wk", "wv", "wo"] {
                entries.push(entry(&format!("in.{w}.weight"), &gaussian(&[8, 8], 0.2, &mut rng)));
                entries.push(entry(&format!("in.{w}.bias"), &gaussian(&[8], 0.1, &mut rng)));
            }
            for (w, shape) in [("w1", [14, 8]), ("w3", [14, 8]), ("w2", [8, 14])] {
                entries.push(entry(&format!("in.{w}.weight"), &gaussian(&shape, 0.2, &mut rng)));
                entries.push(entry(&format!("in.{w}.bias"), &gaussian(&[shape[0]], 0.1, &mut rng)));
            }
        }
        "lora_update" => {
            let mut rng = Rng::seed_from(106);
            entries.push(entry("in.x", &gaussian(&[4, 7], 0.5, &mut rng)));
            entries.push(entry("in.weight", &gaussian(&[5, 7], 0.2, &mut rng)));
            entries.push(entry("in.bias", &gaussian(&[5], 0.1, &mut rng)));
            entries.push(entry("in.lora_a", &gaussian(&[3, 7], 0.3, &mut rng)));
            // A deliberately nonzero up-projection: the update must move
            // the output, unlike the transparent training start.
            entries.push(entry("in.lora_b", &gaussian(&[5, 3], 0.3, &mut rng)));
            entries.push(("in.scale".to_string(), vec![1], vec![q32(16.0 / 3.0)]));
        }
        other => panic!("unknown golden case {other:?}"),
    }
    // The affine shift above (norm gains near 1) can leave f64 residue.
    for (_, _, values) in entries.iter_mut() {
        for v in values.iter_mut() {
            *v = q32(*v);
        }
    }
    entries
}

// ----------------------------------------------------------------------
// Recomputation
// ----------------------------------------------------------------------

fn lookup<'a>(map: &'a HashMap<&str, &(String, Vec<usize>, Vec<f64>)>, name: &str) -> Result<Tensor> {
    let (_, shape, values) = map
        .get(name)
        .ok_or_else(|| Error::Checkpoint(format!("fixture lacks tensor {name:?}")))?;
    Ok(Tensor::new(shape, values.clone()))
}

fn linear(map: &HashMap<&str, &(String, Vec<usize>, Vec<f64>)>, stem: &str) -> Result<LinearLayer> {
    Ok(LinearLayer {
        weight: lookup(map, &format!("{stem}.weight"))?,
        bias: Some(lookup(map, &format!("{stem}.bias"))?),
        adapter: None,
    })
}

fn attention_block(
    map: &HashMap<&str, &(String, Vec<usize>, Vec<f64>)>,
    n_heads: usize,
) -> Result<AttentionBlock> {
    Ok(AttentionBlock {
        wq: linear(map, "in.wq")?,
        wk: linear(map, "in.wk")?,
        wv: linear(map, "in.wv")?,
        wo: linear(map, "in.wo")?,
        n_heads,
    })
}

/// Rerun the case's formula on stored inputs. The returned tensor is what
/// the fixture's `out.*` entry must hold.
pub fn recompute(name: &str, inputs: &StateEntries) -> Result<Tensor> {
    let map: HashMap<&str, &(String, Vec<usize>, Vec<f64>)> =
        inputs.iter().map(|e| (e.0.as_str(), e)).collect();
    let mut rng = Rng::seed_from(0); // eval mode draws nothing
    let mut ctx = ForwardCtx::eval(&mut rng);
    match name {
        "attention" => {
            let (q, k, v) = (lookup(&map, "in.q")?, lookup(&map, "in.k")?, lookup(&map, "in.v")?);
            Ok(scaled_dot_attention(&q, &k, &v))
        }
        "multi_head" => {
            let block = attention_block(&map, 2)?;
            let x_q = lookup(&map, "in.x_q")?;
            let x_kv = lookup(&map, "in.x_kv")?;
            Ok(block.forward(&x_q, &x_kv, &mut ctx))
        }
        "feed_forward" => {
            let ff = FeedForward {
                w1: linear(&map, "in.w1")?,
                w2: linear(&map, "in.w2")?,
                w3: linear(&map, "in.w3")?,
                form: Default::default(),
            };
            Ok(ff.forward(&lookup(&map, "in.x")?, &mut ctx))
        }
        "half_layer" => {
            let block = attention_block(&map, 2)?;
            let x = lookup(&map, "in.x")?;
            let gain = lookup(&map, "in.norm_gain")?;
            let normed = x.rms_norm(&gain, NORM_EPS);
            Ok(x.add(&block.forward(&normed, &normed, &mut ctx)))
        }
        "full_layer" => {
            let layer = TransformerLayer {
                attn: attention_block(&map, 2)?,
                ff: FeedForward {
                    w1: linear(&map, "in.w1")?,
                    w2: linear(&map, "in.w2")?,
                    w3: linear(&map, "in.w3")?,
                    form: Default::default(),
                },
                norm1_gain: lookup(&map, "in.norm1_gain")?,
                norm2_gain: lookup(&map, "in.norm2_gain")?,
            };
            Ok(layer.self_forward(&lookup(&map, "in.x")?, &mut ctx))
        }
        "lora_update" => {
            let layer = LinearLayer {
                weight: lookup(&map, "in.weight")?,
                bias: Some(lookup(&map, "in.bias")?),
                adapter: Some(LoraAdapter {
                    a: lookup(&map, "in.lora_a")?,
                    b: lookup(&map, "in.lora_b")?,
                    scale: lookup(&map, "in.scale")?.item(),
                    dropout: 0.0,
                }),
            };
            Ok(layer.forward(&lookup(&map, "in.x")?, &mut ctx))
        }
        other => Err(Error::Checkpoint(format!("unknown golden case {other:?}"))),
    }
}

// ----------------------------------------------------------------------
// Files
// ----------------------------------------------------------------------

fn case_doc(name: &str) -> String {
    let entry = IndexEntry {
        name: name.to_string(),
        file: format!("{name}.mmfx"),
        tolerance: FIXTURE_F32,
        note: note_for(name).to_string(),
    };
    serde_json::to_string(&entry).expect("index entry serializes")
}

/// Write all six fixture files plus `index.json` into `dir`.
pub fn write_fixtures(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    for name in CASE_NAMES {
        let inputs = case_inputs(name);
        let out = recompute(name, &inputs)?;
        let mut entries = inputs;
        entries.push(entry(&format!("out.{name}"), &out));
        save_file(&dir.join(format!("{name}.mmfx")), &case_doc(name), &entries)?;
        index.push(IndexEntry {
            name: name.to_string(),
            file: format!("{name}.mmfx"),
            tolerance: FIXTURE_F32,
            note: note_for(name).to_string(),
        });
    }
    let listing = serde_json::to_string_pretty(&index).expect("index serializes");
    let path = dir.join("index.json");
    std::fs::write(&path, listing + "\n").map_err(|e| Error::io(&path, e))
}

/// Load one fixture, rerun its formula on the stored inputs, and return
/// the largest absolute deviation from the stored output.
pub fn check_fixture(path: &Path) -> Result<f64> {
    let (doc, entries) = load_file(path)?;
    let meta: IndexEntry = serde_json::from_str(&doc)
        .map_err(|e| Error::Checkpoint(format!("{}: fixture doc: {e}", path.display())))?;
    let inputs: StateEntries =
        entries.iter().filter(|e| e.0.starts_with("in.")).cloned().collect();
    let out_name = format!("out.{}", meta.name);
    let stored = entries
        .iter()
        .find(|e| e.0 == out_name)
        .ok_or_else(|| Error::Checkpoint(format!("{}: no {out_name} entry", path.display())))?;
    let fresh = recompute(&meta.name, &inputs)?;
    if fresh.shape() != stored.1.as_slice() {
        return Err(Error::Checkpoint(format!(
            "{}: recomputed shape {:?} but stored {:?}",
            path.display(),
            fresh.shape(),
            stored.1
        )));
    }
    let worst = fresh
        .to_vec()
        .iter()
        .zip(&stored.2)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if worst > meta.tolerance {
        return Err(Error::Checkpoint(format!(
            "{}: recomputation deviates by {worst:e} (allowed {:e})",
            path.display(),
            meta.tolerance
        )));
    }
    Ok(worst)
}

/// The committed fixture directory inside this crate's source tree.
pub fn default_dir() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

/// Check every fixture named by `dir/index.json`; returns (name, worst
/// deviation) per case.
pub fn check_all(dir: &Path) -> Result<Vec<(String, f64)>> {
    let index_path = dir.join("index.json");
    let listing = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&listing)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", index_path.display())))?;
    if index.len() != CASE_NAMES.len() {
        return Err(Error::Checkpoint(format!(
            "index lists {} fixtures, expected {}",
            index.len(),
            CASE_NAMES.len()
        )));
    }
    index
        .iter()
        .map(|e| Ok((e.name.clone(), check_fixture(&dir.join(&e.file))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn committed_fixtures_replay_within_tolerance() {
        let results = check_all(&default_dir()).unwrap();
        assert_eq!(results.len(), CASE_NAMES.len());
        for (name, worst) in &results {
            assert!(*worst <= FIXTURE_F32, "{name} deviates by {worst:e}");
        }
    }

    #[test]
    fn regeneration_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        write_fixtures(&a).unwrap();
        write_fixtures(&b).unwrap();
        let mut names: Vec<String> = CASE_NAMES.iter().map(|n| format!("{n}.mmfx")).collect();
        names.push("index.json".to_string());
        for file in names {
            let bytes_a = std::fs::read(a.join(&file)).unwrap();
            let bytes_b = std::fs::read(b.join(&file)).unwrap();
            assert_eq!(bytes_a, bytes_b, "{file} is not regeneration-stable");
        }
    }

    #[test]
    fn a_corrupted_output_is_caught() {
        let dir = tempfile::tempdir().unwrap();
        write_fixtures(dir.path()).unwrap();
        // Flip one stored output value well past tolerance.
        let path = dir.path().join("attention.mmfx");
        let (doc, mut entries) = load_file(&path).unwrap();
        let out = entries.iter_mut().find(|e| e.0.starts_with("out.")).unwrap();
        out.2[0] += 0.25;
        save_file(&path, &doc, &entries).unwrap();
        let err = check_fixture(&path).unwrap_err();
        assert!(err.to_string().contains("deviates"), "got: {err}");
    }

    #[test]
    fn every_named_case_has_inputs_and_a_note() {
        for name in CASE_NAMES {
            let inputs = case_inputs(name);
            assert!(!inputs.is_empty(), "{name} generated nothing");
            assert!(inputs.iter().all(|e| e.0.starts_with("in.")));
            assert!(!note_for(name).is_empty());
            // And the formula runs on them.
            recompute(name, &inputs).unwrap();
        }
    }

    #[test]
    fn adapted_case_actually_moves_the_output() {
        // The low-rank update fixture must differ from the bare dense
        // forward, or it would not pin the update formula at all.
        let inputs = case_inputs("lora_update");
        let with = recompute("lora_update", &inputs).unwrap();
        let mut bare = inputs.clone();
        for e in bare.iter_mut() {
            if e.0 == "in.lora_b" {
                e.2.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let without = recompute("lora_update", &bare).unwrap();
        let moved = with
            .to_vec()
            .iter()
            .zip(without.to_vec())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(moved > 0.01, "update left the output unchanged ({moved:e})");
    }
}
