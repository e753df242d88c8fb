//! Training and evaluation: Adam with decoupled-from-nothing classic
//! weight decay (decay folded into the gradient), binary cross-entropy
//! over per-class probabilities, ROC-AUC scoring, a multi-threaded
//! evaluator, and the epoch loop with best-checkpoint selection.

use std::path::Path;

use crate::checkpoint::save_model;
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::features::Tokenizer;
use crate::fusion::FusionModel;
use crate::nn::ForwardCtx;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Probability floor/ceiling inside the loss so log terms stay finite.
pub const PROB_EPS: f64 = 1e-7;

// ----------------------------------------------------------------------
// Optimizer
// ----------------------------------------------------------------------

/// Hyperparameters for one training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seeds batch shuffling and dropout for the whole run.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 20,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Zero epochs is allowed (a dry run that trains nothing).
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            problems.push(format!("epsilon {} must be positive", self.epsilon));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Adam with bias correction; weight decay is added to the raw gradient
/// before the moment update. Moment slots are keyed by parameter name, so
/// the same optimizer survives parameter re-collection between steps.
pub struct Adam {
    cfg: TrainConfig,
    slots: std::collections::HashMap<String, Slot>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Adam {
        Adam { cfg: cfg.clone(), slots: std::collections::HashMap::new() }
    }

    /// Apply one update to every named parameter. Each must carry a
    /// gradient (zero gradients are fine); gradients are cleared after the
    /// update so stale values can never leak into the next step.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        for (name, p) in params {
            let grad = p.grad().ok_or_else(|| {
                Error::Numeric(format!("missing gradient for {name} at optimizer step"))
            })?;
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
                t: 0,
            });
            if slot.m.len() != grad.len() {
                return Err(Error::Numeric(format!(
                    "parameter {name} changed size mid-run ({} to {})",
                    slot.m.len(),
                    grad.len()
                )));
            }
            slot.t += 1;
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            let bias1 = 1.0 - b1.powi(slot.t as i32);
            let bias2 = 1.0 - b2.powi(slot.t as i32);
            let mut data = p.data_mut();
            for i in 0..grad.len() {
                let g = grad[i] + self.cfg.weight_decay * data[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                data[i] -= self.cfg.learning_rate * m_hat / (v_hat.sqrt() + self.cfg.epsilon);
            }
            drop(data);
            p.clear_grad();
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------
// Loss
// ----------------------------------------------------------------------

/// Mean binary cross-entropy between probability and 0/1 label tensors of
/// equal shape. Probabilities are clamped to keep the logs finite.
pub fn bce_loss(probs: &Tensor, labels: &Tensor) -> Tensor {
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pos = labels.mul(&p.ln());
    let neg = labels.affine(-1.0, 1.0).mul(&p.affine(-1.0, 1.0).ln());
    pos.add(&neg).mean_all().scale(-1.0)
}

/// The same quantity computed outside the graph, for evaluation.
fn bce_scalar(probs: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(probs.len(), labels.len());
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();
    total / probs.len() as f64
}

// ----------------------------------------------------------------------
// Ranking metric
// ----------------------------------------------------------------------

/// Area under the ROC curve via the rank-sum identity, with tied scores
/// sharing their average rank. `None` when either class is absent, since
/// ranking quality is undefined without both. Panics on length mismatch —
/// that is a caller bug, not bad data.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must pair up");
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must be comparable"));
    let mut rank = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean of ranks i+1..=j+1.
        let shared = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            rank[idx] = shared;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 =
        rank.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(&r, _)| r).sum();
    let auc = (pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Some(auc)
}

/// Mean over the classes where the metric is defined.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

// ----------------------------------------------------------------------
// Evaluation
// ----------------------------------------------------------------------

/// Per-example class probabilities in dataset order. `threads > 1` shards
/// the dataset into contiguous chunks, each scored by a worker holding its
/// own copy of the model rebuilt from the same state, so the result is
/// identical to a single-threaded pass.
pub fn predict(
    model: &FusionModel,
    dataset: &Dataset,
    tokenizer: &Tokenizer,
    seq_len: usize,
    batch_size: usize,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    if dataset.is_empty() {
        return Ok(Vec::new());
    }
    // Plain-data rows so worker threads never touch shared tensors.
    let rows: Vec<(Vec<usize>, Vec<usize>, Vec<f64>)> = dataset
        .examples
        .iter()
        .map(|ex| (tokenizer.encode(&ex.report, seq_len), ex.image.shape().to_vec(), ex.image.to_vec()))
        .collect();

    let score_rows = |model: &FusionModel, rows: &[(Vec<usize>, Vec<usize>, Vec<f64>)]| -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(rows.len());
        let mut rng = Rng::seed_from(0); // eval mode draws nothing
        for chunk in rows.chunks(batch_size) {
            let ids: Vec<Vec<usize>> = chunk.iter().map(|r| r.0.clone()).collect();
            let images: Vec<Tensor> =
                chunk.iter().map(|r| Tensor::new(&r.1, r.2.clone())).collect();
            let mut ctx = ForwardCtx::eval(&mut rng);
            let probs = model.forward(&ids, &images, &mut ctx)?;
            let flat = probs.to_vec();
            let width = probs.shape()[1];
            for i in 0..chunk.len() {
                out.push(flat[i * width..(i + 1) * width].to_vec());
            }
        }
        Ok(out)
    };

    let threads = threads.max(1).min(rows.len());
    if threads == 1 {
        return score_rows(model, &rows);
    }

    let state = model.to_state();
    let cfg = model.cfg.clone();
    let lora = model.lora.clone();
    let per = rows.len().div_ceil(threads);
    let shards: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = rows
            .chunks(per)
            .map(|shard| {
                let (cfg, lora, state) = (&cfg, &lora, &state);
                let score = &score_rows;
                scope.spawn(move || {
                    let worker = FusionModel::from_parts(cfg, lora.as_ref(), state)?;
                    score(&worker, shard)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(rows.len());
    for shard in shards {
        out.extend(shard?);
    }
    Ok(out)
}

/// Loss and per-class ranking quality over one dataset.
pub struct EvalReport {
    pub loss: f64,
    /// `[n_examples][n_classes]` probabilities in dataset order.
    pub scores: Vec<Vec<f64>>,
    pub per_class_auc: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
}

pub fn evaluate(
    model: &FusionModel,
    dataset: &Dataset,
    tokenizer: &Tokenizer,
    seq_len: usize,
    batch_size: usize,
    threads: usize,
) -> Result<EvalReport> {
    let scores = predict(model, dataset, tokenizer, seq_len, batch_size, threads)?;
    let n_classes = model.cfg.clone().resolved().n_classes;
    let mut loss = 0.0;
    for (row, ex) in scores.iter().zip(&dataset.examples) {
        loss += bce_scalar(row, &ex.labels);
    }
    if !scores.is_empty() {
        loss /= scores.len() as f64;
    }
    let per_class_auc: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let labels: Vec<u8> = dataset.examples.iter().map(|e| e.labels[c]).collect();
            roc_auc(&col, &labels)
        })
        .collect();
    let mean_auc = mean_defined(&per_class_auc);
    Ok(EvalReport { loss, scores, per_class_auc, mean_auc })
}

// ----------------------------------------------------------------------
// Epoch loop
// ----------------------------------------------------------------------

/// One epoch's numbers, as written to the metrics table.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Vec<Option<f64>>,
    pub val_mean_auc: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights the saved checkpoint holds, if one was saved.
    pub best_epoch: Option<usize>,
    pub best_val_auc: Option<f64>,
}

/// Run the full loop: shuffle, batch, descend, validate each epoch, and
/// keep the checkpoint with the best validation mean AUC (strict
/// improvement). If no epoch produced a defined validation AUC the final
/// weights are saved instead, so the path always holds a model afterwards
/// (unless `epochs` is 0, which trains and saves nothing).
pub fn train_loop(
    model: &mut FusionModel,
    train: &Dataset,
    validation: &Dataset,
    tokenizer: &Tokenizer,
    tcfg: &TrainConfig,
    checkpoint_path: &Path,
    eval_threads: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let seq_len = model.cfg.clone().resolved().text_seq_len;
    let trainables = model.trainable_params();
    if trainables.is_empty() && tcfg.epochs > 0 {
        return Err(Error::Config("model has no trainable parameters".to_string()));
    }
    let mut adam = Adam::new(tcfg);
    let mut rng = Rng::seed_from(tcfg.seed);
    let mut records = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut saved_any = false;

    for epoch in 1..=tcfg.epochs {
        let batches = batch_iter(train, tcfg.batch_size, tokenizer, seq_len, true, &mut rng);
        let mut loss_sum = 0.0;
        let mut n_seen = 0usize;
        for batch in &batches {
            for (_, p) in &trainables {
                p.zero_grad();
            }
            let mut ctx = ForwardCtx::train(&mut rng);
            let probs = model.forward(&batch.tokens, &batch.images, &mut ctx)?;
            let loss = bce_loss(&probs, &batch.label_tensor());
            loss.backward();
            loss_sum += loss.item() * batch.len() as f64;
            n_seen += batch.len();
            adam.step(&trainables)?;
        }
        let train_loss = if n_seen > 0 { loss_sum / n_seen as f64 } else { 0.0 };

        let report =
            evaluate(model, validation, tokenizer, seq_len, tcfg.batch_size, eval_threads)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss: report.loss,
            val_auc: report.per_class_auc,
            val_mean_auc: report.mean_auc,
        };
        if let Some(auc) = record.val_mean_auc {
            if best.map_or(true, |(_, b)| auc > b) {
                best = Some((epoch, auc));
                save_model(checkpoint_path, model, Some(tokenizer.words()))?;
                saved_any = true;
            }
        }
        on_epoch(&record);
        records.push(record);
    }

    if !saved_any && tcfg.epochs > 0 {
        save_model(checkpoint_path, model, Some(tokenizer.words()))?;
    }
    Ok(TrainOutcome {
        records,
        best_epoch: best.map(|(e, _)| e),
        best_val_auc: best.map(|(_, a)| a),
    })
}

// ----------------------------------------------------------------------
// Metrics table
// ----------------------------------------------------------------------

/// CSV with one row per epoch. Undefined AUCs are empty fields.
pub fn metrics_csv(records: &[EpochRecord], n_classes: usize) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_mean_auc");
    for c in 0..n_classes {
        out.push_str(&format!(",auc_{c}"));
    }
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            opt(r.val_mean_auc)
        ));
        for c in 0..n_classes {
            out.push(',');
            out.push_str(&opt(r.val_auc.get(c).copied().flatten()));
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[EpochRecord], n_classes: usize) -> Result<()> {
    std::fs::write(path, metrics_csv(records, n_classes)).map_err(|e| Error::io(path, e))
}
