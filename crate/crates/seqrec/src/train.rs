//! Sampled-softmax multi-branch losses and the two training stages:
//! unconditional pre-training and condition-guided fine-tuning.
//!
//! Pre-training: one backbone pass per example under causal (+ temporal)
//! masks, K branch passes predicting the next K logged items, losses summed
//! over branches with in-batch negatives shared across heads. Fine-tuning:
//! the backbone keeps the pre-training masks; each branch scores the same
//! conditioned target from a truncated window under a condition-sparse mask.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask;
use crate::model::Model;
use crate::synth::{
    build_sft_dataset, log_stats, mix_seed, pretrain_split_index, temporal_mask_coverage,
    ConditionFamily, CorpusIndex, Item, UserLog,
};
use crate::tensor::{adam_step, AdamConfig, AdamState, BufId, Tape};

// ── configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// single next-item branch, no temporal mask
    Nip,
    /// K branches, no temporal mask
    Mip,
    /// K branches plus the temporal mask
    Tamip,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Ablation> {
        match s {
            "nip" => Ok(Ablation::Nip),
            "mip" => Ok(Ablation::Mip),
            "tamip" => Ok(Ablation::Tamip),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}' (expected nip, mip, or tamip)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_pretrain: f64,
    pub lr_sft: f64,
    pub weight_decay: f64,
    pub pretrain_steps: usize,
    pub sft_steps: usize,
    /// training context window in events
    pub context_len: usize,
    /// temporal-mask width in seconds; None derives the mean logged interval
    pub delta_tau: Option<u64>,
    pub seed: u64,
    pub condition_family: ConditionFamily,
    /// fraction of each user's requests reserved for pre-training
    pub sft_split_fraction: f64,
    /// final requests per user left out of all training splits
    pub holdout_requests: usize,
    pub freeze_backbone: bool,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            lr_pretrain: 5e-4,
            lr_sft: 1e-5,
            weight_decay: 1e-6,
            pretrain_steps: 300,
            sft_steps: 200,
            context_len: 30,
            delta_tau: None,
            seed: 1,
            condition_family: ConditionFamily::Genre,
            sft_split_fraction: 0.8,
            holdout_requests: 2,
            freeze_backbone: false,
            ablation: Ablation::Tamip,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_sft >= self.lr_pretrain {
            return Err(Error::Config(format!(
                "lr_sft {} must be below lr_pretrain {}",
                self.lr_sft, self.lr_pretrain
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for in-batch negatives".into()));
        }
        if !(0.0..=1.0).contains(&self.sft_split_fraction) {
            return Err(Error::Config("sft_split_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn use_temporal_mask(&self) -> bool {
        matches!(self.ablation, Ablation::Tamip)
    }

    pub fn effective_branches(&self, model_branches: usize) -> usize {
        match self.ablation {
            Ablation::Nip => 1,
            _ => model_branches,
        }
    }
}

// ── training examples ────────────────────────────────────────────────

/// One pre-training example: a context window ending at a request boundary
/// and the first K events of the following request as targets.
#[derive(Debug, Clone)]
pub struct PretrainExample {
    pub user: usize,
    pub ctx_start: usize,
    pub ctx_end: usize,
    pub target_indices: Vec<usize>,
}

/// One fine-tuning example: context window, single target, condition.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub user: usize,
    pub ctx_start: usize,
    pub ctx_end: usize,
    pub target_index: usize,
    pub condition: u32,
}

const MIN_CONTEXT_EVENTS: usize = 6;

/// Sliding windows with stride = one request, targets never mid-request,
/// target events confined to the pre-training span of each user.
pub fn build_pretrain_examples(
    logs: &[UserLog],
    cfg: &TrainConfig,
    branches: usize,
) -> Vec<PretrainExample> {
    let mut examples = Vec::new();
    for (user, log) in logs.iter().enumerate() {
        let bounds = log.request_bounds();
        let nreq = bounds.len() - 1;
        let split = pretrain_split_index(log, cfg.sft_split_fraction);
        for r in 1..nreq {
            let ctx_end = bounds[r];
            if ctx_end + branches > split {
                break;
            }
            if bounds[r + 1] - bounds[r] < branches {
                continue;
            }
            let ctx_start = ctx_end.saturating_sub(cfg.context_len);
            if ctx_end - ctx_start < MIN_CONTEXT_EVENTS {
                continue;
            }
            examples.push(PretrainExample {
                user,
                ctx_start,
                ctx_end,
                target_indices: (bounds[r]..bounds[r] + branches).collect(),
            });
        }
    }
    examples
}

/// Conditioned examples from the SFT span, skipping targets whose condition
/// falls outside the model's condition vocabulary.
pub fn build_sft_examples(
    logs: &[UserLog],
    corpus: &CorpusIndex,
    cfg: &TrainConfig,
    condition_vocab: u32,
) -> Result<(Vec<SftExample>, u64)> {
    let triples = build_sft_dataset(
        logs,
        corpus,
        cfg.condition_family,
        cfg.sft_split_fraction,
        cfg.holdout_requests,
    )?;
    let by_user: std::collections::BTreeMap<u64, usize> =
        logs.iter().enumerate().map(|(i, l)| (l.user_id, i)).collect();
    let mut skipped = 0u64;
    let mut examples = Vec::new();
    for t in triples {
        if t.condition >= condition_vocab {
            skipped += 1;
            continue;
        }
        let user = by_user[&t.user_id];
        let ctx_end = t.target_index;
        let ctx_start = ctx_end.saturating_sub(cfg.context_len);
        if ctx_end - ctx_start < MIN_CONTEXT_EVENTS {
            skipped += 1;
            continue;
        }
        examples.push(SftExample {
            user,
            ctx_start,
            ctx_end,
            target_index: t.target_index,
            condition: t.condition,
        });
    }
    Ok((examples, skipped))
}

// ── losses ───────────────────────────────────────────────────────────

/// Eq.-style sampled softmax: -log of the target's share against the
/// negatives, all scored by inner product against `h`.
pub fn sampled_softmax_loss(
    tape: &mut Tape,
    h: BufId,
    target_emb: BufId,
    negative_embs: &[BufId],
) -> Result<BufId> {
    if negative_embs.is_empty() {
        return Err(Error::Data(
            "sampled softmax needs a nonempty negative set (batch too small or degenerate)".into(),
        ));
    }
    let mut rows = Vec::with_capacity(1 + negative_embs.len());
    rows.push(target_emb);
    rows.extend_from_slice(negative_embs);
    let cat = tape.concat_rows(&rows)?;
    let scores = tape.matmul_bt(h, cat)?;
    tape.neg_log_softmax0(scores)
}

/// Same loss, but the candidates already live in a (rows x d) matrix:
/// `target_row` is scored against `negative_rows`.
fn sampled_softmax_loss_rows(
    tape: &mut Tape,
    h: BufId,
    emb_matrix: BufId,
    target_row: usize,
    negative_rows: &[usize],
) -> Result<BufId> {
    if negative_rows.is_empty() {
        return Err(Error::Data(
            "sampled softmax needs a nonempty negative set (batch too small or degenerate)".into(),
        ));
    }
    let mut ix = Vec::with_capacity(1 + negative_rows.len());
    ix.push(target_row);
    ix.extend_from_slice(negative_rows);
    let cand = tape.gather_rows(emb_matrix, Arc::new(ix))?;
    let scores = tape.matmul_bt(h, cand)?;
    tape.neg_log_softmax0(scores)
}

// ── batches and steps ────────────────────────────────────────────────

pub struct StepOutcome {
    pub loss: f64,
    pub per_head: Vec<f64>,
    pub degenerate_rows: usize,
}

fn items_for<'c>(corpus: &'c CorpusIndex, log: &UserLog, range: std::ops::Range<usize>) -> Vec<&'c Item> {
    log.events[range].iter().map(|e| corpus.item(e.item_id)).collect()
}

/// Forward + loss for one pre-training batch on a fresh tape. Returns the
/// scalar loss buffer and per-head scalar buffers; shared by the training
/// step and the loss-recomputation oracle.
fn pretrain_batch_forward(
    model: &Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    batch: &[&PretrainExample],
    cfg: &TrainConfig,
    delta_tau: u64,
    tape: &mut Tape,
    ids: &[BufId],
    only_head: Option<usize>,
) -> Result<(BufId, Vec<BufId>, usize)> {
    let branches = cfg.effective_branches(model.config.num_branches);
    let heads: Vec<usize> = match only_head {
        Some(k) => vec![k],
        None => (1..=branches).collect(),
    };

    // every (example, head) target fused in one pass; row b * branches + (k-1)
    let target_items: Vec<&Item> = batch
        .iter()
        .flat_map(|ex| {
            ex.target_indices
                .iter()
                .map(|&t| corpus.item(logs[ex.user].events[t].item_id))
        })
        .collect();
    let target_matrix = model.fuse_items(tape, ids, &target_items)?;
    let target_ids: Vec<Vec<u64>> = batch
        .iter()
        .map(|ex| {
            ex.target_indices
                .iter()
                .map(|&t| logs[ex.user].events[t].item_id)
                .collect()
        })
        .collect();

    let mut per_head_terms: Vec<Vec<BufId>> = vec![Vec::new(); heads.len()];
    let mut degenerate = 0usize;
    for (b, ex) in batch.iter().enumerate() {
        let log = &logs[ex.user];
        let ctx = items_for(corpus, log, ex.ctx_start..ex.ctx_end);
        let n = ctx.len();
        let causal = mask::build_causal_mask(n)?;
        let combined = if cfg.use_temporal_mask() {
            let ts: Vec<u64> = log.events[ex.ctx_start..ex.ctx_end].iter().map(|e| e.ts).collect();
            let tau_target = log.events[ex.target_indices[0]].ts;
            let temporal = mask::build_temporal_mask(&ts, tau_target, delta_tau)?;
            mask::combine(&[&causal, &temporal])?
        } else {
            causal
        };
        let (h, deg) = model.encode_sequence(tape, ids, &ctx, &combined)?;
        degenerate += deg;

        for (hi, &k) in heads.iter().enumerate() {
            let rep = model.branch_forward(tape, ids, h, k, &combined, None)?;
            let target_row = b * branches + (k - 1);
            let target_id = target_ids[b][k - 1];
            // shared in-batch negatives: other examples' targets, minus id hits
            let negatives: Vec<usize> = (0..batch.len())
                .flat_map(|ob| (0..branches).map(move |ok| (ob, ok)))
                .filter(|&(ob, ok)| ob != b && target_ids[ob][ok] != target_id)
                .map(|(ob, ok)| ob * branches + ok)
                .collect();
            let loss = sampled_softmax_loss_rows(tape, rep, target_matrix, target_row, &negatives)?;
            per_head_terms[hi].push(loss);
        }
    }

    let inv_b = 1.0 / batch.len() as f64;
    let mut head_means = Vec::with_capacity(heads.len());
    for terms in &per_head_terms {
        let s = tape.sum_scalars(terms)?;
        head_means.push(tape.scale(s, inv_b));
    }
    let total = tape.sum_scalars(&head_means)?;
    Ok((total, head_means, degenerate))
}

/// Forward + loss for one fine-tuning batch: backbone under pre-training
/// masks, branches under causal + condition + truncation, one shared target.
#[allow(clippy::too_many_arguments)]
fn sft_batch_forward(
    model: &Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    batch: &[&SftExample],
    cfg: &TrainConfig,
    delta_tau: u64,
    tape: &mut Tape,
    ids: &[BufId],
    only_head: Option<usize>,
) -> Result<(BufId, Vec<BufId>, usize)> {
    let branches = cfg.effective_branches(model.config.num_branches);
    let heads: Vec<usize> = match only_head {
        Some(k) => vec![k],
        None => (1..=branches).collect(),
    };

    let target_items: Vec<&Item> = batch
        .iter()
        .map(|ex| corpus.item(logs[ex.user].events[ex.target_index].item_id))
        .collect();
    let target_matrix = model.fuse_items(tape, ids, &target_items)?;
    let target_ids: Vec<u64> = batch
        .iter()
        .map(|ex| logs[ex.user].events[ex.target_index].item_id)
        .collect();

    let mut per_head_terms: Vec<Vec<BufId>> = vec![Vec::new(); heads.len()];
    let mut degenerate = 0usize;
    for (b, ex) in batch.iter().enumerate() {
        let log = &logs[ex.user];
        let ctx = items_for(corpus, log, ex.ctx_start..ex.ctx_end);
        let n = ctx.len();
        let causal = mask::build_causal_mask(n)?;
        let ts: Vec<u64> = log.events[ex.ctx_start..ex.ctx_end].iter().map(|e| e.ts).collect();
        let tau_target = log.events[ex.target_index].ts;
        let backbone_mask = if cfg.use_temporal_mask() {
            let temporal = mask::build_temporal_mask(&ts, tau_target, delta_tau)?;
            mask::combine(&[&causal, &temporal])?
        } else {
            causal.clone()
        };
        let (h, deg) = model.encode_sequence(tape, ids, &ctx, &backbone_mask)?;
        degenerate += deg;

        let cats: Vec<u32> = ctx.iter().map(|i| cfg.condition_family.category_of(i)).collect();
        let cond_mask = mask::build_condition_mask(&cats, ex.condition)?;
        for (hi, &k) in heads.iter().enumerate() {
            let truncation = mask::build_truncation_mask(n, k.min(n))?;
            let branch_mask = mask::combine(&[&causal, &cond_mask, &truncation])?;
            let condition = model.config.condition_embedding_enabled.then_some(ex.condition);
            let rep = model.branch_forward(tape, ids, h, k, &branch_mask, condition)?;
            let negatives: Vec<usize> = (0..batch.len())
                .filter(|&ob| ob != b && target_ids[ob] != target_ids[b])
                .collect();
            let loss = sampled_softmax_loss_rows(tape, rep, target_matrix, b, &negatives)?;
            per_head_terms[hi].push(loss);
        }
    }

    let inv_b = 1.0 / batch.len() as f64;
    let mut head_means = Vec::with_capacity(heads.len());
    for terms in &per_head_terms {
        let s = tape.sum_scalars(terms)?;
        head_means.push(tape.scale(s, inv_b));
    }
    let total = tape.sum_scalars(&head_means)?;
    Ok((total, head_means, degenerate))
}

/// One optimization step over a pre-training batch.
pub fn pretrain_step(
    model: &mut Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    batch: &[&PretrainExample],
    cfg: &TrainConfig,
    delta_tau: u64,
    adam: &mut AdamState,
    batch_id: usize,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let ids = model.params.register(&mut tape);
    let (total, head_means, degenerate) = pretrain_batch_forward(
        model, corpus, logs, batch, cfg, delta_tau, &mut tape, &ids, None,
    )?;
    let loss = tape.scalar(total);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss in batch {batch_id}")));
    }
    let per_head: Vec<f64> = head_means.iter().map(|&id| tape.scalar(id)).collect();
    tape.backward(total)?;
    let grads: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
    let adam_cfg = AdamConfig::new(cfg.lr_pretrain, cfg.weight_decay);
    adam_step(&mut model.params, &grads, adam, &adam_cfg)?;
    Ok(StepOutcome { loss, per_head, degenerate_rows: degenerate })
}

/// One optimization step over a fine-tuning batch at the reduced rate.
#[allow(clippy::too_many_arguments)]
pub fn sft_step(
    model: &mut Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    batch: &[&SftExample],
    cfg: &TrainConfig,
    delta_tau: u64,
    adam: &mut AdamState,
    batch_id: usize,
) -> Result<StepOutcome> {
    let mut tape = Tape::new();
    let ids = model.params.register(&mut tape);
    let (total, head_means, degenerate) =
        sft_batch_forward(model, corpus, logs, batch, cfg, delta_tau, &mut tape, &ids, None)?;
    let loss = tape.scalar(total);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss in batch {batch_id}")));
    }
    let per_head: Vec<f64> = head_means.iter().map(|&id| tape.scalar(id)).collect();
    tape.backward(total)?;
    let mut grads: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
    if cfg.freeze_backbone {
        for i in 0..model.params.len() {
            let name = model.params.name(i);
            if !(name.starts_with("branch.") || name.starts_with("cond.")) {
                grads[i].iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }
    let adam_cfg = AdamConfig::new(cfg.lr_sft, cfg.weight_decay);
    adam_step(&mut model.params, &grads, adam, &adam_cfg)?;
    Ok(StepOutcome { loss, per_head, degenerate_rows: degenerate })
}

// ── loss recomputation oracles (used by tests and the acceptance suite) ──

/// Batch loss evaluated on a fresh tape without updating anything.
pub fn pretrain_batch_loss(
    model: &Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    batch: &[&PretrainExample],
    cfg: &TrainConfig,
    delta_tau: u64,
    only_head: Option<usize>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = model.params.register(&mut tape);
    let (total, _, _) = pretrain_batch_forward(
        model, corpus, logs, batch, cfg, delta_tau, &mut tape, &ids, only_head,
    )?;
    Ok(tape.scalar(total))
}

pub fn sft_batch_loss(
    model: &Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    batch: &[&SftExample],
    cfg: &TrainConfig,
    delta_tau: u64,
    only_head: Option<usize>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = model.params.register(&mut tape);
    let (total, _, _) =
        sft_batch_forward(model, corpus, logs, batch, cfg, delta_tau, &mut tape, &ids, only_head)?;
    Ok(tape.scalar(total))
}

/// Batch forward against caller-registered parameter ids, for gradient
/// checking the composed model loss.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_forward_for_check(
    model: &Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    batch: &[&PretrainExample],
    cfg: &TrainConfig,
    delta_tau: u64,
    tape: &mut Tape,
    ids: &[BufId],
) -> Result<BufId> {
    let (total, _, _) =
        pretrain_batch_forward(model, corpus, logs, batch, cfg, delta_tau, tape, ids, None)?;
    Ok(total)
}

// ── stages ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    Pretrain,
    Sft,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub steps_run: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub examples_available: usize,
    pub skipped_examples: u64,
    pub delta_tau: u64,
    pub mean_request_interval: f64,
    pub masked_fraction: f64,
    pub masked_count_mean: f64,
    pub degenerate_rows: usize,
}

/// Run a full training stage, appending one CSV row per step to `loss_csv`
/// when given. The model is updated in place.
pub fn train_stage(
    model: &mut Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    cfg: &TrainConfig,
    mode: StageMode,
    loss_csv: Option<&Path>,
) -> Result<StageReport> {
    cfg.validate()?;
    let stats = log_stats(logs);
    let delta_tau = cfg.delta_tau.unwrap_or(stats.mean_request_interval.round() as u64);
    let (masked_fraction, masked_count_mean) = if cfg.use_temporal_mask() {
        temporal_mask_coverage(logs, delta_tau)
    } else {
        (0.0, 0.0)
    };

    let branches = cfg.effective_branches(model.config.num_branches);
    let steps = match mode {
        StageMode::Pretrain => cfg.pretrain_steps,
        StageMode::Sft => cfg.sft_steps,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x57A9E));
    let mut csv = match loss_csv {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            let head_cols: Vec<String> = (1..=branches).map(|k| format!("head_{k}")).collect();
            writeln!(f, "step,loss,{}", head_cols.join(","))?;
            Some(f)
        }
        None => None,
    };

    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut degenerate_total = 0usize;
    let mut skipped = 0u64;
    let examples_available;
    let mut adam = AdamState::new(&model.params);

    match mode {
        StageMode::Pretrain => {
            let mut examples = build_pretrain_examples(logs, cfg, branches);
            if examples.is_empty() {
                return Err(Error::Data("no pre-training examples (logs too short)".into()));
            }
            examples_available = examples.len();
            examples.shuffle(&mut rng);
            for step in 0..steps {
                let batch: Vec<&PretrainExample> = (0..cfg.batch_size)
                    .map(|i| &examples[(step * cfg.batch_size + i) % examples.len()])
                    .collect();
                let out =
                    pretrain_step(model, corpus, logs, &batch, cfg, delta_tau, &mut adam, step)?;
                if step == 0 {
                    first_loss = out.loss;
                }
                final_loss = out.loss;
                degenerate_total += out.degenerate_rows;
                if let Some(f) = csv.as_mut() {
                    let heads: Vec<String> = out.per_head.iter().map(|v| format!("{v:.6}")).collect();
                    writeln!(f, "{},{:.6},{}", step, out.loss, heads.join(","))?;
                }
            }
        }
        StageMode::Sft => {
            let (mut examples, skip) =
                build_sft_examples(logs, corpus, cfg, model.config.condition_vocab)?;
            skipped = skip;
            if examples.is_empty() {
                return Err(Error::Data("no fine-tuning examples (logs too short)".into()));
            }
            examples_available = examples.len();
            examples.shuffle(&mut rng);
            for step in 0..steps {
                let batch: Vec<&SftExample> = (0..cfg.batch_size)
                    .map(|i| &examples[(step * cfg.batch_size + i) % examples.len()])
                    .collect();
                let out = sft_step(model, corpus, logs, &batch, cfg, delta_tau, &mut adam, step)?;
                if step == 0 {
                    first_loss = out.loss;
                }
                final_loss = out.loss;
                degenerate_total += out.degenerate_rows;
                if let Some(f) = csv.as_mut() {
                    let heads: Vec<String> = out.per_head.iter().map(|v| format!("{v:.6}")).collect();
                    writeln!(f, "{},{:.6},{}", step, out.loss, heads.join(","))?;
                }
            }
        }
    }
    if let Some(mut f) = csv {
        f.flush()?;
    }

    Ok(StageReport {
        steps_run: steps,
        first_loss,
        final_loss,
        examples_available,
        skipped_examples: skipped,
        delta_tau,
        mean_request_interval: stats.mean_request_interval,
        masked_fraction,
        masked_count_mean,
        degenerate_rows: degenerate_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_dataset, group_by_user, GenConfig};
    use crate::tensor::Tensor;

    fn small_world() -> (CorpusIndex, Vec<UserLog>, ModelConfig, TrainConfig) {
        let gen = GenConfig {
            num_users: 40,
            num_items: 300,
            num_genres: 6,
            num_languages: 3,
            requests_per_user: 16,
            items_per_request: 4,
            mean_request_interval_s: 600.0,
            seed: 11,
            ..GenConfig::default()
        };
        let (items, events) = generate_dataset(&gen);
        let corpus = CorpusIndex::new(items, gen.num_genres);
        let logs = group_by_user(&events).unwrap();
        let mcfg = ModelConfig {
            d: 16,
            num_backbone_layers: 2,
            num_heads: 2,
            num_branches: 2,
            hash_buckets: 512,
            num_genres: 6,
            num_languages: 3,
            condition_vocab: 6,
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig {
            batch_size: 8,
            pretrain_steps: 3,
            sft_steps: 3,
            context_len: 14,
            seed: 5,
            ..TrainConfig::default()
        };
        (corpus, logs, mcfg, tcfg)
    }

    #[test]
    fn sampled_softmax_uniform_scores_is_ln4() {
        let mut tape = Tape::new();
        let h = tape.input(&[1, 4], vec![0.0; 4]);
        let t = tape.input(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let n1 = tape.input(&[1, 4], vec![0.0, 1.0, 0.0, 0.0]);
        let n2 = tape.input(&[1, 4], vec![0.0, 0.0, 1.0, 0.0]);
        let n3 = tape.input(&[1, 4], vec![0.0, 0.0, 0.0, 1.0]);
        let loss = sampled_softmax_loss(&mut tape, h, t, &[n1, n2, n3]).unwrap();
        assert!((tape.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sampled_softmax_dominant_target_loss_vanishes() {
        let mut tape = Tape::new();
        let h = tape.input(&[1, 2], vec![10.0, 0.0]);
        let t = tape.input(&[1, 2], vec![10.0, 0.0]);
        let n = tape.input(&[1, 2], vec![-10.0, 0.0]);
        let loss = sampled_softmax_loss(&mut tape, h, t, &[n]).unwrap();
        assert!(tape.scalar(loss) < 1e-10);
    }

    #[test]
    fn sampled_softmax_rejects_empty_negatives() {
        let mut tape = Tape::new();
        let h = tape.input(&[1, 2], vec![1.0, 0.0]);
        let t = tape.input(&[1, 2], vec![1.0, 0.0]);
        assert!(sampled_softmax_loss(&mut tape, h, t, &[]).is_err());
    }

    #[test]
    fn full_softmax_oracle_equivalence() {
        // negatives = the whole vocabulary minus the target: the sampled
        // loss must equal exact cross-entropy computed independently
        let d = 6;
        let vocab = 9;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let h = Tensor::randn(&[1, d], 1.0, &mut rng);
        let embs: Vec<Tensor> = (0..vocab).map(|_| Tensor::randn(&[1, d], 1.0, &mut rng)).collect();
        let target = 4usize;

        let mut tape = Tape::new();
        let hb = tape.input(&[1, d], h.data().to_vec());
        let tb = tape.input(&[1, d], embs[target].data().to_vec());
        let negs: Vec<BufId> = (0..vocab)
            .filter(|&j| j != target)
            .map(|j| tape.input(&[1, d], embs[j].data().to_vec()))
            .collect();
        let loss = sampled_softmax_loss(&mut tape, hb, tb, &negs).unwrap();

        // independent direct evaluation of -log softmax over the full vocab
        let score = |e: &Tensor| -> f64 {
            h.data().iter().zip(e.data()).map(|(a, b)| a * b).sum()
        };
        let scores: Vec<f64> = embs.iter().map(score).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let expected = lse - scores[target];
        assert!((tape.scalar(loss) - expected).abs() < 1e-10);
    }

    #[test]
    fn loss_additivity_pretrain() {
        let (corpus, logs, mcfg, tcfg) = small_world();
        let model = Model::new(mcfg).unwrap();
        let examples = build_pretrain_examples(&logs, &tcfg, 2);
        let batch: Vec<&PretrainExample> = examples.iter().take(8).collect();
        let total = pretrain_batch_loss(&model, &corpus, &logs, &batch, &tcfg, 600, None).unwrap();
        let h1 = pretrain_batch_loss(&model, &corpus, &logs, &batch, &tcfg, 600, Some(1)).unwrap();
        let h2 = pretrain_batch_loss(&model, &corpus, &logs, &batch, &tcfg, 600, Some(2)).unwrap();
        assert!(
            (total - (h1 + h2)).abs() < 1e-10,
            "additivity violated: {total} vs {h1} + {h2}"
        );
    }

    #[test]
    fn loss_additivity_sft_shared_target() {
        let (corpus, logs, mcfg, tcfg) = small_world();
        let model = Model::new(mcfg).unwrap();
        let (examples, _) = build_sft_examples(&logs, &corpus, &tcfg, 6).unwrap();
        let batch: Vec<&SftExample> = examples.iter().take(8).collect();
        let total = sft_batch_loss(&model, &corpus, &logs, &batch, &tcfg, 600, None).unwrap();
        let h1 = sft_batch_loss(&model, &corpus, &logs, &batch, &tcfg, 600, Some(1)).unwrap();
        let h2 = sft_batch_loss(&model, &corpus, &logs, &batch, &tcfg, 600, Some(2)).unwrap();
        assert!((total - (h1 + h2)).abs() < 1e-10);
    }

    #[test]
    fn nip_equals_single_branch_loss() {
        // K forced to 1 must reproduce the plain next-item loss bitwise
        let (corpus, logs, mcfg, tcfg) = small_world();
        let model = Model::new(mcfg).unwrap();
        let nip_cfg = TrainConfig { ablation: Ablation::Nip, ..tcfg.clone() };
        let examples = build_pretrain_examples(&logs, &nip_cfg, 1);
        let batch: Vec<&PretrainExample> = examples.iter().take(8).collect();
        let nip = pretrain_batch_loss(&model, &corpus, &logs, &batch, &nip_cfg, 600, None).unwrap();
        let head1 =
            pretrain_batch_loss(&model, &corpus, &logs, &batch, &nip_cfg, 600, Some(1)).unwrap();
        assert_eq!(nip.to_bits(), head1.to_bits());
    }

    #[test]
    fn tamip_with_zero_delta_matches_mip_bitwise() {
        let (corpus, logs, mcfg, tcfg) = small_world();
        let model = Model::new(mcfg).unwrap();
        let tamip_cfg = TrainConfig {
            ablation: Ablation::Tamip,
            delta_tau: Some(0),
            ..tcfg.clone()
        };
        let mip_cfg = TrainConfig { ablation: Ablation::Mip, ..tcfg };
        let examples = build_pretrain_examples(&logs, &tamip_cfg, 2);
        let batch: Vec<&PretrainExample> = examples.iter().take(8).collect();
        let a = pretrain_batch_loss(&model, &corpus, &logs, &batch, &tamip_cfg, 0, None).unwrap();
        let b = pretrain_batch_loss(&model, &corpus, &logs, &batch, &mip_cfg, 0, None).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn negative_hygiene_no_target_id_in_negatives() {
        let (_corpus, logs, _, tcfg) = small_world();
        let examples = build_pretrain_examples(&logs, &tcfg, 2);
        let batch: Vec<&PretrainExample> = examples.iter().take(12).collect();
        let ids: Vec<Vec<u64>> = batch
            .iter()
            .map(|ex| {
                ex.target_indices
                    .iter()
                    .map(|&t| logs[ex.user].events[t].item_id)
                    .collect()
            })
            .collect();
        for b in 0..batch.len() {
            for k in 0..2 {
                let target = ids[b][k];
                let negs: Vec<u64> = (0..batch.len())
                    .flat_map(|ob| ids[ob].iter().copied().map(move |id| (ob, id)))
                    .filter(|&(ob, id)| ob != b && id != target)
                    .map(|(_, id)| id)
                    .collect();
                assert!(!negs.contains(&target));
                assert!(!negs.is_empty());
            }
        }
    }

    #[test]
    fn sft_with_zero_lr_keeps_parameters_bitwise() {
        let (corpus, logs, mcfg, mut tcfg) = small_world();
        tcfg.lr_sft = 0.0;
        tcfg.sft_steps = 2;
        let mut model = Model::new(mcfg).unwrap();
        let before: Vec<Vec<f64>> = (0..model.params.len())
            .map(|i| model.params.tensor(i).data().to_vec())
            .collect();
        train_stage(&mut model, &corpus, &logs, &tcfg, StageMode::Sft, None).unwrap();
        for i in 0..model.params.len() {
            assert_eq!(
                model.params.tensor(i).data(),
                before[i].as_slice(),
                "parameter {} changed under lr 0",
                model.params.name(i)
            );
        }
    }

    #[test]
    fn train_stage_determinism() {
        let (corpus, logs, mcfg, tcfg) = small_world();
        let run = || {
            let mut model = Model::new(mcfg.clone()).unwrap();
            train_stage(&mut model, &corpus, &logs, &tcfg, StageMode::Pretrain, None).unwrap();
            model
        };
        let a = run();
        let b = run();
        for i in 0..a.params.len() {
            assert_eq!(a.params.tensor(i).data(), b.params.tensor(i).data());
        }
    }

    #[test]
    fn lr_ordering_enforced() {
        let mut cfg = TrainConfig::default();
        cfg.lr_sft = cfg.lr_pretrain;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn pretrain_examples_respect_split_and_requests() {
        let (_, logs, _, tcfg) = small_world();
        let examples = build_pretrain_examples(&logs, &tcfg, 2);
        assert!(!examples.is_empty());
        for ex in &examples {
            let log = &logs[ex.user];
            let split = pretrain_split_index(log, tcfg.sft_split_fraction);
            for &t in &ex.target_indices {
                assert!(t < split);
                assert!(log.events[t].ts >= log.events[ex.ctx_end - 1].ts);
            }
            // targets start exactly at a request boundary
            let first = &log.events[ex.target_indices[0]];
            assert_eq!(first.idx, 0);
            // all targets should come after every context event in time
            assert!(log.events[ex.target_indices[0]].ts > log.events[ex.ctx_end - 1].ts);
        }
    }
}
