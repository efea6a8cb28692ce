//! Serving path: pre-computed per-user recall instructions and batched
//! multi-condition inference over one shared backbone pass.
//!
//! The backbone (all shared layers) runs once per request; its hidden states
//! stay on the tape and every condition's branch pass reuses them. A
//! sequential per-condition pass is kept alongside as the correctness
//! oracle: both paths must agree bitwise.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{backbone_pass, branch_pass, top_k, QueryOptions, RetrievalIndex};
use crate::model::Model;
use crate::synth::{ConditionFamily, CorpusIndex, InteractionEvent, Item, UserLog};
use crate::tensor::{Tape, Tensor};

// ── recall instructions ──────────────────────────────────────────────

/// Per-user cached retrieval conditions, ordered by descending engagement
/// count with ties broken by ascending category id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionCache {
    pub conditions: Vec<u32>,
    /// timestamp of the newest event the cache saw
    pub computed_at: u64,
    pub window_len: usize,
}

/// Count category engagements over the trailing window and keep the top P.
/// Shortfalls are padded from a global-popularity fallback list.
pub fn precompute_instructions(
    events: &[InteractionEvent],
    corpus: &CorpusIndex,
    family: ConditionFamily,
    window: usize,
    p: usize,
    fallback: &[u32],
) -> Result<InstructionCache> {
    if p == 0 {
        return Err(Error::Config("instruction count P must be >= 1".into()));
    }
    let start = events.len().saturating_sub(window);
    let tail = &events[start..];
    if tail.is_empty() && fallback.is_empty() {
        return Err(Error::Data("empty window and empty fallback list".into()));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for e in tail {
        *counts.entry(family.category_of(corpus.item(e.item_id))).or_insert(0) += 1;
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut conditions: Vec<u32> = ranked.into_iter().take(p).map(|(c, _)| c).collect();
    for &c in fallback {
        if conditions.len() >= p {
            break;
        }
        if !conditions.contains(&c) {
            conditions.push(c);
        }
    }
    Ok(InstructionCache {
        conditions,
        computed_at: tail.last().map(|e| e.ts).unwrap_or(0),
        window_len: window,
    })
}

/// Global category ranking for the fallback list: categories by descending
/// corpus frequency, ties ascending.
pub fn popularity_fallback(corpus: &CorpusIndex, family: ConditionFamily) -> Vec<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for item in &corpus.items {
        *counts.entry(family.category_of(item)).or_insert(0) += 1;
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(c, _)| c).collect()
}

// ── batched inference ────────────────────────────────────────────────

/// Serving-side knobs: the condition family and the optional temporal mask
/// applied at the backbone (off by default; the anchor is "now").
#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub family: ConditionFamily,
    pub temporal: Option<(u64, u64)>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions { family: ConditionFamily::Genre, temporal: None }
    }
}

/// One backbone pass, then a branch pass per condition against the cached
/// hidden states. Unknown conditions yield per-condition errors without
/// failing the batch. Outputs are ordered as the inputs.
pub fn batched_infer(
    model: &Model,
    items: &[&Item],
    timestamps: &[u64],
    conditions: &[u32],
    opts: &ServeOptions,
) -> Result<Vec<std::result::Result<Tensor, String>>> {
    if conditions.is_empty() {
        return Err(Error::Config("batched_infer with no conditions".into()));
    }
    let mut tape = Tape::new();
    let ids = model.params.register(&mut tape);
    let base = QueryOptions {
        condition: None,
        condition_family: Some(opts.family),
        temporal: opts.temporal,
    };
    let (h, backbone_mask) = backbone_pass(model, &mut tape, &ids, items, timestamps, &base)?;
    let mut out = Vec::with_capacity(conditions.len());
    for &c in conditions {
        let q_opts = QueryOptions {
            condition: Some(c),
            condition_family: Some(opts.family),
            temporal: opts.temporal,
        };
        let rep = branch_pass(model, &mut tape, &ids, h, items, &backbone_mask, &q_opts)
            .and_then(|id| Tensor::from_vec(&[model.config.d], tape.value(id).to_vec()));
        out.push(rep.map_err(|e| e.to_string()));
    }
    Ok(out)
}

/// Reference path: a full backbone + branch pass for a single condition.
/// `batched_infer` must match this bitwise for every condition.
pub fn single_condition_infer(
    model: &Model,
    items: &[&Item],
    timestamps: &[u64],
    condition: u32,
    opts: &ServeOptions,
) -> Result<Tensor> {
    let q_opts = QueryOptions {
        condition: Some(condition),
        condition_family: Some(opts.family),
        temporal: opts.temporal,
    };
    crate::eval::query_representation(model, items, timestamps, &q_opts)
}

// ── request/response ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServeRequest {
    pub user_id: u64,
    pub events: Vec<InteractionEvent>,
    pub k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: u32,
    pub items: Vec<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTimings {
    pub backbone_us: u64,
    pub branches_us: u64,
    pub search_us: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServeResponse {
    pub user_id: u64,
    pub results: Vec<ConditionResult>,
    pub timings: StageTimings,
    pub cache_computed_at: u64,
    pub cache_miss: bool,
}

/// In-process serving state: frozen model + index, per-user instruction
/// cache, and configuration.
pub struct Server<'a> {
    pub model: &'a Model,
    pub index: &'a RetrievalIndex,
    pub corpus: &'a CorpusIndex,
    pub opts: ServeOptions,
    pub instruction_window: usize,
    pub instructions_per_user: usize,
    pub fallback: Vec<u32>,
    cache: BTreeMap<u64, InstructionCache>,
    pub cache_misses: u64,
}

impl<'a> Server<'a> {
    pub fn new(
        model: &'a Model,
        index: &'a RetrievalIndex,
        corpus: &'a CorpusIndex,
        opts: ServeOptions,
        instruction_window: usize,
        instructions_per_user: usize,
    ) -> Server<'a> {
        let fallback = popularity_fallback(corpus, opts.family);
        Server {
            model,
            index,
            corpus,
            opts,
            instruction_window,
            instructions_per_user,
            fallback,
            cache: BTreeMap::new(),
            cache_misses: 0,
        }
    }

    /// Refresh the instruction cache from full user logs (between sessions).
    pub fn warm_cache(&mut self, logs: &[UserLog]) -> Result<()> {
        for log in logs {
            let cache = precompute_instructions(
                &log.events,
                self.corpus,
                self.opts.family,
                self.instruction_window,
                self.instructions_per_user,
                &self.fallback,
            )?;
            self.cache.insert(log.user_id, cache);
        }
        Ok(())
    }

    /// Full serving pipeline: instructions -> batched inference -> per
    /// condition search, with per-stage timings in microseconds.
    pub fn serve(&mut self, request: &ServeRequest) -> Result<ServeResponse> {
        let cache_miss = !self.cache.contains_key(&request.user_id);
        if cache_miss {
            self.cache_misses += 1;
            let fresh = precompute_instructions(
                &request.events,
                self.corpus,
                self.opts.family,
                self.instruction_window,
                self.instructions_per_user,
                &self.fallback,
            )?;
            self.cache.insert(request.user_id, fresh);
        }
        let cache = self.cache[&request.user_id].clone();

        let ctx_start = request.events.len().saturating_sub(self.model.config.max_seq_len);
        let window = &request.events[ctx_start..];
        if window.is_empty() {
            return Err(Error::Data(format!("user {} request has no events", request.user_id)));
        }
        let items: Vec<&Item> = window.iter().map(|e| self.corpus.item(e.item_id)).collect();
        let ts: Vec<u64> = window.iter().map(|e| e.ts).collect();

        let t0 = Instant::now();
        let mut tape = Tape::new();
        let ids = self.model.params.register(&mut tape);
        let base = QueryOptions {
            condition: None,
            condition_family: Some(self.opts.family),
            temporal: self.opts.temporal,
        };
        let (h, backbone_mask) =
            backbone_pass(self.model, &mut tape, &ids, &items, &ts, &base)?;
        let backbone_us = t0.elapsed().as_micros() as u64;

        let t1 = Instant::now();
        let mut reps: Vec<std::result::Result<Tensor, String>> =
            Vec::with_capacity(cache.conditions.len());
        for &c in &cache.conditions {
            let q_opts = QueryOptions {
                condition: Some(c),
                condition_family: Some(self.opts.family),
                temporal: self.opts.temporal,
            };
            let rep = branch_pass(self.model, &mut tape, &ids, h, &items, &backbone_mask, &q_opts)
                .and_then(|id| Tensor::from_vec(&[self.model.config.d], tape.value(id).to_vec()));
            reps.push(rep.map_err(|e| e.to_string()));
        }
        let branches_us = t1.elapsed().as_micros() as u64;

        let t2 = Instant::now();
        let mut results = Vec::with_capacity(reps.len());
        for (&c, rep) in cache.conditions.iter().zip(reps) {
            match rep {
                Ok(q) => results.push(ConditionResult {
                    condition: c,
                    items: top_k(self.index, q.data(), request.k.min(self.index.len()))?,
                    error: None,
                }),
                Err(e) => results.push(ConditionResult { condition: c, items: Vec::new(), error: Some(e) }),
            }
        }
        let search_us = t2.elapsed().as_micros() as u64;

        Ok(ServeResponse {
            user_id: request.user_id,
            results,
            timings: StageTimings { backbone_us, branches_us, search_us },
            cache_computed_at: cache.computed_at,
            cache_miss,
        })
    }
}

// ── latency bench ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub p: usize,
    pub stage: String,
    pub median_us: u64,
    pub p95_us: u64,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub rows: Vec<BenchRow>,
    /// sha-256 over every retrieved id list; proves compute determinism
    /// independently of the wall-clock columns
    pub retrieval_digest: String,
    pub backbone_median: BTreeMap<usize, u64>,
    pub total_median: BTreeMap<usize, u64>,
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let pos = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[pos]
}

/// Median/p95 per stage for each condition-batch size in `p_sweep`.
pub fn latency_bench(
    model: &Model,
    index: &RetrievalIndex,
    corpus: &CorpusIndex,
    log: &UserLog,
    p_sweep: &[usize],
    trials: usize,
    k: usize,
    opts: &ServeOptions,
) -> Result<BenchOutcome> {
    use sha2::{Digest, Sha256};
    let ctx_start = log.events.len().saturating_sub(model.config.max_seq_len);
    let window = &log.events[ctx_start..];
    let items: Vec<&Item> = window.iter().map(|e| corpus.item(e.item_id)).collect();
    let ts: Vec<u64> = window.iter().map(|e| e.ts).collect();
    let vocab = model.config.condition_vocab as usize;

    // warm up: touch every code path at the largest batch once
    let warm: Vec<u32> = (0..p_sweep.iter().copied().max().unwrap_or(1))
        .map(|i| (i % vocab) as u32)
        .collect();
    let _ = batched_infer(model, &items, &ts, &warm, opts)?;

    // trials interleave the sweep so frequency drift hits every P equally
    let mut backbone: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut branches: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut search: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut total: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut digest = Sha256::new();
    for trial in 0..trials {
        for &p in p_sweep {
            let conditions: Vec<u32> = (0..p).map(|i| (i % vocab) as u32).collect();
            let t0 = Instant::now();
            let mut tape = Tape::new();
            let ids = model.params.register(&mut tape);
            let base = QueryOptions {
                condition: None,
                condition_family: Some(opts.family),
                temporal: opts.temporal,
            };
            let (h, backbone_mask) = backbone_pass(model, &mut tape, &ids, &items, &ts, &base)?;
            let t_backbone = t0.elapsed().as_micros() as u64;

            let t1 = Instant::now();
            let mut reps = Vec::with_capacity(p);
            for &c in &conditions {
                let q_opts = QueryOptions {
                    condition: Some(c),
                    condition_family: Some(opts.family),
                    temporal: opts.temporal,
                };
                let rep = branch_pass(model, &mut tape, &ids, h, &items, &backbone_mask, &q_opts)?;
                reps.push(tape.value(rep).to_vec());
            }
            let t_branches = t1.elapsed().as_micros() as u64;

            let t2 = Instant::now();
            for rep in &reps {
                let retrieved = top_k(index, rep, k.min(index.len()))?;
                if trial == 0 {
                    for id in &retrieved {
                        digest.update(id.to_le_bytes());
                    }
                }
            }
            let t_search = t2.elapsed().as_micros() as u64;

            backbone.entry(p).or_default().push(t_backbone);
            branches.entry(p).or_default().push(t_branches);
            search.entry(p).or_default().push(t_search);
            total.entry(p).or_default().push(t_backbone + t_branches + t_search);
        }
    }

    let mut rows = Vec::new();
    let mut backbone_median = BTreeMap::new();
    let mut total_median = BTreeMap::new();
    for &p in p_sweep {
        for (stage, series) in [
            ("backbone", backbone.get_mut(&p).unwrap()),
            ("branches", branches.get_mut(&p).unwrap()),
            ("search", search.get_mut(&p).unwrap()),
            ("total", total.get_mut(&p).unwrap()),
        ] {
            series.sort_unstable();
            rows.push(BenchRow {
                p,
                stage: stage.to_string(),
                median_us: percentile(series, 0.5),
                p95_us: percentile(series, 0.95),
            });
        }
        backbone_median.insert(p, percentile(&backbone[&p], 0.5));
        total_median.insert(p, percentile(&total[&p], 0.5));
    }
    Ok(BenchOutcome {
        rows,
        retrieval_digest: format!("{:x}", digest.finalize()),
        backbone_median,
        total_median,
    })
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "P,stage,median_us,p95_us")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.p, r.stage, r.median_us, r.p95_us)?;
    }
    f.flush()?;
    Ok(())
}
