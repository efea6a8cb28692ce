//! Corpus-wide exact inner-product retrieval and the evaluation metrics:
//! hit rate, condition compliance, and the multi-offset horizon curve.
//!
//! The index is an immutable matrix of fused item embeddings; search is an
//! exhaustive scan (exact by construction, fast at this corpus size) behind
//! an interface an approximate backend could replace later.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mask::{self, AttentionMask};
use crate::model::Model;
use crate::synth::{ConditionFamily, CorpusIndex, Item, UserLog};
use crate::tensor::{Tape, Tensor};

// ── index ────────────────────────────────────────────────────────────

/// Immutable item-embedding matrix for exact top-K inner-product search.
pub struct RetrievalIndex {
    ids: Vec<u64>,
    matrix: Vec<f64>,
    d: usize,
    /// provenance: hash of the checkpoint the embeddings came from
    pub built_from: String,
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.d..(i + 1) * self.d]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Scores of every item against a query, in index row order.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        assert_eq!(query.len(), self.d);
        (0..self.len())
            .map(|i| self.row(i).iter().zip(query).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Rank of `item_id` under a query (1 = best). Ties resolve by ascending
    /// item id, matching `top_k`.
    pub fn rank_of(&self, query: &[f64], item_id: u64) -> Option<usize> {
        let pos = self.ids.iter().position(|&id| id == item_id)?;
        let scores = self.scores(query);
        let target_score = scores[pos];
        let mut rank = 1;
        for (i, &s) in scores.iter().enumerate() {
            if s > target_score || (s == target_score && self.ids[i] < item_id) {
                rank += 1;
            }
        }
        Some(rank)
    }
}

/// Embed the whole corpus through the frozen model's fusion path.
pub fn build_index(model: &Model, corpus: &[Item], built_from: &str) -> Result<RetrievalIndex> {
    if corpus.is_empty() {
        return Err(Error::Data("cannot build an index over an empty corpus".into()));
    }
    let d = model.config.d;
    let mut matrix = Vec::with_capacity(corpus.len() * d);
    let mut tape = Tape::new();
    let ids = model.params.register(&mut tape);
    for chunk in corpus.chunks(2048) {
        let refs: Vec<&Item> = chunk.iter().collect();
        let fused = model.fuse_items(&mut tape, &ids, &refs)?;
        matrix.extend_from_slice(tape.value(fused));
    }
    Ok(RetrievalIndex {
        ids: corpus.iter().map(|i| i.item_id).collect(),
        matrix,
        d,
        built_from: built_from.to_string(),
    })
}

/// Exact top-K by descending inner product, ties broken by ascending id.
pub fn top_k(index: &RetrievalIndex, query: &[f64], k: usize) -> Result<Vec<u64>> {
    if k > index.len() {
        return Err(Error::Config(format!(
            "top_k: K={} exceeds corpus size {}",
            k,
            index.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let scores = index.scores(query);
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| index.ids[a].cmp(&index.ids[b]))
    });
    Ok(order[..k].iter().map(|&i| index.ids[i]).collect())
}

/// Fraction of retrieved items whose category matches the condition.
pub fn cc_at_k(retrieved: &[u64], condition: u32, corpus: &CorpusIndex, family: ConditionFamily) -> Result<f64> {
    if retrieved.is_empty() {
        return Err(Error::Config("condition compliance of an empty retrieval".into()));
    }
    let hits = retrieved
        .iter()
        .filter(|&&id| family.category_of(corpus.item(id)) == condition)
        .count();
    Ok(hits as f64 / retrieved.len() as f64)
}

// ── query construction ───────────────────────────────────────────────

/// How a retrieval query is built from a context sequence.
#[derive(Debug, Clone, Default)]
pub struct QueryOptions {
    /// condition id under the model's fine-tuning family, plus its mask
    pub condition: Option<u32>,
    /// family used to map items to categories for the condition mask
    pub condition_family: Option<ConditionFamily>,
    /// serving-side temporal mask (anchor timestamp, width); off by default
    pub temporal: Option<(u64, u64)>,
}

/// The single-step retrieval representation: backbone under causal
/// (+ optional temporal) masks, then branch 1 under an optional
/// condition-sparse mask.
pub fn query_representation(
    model: &Model,
    items: &[&Item],
    timestamps: &[u64],
    opts: &QueryOptions,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = model.params.register(&mut tape);
    let rep = query_representation_on_tape(model, &mut tape, &ids, items, timestamps, opts)?;
    Tensor::from_vec(&[model.config.d], tape.value(rep).to_vec())
}

/// Tape-level variant so serving can reuse one backbone pass across
/// conditions; see `serve::batched_infer`.
pub fn query_representation_on_tape(
    model: &Model,
    tape: &mut Tape,
    ids: &[crate::tensor::BufId],
    items: &[&Item],
    timestamps: &[u64],
    opts: &QueryOptions,
) -> Result<crate::tensor::BufId> {
    let (h, backbone_mask) = backbone_pass(model, tape, ids, items, timestamps, opts)?;
    branch_pass(model, tape, ids, h, items, &backbone_mask, opts)
}

pub(crate) fn backbone_pass(
    model: &Model,
    tape: &mut Tape,
    ids: &[crate::tensor::BufId],
    items: &[&Item],
    timestamps: &[u64],
    opts: &QueryOptions,
) -> Result<(crate::tensor::BufId, AttentionMask)> {
    let n = items.len();
    let causal = mask::build_causal_mask(n)?;
    let backbone_mask = match opts.temporal {
        Some((anchor, delta)) => {
            let temporal = mask::build_temporal_mask(timestamps, anchor, delta)?;
            mask::combine(&[&causal, &temporal])?
        }
        None => causal,
    };
    let (h, _) = model.encode_sequence(tape, ids, items, &backbone_mask)?;
    Ok((h, backbone_mask))
}

pub(crate) fn branch_pass(
    model: &Model,
    tape: &mut Tape,
    ids: &[crate::tensor::BufId],
    h: crate::tensor::BufId,
    items: &[&Item],
    backbone_mask: &AttentionMask,
    opts: &QueryOptions,
) -> Result<crate::tensor::BufId> {
    let n = items.len();
    let branch_mask = match opts.condition {
        Some(c) => {
            let family = opts.condition_family.unwrap_or(ConditionFamily::Genre);
            let cats: Vec<u32> = items.iter().map(|i| family.category_of(i)).collect();
            let causal = mask::build_causal_mask(n)?;
            let cond = mask::build_condition_mask(&cats, c)?;
            mask::combine(&[&causal, &cond])?
        }
        None => backbone_mask.clone(),
    };
    let condition = (model.config.condition_embedding_enabled && opts.condition.is_some())
        .then(|| opts.condition.unwrap());
    model.branch_forward(tape, ids, h, 1, &branch_mask, condition)
}

// ── evaluation cases ─────────────────────────────────────────────────

/// A leave-one-out case: context ends at a request boundary, the target is
/// the first item of the next request (horizon offset 1).
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub user: usize,
    pub ctx_start: usize,
    pub ctx_end: usize,
    pub target_index: usize,
}

/// Boundary-aligned cases: the cut precedes the final `holdout_requests`
/// requests of each user; users without enough history are skipped.
pub fn build_eval_cases(
    logs: &[UserLog],
    holdout_requests: usize,
    context_len: usize,
) -> (Vec<EvalCase>, usize) {
    let mut cases = Vec::new();
    let mut skipped = 0usize;
    for (user, log) in logs.iter().enumerate() {
        let bounds = log.request_bounds();
        let nreq = bounds.len() - 1;
        if nreq <= holdout_requests {
            skipped += 1;
            continue;
        }
        let cut_request = nreq - holdout_requests;
        let ctx_end = bounds[cut_request];
        let ctx_start = ctx_end.saturating_sub(context_len);
        if ctx_end - ctx_start < 2 {
            skipped += 1;
            continue;
        }
        cases.push(EvalCase { user, ctx_start, ctx_end, target_index: ctx_end });
    }
    (cases, skipped)
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonPoint {
    pub offset: usize,
    pub hr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub hr: Vec<(usize, f64)>,
    pub cc: Option<Vec<(usize, f64)>>,
    pub horizon: Option<Vec<HorizonPoint>>,
    pub num_cases: usize,
    pub skipped: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,k,value,n\n");
        for (k, v) in &self.hr {
            s.push_str(&format!("hr,{k},{v:.6},{}\n", self.num_cases));
        }
        if let Some(cc) = &self.cc {
            for (k, v) in cc {
                s.push_str(&format!("cc,{k},{v:.6},{}\n", self.num_cases));
            }
        }
        if let Some(points) = &self.horizon {
            for p in points {
                s.push_str(&format!("horizon_hr,{},{:.6},{}\n", p.offset, p.hr, p.n));
            }
        }
        s
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn cc_at(&self, k: usize) -> Option<f64> {
        self.cc.as_ref()?.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

/// Hit rate at each K over the eval cases; queries are branch-1
/// representations, optionally conditioned on each target's category.
pub fn hr_at_k(
    index: &RetrievalIndex,
    model: &Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    cases: &[EvalCase],
    ks: &[usize],
    conditioned: bool,
    family: ConditionFamily,
) -> Result<Vec<(usize, f64)>> {
    if cases.is_empty() {
        return Err(Error::Data("no evaluation cases".into()));
    }
    let ranks: Vec<usize> = cases
        .par_iter()
        .map(|case| -> Result<usize> {
            let log = &logs[case.user];
            let items: Vec<&Item> = log.events[case.ctx_start..case.ctx_end]
                .iter()
                .map(|e| corpus.item(e.item_id))
                .collect();
            let ts: Vec<u64> =
                log.events[case.ctx_start..case.ctx_end].iter().map(|e| e.ts).collect();
            let target_id = log.events[case.target_index].item_id;
            let opts = QueryOptions {
                condition: conditioned.then(|| family.category_of(corpus.item(target_id))),
                condition_family: conditioned.then_some(family),
                temporal: None,
            };
            let q = query_representation(model, &items, &ts, &opts)?;
            index
                .rank_of(q.data(), target_id)
                .ok_or_else(|| Error::Data(format!("target {target_id} missing from index")))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r <= k).count();
            (k, hits as f64 / ranks.len() as f64)
        })
        .collect())
}

/// Mean condition compliance at each K, conditioning each query on its
/// target's category.
#[allow(clippy::too_many_arguments)]
pub fn cc_eval(
    index: &RetrievalIndex,
    model: &Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    cases: &[EvalCase],
    ks: &[usize],
    conditioned: bool,
    family: ConditionFamily,
) -> Result<Vec<(usize, f64)>> {
    if cases.is_empty() {
        return Err(Error::Data("no evaluation cases".into()));
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let per_case: Vec<Vec<f64>> = cases
        .par_iter()
        .map(|case| -> Result<Vec<f64>> {
            let log = &logs[case.user];
            let items: Vec<&Item> = log.events[case.ctx_start..case.ctx_end]
                .iter()
                .map(|e| corpus.item(e.item_id))
                .collect();
            let ts: Vec<u64> =
                log.events[case.ctx_start..case.ctx_end].iter().map(|e| e.ts).collect();
            let target = corpus.item(log.events[case.target_index].item_id);
            let condition = family.category_of(target);
            let opts = QueryOptions {
                condition: conditioned.then_some(condition),
                condition_family: conditioned.then_some(family),
                temporal: None,
            };
            let q = query_representation(model, &items, &ts, &opts)?;
            let retrieved = top_k(index, q.data(), max_k)?;
            ks.iter()
                .map(|&k| cc_at_k(&retrieved[..k], condition, corpus, family))
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let mean = per_case.iter().map(|v| v[i]).sum::<f64>() / per_case.len() as f64;
            (k, mean)
        })
        .collect())
}

/// One query per user at the cut; hit rate against the ground-truth item at
/// each of the next `horizon` offsets.
pub fn horizon_eval(
    index: &RetrievalIndex,
    model: &Model,
    corpus: &CorpusIndex,
    logs: &[UserLog],
    cases: &[EvalCase],
    horizon: usize,
    k: usize,
) -> Result<Vec<HorizonPoint>> {
    if cases.is_empty() {
        return Err(Error::Data("no evaluation cases".into()));
    }
    let per_case: Vec<Vec<Option<bool>>> = cases
        .par_iter()
        .map(|case| -> Result<Vec<Option<bool>>> {
            let log = &logs[case.user];
            let items: Vec<&Item> = log.events[case.ctx_start..case.ctx_end]
                .iter()
                .map(|e| corpus.item(e.item_id))
                .collect();
            let ts: Vec<u64> =
                log.events[case.ctx_start..case.ctx_end].iter().map(|e| e.ts).collect();
            let q = query_representation(model, &items, &ts, &QueryOptions::default())?;
            (1..=horizon)
                .map(|o| {
                    let idx = case.ctx_end + o - 1;
                    match log.events.get(idx) {
                        Some(e) => {
                            let rank = index.rank_of(q.data(), e.item_id).ok_or_else(|| {
                                Error::Data(format!("item {} missing from index", e.item_id))
                            })?;
                            Ok(Some(rank <= k))
                        }
                        None => Ok(None),
                    }
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<Option<bool>>>>>()?;
    Ok((1..=horizon)
        .map(|o| {
            let col: Vec<bool> = per_case.iter().filter_map(|v| v[o - 1]).collect();
            HorizonPoint {
                offset: o,
                hr: if col.is_empty() {
                    0.0
                } else {
                    col.iter().filter(|&&b| b).count() as f64 / col.len() as f64
                },
                n: col.len(),
            }
        })
        .collect())
}

pub fn write_horizon_csv(path: &Path, points: &[HorizonPoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "offset,hr,n")?;
    for p in points {
        writeln!(f, "{},{:.6},{}", p.offset, p.hr, p.n)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_dataset, group_by_user, GenConfig, ReleaseBucket};

    fn tiny_model(num_genres: u32, num_languages: u32) -> Model {
        Model::new(ModelConfig {
            d: 16,
            num_backbone_layers: 1,
            num_heads: 2,
            num_branches: 2,
            hash_buckets: 256,
            num_genres,
            num_languages,
            condition_vocab: num_genres,
            max_seq_len: 32,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn mini_corpus(n: u64) -> Vec<Item> {
        (0..n)
            .map(|item_id| Item {
                item_id,
                genre: (item_id % 4) as u32,
                language: (item_id % 2) as u32,
                release_bucket: ReleaseBucket::Classic,
            })
            .collect()
    }

    #[test]
    fn index_rows_match_single_item_fusion() {
        let model = tiny_model(4, 2);
        let corpus = mini_corpus(30);
        let index = build_index(&model, &corpus, "test").unwrap();
        assert_eq!(index.len(), 30);
        for (i, item) in corpus.iter().enumerate().step_by(7) {
            let single = model.fuse_item_embedding(item).unwrap();
            assert_eq!(index.row(i), single.data(), "row {i} disagrees");
        }
    }

    #[test]
    fn index_rebuild_is_identical() {
        let model = tiny_model(4, 2);
        let corpus = mini_corpus(20);
        let a = build_index(&model, &corpus, "x").unwrap();
        let b = build_index(&model, &corpus, "x").unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.ids, b.ids);
    }

    #[test]
    fn empty_corpus_rejected() {
        let model = tiny_model(4, 2);
        assert!(build_index(&model, &[], "x").is_err());
    }

    #[test]
    fn top_k_matches_exhaustive_oracle() {
        let model = tiny_model(4, 2);
        let corpus = mini_corpus(50);
        let index = build_index(&model, &corpus, "x").unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        for _ in 0..20 {
            let query = Tensor::randn(&[16], 1.0, &mut rng);
            let got = top_k(&index, query.data(), 10).unwrap();
            // oracle: repeated max-scan selection
            let scores = index.scores(query.data());
            let mut taken = vec![false; scores.len()];
            let mut expect = Vec::new();
            for _ in 0..10 {
                let mut best: Option<usize> = None;
                for i in 0..scores.len() {
                    if taken[i] {
                        continue;
                    }
                    best = match best {
                        None => Some(i),
                        Some(b) => {
                            if scores[i] > scores[b]
                                || (scores[i] == scores[b] && index.ids()[i] < index.ids()[b])
                            {
                                Some(i)
                            } else {
                                Some(b)
                            }
                        }
                    };
                }
                let b = best.unwrap();
                taken[b] = true;
                expect.push(index.ids()[b]);
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn top_k_full_corpus_is_permutation() {
        let model = tiny_model(4, 2);
        let corpus = mini_corpus(25);
        let index = build_index(&model, &corpus, "x").unwrap();
        let q = vec![0.1; 16];
        let all = top_k(&index, &q, 25).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..25u64).collect::<Vec<_>>());
        assert!(top_k(&index, &q, 26).is_err());
        assert!(top_k(&index, &q, 0).unwrap().is_empty());
    }

    #[test]
    fn top_k_tie_break_is_ascending_id_and_stable() {
        let model = tiny_model(4, 2);
        let corpus = mini_corpus(12);
        let index = build_index(&model, &corpus, "x").unwrap();
        let zero = vec![0.0; 16]; // every score ties at 0
        let a = top_k(&index, &zero, 12).unwrap();
        assert_eq!(a, (0..12u64).collect::<Vec<_>>());
        assert_eq!(a, top_k(&index, &zero, 12).unwrap());
    }

    #[test]
    fn cc_at_k_counts() {
        let corpus = CorpusIndex::new(mini_corpus(40), 4);
        // genres cycle 0,1,2,3: exactly 1/4 of any aligned window matches
        let retrieved: Vec<u64> = (0..12).collect();
        let cc = cc_at_k(&retrieved, 1, &corpus, ConditionFamily::Genre).unwrap();
        assert!((cc - 0.25).abs() < 1e-12);
        let all: Vec<u64> = vec![1, 5, 9];
        assert_eq!(cc_at_k(&all, 1, &corpus, ConditionFamily::Genre).unwrap(), 1.0);
        assert_eq!(cc_at_k(&all, 2, &corpus, ConditionFamily::Genre).unwrap(), 0.0);
        // 7 of 10 matching
        let mixed: Vec<u64> = vec![1, 5, 9, 13, 17, 21, 25, 0, 2, 3];
        assert!((cc_at_k(&mixed, 1, &corpus, ConditionFamily::Genre).unwrap() - 0.7).abs() < 1e-12);
    }

    fn eval_world() -> (CorpusIndex, Vec<UserLog>, Model) {
        let gen = GenConfig {
            num_users: 12,
            num_items: 120,
            num_genres: 4,
            num_languages: 2,
            requests_per_user: 10,
            items_per_request: 3,
            seed: 33,
            ..GenConfig::default()
        };
        let (items, events) = generate_dataset(&gen);
        let corpus = CorpusIndex::new(items, gen.num_genres);
        let logs = group_by_user(&events).unwrap();
        (corpus, logs, tiny_model(4, 2))
    }

    #[test]
    fn hr_full_corpus_k_is_one() {
        let (corpus, logs, model) = eval_world();
        let index = build_index(&model, &corpus.items, "x").unwrap();
        let (cases, _) = build_eval_cases(&logs, 2, 12);
        let hr = hr_at_k(
            &index, &model, &corpus, &logs, &cases, &[corpus.items.len()], false,
            ConditionFamily::Genre,
        )
        .unwrap();
        assert_eq!(hr[0].1, 1.0);
    }

    #[test]
    fn hr_matches_hand_scored_oracle() {
        let (corpus, logs, model) = eval_world();
        let index = build_index(&model, &corpus.items, "x").unwrap();
        let (cases, _) = build_eval_cases(&logs, 2, 12);
        let ks = [5usize, 20];
        let hr = hr_at_k(&index, &model, &corpus, &logs, &cases, &ks, false, ConditionFamily::Genre)
            .unwrap();
        // oracle: recompute each query and score by explicit comparison
        for (ki, &k) in ks.iter().enumerate() {
            let mut hits = 0usize;
            for case in &cases {
                let log = &logs[case.user];
                let items: Vec<&Item> = log.events[case.ctx_start..case.ctx_end]
                    .iter()
                    .map(|e| corpus.item(e.item_id))
                    .collect();
                let ts: Vec<u64> =
                    log.events[case.ctx_start..case.ctx_end].iter().map(|e| e.ts).collect();
                let q =
                    query_representation(&model, &items, &ts, &QueryOptions::default()).unwrap();
                let list = top_k(&index, q.data(), k).unwrap();
                if list.contains(&log.events[case.target_index].item_id) {
                    hits += 1;
                }
            }
            let expected = hits as f64 / cases.len() as f64;
            assert!((hr[ki].1 - expected).abs() < 1e-12, "K={k}");
        }
    }

    #[test]
    fn horizon_offset_one_equals_hr() {
        let (corpus, logs, model) = eval_world();
        let index = build_index(&model, &corpus.items, "x").unwrap();
        let (cases, _) = build_eval_cases(&logs, 2, 12);
        let hr = hr_at_k(&index, &model, &corpus, &logs, &cases, &[10], false, ConditionFamily::Genre)
            .unwrap();
        let horizon = horizon_eval(&index, &model, &corpus, &logs, &cases, 1, 10).unwrap();
        assert_eq!(horizon.len(), 1);
        assert!((horizon[0].hr - hr[0].1).abs() < 1e-12);
        assert_eq!(horizon[0].n, cases.len());
    }

    #[test]
    fn horizon_skips_users_with_short_futures() {
        let (corpus, logs, model) = eval_world();
        let index = build_index(&model, &corpus.items, "x").unwrap();
        let (cases, _) = build_eval_cases(&logs, 2, 12);
        // holdout is 2 requests x 3 items = 6 future events
        let points = horizon_eval(&index, &model, &corpus, &logs, &cases, 8, 10).unwrap();
        assert_eq!(points[5].n, cases.len());
        assert_eq!(points[6].n, 0, "offset beyond the holdout should have no cases");
    }

    #[test]
    fn report_serialization() {
        let report = EvalReport {
            hr: vec![(10, 0.5), (20, 0.75)],
            cc: Some(vec![(10, 0.9)]),
            horizon: None,
            num_cases: 4,
            skipped: 1,
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("metric,k,value,n\n"));
        assert!(csv.contains("hr,10,0.500000,4"));
        assert!(csv.contains("cc,10,0.900000,4"));
        let json = report.to_json_line().unwrap();
        assert!(!json.contains('\n'));
        assert!(json.contains("\"num_cases\":4"));
        assert_eq!(report.hr_at(20), Some(0.75));
        assert_eq!(report.cc_at(10), Some(0.9));
    }
}
