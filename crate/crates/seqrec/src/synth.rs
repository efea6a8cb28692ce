//! Synthetic item corpora and batch-exposure interaction logs.
//!
//! Requests expose `m` items simultaneously; the log serializes them in an
//! arbitrary order under one shared timestamp. Short-horizon structure comes
//! from bursts that persist across a few requests, long-horizon structure
//! from each user's slowly drifting genre profile. Within-request order
//! carries no signal by construction.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BASE_EPOCH: u64 = 1_600_000_000;

// ── domain types ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReleaseBucket {
    New,
    Classic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: u64,
    pub genre: u32,
    pub language: u32,
    pub release_bucket: ReleaseBucket,
}

/// One logged exposure. Events sharing `request_id` share `ts`; `idx` is the
/// arbitrary within-request serialization position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionEvent {
    pub user_id: u64,
    pub item_id: u64,
    pub ts: u64,
    pub request_id: u64,
    pub idx: u32,
}

/// Generator-internal latent state; the ground truth behind a user's log.
#[derive(Debug, Clone)]
pub struct UserProfile {
    /// Per-genre interest weights, nonnegative, summing to 1.
    pub interests: Vec<f64>,
    /// Log-space random-walk scale applied once per request.
    pub drift_rate: f64,
    /// Burst genre of the most recent request.
    pub current_burst: u32,
}

impl UserProfile {
    fn assert_normalized(&self) {
        debug_assert!(self.interests.iter().all(|w| *w >= 0.0));
        debug_assert!((self.interests.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub num_users: u64,
    pub num_items: u64,
    pub num_genres: u32,
    pub num_languages: u32,
    pub requests_per_user: u32,
    pub items_per_request: u32,
    pub mean_request_interval_s: f64,
    pub core_genres_per_user: u32,
    /// geometric decay between successive core-genre weights
    pub core_weight_decay: f64,
    pub burst_repeat_prob: f64,
    pub explore_prob: f64,
    pub drift_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_users: 10_000,
            num_items: 3_000,
            num_genres: 10,
            num_languages: 4,
            requests_per_user: 40,
            items_per_request: 5,
            // 15 minutes, the documented default for the safe margin
            mean_request_interval_s: 900.0,
            core_genres_per_user: 3,
            core_weight_decay: 0.6,
            burst_repeat_prob: 0.5,
            explore_prob: 0.12,
            drift_rate: 0.02,
            seed: 7,
        }
    }
}

/// Items grouped for popularity-biased draws.
#[derive(Debug, Clone)]
pub struct CorpusIndex {
    pub items: Vec<Item>,
    by_genre: Vec<Vec<u64>>,
}

impl CorpusIndex {
    pub fn new(items: Vec<Item>, num_genres: u32) -> CorpusIndex {
        let mut by_genre = vec![Vec::new(); num_genres as usize];
        for item in &items {
            by_genre[item.genre as usize].push(item.item_id);
        }
        CorpusIndex { items, by_genre }
    }

    pub fn item(&self, id: u64) -> &Item {
        &self.items[id as usize]
    }

    pub fn genre_items(&self, genre: u32) -> &[u64] {
        &self.by_genre[genre as usize]
    }

    pub fn num_genres(&self) -> u32 {
        self.by_genre.len() as u32
    }
}

// ── seeding and distributions ────────────────────────────────────────

/// SplitMix64 finalizer; used to derive independent substream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Normalized Zipf(s) weights over ranks 1..=n.
pub fn zipf_weights(n: usize, s: f64) -> Vec<f64> {
    let mut w: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Inverse-CDF draw from explicit weights (must sum to ~1).
fn draw_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

fn exponential(mean: f64, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -mean * u.ln()
}

// ── corpus ───────────────────────────────────────────────────────────

/// Items with genres drawn from a Zipf(1.1) popularity distribution.
pub fn generate_corpus(num_items: u64, num_genres: u32, num_languages: u32, seed: u64) -> Vec<Item> {
    assert!(num_genres >= 1 && num_languages >= 1, "vocab sizes must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0FFEE));
    let genre_w = zipf_weights(num_genres as usize, 1.1);
    (0..num_items)
        .map(|item_id| Item {
            item_id,
            genre: draw_weighted(&genre_w, &mut rng) as u32,
            language: rng.gen_range(0..num_languages),
            release_bucket: if rng.gen_bool(0.2) { ReleaseBucket::New } else { ReleaseBucket::Classic },
        })
        .collect()
}

// ── user logs ────────────────────────────────────────────────────────

/// Initial latent profile: a few core genres with geometrically decaying
/// weights, cores chosen proportionally to genre popularity.
pub fn sample_profile(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> UserProfile {
    let g = cfg.num_genres as usize;
    let cores = (cfg.core_genres_per_user as usize).min(g);
    let genre_w = zipf_weights(g, 1.1);
    let mut remaining: Vec<f64> = genre_w.clone();
    let mut interests = vec![0.0; g];
    let mut weight = 1.0;
    let mut total = 0.0;
    for _ in 0..cores {
        let sum: f64 = remaining.iter().sum();
        let norm: Vec<f64> = remaining.iter().map(|w| w / sum).collect();
        let pick = draw_weighted(&norm, rng);
        interests[pick] = weight;
        total += weight;
        remaining[pick] = 0.0;
        weight *= cfg.core_weight_decay;
    }
    for w in &mut interests {
        *w /= total;
    }
    let profile = UserProfile { interests, drift_rate: cfg.drift_rate, current_burst: 0 };
    profile.assert_normalized();
    profile
}

fn drift(profile: &mut UserProfile, rng: &mut ChaCha8Rng) {
    if profile.drift_rate == 0.0 {
        return;
    }
    for w in profile.interests.iter_mut() {
        if *w > 0.0 {
            // Box-Muller for one standard normal
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *w *= (profile.drift_rate * z).exp();
        }
    }
    let total: f64 = profile.interests.iter().sum();
    for w in profile.interests.iter_mut() {
        *w /= total;
    }
    profile.assert_normalized();
}

/// One user's serialized exposure log. Every request exposes `m` items drawn
/// from the request's burst genre by within-genre popularity; the slate order
/// is a random permutation. Time advances by an exponential interval (>= 1 s).
pub fn generate_user_log(
    profile: &mut UserProfile,
    user_id: u64,
    corpus: &CorpusIndex,
    num_requests: u32,
    items_per_request: u32,
    mean_request_interval: f64,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<InteractionEvent> {
    assert!(items_per_request >= 1, "items_per_request must be >= 1");
    assert!(mean_request_interval > 0.0, "mean interval must be positive");
    let m = items_per_request as usize;
    let mut events = Vec::with_capacity(num_requests as usize * m);
    let mut t = BASE_EPOCH + rng.gen_range(0..86_400);
    for r in 0..num_requests {
        drift(profile, rng);
        let burst = if r == 0 {
            draw_weighted(&profile.interests, rng) as u32
        } else if rng.gen_bool(cfg.burst_repeat_prob) {
            profile.current_burst
        } else if rng.gen_bool(cfg.explore_prob) {
            rng.gen_range(0..corpus.num_genres())
        } else {
            draw_weighted(&profile.interests, rng) as u32
        };
        profile.current_burst = burst;

        let pool = corpus.genre_items(burst);
        let pop = zipf_weights(pool.len(), 1.1);
        let mut slate: Vec<u64> = Vec::with_capacity(m);
        for _ in 0..m {
            let mut pick = pool[draw_weighted(&pop, rng)];
            for _ in 0..16 {
                if !slate.contains(&pick) {
                    break;
                }
                pick = pool[draw_weighted(&pop, rng)];
            }
            slate.push(pick);
        }
        // arbitrary serialization order: encodes no signal
        for i in (1..slate.len()).rev() {
            let j = rng.gen_range(0..=i);
            slate.swap(i, j);
        }
        for (idx, &item_id) in slate.iter().enumerate() {
            events.push(InteractionEvent {
                user_id,
                item_id,
                ts: t,
                request_id: r as u64,
                idx: idx as u32,
            });
        }
        t += (exponential(mean_request_interval, rng).round() as u64).max(1);
    }
    events
}

/// Full benchmark: corpus plus logs for every user. Users are generated in
/// parallel with per-user seeds derived from (seed, user_id); output order is
/// by user id regardless of scheduling.
pub fn generate_dataset(cfg: &GenConfig) -> (Vec<Item>, Vec<InteractionEvent>) {
    let items = generate_corpus(cfg.num_items, cfg.num_genres, cfg.num_languages, cfg.seed);
    let corpus = CorpusIndex::new(items.clone(), cfg.num_genres);
    let per_user: Vec<Vec<InteractionEvent>> = (0..cfg.num_users)
        .into_par_iter()
        .map(|user_id| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, user_id.wrapping_add(1)));
            let mut profile = sample_profile(cfg, &mut rng);
            generate_user_log(
                &mut profile,
                user_id,
                &corpus,
                cfg.requests_per_user,
                cfg.items_per_request,
                cfg.mean_request_interval_s,
                cfg,
                &mut rng,
            )
        })
        .collect();
    (items, per_user.into_iter().flatten().collect())
}

// ── grouped logs and stats ───────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct UserLog {
    pub user_id: u64,
    pub events: Vec<InteractionEvent>,
}

impl UserLog {
    /// Index of the first event of each request, plus a final sentinel.
    pub fn request_bounds(&self) -> Vec<usize> {
        let mut bounds = Vec::new();
        let mut last = None;
        for (i, e) in self.events.iter().enumerate() {
            if last != Some(e.request_id) {
                bounds.push(i);
                last = Some(e.request_id);
            }
        }
        bounds.push(self.events.len());
        bounds
    }
}

/// Group a flat event stream by user, preserving per-user order. Validates
/// the log invariants (nondecreasing timestamps and request ids, shared
/// timestamp within a request).
pub fn group_by_user(events: &[InteractionEvent]) -> Result<Vec<UserLog>> {
    let mut logs: Vec<UserLog> = Vec::new();
    let mut index: std::collections::BTreeMap<u64, usize> = std::collections::BTreeMap::new();
    for e in events {
        let slot = *index.entry(e.user_id).or_insert_with(|| {
            logs.push(UserLog { user_id: e.user_id, events: Vec::new() });
            logs.len() - 1
        });
        if let Some(prev) = logs[slot].events.last() {
            if e.ts < prev.ts || e.request_id < prev.request_id {
                return Err(Error::Data(format!(
                    "user {} log not serialized in time order",
                    e.user_id
                )));
            }
            if e.request_id == prev.request_id && e.ts != prev.ts {
                return Err(Error::Data(format!(
                    "user {} request {} has mixed timestamps",
                    e.user_id, e.request_id
                )));
            }
        }
        logs[slot].events.push(e.clone());
    }
    logs.sort_by_key(|l| l.user_id);
    Ok(logs)
}

#[derive(Debug, Clone, Copy)]
pub struct LogStats {
    pub num_events: usize,
    pub num_requests: usize,
    pub mean_request_interval: f64,
}

pub fn log_stats(logs: &[UserLog]) -> LogStats {
    let mut num_events = 0;
    let mut num_requests = 0;
    let mut interval_sum = 0.0;
    let mut interval_count = 0u64;
    for log in logs {
        num_events += log.events.len();
        let bounds = log.request_bounds();
        num_requests += bounds.len() - 1;
        let times: Vec<u64> = bounds[..bounds.len() - 1]
            .iter()
            .map(|&i| log.events[i].ts)
            .collect();
        for w in times.windows(2) {
            interval_sum += (w[1] - w[0]) as f64;
            interval_count += 1;
        }
    }
    LogStats {
        num_events,
        num_requests,
        mean_request_interval: if interval_count == 0 {
            0.0
        } else {
            interval_sum / interval_count as f64
        },
    }
}

/// Mean fraction (and mean count) of context positions removed by a temporal
/// mask of width `delta_tau`, measured at every request boundary.
pub fn temporal_mask_coverage(logs: &[UserLog], delta_tau: u64) -> (f64, f64) {
    let mut frac_sum = 0.0;
    let mut count_sum = 0.0;
    let mut n = 0u64;
    for log in logs {
        let bounds = log.request_bounds();
        for b in 1..bounds.len() - 1 {
            let target_ts = log.events[bounds[b]].ts;
            let lo = target_ts.saturating_sub(delta_tau);
            let ctx = &log.events[..bounds[b]];
            let masked = ctx.iter().filter(|e| e.ts >= lo && e.ts <= target_ts).count();
            frac_sum += masked as f64 / ctx.len() as f64;
            count_sum += masked as f64;
            n += 1;
        }
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (frac_sum / n as f64, count_sum / n as f64)
    }
}

// ── SFT split ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionFamily {
    Genre,
    Language,
}

impl ConditionFamily {
    pub fn category_of(&self, item: &Item) -> u32 {
        match self {
            ConditionFamily::Genre => item.genre,
            ConditionFamily::Language => item.language,
        }
    }

    pub fn vocab_size(&self, cfg_genres: u32, cfg_languages: u32) -> u32 {
        match self {
            ConditionFamily::Genre => cfg_genres,
            ConditionFamily::Language => cfg_languages,
        }
    }
}

/// One conditioned fine-tuning example: the target event plus the condition
/// carried by its item; the context is the user's preceding history.
#[derive(Debug, Clone)]
pub struct SftTriple {
    pub user_id: u64,
    /// index into the user's events of the target i_{n+1}
    pub target_index: usize,
    pub condition: u32,
}

/// Condition-specific triples, time-disjoint from the pre-training span:
/// targets are the first items of requests in [split_fraction * R, R -
/// holdout_requests). The pre-training span per user ends strictly before
/// the first SFT target timestamp.
pub fn build_sft_dataset(
    logs: &[UserLog],
    corpus: &CorpusIndex,
    family: ConditionFamily,
    split_fraction: f64,
    holdout_requests: usize,
) -> Result<Vec<SftTriple>> {
    if logs.is_empty() {
        return Err(Error::Data("no logs to build an SFT dataset from".into()));
    }
    let mut triples = Vec::new();
    for log in logs {
        let bounds = log.request_bounds();
        let num_requests = bounds.len() - 1;
        let first_sft = ((num_requests as f64) * split_fraction).floor() as usize;
        let end = num_requests.saturating_sub(holdout_requests);
        for r in first_sft.max(1)..end {
            let target_index = bounds[r];
            let item = corpus.item(log.events[target_index].item_id);
            triples.push(SftTriple {
                user_id: log.user_id,
                target_index,
                condition: family.category_of(item),
            });
        }
    }
    Ok(triples)
}

/// Per-user index of the first event at or after the SFT split; events before
/// it form the pre-training span.
pub fn pretrain_split_index(log: &UserLog, split_fraction: f64) -> usize {
    let bounds = log.request_bounds();
    let num_requests = bounds.len() - 1;
    let first_sft = ((num_requests as f64) * split_fraction).floor() as usize;
    bounds[first_sft.min(num_requests)]
}

// ── JSONL interchange ────────────────────────────────────────────────

pub fn write_items_jsonl(path: &Path, items: &[Item]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_items_jsonl(path: &Path) -> Result<Vec<Item>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut items = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let item: Item = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {}", path.display(), lineno + 1, e)))?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_events_jsonl(path: &Path, events: &[InteractionEvent]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events_jsonl(path: &Path) -> Result<Vec<InteractionEvent>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut events = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let e: InteractionEvent = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {}", path.display(), lineno + 1, e)))?;
        events.push(e);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig {
            num_users: 20,
            num_items: 200,
            num_genres: 6,
            num_languages: 3,
            requests_per_user: 12,
            items_per_request: 4,
            mean_request_interval_s: 600.0,
            seed: 42,
            ..GenConfig::default()
        }
    }

    #[test]
    fn empty_corpus() {
        assert!(generate_corpus(0, 3, 2, 1).is_empty());
    }

    #[test]
    fn single_genre_corpus() {
        let items = generate_corpus(50, 1, 2, 1);
        assert!(items.iter().all(|i| i.genre == 0));
    }

    #[test]
    fn corpus_genre_histogram_matches_zipf_oracle() {
        // independent re-derivation: expected counts from the normalized
        // Zipf(1.1) rank weights, tolerance 5 sigma under multinomial draws
        let (n, genres) = (10_000u64, 20u32);
        let items = generate_corpus(n, genres, 4, 7);
        let mut hist = vec![0usize; genres as usize];
        for item in &items {
            hist[item.genre as usize] += 1;
        }
        let s = 1.1f64;
        let norm: f64 = (1..=genres as usize).map(|r| (r as f64).powf(-s)).sum();
        for (g, &count) in hist.iter().enumerate() {
            let p = ((g + 1) as f64).powf(-s) / norm;
            let expected = n as f64 * p;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (count as f64 - expected).abs() <= 5.0 * sigma.max(1.0),
                "genre {g}: count {count}, expected {expected:.1} +- {sigma:.1}"
            );
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let cfg = small_cfg();
        let (items_a, events_a) = generate_dataset(&cfg);
        let (items_b, events_b) = generate_dataset(&cfg);
        assert_eq!(items_a, items_b);
        assert_eq!(events_a, events_b);
    }

    #[test]
    fn jsonl_roundtrip_byte_identical() {
        let cfg = small_cfg();
        let (items, events) = generate_dataset(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("corpus.jsonl");
        let ep = dir.path().join("logs.jsonl");
        write_items_jsonl(&ip, &items).unwrap();
        write_events_jsonl(&ep, &events).unwrap();
        let b1 = std::fs::read(&ep).unwrap();
        write_events_jsonl(&ep, &events).unwrap();
        assert_eq!(b1, std::fs::read(&ep).unwrap());
        assert_eq!(read_items_jsonl(&ip).unwrap(), items);
        assert_eq!(read_events_jsonl(&ep).unwrap(), events);
    }

    #[test]
    fn events_in_request_share_timestamp() {
        let cfg = small_cfg();
        let (_, events) = generate_dataset(&cfg);
        let logs = group_by_user(&events).unwrap();
        for log in &logs {
            for pair in log.events.windows(2) {
                if pair[0].request_id == pair[1].request_id {
                    assert_eq!(pair[0].ts, pair[1].ts);
                } else {
                    assert!(pair[1].ts > pair[0].ts);
                }
            }
        }
    }

    #[test]
    fn m_equals_one_is_sequential_logging() {
        let cfg = GenConfig { items_per_request: 1, ..small_cfg() };
        let (_, events) = generate_dataset(&cfg);
        let logs = group_by_user(&events).unwrap();
        for log in &logs {
            assert!(log.events.iter().all(|e| e.idx == 0));
            for pair in log.events.windows(2) {
                assert!(pair[1].ts > pair[0].ts);
            }
        }
    }

    #[test]
    fn realized_interval_mean_close_to_configured() {
        let cfg = GenConfig {
            num_users: 200,
            requests_per_user: 60,
            ..small_cfg()
        };
        let (_, events) = generate_dataset(&cfg);
        let logs = group_by_user(&events).unwrap();
        let stats = log_stats(&logs);
        let rel = (stats.mean_request_interval - cfg.mean_request_interval_s).abs()
            / cfg.mean_request_interval_s;
        assert!(rel < 0.05, "mean interval off by {:.1}%", rel * 100.0);
    }

    #[test]
    fn temporal_mask_removes_about_one_request() {
        // with delta_tau = mean interval, the expected number of masked
        // context positions is one request's worth of items
        let cfg = GenConfig { num_users: 300, ..small_cfg() };
        let (_, events) = generate_dataset(&cfg);
        let logs = group_by_user(&events).unwrap();
        let stats = log_stats(&logs);
        let (frac, count) = temporal_mask_coverage(&logs, stats.mean_request_interval as u64);
        let m = cfg.items_per_request as f64;
        assert!(
            count > 0.6 * m && count < 1.6 * m,
            "mean masked positions {count:.2}, expected about {m}"
        );
        assert!(frac > 0.0 && frac < 1.0);
    }

    #[test]
    fn sft_split_is_time_disjoint() {
        let cfg = small_cfg();
        let (items, events) = generate_dataset(&cfg);
        let corpus = CorpusIndex::new(items, cfg.num_genres);
        let logs = group_by_user(&events).unwrap();
        let triples = build_sft_dataset(&logs, &corpus, ConditionFamily::Genre, 0.8, 2).unwrap();
        assert!(!triples.is_empty());
        for log in &logs {
            let split = pretrain_split_index(log, 0.8);
            let max_pre_ts = log.events[..split].iter().map(|e| e.ts).max().unwrap();
            let min_sft_ts = triples
                .iter()
                .filter(|t| t.user_id == log.user_id)
                .map(|t| log.events[t.target_index].ts)
                .min();
            if let Some(min_sft_ts) = min_sft_ts {
                assert!(max_pre_ts < min_sft_ts, "user {}", log.user_id);
            }
        }
    }

    #[test]
    fn sft_triple_count_matches_scan_oracle() {
        let cfg = small_cfg();
        let (items, events) = generate_dataset(&cfg);
        let corpus = CorpusIndex::new(items, cfg.num_genres);
        let logs = group_by_user(&events).unwrap();
        let triples = build_sft_dataset(&logs, &corpus, ConditionFamily::Genre, 0.8, 2).unwrap();

        // independent count: walk raw events, counting request heads whose
        // request index lands in [floor(0.8 R), R - 2)
        let mut expected = 0usize;
        for log in &logs {
            let nreq = log.events.iter().map(|e| e.request_id).max().unwrap() as usize + 1;
            let lo = ((nreq as f64) * 0.8).floor() as usize;
            let hi = nreq.saturating_sub(2);
            for e in &log.events {
                if e.idx == 0 && (e.request_id as usize) >= lo.max(1) && (e.request_id as usize) < hi
                {
                    expected += 1;
                }
            }
        }
        assert_eq!(triples.len(), expected);

        // conditions match the target item's genre
        for t in triples.iter().take(50) {
            let log = logs.iter().find(|l| l.user_id == t.user_id).unwrap();
            let item = corpus.item(log.events[t.target_index].item_id);
            assert_eq!(t.condition, item.genre);
        }
    }

    #[test]
    fn profile_weights_normalized() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut p = sample_profile(&cfg, &mut rng);
            assert!((p.interests.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            drift(&mut p, &mut rng);
            assert!(p.interests.iter().all(|w| *w >= 0.0));
        }
    }
}
