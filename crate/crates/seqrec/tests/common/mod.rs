//! Shared fixtures for the integration suites.

#![allow(dead_code)]

use seqrec::eval::{build_eval_cases, build_index, horizon_eval, EvalCase};
use seqrec::model::{Model, ModelConfig};
use seqrec::synth::{
    generate_dataset, group_by_user, CorpusIndex, GenConfig, InteractionEvent, UserLog,
};
use seqrec::train::{train_stage, Ablation, StageMode, TrainConfig};

pub struct World {
    pub gen: GenConfig,
    pub corpus: CorpusIndex,
    pub logs: Vec<UserLog>,
}

pub fn build_world(gen: GenConfig) -> World {
    let (items, events) = generate_dataset(&gen);
    let corpus = CorpusIndex::new(items, gen.num_genres);
    let logs = group_by_user(&events).unwrap();
    World { gen, corpus, logs }
}

pub fn model_for(gen: &GenConfig, branches: usize, seed: u64) -> Model {
    Model::new(ModelConfig {
        num_genres: gen.num_genres,
        num_languages: gen.num_languages,
        condition_vocab: gen.num_genres,
        num_branches: branches,
        init_seed: seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// Train one ablation variant from scratch and return (model, horizon curve)
/// over the first `eval_cases` users.
pub fn train_and_curve(
    world: &World,
    ablation: Ablation,
    train: &TrainConfig,
    eval_cases: usize,
    horizon: usize,
    k: usize,
) -> (Model, Vec<f64>) {
    let branches = match ablation {
        Ablation::Nip => 1,
        _ => 2,
    };
    let mut model = model_for(&world.gen, branches, world.gen.seed);
    let cfg = TrainConfig { ablation, ..train.clone() };
    train_stage(&mut model, &world.corpus, &world.logs, &cfg, StageMode::Pretrain, None).unwrap();
    let index = build_index(&model, &world.corpus.items, "experiment").unwrap();
    let (mut cases, _) = build_eval_cases(&world.logs, 2, 48);
    cases.truncate(eval_cases);
    let curve = horizon_eval(&index, &model, &world.corpus, &world.logs, &cases, horizon, k)
        .unwrap()
        .into_iter()
        .map(|p| p.hr)
        .collect();
    (model, curve)
}

/// Least-squares slope of ln(hr) against the offset index.
pub fn log_linear_slope(curve: &[f64]) -> f64 {
    let n = curve.len() as f64;
    let xs: Vec<f64> = (1..=curve.len()).map(|o| o as f64).collect();
    let ys: Vec<f64> = curve.iter().map(|v| v.max(1e-6).ln()).collect();
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let den: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    num / den
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

/// Re-permute the serialization order inside every request, leaving the
/// exposed item sets untouched. Produces a counterfactual log that differs
/// only in the arbitrary within-request ordering.
pub fn reshuffle_within_requests(events: &[InteractionEvent], seed: u64) -> Vec<InteractionEvent> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(events.len());
    let mut i = 0;
    while i < events.len() {
        let mut j = i + 1;
        while j < events.len()
            && events[j].user_id == events[i].user_id
            && events[j].request_id == events[i].request_id
        {
            j += 1;
        }
        let mut slate: Vec<InteractionEvent> = events[i..j].to_vec();
        for a in (1..slate.len()).rev() {
            let b = rng.gen_range(0..=a);
            slate.swap(a, b);
        }
        for (idx, e) in slate.iter_mut().enumerate() {
            e.idx = idx as u32;
        }
        out.extend(slate);
        i = j;
    }
    out
}

pub fn eval_cases_truncated(logs: &[UserLog], n: usize) -> Vec<EvalCase> {
    let (mut cases, _) = build_eval_cases(logs, 2, 48);
    cases.truncate(n);
    cases
}
