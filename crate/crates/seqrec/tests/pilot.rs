// throwaway calibration pilot (deleted before ship)
mod common;
use common::*;
use seqrec::eval::{build_index, horizon_eval};
use seqrec::synth::GenConfig;
use seqrec::train::{train_stage, Ablation, StageMode, TrainConfig};

#[test]
fn pilot() {
    let seed = 1u64;
    let world = build_world(GenConfig { seed, ..GenConfig::default() });
    for ab in [Ablation::Nip, Ablation::Tamip] {
        let branches = if matches!(ab, Ablation::Nip) { 1 } else { 2 };
        let mut model = model_for(&world.gen, branches, seed);
        let tcfg = TrainConfig {
            batch_size: 48, pretrain_steps: 1600, context_len: 40,
            lr_pretrain: 0.001, seed, ablation: ab, ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        train_stage(&mut model, &world.corpus, &world.logs, &tcfg, StageMode::Pretrain, None).unwrap();
        let index = build_index(&model, &world.corpus.items, "p").unwrap();
        // eval with a 64-event window
        let (mut cases, _) = seqrec::eval::build_eval_cases(&world.logs, 2, 64);
        cases.truncate(2000);
        let c: Vec<f64> = horizon_eval(&index, &model, &world.corpus, &world.logs, &cases, 10, 50)
            .unwrap().iter().map(|p| p.hr).collect();
        eprintln!("seed {seed} {:?}: {}  slope {:.4}  long-mean {:.3}  ({:.0}s)", ab,
            c.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "),
            log_linear_slope(&c), c[4..].iter().sum::<f64>() / 6.0, t0.elapsed().as_secs_f64());
    }
}
