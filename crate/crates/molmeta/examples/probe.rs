use std::time::Instant;

use molmeta::meta::{evaluate_split, stream_rng, train, TrainConfig};
use molmeta::mpg::{build_mpg, split_properties, Mpg, PropertySplit};
use molmeta::relnet::ModelParams;
use molmeta::synth::{generate, SynthSpec};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn eval_mean(
    model: &ModelParams,
    mpg: &Mpg,
    split: &PropertySplit,
    cfg: &TrainConfig,
) -> f64 {
    let aucs = evaluate_split(model, mpg, split, cfg, &mut stream_rng(cfg.seed, "eval:probe"))
        .expect("eval");
    mean(&aucs.iter().map(|&(_, a)| a).collect::<Vec<_>>())
}

fn main() {
    let mut args = std::env::args().skip(1);
    let seed_base: u64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(0);
    let inner_lr: f64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let outer_lr: f64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(0.005);
    let enc_layers: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(3);
    let inner_steps: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(1);
    let ablate: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(0); // 1=sched 2=ctr 3=both
    let max_steps: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(400);
    let lambda: f64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let m_query: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(1);
    let batch: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(3);
    let n_pool: usize = args.next().map(|s| s.parse().unwrap()).unwrap_or(5);

    let cfg = TrainConfig {
        k_shot: 5,
        m_query,
        n_aux: 4,
        n_pool,
        batch,
        enc_layers,
        rel_layers: 2,
        dim: 32,
        inner_lr,
        outer_lr,
        sched_lr: 0.0005,
        lambda,
        max_steps,
        eval_interval: 0,
        inner_steps,
        finetune_steps: 10,
        seed: seed_base,
        no_scheduler: ablate & 1 != 0,
        no_contrastive: ablate & 2 != 0,
        ..TrainConfig::default()
    };
    println!(
        "in={inner_lr}x{inner_steps} out={outer_lr} enc={enc_layers} ablate={ablate} lam={lambda} m={m_query} b={batch}/{n_pool} steps={max_steps} seeds={seed_base}..{}",
        seed_base + 5
    );

    let ds = generate(&SynthSpec::default());
    let mut runs: Vec<(Mpg, PropertySplit, ModelParams, ModelParams)> = Vec::new();
    for seed in seed_base..seed_base + 5 {
        let mpg = build_mpg(&ds, cfg.dim, &mut stream_rng(seed, "prop_init")).expect("graph");
        let split = split_properties(&mpg, 2).expect("split");
        let fresh = ModelParams::init(
            &mpg,
            cfg.enc_layers,
            cfg.rel_layers,
            &mut stream_rng(seed, "model_init"),
        );
        let scfg = TrainConfig { seed, ..cfg.clone() };
        let t0 = Instant::now();
        let out = train(&mpg, &split, &scfg).expect("train");
        let q: Vec<f64> = out.log.steps.iter().map(|r| r.query_loss).collect();
        let n = q.len();
        println!(
            "  seed {seed}: query 0-50={:.4} last50={:.4} ({:.0}s)",
            mean(&q[..50.min(n)]),
            mean(&q[n - 50.min(n)..]),
            t0.elapsed().as_secs_f64()
        );
        runs.push((mpg, split, out.model, fresh));
    }

    for fts in [1usize, 3, 10, 25] {
        for flr in [cfg.inner_lr, 0.02, 0.05] {
            let mut trs = Vec::new();
            let mut uns = Vec::new();
            for (i, (mpg, split, model, fresh)) in runs.iter().enumerate() {
                let ecfg = TrainConfig {
                    finetune_steps: fts,
                    finetune_lr: Some(flr),
                    seed: seed_base + i as u64,
                    ..cfg.clone()
                };
                trs.push(eval_mean(model, mpg, split, &ecfg));
                uns.push(eval_mean(fresh, mpg, split, &ecfg));
            }
            let (mt, mu) = (mean(&trs), mean(&uns));
            let min_tr = trs.iter().cloned().fold(f64::INFINITY, f64::min);
            println!(
                "  ft={fts:2}@{flr}: trained={mt:.3} untrained={mu:.3} gap={:+.3} min_tr={min_tr:.3} per-seed={:?}",
                mt - mu,
                trs.iter().map(|t| (t * 1000.0).round() / 1000.0).collect::<Vec<_>>()
            );
        }
    }
}
