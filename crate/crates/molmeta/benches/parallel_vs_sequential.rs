//! Compares the data-parallel executor against the sequential fallback on
//! the two hot paths of a training step: scoring a candidate pool and
//! adapting a batch of episodes.

use criterion::{criterion_group, criterion_main, Criterion};
use molmeta::autodiff::Tape;
use molmeta::episode::{sample_candidate_pool, EpisodeSubgraph};
use molmeta::exec;
use molmeta::meta::{inner_adapt, stream_rng};
use molmeta::mpg::{build_mpg, split_properties, Mpg};
use molmeta::relnet::{forward_episode, ForwardOptions, ModelParams};
use molmeta::scheduler::subgraph_embedding;
use molmeta::synth::{generate, SynthSpec};

fn setup() -> (Mpg, ModelParams, Vec<EpisodeSubgraph>) {
    let ds = generate(&SynthSpec {
        n_molecules: 60,
        min_atoms: 5,
        max_atoms: 10,
        n_properties: 6,
        n_factors: 3,
        seed: 1,
    });
    let mpg = build_mpg(&ds, 32, &mut stream_rng(1, "prop_init")).unwrap();
    let split = split_properties(&mpg, 1).unwrap();
    let model = ModelParams::init(&mpg, 2, 2, &mut stream_rng(1, "model_init"));
    let pool =
        sample_candidate_pool(&mpg, &split, 8, 5, 1, 4, &mut stream_rng(1, "sampling")).unwrap();
    let members = pool.into_iter().flat_map(|(a, b)| [a, b]).collect();
    (mpg, model, members)
}

fn pool_scoring(c: &mut Criterion) {
    let (mpg, model, members) = setup();
    let opts = ForwardOptions::for_k_shot(5);
    let score = |ep: &EpisodeSubgraph| -> f64 {
        let tape = Tape::new();
        let leaves = model.set.leaves(&tape);
        let fwd = forward_episode(ep, &mpg, &model, opts, &leaves, &tape).unwrap();
        subgraph_embedding(&fwd, &tape).unwrap().value().data()[0]
    };

    let mut group = c.benchmark_group("pool_scoring");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| exec::seq_map(&members, score)));
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| b.iter(|| exec::par_map(&members, score)));
    group.finish();
}

fn batch_adaptation(c: &mut Criterion) {
    let (mpg, model, members) = setup();
    let opts = ForwardOptions::for_k_shot(5);
    let adapt = |ep: &EpisodeSubgraph| {
        inner_adapt(&model, &model.set, ep, &mpg, opts, 0.05, 1).unwrap()
    };

    let mut group = c.benchmark_group("batch_adaptation");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| exec::seq_map(&members, adapt)));
    #[cfg(feature = "parallel")]
    group.bench_function("parallel", |b| b.iter(|| exec::par_map(&members, adapt)));
    group.finish();
}

criterion_group!(benches, pool_scoring, batch_adaptation);
criterion_main!(benches);
