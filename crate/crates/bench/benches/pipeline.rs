use criterion::{criterion_group, criterion_main, Criterion};
use smart_bench::{scenario, vocabularies};
use smart_core::dataset::{prepare_scene, TokenizeOptions};
use smart_core::geom::AgentClass;
use smart_core::metrics::{evaluate, HistogramConfig};
use smart_core::model::{Model, ModelConfig};
use smart_core::rollout::{rollout, RolloutConfig};
use smart_core::tokens::{tokenize_track, NoiseConfig};

fn tokenize(c: &mut Criterion) {
    let s = scenario(8, 1);
    let v = vocabularies(std::slice::from_ref(&s));
    let vocab = v.motion.get(AgentClass::Vehicle).unwrap();
    c.bench_function("tokenize_track", |b| b.iter(|| tokenize_track(vocab, &s.agents[0], &NoiseConfig::OFF, 0).unwrap()));
}

fn decode(c: &mut Criterion) {
    let s = scenario(32, 2);
    let v = vocabularies(std::slice::from_ref(&s));
    let mut cfg = ModelConfig::smart_1m();
    v.configure(&mut cfg);
    let model = Model::<f32>::new(cfg, 0).unwrap();
    let scene = prepare_scene(&s, &v, &TokenizeOptions::clean(0)).unwrap();
    c.bench_function("decode_step_32_agents", |b| {
        b.iter_batched(
            || model.start_decode(&scene.agents, &scene.road).unwrap(),
            |mut cache| model.decode_step(&mut cache, &scene.agents, &scene.road).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
}

fn evaluate_rollouts(c: &mut Criterion) {
    let s = scenario(4, 3);
    let v = vocabularies(std::slice::from_ref(&s));
    let mut cfg = ModelConfig::smart_1m_tiny();
    v.configure(&mut cfg);
    let model = Model::<f32>::new(cfg, 0).unwrap();
    let set = rollout(&model, &s, &v, &RolloutConfig { n_rollouts: 32, ..RolloutConfig::default() }, 1).unwrap();
    let hist = HistogramConfig::default();
    c.bench_function("evaluate_32_rollouts", |b| b.iter(|| evaluate(&set, &s, &hist).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = tokenize, decode, evaluate_rollouts
}
criterion_main!(benches);
