use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use fedflow_core::aggregate::fed_avg;
use fedflow_core::data::{generate, ClassManifest, GeneratorParams};
use fedflow_core::models::{train_local, LocalContext};
use fedflow_core::transport::{frame, unframe};
use fedflow_core::{
    AggregatorConfig, Algorithm, ClientUpdate, Envelope, Model, ModelSpec, MsgType, ParameterSet, SegNet, TensorKind,
    TrainConfig,
};

fn params(n: usize, offset: f32) -> ParameterSet {
    ParameterSet::new().with("w", vec![n], (0..n).map(|i| i as f32 * 1e-3 + offset).collect(), TensorKind::Trainable)
}

fn wire(c: &mut Criterion) {
    let mut g = c.benchmark_group("wire");
    for n in [1_000, 100_000] {
        let p = params(n, 0.0);
        let blob = p.serialize();
        g.throughput(Throughput::Bytes(blob.len() as u64));
        g.bench_with_input(BenchmarkId::new("serialize", n), &p, |b, p| b.iter(|| p.serialize()));
        g.bench_with_input(BenchmarkId::new("deserialize", n), &blob, |b, blob| {
            b.iter(|| ParameterSet::deserialize(black_box(blob)).unwrap())
        });
        let env = Envelope::new(MsgType::ModelPayload, "server", "client-0", 3, blob.clone());
        let framed = frame(&env);
        g.bench_with_input(BenchmarkId::new("frame", n), &env, |b, env| b.iter(|| frame(black_box(env))));
        g.bench_with_input(BenchmarkId::new("unframe", n), &framed, |b, f| b.iter(|| unframe(black_box(f)).unwrap()));
    }
    g.finish();
}

fn aggregation(c: &mut Criterion) {
    let global = params(100_000, 0.0);
    let mut g = c.benchmark_group("fed_avg");
    for k in [2, 5, 10] {
        let updates: Vec<ClientUpdate> = (0..k)
            .map(|i| ClientUpdate {
                client: format!("client-{i}"),
                round: 0,
                num_samples: 10 + i as u64,
                weights: params(100_000, i as f32),
                variate: None,
                train_loss: 0.0,
                steps: 0,
            })
            .collect();
        let cfg = AggregatorConfig::new(Algorithm::FedAvg);
        g.bench_with_input(BenchmarkId::from_parameter(k), &updates, |b, u| {
            b.iter(|| fed_avg(&global, u, &cfg).unwrap())
        });
    }
    g.finish();
}

fn segnet_epoch(c: &mut Criterion) {
    let manifest = ClassManifest::uniform("a", 6, 16, 2);
    let data = generate(&manifest, &GeneratorParams::square(16), 1).unwrap().remove("a").unwrap();
    let spec = ModelSpec { num_classes: 6, ..ModelSpec::default() };
    let net = SegNet::new(spec).unwrap();
    let start = net.init_params(0);
    let cfg = TrainConfig { local_epochs: 1, batch_size: 8, ..TrainConfig::default() };
    c.bench_function("segnet_epoch_16x16x16", |b| {
        b.iter(|| train_local(&net, &start, &data, &cfg, LocalContext::new("a", 0)).unwrap())
    });
}

criterion_group!(benches, wire, aggregation, segnet_epoch);
criterion_main!(benches);
