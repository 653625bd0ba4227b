use advrf::data_eval::{recall_at_k, Split};
use advrf::tensor::{Graph, Tensor};
use advrf::trainer::{embed_for_retrieval, embed_with, recu_step, retu_step, EmbedMode};
use advrf_bench::{desk_setup, rng, seen_batch};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

fn conv(c: &mut Criterion) {
    let x = Tensor::<f32>::randn(vec![32, 16, 16, 16], 1.0, &mut rng(0));
    let k = Tensor::<f32>::randn(vec![32, 16, 3, 3], 0.1, &mut rng(1));
    c.bench_function("conv2d_fwd_bwd_32x16x16x16", |b| {
        b.iter(|| {
            let g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.variable(k.clone());
            let y = xv.conv2d(kv, 1, 1).unwrap().square().sum();
            black_box(g.backward(y).unwrap());
        })
    });
}

fn steps(c: &mut Criterion) {
    let (_, data, state) = desk_setup();
    let (x, y, m) = seen_batch(&data, 32);
    let mut group = c.benchmark_group("train_step_batch32");
    group.sample_size(10);
    group.bench_function("recu", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| black_box(recu_step(&mut s, &x, Some(&m)).unwrap()),
            BatchSize::LargeInput,
        )
    });
    group.bench_function("retu", |b| {
        b.iter_batched(
            || {
                let mut s = state.clone();
                s.epoch = s.config.warmup_epochs;
                s
            },
            |mut s| black_box(retu_step(&mut s, &x, &y, Some(&m)).unwrap()),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn embedding(c: &mut Criterion) {
    let (_, data, state) = desk_setup();
    let x = data.view(Split::Unseen).unwrap().images;
    let mut group = c.benchmark_group("embed_unseen_480");
    group.sample_size(10);
    group.bench_function("retrieval_only", |b| {
        b.iter(|| black_box(embed_for_retrieval(&state.models, &x).unwrap()))
    });
    group.bench_function("both_models", |b| {
        b.iter(|| black_box(embed_with(&state.models, EmbedMode::BothModels, &x).unwrap()))
    });
    group.finish();
}

fn recall(c: &mut Criterion) {
    let e = Tensor::<f32>::randn(vec![480, 16], 1.0, &mut rng(2));
    let labels: Vec<usize> = (0..480).map(|i| i / 60).collect();
    c.bench_function("recall_at_k_480x16", |b| {
        b.iter(|| black_box(recall_at_k(&e, &labels, &[1, 2, 4, 8]).unwrap()))
    });
}

criterion_group!(benches, conv, steps, embedding, recall);
criterion_main!(benches);
