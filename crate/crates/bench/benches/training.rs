use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gha_core::harness::{RunConfig, Split, Trainer};
use gha_core::model::TokenBatch;
use gha_core::v2s::{run_voting_epoch, VotingOptions};

fn trainer() -> Trainer {
    let cfg = RunConfig::preset(
        "tiny",
        &["task.samples=320".into(), "train.v2s=false".into(), "train.max_epochs=1000".into()],
    )
    .unwrap();
    Trainer::new(cfg, None).unwrap()
}

fn inference(c: &mut Criterion) {
    let t = trainer();
    let batch = t.batches(Split::Train, None).remove(0).batch;
    c.bench_function("model/infer", |b| b.iter(|| t.model.infer(&batch).unwrap()));
}

fn epoch(c: &mut Criterion) {
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("stage1_epoch", |b| {
        b.iter_batched(trainer, |mut t| t.stage1_epoch().unwrap(), BatchSize::PerIteration)
    });
    group.finish();
}

fn voting(c: &mut Criterion) {
    let mut t = trainer();
    t.stage1_epoch().unwrap();
    let batches: Vec<TokenBatch> = t.batches(Split::Train, None).into_iter().map(|b| b.batch).collect();
    let opts = VotingOptions { force_rho: true, ..VotingOptions::default() };
    let mut group = c.benchmark_group("v2s");
    group.sample_size(10);
    group.bench_function("voting_epoch", |b| {
        b.iter_batched(
            || t.model.clone(),
            |mut model| run_voting_epoch(&mut model, &batches, &t.state.units, &t.config.group, opts).unwrap(),
            BatchSize::PerIteration,
        )
    });
    group.finish();
}

criterion_group!(benches, inference, epoch, voting);
criterion_main!(benches);
