//! Forward and training-step cost of a 22-layer toy model under the
//! published sharing ratios.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use echoatt::bench::TINYLLAMA_ROWS;
use echoatt::data::Batch;
use echoatt::model::build_student;
use echoatt::train::{lm_step, Stage};
use echoatt::{AdamW, AdamWConfig, ModelConfig, SharingPlan, TokenBatch, TransformerModel};
use std::hint::black_box;

const SEQ: usize = 128;

fn models() -> Vec<(String, TransformerModel)> {
    let mut cfg = ModelConfig::toy(22);
    cfg.max_seq_len = SEQ;
    let dense = TransformerModel::new(cfg, SharingPlan::identity(22), 0).unwrap();
    let mut out = vec![("0%".to_string(), dense.clone())];
    for row in &TINYLLAMA_ROWS {
        let plan = SharingPlan::from_shared_indices(22, row.shared_indices).unwrap();
        out.push((row.label.to_string(), build_student(&dense, &plan).unwrap()));
    }
    out
}

fn batch() -> Batch {
    let ids: Vec<usize> = (0..=SEQ).map(|i| (i * 31 + 7) % 256).collect();
    Batch {
        tokens: TokenBatch::new(1, SEQ, ids[..SEQ].to_vec()).unwrap(),
        targets: ids[1..].to_vec(),
    }
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_22_layers");
    group.throughput(Throughput::Elements(SEQ as u64));
    let b = batch();
    for (label, model) in models() {
        group.bench_with_input(BenchmarkId::from_parameter(&label), &model, |bench, m| {
            bench.iter(|| black_box(m.logits(&b.tokens).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_22_layers");
    group.sample_size(20);
    let b = batch();
    for (label, mut model) in models() {
        let mut optim = AdamW::new(AdamWConfig::default());
        let mut step = 0;
        group.bench_function(BenchmarkId::from_parameter(&label), |bench| {
            bench.iter(|| {
                step += 1;
                black_box(lm_step(&mut model, &b, &mut optim, 1e-4, step, Stage::Pretrain).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward, train_step);
criterion_main!(benches);
