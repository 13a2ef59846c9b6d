use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use warmstart::model::{self, Mode};
use warmstart::tokenizer::EncodeOptions;
use warmstart::training::{self, AdamConfig, AdamState};
use warmstart::transfer::{transfer_embeddings, DonorModel};
use warmstart::{checkpoint, rng};
use warmstart_bench as fx;

fn tokenizer(c: &mut Criterion) {
    let docs = fx::corpus(30);
    let tok = fx::tokenizer(&docs, 1000);
    let text: String = docs.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join("\n");
    let mut g = c.benchmark_group("bpe");
    g.throughput(Throughput::Bytes(text.len() as u64));
    g.bench_function("encode", |b| b.iter(|| tok.encode_plain(black_box(&text))));
    g.bench_function("encode_dropout_0.1", |b| {
        let mut r = rng::keyed(0, 0);
        b.iter(|| tok.encode(black_box(&text), EncodeOptions::dropout(0.1, &mut r)))
    });
    g.sample_size(10);
    g.bench_function("train_1000", |b| b.iter(|| fx::tokenizer(black_box(&docs), 1000)));
    g.finish();
}

fn model_step(c: &mut Criterion) {
    let docs = fx::corpus(30);
    let tok = fx::tokenizer(&docs, 1000);
    let cfg = fx::model(tok.vocab_size());
    let batch = fx::batch(&tok, &docs, &cfg, 8);
    let params = model::init_params::<f32>(&cfg, 0).unwrap();
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("forward_eval_b8", |b| {
        b.iter(|| model::forward(&cfg, &params, black_box(&batch), Mode::Eval, &mut rng::keyed(0, 0)).unwrap())
    });
    g.bench_function("forward_backward_b8", |b| {
        b.iter(|| {
            training::loss_and_grads(&cfg, &params, black_box(&batch), 1.0, Mode::Train, &mut rng::keyed(0, 0))
                .unwrap()
        })
    });
    let (_, grads) = training::loss_and_grads(&cfg, &params, &batch, 1.0, Mode::Train, &mut rng::keyed(0, 0)).unwrap();
    g.bench_function("adam_step", |b| {
        b.iter_batched(
            || (params.clone(), AdamState::new(&params)),
            |(mut p, mut s)| training::adam_step(&mut p, &grads, &mut s, 1e-4, &AdamConfig::default()).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn io_and_transfer(c: &mut Criterion) {
    let docs = fx::corpus(30);
    let tok = fx::tokenizer(&docs, 1000);
    let target = fx::tokenizer(&docs[..40], 600);
    let cfg = fx::model(tok.vocab_size());
    let params = model::init_params::<f32>(&cfg, 0).unwrap();
    let bytes = checkpoint::to_bytes(&params);
    let mut g = c.benchmark_group("io");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("checkpoint_write", |b| b.iter(|| checkpoint::to_bytes(black_box(&params))));
    g.bench_function("checkpoint_read", |b| b.iter(|| checkpoint::from_bytes(black_box(&bytes)).unwrap()));
    g.finish();

    let donor = DonorModel::new(tok, params).unwrap();
    c.bench_function("transfer_embeddings", |b| {
        b.iter(|| transfer_embeddings(&donor, black_box(target.vocab()), 0).unwrap())
    });
}

criterion_group!(benches, tokenizer, model_step, io_and_transfer);
criterion_main!(benches);
