use warmstart::corpus::{CorpusPreset, Document};
use warmstart::model::{self, names, ModelConfig};
use warmstart::synthetic::SyntheticLanguage;
use warmstart::tensor::Tensor;
use warmstart::tokenizer::{train_bpe, Specials, Tokenizer};
use warmstart::training::*;
use warmstart::{rng, ParamSet};

fn setup() -> (Tokenizer, Vec<Document>) {
    let docs = SyntheticLanguage::new(3, 60, 4).preset(CorpusPreset::Small, 15, 8);
    let tok = train_bpe(docs.iter().cloned(), 150, &Specials::default()).unwrap();
    (tok, docs)
}

fn toy(vocab: usize) -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        hidden: 16,
        ff_dim: 32,
        max_positions: 24,
        max_seq_len: 24,
        ..ModelConfig::desk(vocab)
    }
}

fn run(cfg: &TrainConfig, tok: &Tokenizer, docs: &[Document]) -> TrainOutcome {
    let init = model::init_params(&cfg.model, rng::derive_seed(cfg.seed, rng::stream::INIT)).unwrap();
    pretrain(cfg, tok, docs, init, &mut |_, _| Ok(())).unwrap()
}

#[test]
fn adam_matches_naive_reference() {
    // f(w) = sum_i c_i (w_i - t_i)^2, gradient 2 c_i (w_i - t_i).
    let c = [0.5, 2.0, 10.0, 0.01];
    let target = [1.0, -2.0, 0.3, 4.0];
    let mut p = ParamSet::new();
    p.insert("w", Tensor::<f64>::from_vec(&[4], vec![0.0, 0.5, -1.0, 2.0]).unwrap());
    let mut state = AdamState::new(&p);
    let cfg = AdamConfig::default();
    let (mut w, mut m, mut v) = ([0.0, 0.5, -1.0, 2.0], [0.0; 4], [0.0; 4]);
    for t in 1..=10 {
        let lr = 0.05 / t as f64;
        let g: Vec<f64> = (0..4).map(|i| 2.0 * c[i] * (p.get("w").unwrap().data()[i] - target[i])).collect();
        let mut grads = ParamSet::new();
        grads.insert("w", Tensor::from_vec(&[4], g).unwrap());
        adam_step(&mut p, &grads, &mut state, lr, &cfg).unwrap();
        for i in 0..4 {
            let g = 2.0 * c[i] * (w[i] - target[i]);
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
        for i in 0..4 {
            assert!((p.get("w").unwrap().data()[i] - w[i]).abs() <= 1e-12, "step {t} coord {i}");
        }
    }
}

#[test]
fn clipping_bounds_the_first_step() {
    let mut p = ParamSet::new();
    p.insert("w", Tensor::<f64>::zeros(&[2]));
    let mut g = ParamSet::new();
    g.insert("w", Tensor::from_vec(&[2], vec![300.0, -400.0]).unwrap());
    let mut s = AdamState::new(&p);
    let cfg = AdamConfig { clip_norm: Some(1.0), ..AdamConfig::default() };
    adam_step(&mut p, &g, &mut s, 0.1, &cfg).unwrap();
    // Adam's first step is lr·sign(g) regardless of scale.
    let w = p.get("w").unwrap().data();
    assert!((w[0] + 0.1).abs() < 1e-6 && (w[1] - 0.1).abs() < 1e-6, "{w:?}");
    let mut bad = g.clone();
    bad.get_mut("w").unwrap().data_mut()[0] = f64::NAN;
    let before = p.clone();
    assert!(adam_step(&mut p, &bad, &mut s, 0.1, &cfg).is_err());
    assert_eq!(p, before);
}

#[test]
fn schedules_are_continuous_inside_segments() {
    for preset in SchedulePreset::ALL {
        let s = preset.spec();
        let total = s.total_steps();
        let bounds: Vec<u64> = s.segments.iter().map(|g| g.end_step).collect();
        let mut prev = s.lr_at(0).unwrap();
        assert_eq!(prev, 0.0);
        for step in (1..=total).step_by(7).chain([total]) {
            let lr = s.lr_at(step).unwrap();
            assert!(lr >= 0.0 && lr.is_finite());
            let crossed = bounds.iter().any(|&b| b >= step.saturating_sub(7) && b < step);
            if !crossed && step > s.warmup_steps + 7 {
                assert!(lr <= prev + 1e-15, "{} step {step}: {lr} > {prev}", preset.name());
            }
            prev = lr;
        }
        assert!(s.lr_at(total + 1).is_err());
    }
}

#[test]
fn training_smoke_and_determinism() {
    let (tok, docs) = setup();
    let mut cfg = TrainConfig::new(toy(tok.vocab_size()), ScheduleSpec::linear(5, 50, 1e-3));
    cfg.batch_size = 8;
    cfg.alpha = 0.1;
    cfg.seed = 4;
    let a = run(&cfg, &tok, &docs);
    assert_eq!(a.metrics.len(), 50);
    let head: f64 = a.metrics[..5].iter().map(|m| m.combined_loss).sum::<f64>() / 5.0;
    let tail: f64 = a.metrics[45..].iter().map(|m| m.combined_loss).sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
    for m in &a.metrics {
        assert!((m.combined_loss - (m.mlm_loss + 0.1 * m.sso_loss)).abs() < 1e-12);
    }
    let b = run(&cfg, &tok, &docs);
    assert_eq!(a.params, b.params);
    assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
    cfg.seed = 5;
    assert_ne!(run(&cfg, &tok, &docs).params, a.params);
}

#[test]
fn alpha_zero_trains_only_mlm() {
    let (tok, docs) = setup();
    let mut cfg = TrainConfig::new(toy(tok.vocab_size()), ScheduleSpec::linear(2, 5, 1e-3));
    cfg.batch_size = 4;
    cfg.alpha = 0.0;
    let out = run(&cfg, &tok, &docs);
    let init = model::init_params::<f32>(&cfg.model, rng::derive_seed(cfg.seed, rng::stream::INIT)).unwrap();
    for m in &out.metrics {
        assert_eq!(m.combined_loss, m.mlm_loss);
    }
    for n in [names::SSO_W, names::SSO_B, names::POOLER_W, names::POOLER_B] {
        assert_eq!(out.params.get(n), init.get(n), "{n} moved");
    }
}

#[test]
fn zero_token_type_table_learns() {
    let (tok, docs) = setup();
    let mut cfg = TrainConfig::new(toy(tok.vocab_size()), ScheduleSpec::linear(2, 10, 1e-3));
    cfg.batch_size = 4;
    let mut init = model::init_params::<f32>(&cfg.model, 1).unwrap();
    init.insert(names::TOKEN_TYPE, Tensor::zeros(&[2, 16]));
    let out = pretrain(&cfg, &tok, &docs, init, &mut |_, _| Ok(())).unwrap();
    let tt = out.params.get(names::TOKEN_TYPE).unwrap();
    assert!(tt.row(0) != tt.row(1), "segments are still indistinguishable");
}

#[test]
fn checkpoint_hook_schedule() {
    let (tok, docs) = setup();
    let mut cfg = TrainConfig::new(toy(tok.vocab_size()), ScheduleSpec::linear(2, 7, 1e-3));
    cfg.batch_size = 2;
    cfg.checkpoint_every = 3;
    let init = model::init_params(&cfg.model, 0).unwrap();
    let mut steps = Vec::new();
    pretrain(&cfg, &tok, &docs, init, &mut |s, _| {
        steps.push(s);
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, vec![3, 6, 7]);
}

#[test]
fn packed_batches_round_trip() {
    let (tok, docs) = setup();
    let data = PretrainData::new(&tok, &docs, 24, 0.15).unwrap();
    let b = data.batch(1, 1, 5, 0.1).unwrap();
    assert_eq!(unpack_batch(&pack_batch(&b)).unwrap(), b);
    // Keys, not draw order, define each example.
    assert_eq!(data.example(1, 1, 3, 0.1).unwrap(), data.example(1, 1, 3, 0.1).unwrap());
    assert_eq!(data.batch(1, 1, 5, 0.1).unwrap(), b);
}

#[test]
fn init_statistics() {
    let cfg = toy(500);
    let p = model::init_params::<f32>(&cfg, 3).unwrap();
    let w = p.get(names::WORD).unwrap().data();
    let n = w.len() as f64;
    let mean = w.iter().map(|&x| x as f64).sum::<f64>() / n;
    let sd = (w.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 0.002 && (sd - 0.02).abs() < 0.002, "{mean} {sd}");
}
