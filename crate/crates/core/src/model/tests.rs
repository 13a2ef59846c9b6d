use super::*;
use crate::objectives::SsoLabel;

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        ff_dim: 16,
        vocab_size: 50,
        max_positions: 8,
        type_vocab_size: 2,
        dropout_rate: 0.1,
        max_seq_len: 8,
    }
}

fn batch() -> Batch {
    Batch::collate(
        &[
            (
                vec![2, 17, 4, 30, 3, 41],
                vec![0, 0, 0, 1, 1, 1],
                vec![IGNORE, IGNORE, 22, IGNORE, IGNORE, 41],
            ),
            (
                vec![2, 9, 3, 4, 3],
                vec![0, 0, 0, 1, 1],
                vec![IGNORE, 9, IGNORE, 12, IGNORE],
            ),
        ],
        vec![SsoLabel::Next, SsoLabel::Random],
    )
}

fn loss_of(cfg: &ModelConfig, p: &ParamSet<f64>, b: &Batch, alpha: f64) -> f64 {
    let out = forward(cfg, p, b, Mode::Eval, &mut rng::keyed(0, 0)).unwrap();
    objective_gradients(cfg, &out, b, alpha).unwrap().0.combined
}

fn analytic(cfg: &ModelConfig, p: &ParamSet<f64>, b: &Batch, alpha: f64) -> ParamSet<f64> {
    let mut out = forward(cfg, p, b, Mode::Eval, &mut rng::keyed(0, 0)).unwrap();
    let (_, seeds) = objective_gradients(cfg, &out, b, alpha).unwrap();
    backward(cfg, p, &mut out, &seeds).unwrap()
}

#[test]
fn param_count_matches_shapes_and_init() {
    let cfg = tiny();
    let p = init_params::<f32>(&cfg, 3).unwrap();
    assert_eq!(p.param_count(), cfg.param_count());
    check_params(&cfg, &p).unwrap();
    assert!(p.get(names::EMB_LN_GAMMA).unwrap().data().iter().all(|&x| x == 1.0));
    assert!(p.get("layer.1.ffn.in.bias").unwrap().data().iter().all(|&x| x == 0.0));
    let base = ModelConfig::base(50_000);
    // 12 layers of 7.08M plus embeddings and heads.
    assert!(base.param_count() > 120_000_000 && base.param_count() < 130_000_000);
}

#[test]
fn finite_differences_match_backward() {
    let cfg = tiny();
    let b = batch();
    let mut p = init_params::<f64>(&cfg, 11).unwrap();
    // Move away from the symmetric init so every path carries signal.
    let mut r = rng::keyed(5, 5);
    for (name, t) in p.iter_mut() {
        if name.ends_with("gamma") || name.ends_with("beta") || name.ends_with("bias") {
            for v in t.data_mut() {
                *v += rand_distr::Distribution::sample(&rand_distr::Normal::new(0.0, 0.1).unwrap(), &mut r);
            }
        } else {
            for v in t.data_mut() {
                *v *= 10.0;
            }
        }
    }
    let g = analytic(&cfg, &p, &b, 1.0);
    let h = 1e-5;
    let names: Vec<String> = p.names().cloned().collect();
    for name in names {
        let n = p.get(&name).unwrap().len();
        let mut num = Vec::with_capacity(n);
        for i in 0..n {
            let orig = p.get(&name).unwrap().data()[i];
            p.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = loss_of(&cfg, &p, &b, 1.0);
            p.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = loss_of(&cfg, &p, &b, 1.0);
            p.get_mut(&name).unwrap().data_mut()[i] = orig;
            num.push((up - down) / (2.0 * h));
        }
        let ana = g.get(&name).unwrap().data();
        let diff: f64 = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt()
            + num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if scale < 1e-10 { 0.0 } else { diff / scale };
        assert!(rel <= 1e-4, "{name}: relative error {rel:e}");
    }
}

#[test]
fn padding_tail_does_not_change_real_positions() {
    let cfg = tiny();
    let p = init_params::<f64>(&cfg, 2).unwrap();
    let short = Batch::collate(
        &[(vec![2, 9, 3, 4, 3], vec![0, 0, 0, 1, 1], vec![IGNORE; 5])],
        vec![SsoLabel::Next],
    );
    let mut long = short.clone();
    long.input_ids[0].extend([0, 0, 0]);
    long.token_type_ids[0].extend([0, 0, 0]);
    long.attention_mask[0].extend([0, 0, 0]);
    long.labels[0].extend([IGNORE; 3]);
    let a = forward(&cfg, &p, &short, Mode::Eval, &mut rng::keyed(0, 0)).unwrap();
    let b = forward(&cfg, &p, &long, Mode::Eval, &mut rng::keyed(0, 0)).unwrap();
    let v = cfg.vocab_size;
    for (x, y) in a.mlm_logits[0].iter().zip(&b.mlm_logits[0][..5 * v]) {
        assert!((x - y).abs() < 1e-12);
    }
    for c in 0..3 {
        assert!((a.sso_logits[0][c] - b.sso_logits[0][c]).abs() < 1e-12);
    }
    // No attention mass on padding.
    let cache = &b.cache().unwrap()[0];
    for i in 0..8 {
        let row = &cache.attention(1, 0)[i * 8..(i + 1) * 8];
        assert!(row[5..].iter().all(|&x| x == 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn training_mode_is_deterministic_in_the_rng() {
    let cfg = tiny();
    let p = init_params::<f32>(&cfg, 2).unwrap();
    let b = batch();
    let run = |seed| {
        forward(&cfg, &p, &b, Mode::Train, &mut rng::keyed(seed, 0))
            .unwrap()
            .mlm_logits
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let e1 = forward(&cfg, &p, &b, Mode::Eval, &mut rng::keyed(1, 0)).unwrap().mlm_logits;
    let e2 = forward(&cfg, &p, &b, Mode::Eval, &mut rng::keyed(2, 0)).unwrap().mlm_logits;
    assert_eq!(e1, e2);
}

#[test]
fn dropout_gradients_match_finite_differences() {
    // Same dropout masks on every evaluation: gradients stay exact.
    let cfg = tiny();
    let b = batch();
    let p = init_params::<f64>(&cfg, 4).unwrap();
    let eval = |p: &ParamSet<f64>| {
        let out = forward(&cfg, p, &b, Mode::Train, &mut rng::keyed(9, 9)).unwrap();
        objective_gradients(&cfg, &out, &b, 1.0).unwrap().0.combined
    };
    let mut out = forward(&cfg, &p, &b, Mode::Train, &mut rng::keyed(9, 9)).unwrap();
    let (_, seeds) = objective_gradients(&cfg, &out, &b, 1.0).unwrap();
    let g = backward(&cfg, &p, &mut out, &seeds).unwrap();
    let name = "layer.0.ffn.in.weight";
    let mut q = p.clone();
    for i in [0usize, 7, 33, 101] {
        let orig = q.get(name).unwrap().data()[i];
        q.get_mut(name).unwrap().data_mut()[i] = orig + 1e-5;
        let up = eval(&q);
        q.get_mut(name).unwrap().data_mut()[i] = orig - 1e-5;
        let down = eval(&q);
        q.get_mut(name).unwrap().data_mut()[i] = orig;
        let fd = (up - down) / 2e-5;
        let a = g.get(name).unwrap().data()[i];
        assert!((fd - a).abs() <= 1e-6 + 1e-4 * a.abs(), "{i}: {fd} vs {a}");
    }
}

#[test]
fn cache_is_single_use() {
    let cfg = tiny();
    let p = init_params::<f32>(&cfg, 2).unwrap();
    let b = batch();
    let mut out = forward(&cfg, &p, &b, Mode::Eval, &mut rng::keyed(0, 0)).unwrap();
    let seeds = GradSeeds::zeros(b.len());
    let g = backward(&cfg, &p, &mut out, &seeds).unwrap();
    assert_eq!(g.global_norm(), 0.0);
    assert!(matches!(
        backward(&cfg, &p, &mut out, &seeds),
        Err(Error::CacheConsumed)
    ));
}

#[test]
fn zero_alpha_leaves_sso_head_untouched() {
    let cfg = tiny();
    let p = init_params::<f64>(&cfg, 2).unwrap();
    let g = analytic(&cfg, &p, &batch(), 0.0);
    for n in [names::SSO_W, names::SSO_B, names::POOLER_W, names::POOLER_B] {
        assert_eq!(g.get(n).unwrap().sum_sq(), 0.0, "{n}");
    }
    assert!(g.get(names::WORD).unwrap().sum_sq() > 0.0);
}

#[test]
fn rejects_bad_inputs() {
    let cfg = tiny();
    let p = init_params::<f32>(&cfg, 2).unwrap();
    let mut b = batch();
    b.input_ids[0][1] = 50;
    assert!(matches!(
        forward(&cfg, &p, &b, Mode::Eval, &mut rng::keyed(0, 0)),
        Err(Error::IdOutOfRange { id: 50, .. })
    ));
    let mut p2 = p.clone();
    p2.get_mut("layer.1.attn.v.weight").unwrap().data_mut()[0] = f32::NAN;
    let err = forward(&cfg, &p2, &batch(), Mode::Eval, &mut rng::keyed(0, 0))
        .err()
        .unwrap();
    assert!(err.to_string().contains("layer.1"), "{err}");
    let mut bad = cfg.clone();
    bad.heads = 3;
    assert!(bad.validate().is_err());
}

#[test]
fn sidecar_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    let cfg = tiny();
    cfg.save_sidecar(&ck).unwrap();
    assert_eq!(ModelConfig::load_sidecar(&ck).unwrap(), cfg);
}
