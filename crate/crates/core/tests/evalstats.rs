use warmstart::evalstats::*;
use warmstart::model::{self, names, Batch, ModelConfig};
use warmstart::objectives::{SsoLabel, IGNORE};
use warmstart::tensor::Tensor;

fn cfg() -> ModelConfig {
    ModelConfig {
        hidden: 32,
        ff_dim: 64,
        max_positions: 32,
        max_seq_len: 32,
        ..ModelConfig::desk(60)
    }
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let c = cfg();
    let mut p = model::init_params::<f32>(&c, 1).unwrap();
    let v = c.vocab_size;
    p.insert(names::WORD, Tensor::zeros(&[v, c.hidden]));
    let b = Batch::collate(
        &[(vec![2, 10, 4, 3], vec![0; 4], vec![IGNORE, IGNORE, 11, IGNORE])],
        vec![SsoLabel::Next],
    );
    let m = heldout_mlm_metrics(&c, &p, &[b.clone()]).unwrap();
    assert!((m.loss - (v as f64).ln()).abs() < 1e-6, "{}", m.loss);
    assert!((m.perplexity - v as f64).abs() < 1e-3);
    assert_eq!(m.perplexity, m.loss.exp());
    let mut none = b;
    none.labels[0] = vec![IGNORE; 4];
    assert!(heldout_mlm_metrics(&c, &p, &[none]).is_err());
}

#[test]
fn probe_on_random_encoder_separates_two_classes() {
    let c = cfg();
    let p = model::init_params::<f32>(&c, 7).unwrap();
    let ds = ProbeDataset::synthetic(c.vocab_size, 5, 2, 400, 12, 0.2, 3).unwrap();
    let (tr, te) = ds.split(0.8, 3);
    let opts = ProbeOptions::default();
    let r = probe_finetune(&c, &p, &tr, &te, &opts).unwrap();
    assert!(r.accuracy > 0.8, "accuracy {}", r.accuracy);
    let again = probe_finetune(&c, &p, &tr, &te, &opts).unwrap();
    assert_eq!(r.accuracy, again.accuracy);
}

#[test]
fn freezing_controls_the_updated_tensors() {
    let c = cfg();
    let p = model::init_params::<f32>(&c, 7).unwrap();
    let ds = ProbeDataset::synthetic(c.vocab_size, 5, 2, 60, 8, 0.2, 3).unwrap();
    let (tr, te) = ds.split(0.8, 3);
    let frozen = ProbeOptions {
        epochs: 2,
        ..ProbeOptions::default()
    };
    let r = probe_finetune(&c, &p, &tr, &te, &frozen).unwrap();
    let expect: std::collections::BTreeSet<String> = [PROBE_B, PROBE_W].iter().map(|s| s.to_string()).collect();
    assert_eq!(r.updated, expect);

    let unfrozen = ProbeOptions {
        unfreeze: true,
        ..frozen
    };
    let r = probe_finetune(&c, &p, &tr, &te, &unfrozen).unwrap();
    for name in r.updated.iter() {
        assert!(
            name.starts_with("probe.") || name.starts_with("embeddings.") || name.starts_with("layer."),
            "{name} changed"
        );
    }
    for name in p.names() {
        if name.starts_with("layer.") {
            assert!(r.updated.contains(name), "{name} untouched");
        }
    }
    // Heads of the pretraining objectives never move.
    for n in [names::SSO_W, names::MLM_W, names::POOLER_W, names::MLM_BIAS] {
        assert!(!r.updated.contains(n));
    }
}

#[test]
fn probe_rejects_missing_class() {
    let c = cfg();
    let p = model::init_params::<f32>(&c, 7).unwrap();
    let mut ds = ProbeDataset::synthetic(c.vocab_size, 5, 2, 20, 8, 0.0, 3).unwrap();
    let test = ds.clone();
    ds.examples.retain(|e| e.1 == 0);
    assert!(probe_finetune(&c, &p, &ds, &test, &ProbeOptions::default()).is_err());
}

#[test]
fn donor_init_fixture_is_significant() {
    // Shape of the random-vs-donor initialization comparison: medians
    // 85.65 and 88.80, spreads of a few tenths.
    let runs = vec![
        RunScores::new("init:random", vec![85.31, 85.65, 85.52, 85.90, 85.77]),
        RunScores::new("init:donor", vec![88.80, 88.62, 88.95, 88.71, 89.02]),
    ];
    let r = ablation_compare(&runs, CompareOptions::default()).unwrap();
    assert_eq!(r.variant("init:random").unwrap().median, 85.65);
    assert_eq!(r.variant("init:donor").unwrap().median, 88.80);
    let t = r.test("init:random", "init:donor").unwrap();
    assert!(t.significant && t.result.p_value < 0.01);
    assert!(r.variant("init:donor").unwrap().best_overall);
    assert!(r.to_string().contains("**"));
}

#[test]
fn degenerate_comparisons() {
    let one = ablation_compare(&[RunScores::new("only", vec![1.0, 3.0, 2.0])], CompareOptions::default()).unwrap();
    assert!(one.tests.is_empty());
    assert_eq!(one.variants[0].median, 2.0);
    let same = vec![
        RunScores::new("a", vec![1.0, 2.0, 3.0]),
        RunScores::new("b", vec![1.0, 2.0, 3.0]),
    ];
    let r = ablation_compare(&same, CompareOptions::default()).unwrap();
    let t = r.test("a", "b").unwrap();
    assert!(!t.significant);
    assert_eq!(t.result.p_value, 1.0);
}

#[test]
fn verdicts_do_not_depend_on_order() {
    let runs = vec![
        RunScores::new("g:a", vec![1.0, 1.2, 0.9]),
        RunScores::new("g:b", vec![2.0, 2.1, 1.8]),
        RunScores::new("h:c", vec![1.5, 1.4, 1.7]),
        RunScores::new("h:d", vec![1.52, 1.41, 1.69]),
    ];
    let a = ablation_compare(&runs, CompareOptions::default()).unwrap();
    let mut rev = runs.clone();
    rev.reverse();
    let b = ablation_compare(&rev, CompareOptions::default()).unwrap();
    assert_eq!(a.tests, b.tests);
    for v in &a.variants {
        assert_eq!(Some(v), b.variant(&v.variant));
    }
    assert!(a.variant("g:b").unwrap().best_in_group);
    assert!(a.variant("h:d").unwrap().best_in_group);
    assert!(a.variant("h:c").unwrap().tied_with_best);
}

#[test]
fn p_value_never_rises_with_separation() {
    let base = [0.3, -0.1, 0.4, 0.0, -0.2];
    for scale in [0.5, 1.0, 3.0] {
        let mut last = 1.0;
        for k in 0..40 {
            let shift = k as f64 * 0.05;
            let a: Vec<f64> = base.iter().map(|x| x * scale).collect();
            let b: Vec<f64> = base.iter().rev().map(|x| x * scale + shift).collect();
            let p = welch_t_test(&a, &b).unwrap().p_value;
            assert!(p <= last + 1e-15, "scale {scale} shift {shift}: {p} > {last}");
            assert!((0.0..=1.0).contains(&p));
            last = p;
        }
    }
}

#[test]
fn self_comparison_has_p_one() {
    for a in [vec![1.0, 5.0], vec![0.1, 0.2, 0.7, 0.4], vec![-3.0, 8.0, 2.0]] {
        assert_eq!(welch_t_test(&a, &a).unwrap().p_value, 1.0);
    }
}
