//! Held-out MLM metrics, a linear probe, and the statistics used to compare
//! ablation arms (median of runs, Welch's t-test).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{self, Batch, GradSeeds, Mode, ModelConfig};
use crate::objectives::{SsoLabel, IGNORE};
use crate::rng;
use crate::tensor::{ParamSet, Tensor};
use crate::tokenizer::{CLS_ID, SEP_ID};
use crate::training::{adam_step_with, AdamConfig, AdamState, PretrainData};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmMetrics {
    pub loss: f64,
    pub perplexity: f64,
    pub masked_accuracy: f64,
    pub labelled: usize,
}

/// Evaluation batches: p=0 encoding, keys disjoint from any training step.
pub fn eval_batches(data: &PretrainData<'_>, seed: u64, count: usize, size: usize) -> Result<Vec<Batch>> {
    let eval_seed = rng::derive_seed(seed, rng::stream::EVAL);
    (0..count as u64)
        .map(|i| data.batch(eval_seed, u64::MAX - i, size, 0.0))
        .collect()
}

/// Mean cross-entropy, perplexity and argmax accuracy over every labelled
/// position of `batches`, in eval mode.
pub fn heldout_mlm_metrics(config: &ModelConfig, params: &ParamSet<f32>, batches: &[Batch]) -> Result<MlmMetrics> {
    let v = config.vocab_size;
    let (mut sum, mut n, mut hits) = (0.0f64, 0usize, 0usize);
    let mut unused = rng::keyed(0, 0);
    for b in batches {
        let out = model::forward(config, params, b, Mode::Eval, &mut unused)?;
        for (logits, labels) in out.mlm_logits.iter().zip(&b.labels) {
            for (r, &label) in labels.iter().enumerate() {
                if label == IGNORE {
                    continue;
                }
                let row = &logits[r * v..(r + 1) * v];
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
                let lse = m + row.iter().map(|&x| (x as f64 - m).exp()).sum::<f64>().ln();
                sum += lse - row[label as usize] as f64;
                n += 1;
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
                    .0;
                hits += (arg == label as usize) as usize;
            }
        }
    }
    if n == 0 {
        return Err(Error::Stats("no labelled positions in evaluation data".into()));
    }
    let loss = sum / n as f64;
    Ok(MlmMetrics {
        loss,
        perplexity: loss.exp(),
        masked_accuracy: hits as f64 / n as f64,
        labelled: n,
    })
}

// --- Student t distribution -------------------------------------------------

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a Student t statistic.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(dof / 2.0, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub t_statistic: f64,
    pub dof: f64,
    pub p_value: f64,
    /// Both samples had zero variance.
    pub degenerate: bool,
}

impl TestResult {
    pub fn significant_at(&self, threshold: f64) -> bool {
        self.p_value < threshold
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Welch's unequal-variance t-test, two-sided.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats("Welch's test needs at least two values per sample".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Stats("non-finite sample value".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / na, vb / nb);
    if sa + sb == 0.0 {
        let same = ma == mb;
        return Ok(TestResult {
            t_statistic: if same { 0.0 } else { (ma - mb).signum() * f64::INFINITY },
            dof: na + nb - 2.0,
            p_value: if same { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = (ma - mb) / (sa + sb).sqrt();
    let dof = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TestResult {
        t_statistic: t,
        dof,
        p_value: student_t_two_sided(t, dof),
        degenerate: false,
    })
}

// --- Ablation comparison -----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RunScores {
    pub variant: String,
    pub scores: Vec<f64>,
}

impl RunScores {
    pub fn new(variant: impl Into<String>, scores: Vec<f64>) -> Self {
        RunScores {
            variant: variant.into(),
            scores,
        }
    }

    /// `group:name` variants share the group before the colon.
    pub fn group(&self) -> &str {
        self.variant.split_once(':').map_or("", |(g, _)| g)
    }
}

/// Parses `variant,seed,score` rows (a header line is skipped). Variants
/// keep their first-appearance order; scores are ordered by seed.
pub fn parse_runs_csv(text: &str) -> Result<Vec<RunScores>> {
    let mut order = Vec::new();
    let mut by: BTreeMap<String, Vec<(i64, f64)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("variant")) {
            continue;
        }
        let bad = || Error::Malformed {
            line: i + 1,
            message: format!("expected `variant,seed,score`, got `{line}`"),
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad());
        }
        let seed: i64 = f[1].parse().map_err(|_| bad())?;
        let score: f64 = f[2].parse().map_err(|_| bad())?;
        if !by.contains_key(f[0]) {
            order.push(f[0].to_string());
        }
        by.entry(f[0].to_string()).or_default().push((seed, score));
    }
    Ok(order
        .into_iter()
        .map(|v| {
            let mut s = by.remove(&v).unwrap();
            s.sort_by_key(|x| x.0);
            RunScores::new(v, s.into_iter().map(|x| x.1).collect())
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub threshold: f64,
    pub higher_is_better: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            threshold: 0.01,
            higher_is_better: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub group: String,
    pub median: f64,
    /// Half of the max-min spread across runs.
    pub half_range: f64,
    pub runs: usize,
    pub best_in_group: bool,
    pub best_overall: bool,
    /// Not significantly different from the best of its group.
    pub tied_with_best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairTest {
    pub a: String,
    pub b: String,
    pub result: TestResult,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub options: CompareOptions,
    pub variants: Vec<VariantSummary>,
    pub tests: Vec<PairTest>,
}

impl ComparisonReport {
    pub fn test(&self, a: &str, b: &str) -> Option<&PairTest> {
        self.tests
            .iter()
            .find(|t| (t.a == a && t.b == b) || (t.a == b && t.b == a))
    }

    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == name)
    }
}

pub fn median(x: &[f64]) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Median ± half range per variant, Welch tests for every pair, and the
/// best variant per group and overall.
pub fn ablation_compare(runs: &[RunScores], opts: CompareOptions) -> Result<ComparisonReport> {
    let first = runs.first().ok_or_else(|| Error::Stats("no variants to compare".into()))?;
    let mut seen = BTreeSet::new();
    for r in runs {
        if r.scores.len() != first.scores.len() {
            return Err(Error::Stats(format!(
                "variant `{}` has {} runs, `{}` has {}",
                r.variant,
                r.scores.len(),
                first.variant,
                first.scores.len()
            )));
        }
        if r.scores.is_empty() || r.scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::Stats(format!("variant `{}` has no finite scores", r.variant)));
        }
        if !seen.insert(&r.variant) {
            return Err(Error::Stats(format!("variant `{}` listed twice", r.variant)));
        }
    }
    let better = |a: f64, b: f64| if opts.higher_is_better { a > b } else { a < b };

    let mut variants: Vec<VariantSummary> = runs
        .iter()
        .map(|r| {
            let lo = r.scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = r.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            VariantSummary {
                variant: r.variant.clone(),
                group: r.group().to_string(),
                median: median(&r.scores),
                half_range: (hi - lo) / 2.0,
                runs: r.scores.len(),
                best_in_group: false,
                best_overall: false,
                tied_with_best: false,
            }
        })
        .collect();

    let mut tests = Vec::new();
    if first.scores.len() >= 2 {
        let mut sorted: Vec<&RunScores> = runs.iter().collect();
        sorted.sort_by(|x, y| x.variant.cmp(&y.variant));
        for i in 0..sorted.len() {
            for j in i + 1..sorted.len() {
                let result = welch_t_test(&sorted[i].scores, &sorted[j].scores)?;
                tests.push(PairTest {
                    a: sorted[i].variant.clone(),
                    b: sorted[j].variant.clone(),
                    significant: result.significant_at(opts.threshold),
                    result,
                });
            }
        }
    }

    let best_of = |vs: &[&VariantSummary]| -> f64 {
        vs.iter()
            .map(|v| v.median)
            .fold(None, |b: Option<f64>, m| match b {
                Some(b) if !better(m, b) => Some(b),
                _ => Some(m),
            })
            .unwrap()
    };
    let overall = best_of(&variants.iter().collect::<Vec<_>>());
    let groups: BTreeSet<String> = variants.iter().map(|v| v.group.clone()).collect();
    let mut group_best: BTreeMap<String, (f64, Vec<String>)> = BTreeMap::new();
    for g in groups {
        let members: Vec<&VariantSummary> = variants.iter().filter(|v| v.group == g).collect();
        let b = best_of(&members);
        let names = members.iter().filter(|v| v.median == b).map(|v| v.variant.clone()).collect();
        group_best.insert(g, (b, names));
    }
    let lookup = |a: &str, b: &str| {
        tests
            .iter()
            .find(|t| (t.a == a && t.b == b) || (t.a == b && t.b == a))
            .map(|t| t.significant)
    };
    for v in variants.iter_mut() {
        let (b, names) = &group_best[&v.group];
        v.best_in_group = v.median == *b;
        v.best_overall = v.median == overall;
        v.tied_with_best = !v.best_in_group
            && names
                .iter()
                .any(|n| lookup(&v.variant, n).map_or(true, |sig| !sig));
    }
    Ok(ComparisonReport {
        options: opts,
        variants,
        tests,
    })
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self
            .variants
            .iter()
            .map(|v| v.variant.chars().count())
            .max()
            .unwrap_or(7)
            .max(7);
        writeln!(f, "{:<w$}  {:>12}  {:>10}  {:>4}  mark", "variant", "median", "±", "runs")?;
        for v in &self.variants {
            let mark = if v.best_overall {
                "**"
            } else if v.best_in_group {
                "*"
            } else if v.tied_with_best {
                "n.s."
            } else {
                ""
            };
            writeln!(
                f,
                "{:<w$}  {:>12.4}  {:>10.4}  {:>4}  {mark}",
                v.variant, v.median, v.half_range, v.runs
            )?;
        }
        if !self.tests.is_empty() {
            writeln!(f)?;
            writeln!(f, "Welch's t-test, threshold p < {}", self.options.threshold)?;
            for t in &self.tests {
                writeln!(
                    f,
                    "{} vs {}: t = {:.4}, dof = {:.2}, p = {:.3e}  {}",
                    t.a,
                    t.b,
                    t.result.t_statistic,
                    t.result.dof,
                    t.result.p_value,
                    if t.significant { "significant" } else { "not significant" }
                )?;
            }
        }
        write!(f, "** best overall, * best in group, n.s. not significantly worse than its group's best; ± is half the range")
    }
}

// --- Probe ------------------------------------------------------------------

pub const PROBE_W: &str = "probe.weight";
pub const PROBE_B: &str = "probe.bias";
pub const MAX_PROBE_EXAMPLES: usize = 1000;
pub const MAX_PROBE_CLASSES: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub num_classes: usize,
    /// Token ids without `[CLS]`/`[SEP]`, and a class label.
    pub examples: Vec<(Vec<u32>, usize)>,
}

impl ProbeDataset {
    /// Each class draws its tokens mostly from its own slice of the regular
    /// vocabulary, with `noise` of tokens drawn from anywhere.
    pub fn synthetic(
        vocab_size: usize,
        num_specials: usize,
        classes: usize,
        n: usize,
        len: usize,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        let regular = vocab_size.saturating_sub(num_specials);
        if classes == 0 || regular < classes {
            return Err(Error::Config("vocabulary too small for the probe classes".into()));
        }
        let mut r = rng::named(seed, rng::stream::PROBE);
        let slice = regular / classes;
        let examples = (0..n)
            .map(|i| {
                let c = i % classes;
                let ids = (0..len)
                    .map(|_| {
                        let id = if r.gen_bool(noise) {
                            r.gen_range(0..regular)
                        } else {
                            c * slice + r.gen_range(0..slice)
                        };
                        (num_specials + id) as u32
                    })
                    .collect();
                (ids, c)
            })
            .collect();
        Ok(ProbeDataset {
            num_classes: classes,
            examples,
        })
    }

    /// First `fraction` of a seeded shuffle for training, the rest held out.
    pub fn split(&self, fraction: f64, seed: u64) -> (ProbeDataset, ProbeDataset) {
        let mut ex = self.examples.clone();
        ex.shuffle(&mut rng::named(seed, "probe-split"));
        let k = ((ex.len() as f64) * fraction).round() as usize;
        let test = ex.split_off(k);
        let mk = |examples| ProbeDataset {
            num_classes: self.num_classes,
            examples,
        };
        (mk(ex), mk(test))
    }

    fn batch(&self, idx: &[usize]) -> Batch {
        let rows: Vec<_> = idx
            .iter()
            .map(|&i| {
                let mut ids = vec![CLS_ID];
                ids.extend_from_slice(&self.examples[i].0);
                ids.push(SEP_ID);
                let n = ids.len();
                (ids, vec![0; n], vec![IGNORE; n])
            })
            .collect();
        Batch::collate(&rows, vec![SsoLabel::Next; idx.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Train the encoder tensors (`embeddings.*`, `layer.*`) as well.
    pub unfreeze: bool,
    pub encoder_lr: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            epochs: 20,
            batch_size: 16,
            lr: 1e-2,
            unfreeze: false,
            encoder_lr: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Tensors whose values changed during probe training.
    pub updated: BTreeSet<String>,
    pub params: ParamSet<f32>,
}

fn is_encoder(name: &str) -> bool {
    name.starts_with("embeddings.") || name.starts_with("layer.")
}

/// Trains a linear classifier on the final `[CLS]` state and reports its
/// accuracy on `test`.
pub fn probe_finetune(
    config: &ModelConfig,
    params: &ParamSet<f32>,
    train: &ProbeDataset,
    test: &ProbeDataset,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    let c = train.num_classes;
    if train.examples.len() + test.examples.len() > MAX_PROBE_EXAMPLES {
        return Err(Error::Config(format!("probe data exceeds {MAX_PROBE_EXAMPLES} examples")));
    }
    if c == 0 || c > MAX_PROBE_CLASSES {
        return Err(Error::Config(format!("probe needs 1..={MAX_PROBE_CLASSES} classes")));
    }
    for k in 0..c {
        if !train.examples.iter().any(|e| e.1 == k) {
            return Err(Error::Config(format!("class {k} is absent from the training split")));
        }
    }
    if test.examples.is_empty() {
        return Err(Error::Config("empty probe test split".into()));
    }
    let h = config.hidden;
    let mut r = rng::named(opts.seed, rng::stream::PROBE);
    let mut p = params.clone();
    p.insert(PROBE_W, Tensor::normal(&[h, c], model::INIT_STD, &mut r));
    p.insert(PROBE_B, Tensor::zeros(&[c]));
    let trainable: BTreeSet<String> = p
        .names()
        .filter(|n| n.starts_with("probe.") || (opts.unfreeze && is_encoder(n)))
        .cloned()
        .collect();
    let sub = |p: &ParamSet<f32>, which: &BTreeSet<String>| -> ParamSet<f32> {
        p.iter()
            .filter(|(n, _)| which.contains(*n))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    };
    let mut head = sub(&p, &trainable);
    let mut state = AdamState::new(&head);
    let adam = AdamConfig::default();
    let model_only = |p: &ParamSet<f32>| -> ParamSet<f32> {
        p.iter()
            .filter(|(n, _)| !n.starts_with("probe."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    };

    let mut order: Vec<usize> = (0..train.examples.len()).collect();
    let mut dropout = rng::keyed(rng::derive_seed(opts.seed, rng::stream::DROPOUT), 0);

    // Features are standardized with training-split statistics of the
    // initial encoder; a random encoder's [CLS] state is mostly constant.
    let (mu, inv_sd) = {
        let enc = model_only(&p);
        let mut sum = vec![0.0f64; h];
        let mut sq = vec![0.0f64; h];
        for idx in order.chunks(64) {
            let out = model::forward(config, &enc, &train.batch(idx), Mode::Eval, &mut dropout)?;
            for c in out.cache().expect("fresh output") {
                for (d, &x) in c.hidden()[..h].iter().enumerate() {
                    sum[d] += x as f64;
                    sq[d] += (x as f64) * (x as f64);
                }
            }
        }
        let n = order.len() as f64;
        let mu: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        let inv: Vec<f32> = (0..h)
            .map(|d| {
                let var = (sq[d] / n - (sum[d] / n).powi(2)).max(0.0);
                (1.0 / (var.sqrt() + 1e-6)) as f32
            })
            .collect();
        (mu, inv)
    };
    let features = |cls: &[f32]| -> Vec<f32> {
        cls.iter().zip(&mu).zip(&inv_sd).map(|((x, m), s)| (x - m) * s).collect()
    };
    for _ in 0..opts.epochs {
        order.shuffle(&mut r);
        for idx in order.chunks(opts.batch_size.max(1)) {
            let batch = train.batch(idx);
            let enc = model_only(&p);
            let mut out = model::forward(config, &enc, &batch, Mode::Eval, &mut dropout)?;
            let w = p.tensor(PROBE_W)?.data().to_vec();
            let bias = p.tensor(PROBE_B)?.data().to_vec();
            let t = batch.seq_len();
            let n = idx.len() as f32;
            let mut gw = vec![0.0f32; h * c];
            let mut gb = vec![0.0f32; c];
            let mut hidden_seeds = Vec::with_capacity(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                let cls = features(&out.cache().expect("fresh output")[k].hidden()[..h]);
                let mut logits = model::ops::matmul(&cls, 1, h, &w, c);
                model::ops::add_bias(&mut logits, &bias);
                let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let z: f32 = logits.iter().map(|&x| (x - m).exp()).sum();
                let d: Vec<f32> = (0..c)
                    .map(|j| ((logits[j] - m).exp() / z - (j == train.examples[i].1) as u8 as f32) / n)
                    .collect();
                model::ops::matmul_at_acc(&cls, 1, h, &d, c, &mut gw);
                model::ops::sum_rows_acc(&d, c, &mut gb);
                let mut dh = vec![0.0f32; t * h];
                let back = model::ops::matmul_bt(&d, 1, c, &w, h);
                for (k, (g, s)) in back.iter().zip(&inv_sd).enumerate() {
                    dh[k] = g * s;
                }
                hidden_seeds.push(dh);
            }
            let mut grads = if opts.unfreeze {
                let seeds = GradSeeds {
                    hidden: Some(hidden_seeds),
                    ..GradSeeds::zeros(idx.len())
                };
                let g = model::backward(config, &enc, &mut out, &seeds)?;
                sub(&g, &trainable)
            } else {
                ParamSet::new()
            };
            grads.insert(PROBE_W, Tensor::from_vec(&[h, c], gw)?);
            grads.insert(PROBE_B, Tensor::from_vec(&[c], gb)?);
            let (lr, elr) = (opts.lr, opts.encoder_lr);
            adam_step_with(
                &mut head,
                &grads,
                &mut state,
                |n| if n.starts_with("probe.") { lr } else { elr },
                &adam,
            )?;
            for (name, t) in head.iter() {
                p.insert(name.clone(), t.clone());
            }
        }
    }

    let enc = model_only(&p);
    let w = p.tensor(PROBE_W)?.data().to_vec();
    let bias = p.tensor(PROBE_B)?.data().to_vec();
    let mut hits = 0;
    let all: Vec<usize> = (0..test.examples.len()).collect();
    for idx in all.chunks(64) {
        let out = model::forward(config, &enc, &test.batch(idx), Mode::Eval, &mut dropout)?;
        for (k, &i) in idx.iter().enumerate() {
            let cls = features(&out.cache().expect("fresh output")[k].hidden()[..h]);
            let mut logits = model::ops::matmul(&cls, 1, h, &w, c);
            model::ops::add_bias(&mut logits, &bias);
            let arg = (0..c).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
            hits += (arg == test.examples[i].1) as usize;
        }
    }
    let updated = p
        .iter()
        .filter(|(n, t)| match params.get(n) {
            Some(orig) => orig.data() != t.data(),
            None => true,
        })
        .map(|(n, _)| n.clone())
        .collect();
    Ok(ProbeResult {
        accuracy: hits as f64 / test.examples.len() as f64,
        updated,
        params: p,
    })
}
