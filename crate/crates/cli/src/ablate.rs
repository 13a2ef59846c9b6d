//! `ablate`: a manifest directory describes a matrix of training variants;
//! every variant is trained for each seed and scored by held-out MLM loss.
//!
//! ```text
//! # manifest
//! base = base.conf            # shared settings (optional)
//! variants = a.conf, b.conf   # per-variant overrides (optional)
//! axis.alpha = 0, 0.1, 1.0    # each axis multiplies the matrix
//! axis.init = random, transfer
//! seeds = 1, 2, 3, 4, 5       # or `runs = 5` for seeds 0..5
//! eval_corpus_preset = small  # or eval_corpus = held_out.txt
//! ```
//!
//! The last axis names the variant within its group, so rows that differ
//! only in that axis are compared as a group.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use warmstart::config::{parse_kv, Kv};
use warmstart::corpus::{self, Document};
use warmstart::evalstats::{self, CompareOptions, RunScores};
use warmstart::model::ModelConfig;
use warmstart::objectives::DEFAULT_MASK_RATE;
use warmstart::synthetic::SyntheticLanguage;
use warmstart::tokenizer::Tokenizer;
use warmstart::training::{PretrainData, TrainConfig};
use warmstart::{checkpoint, rng};

struct Variant {
    name: String,
    settings: BTreeMap<String, String>,
}

fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_kv(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

fn variants(dir: &Path, manifest: &BTreeMap<String, String>) -> Result<Vec<Variant>> {
    let base = match manifest.get("base") {
        Some(b) => read_kv(&dir.join(b))?,
        None => BTreeMap::new(),
    };
    let mut out = vec![(Vec::<String>::new(), base)];
    if let Some(files) = manifest.get("variants") {
        let mut next = Vec::new();
        for f in list(files) {
            let overrides = read_kv(&dir.join(&f))?;
            let stem = Path::new(&f)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or(f.clone());
            for (parts, settings) in &out {
                let mut s = settings.clone();
                s.extend(overrides.clone());
                let mut p = parts.clone();
                p.push(stem.clone());
                next.push((p, s));
            }
        }
        out = next;
    }
    for (key, values) in manifest.iter().filter(|(k, _)| k.starts_with("axis.")) {
        let name = &key["axis.".len()..];
        let values = list(values);
        if values.is_empty() {
            bail!("axis `{name}` lists no values");
        }
        let mut next = Vec::new();
        for (parts, settings) in &out {
            for v in &values {
                let mut s = settings.clone();
                s.insert(name.to_string(), v.clone());
                let mut p = parts.clone();
                p.push(format!("{name}={v}"));
                next.push((p, s));
            }
        }
        out = next;
    }
    Ok(out
        .into_iter()
        .map(|(parts, settings)| {
            let name = match parts.split_last() {
                None => "base".to_string(),
                Some((last, [])) => last.clone(),
                Some((last, rest)) => format!("{}:{last}", rest.join(" ")),
            };
            Variant { name, settings }
        })
        .collect())
}

fn dir_name(variant: &str) -> String {
    variant
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

pub fn run(manifest_dir: &Path, out: &Path, seed_override: Option<u64>, verbose: u8) -> Result<()> {
    let manifest = read_kv(&manifest_dir.join("manifest"))?;
    let vars = variants(manifest_dir, &manifest)?;
    let mut kv = Kv::new(manifest.clone());
    for k in ["base", "variants"] {
        kv.raw(k);
    }
    for k in manifest.keys().filter(|k| k.starts_with("axis.")) {
        kv.raw(k);
    }
    let seeds: Vec<u64> = match (kv.raw("seeds").map(list), kv.get::<u64>("runs")?) {
        (Some(s), None) => s
            .iter()
            .map(|x| x.parse().with_context(|| format!("bad seed `{x}`")))
            .collect::<Result<_>>()?,
        (None, Some(n)) => (0..n).collect(),
        (None, None) => (0..5).collect(),
        (Some(_), Some(_)) => bail!("manifest sets both `seeds` and `runs`"),
    };
    let seeds: Vec<u64> = match seed_override {
        Some(root) => seeds.iter().map(|s| rng::derive_seed(root, &format!("ablate-{s}"))).collect(),
        None => seeds,
    };
    let eval_batches: usize = kv.get_or("eval_batches", 4)?;
    let eval_batch_size: usize = kv.get_or("eval_batch_size", 32)?;
    let eval_seed: u64 = kv.get_or("eval_seed", 0)?;
    let threshold: f64 = kv.get_or("threshold", 0.01)?;
    let eval_docs: Vec<Document> = match kv.raw("eval_corpus").map(str::to_string) {
        Some(p) => {
            let fmt = kv.raw("eval_corpus_format").unwrap_or("plain-blankline").parse()?;
            corpus::ingest_all(&[manifest_dir.join(p)], fmt)?
        }
        None => {
            let preset = kv.raw("eval_corpus_preset").unwrap_or("small").parse()?;
            let lang = kv.get_or("eval_language_seed", 0u64)?;
            let lexicon = kv.get_or("eval_lexicon_size", 120usize)?;
            let per = kv.get_or("eval_docs_per_source", 20usize)?;
            let cs = kv.get_or("eval_corpus_seed", 999_983u64)?;
            SyntheticLanguage::new(lang, lexicon, 6).preset(preset, per, rng::derive_seed(cs, rng::stream::CORPUS))
        }
    };
    kv.finish().context("in manifest")?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut csv = String::from("variant,seed,score\n");
    let mut runs = Vec::new();
    for v in &vars {
        let mut scores = Vec::new();
        for &seed in &seeds {
            let mut cfg = TrainConfig::from_map(v.settings.clone(), manifest_dir)
                .with_context(|| format!("variant `{}`", v.name))?;
            cfg.seed = seed;
            let dir: PathBuf = out.join(dir_name(&v.name)).join(format!("seed-{seed}"));
            crate::train_to_dir(&mut cfg, &dir, verbose).with_context(|| format!("variant `{}` seed {seed}", v.name))?;
            let tok = match &cfg.tokenizer {
                Some(t) => Tokenizer::load(t)?,
                None => Tokenizer::load(dir.join("tokenizer"))?,
            };
            let mc = ModelConfig::load_sidecar(dir.join("model.ckpt"))?;
            let params = checkpoint::load(dir.join("model.ckpt"))?;
            let data = PretrainData::new(&tok, &eval_docs, mc.max_seq_len, DEFAULT_MASK_RATE)?;
            let batches = evalstats::eval_batches(&data, eval_seed, eval_batches, eval_batch_size)?;
            let m = evalstats::heldout_mlm_metrics(&mc, &params, &batches)?;
            if verbose > 0 {
                eprintln!("{} seed {seed}: held-out loss {:.4}", v.name, m.loss);
            }
            writeln!(csv, "{},{seed},{}", v.name, m.loss)?;
            scores.push(m.loss);
        }
        runs.push(RunScores::new(v.name.clone(), scores));
    }
    std::fs::write(out.join("runs.csv"), &csv)?;
    let report = evalstats::ablation_compare(
        &runs,
        CompareOptions {
            threshold,
            higher_is_better: false,
        },
    )?;
    let text = format!("score: held-out MLM loss (lower is better)\n{report}\n");
    std::fs::write(out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
