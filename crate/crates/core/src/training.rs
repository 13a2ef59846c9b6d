//! Learning-rate schedules, Adam, and the pretraining loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::config::Kv;
use crate::corpus::{split_sentences, CorpusPreset, Document};
use crate::error::{Error, Result};
use crate::model::{self, Batch, LossBreakdown, Mode, ModelConfig};
use crate::objectives::{
    build_pair, sample_sso_pair, whole_word_mask, MaskingSpec, SentencePool, SsoLabel,
    DEFAULT_MASK_RATE,
};
use crate::rng;
use crate::tensor::{ParamSet, Real, Tensor};
use crate::tokenizer::{EncodeOptions, Encoding, Tokenizer, MASK_ID};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start_step: u64,
    pub end_step: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub bpe_dropout_on: bool,
    pub model_dropout_on: bool,
}

impl Segment {
    fn new(start_step: u64, end_step: u64, lr_start: f64, lr_end: f64) -> Self {
        Segment {
            start_step,
            end_step,
            lr_start,
            lr_end,
            bpe_dropout_on: true,
            model_dropout_on: true,
        }
    }
}

/// Linear warmup from 0 to the first segment's starting rate, then
/// piecewise-linear segments in absolute steps. A step on a boundary
/// belongs to the earlier segment, so a drop between segments takes effect
/// one step after the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleSpec {
    pub warmup_steps: u64,
    pub segments: Vec<Segment>,
}

/// Flags in force at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseFlags {
    pub bpe_dropout: bool,
    pub model_dropout: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulePreset {
    Ablation10k,
    Ablation50k,
    HerbertLarge60k,
}

impl SchedulePreset {
    pub const ALL: [SchedulePreset; 3] = [
        SchedulePreset::Ablation10k,
        SchedulePreset::Ablation50k,
        SchedulePreset::HerbertLarge60k,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulePreset::Ablation10k => "ablation-10k",
            SchedulePreset::Ablation50k => "ablation-50k",
            SchedulePreset::HerbertLarge60k => "herbert-large-60k",
        }
    }

    /// Batch size the preset was designed for; desk runs use far less.
    pub fn reference_batch_size(self) -> usize {
        2560
    }

    pub fn spec(self) -> ScheduleSpec {
        match self {
            SchedulePreset::Ablation10k => ScheduleSpec::linear(500, 10_000, 7e-4),
            SchedulePreset::Ablation50k => ScheduleSpec::linear(500, 50_000, 3e-4),
            SchedulePreset::HerbertLarge60k => {
                let last = Segment {
                    bpe_dropout_on: false,
                    model_dropout_on: false,
                    ..Segment::new(40_000, 60_000, 3e-5, 0.0)
                };
                ScheduleSpec {
                    warmup_steps: 500,
                    segments: vec![
                        Segment::new(500, 15_000, 3e-4, 2.5e-4),
                        Segment::new(15_000, 40_000, 1e-4, 7e-5),
                        last,
                    ],
                }
            }
        }
    }
}

impl FromStr for SchedulePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchedulePreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule preset `{s}`")))
    }
}

impl ScheduleSpec {
    /// Warmup to `peak`, then linear decay to zero at `total`.
    pub fn linear(warmup: u64, total: u64, peak: f64) -> Self {
        ScheduleSpec {
            warmup_steps: warmup,
            segments: vec![Segment::new(warmup, total, peak, 0.0)],
        }
    }

    /// Parses `a-b:lr0>lr1[:nodropout][:nobpe], ...` with absolute steps.
    pub fn parse_segments(warmup: u64, text: &str) -> Result<Self> {
        let bad = |s: &str| Error::Config(format!("cannot parse schedule segment `{s}`"));
        let mut segments = Vec::new();
        for part in text.split([',', ';']).map(str::trim).filter(|s| !s.is_empty()) {
            let mut fields = part.split(':');
            let (a, b) = fields
                .next()
                .and_then(|r| r.split_once('-'))
                .ok_or_else(|| bad(part))?;
            let (l0, l1) = fields
                .next()
                .and_then(|r| r.split_once('>'))
                .ok_or_else(|| bad(part))?;
            let mut seg = Segment::new(
                a.trim().parse().map_err(|_| bad(part))?,
                b.trim().parse().map_err(|_| bad(part))?,
                l0.trim().parse().map_err(|_| bad(part))?,
                l1.trim().parse().map_err(|_| bad(part))?,
            );
            for flag in fields {
                match flag.trim() {
                    "nodropout" => seg.model_dropout_on = false,
                    "nobpe" => seg.bpe_dropout_on = false,
                    _ => return Err(bad(part)),
                }
            }
            segments.push(seg);
        }
        let s = ScheduleSpec {
            warmup_steps: warmup,
            segments,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .segments
            .first()
            .ok_or_else(|| Error::Config("schedule has no segments".into()))?;
        if first.start_step != self.warmup_steps {
            return Err(Error::Config(format!(
                "first segment starts at {}, warmup ends at {}",
                first.start_step, self.warmup_steps
            )));
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.end_step <= s.start_step {
                return Err(Error::Config(format!("segment {i} is empty")));
            }
            if !(s.lr_start.is_finite() && s.lr_end.is_finite() && s.lr_start >= 0.0 && s.lr_end >= 0.0)
            {
                return Err(Error::Config(format!("segment {i} has a negative or non-finite rate")));
            }
            if let Some(next) = self.segments.get(i + 1) {
                if next.start_step != s.end_step {
                    return Err(Error::Config(format!(
                        "segments {i} and {} are not contiguous",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.segments.last().map_or(0, |s| s.end_step)
    }

    fn segment_of(&self, step: u64) -> Result<&Segment> {
        if step > self.total_steps() {
            return Err(Error::Config(format!(
                "step {step} is beyond the schedule end {}",
                self.total_steps()
            )));
        }
        Ok(self
            .segments
            .iter()
            .find(|s| step <= s.end_step)
            .expect("step within schedule"))
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        let seg = self.segment_of(step)?;
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return Ok(seg.lr_start);
            }
            return Ok(seg.lr_start * (step as f64 / self.warmup_steps as f64));
        }
        let f = (step - seg.start_step) as f64 / (seg.end_step - seg.start_step) as f64;
        Ok(seg.lr_start * (1.0 - f) + seg.lr_end * f)
    }

    pub fn flags_at(&self, step: u64) -> Result<PhaseFlags> {
        let seg = self.segment_of(step)?;
        Ok(PhaseFlags {
            bpe_dropout: seg.bpe_dropout_on,
            model_dropout: seg.model_dropout_on,
        })
    }
}

pub fn lr_at(step: u64, spec: &ScheduleSpec) -> Result<f64> {
    spec.lr_at(step)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clipping; off unless set.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place. Fails, naming the tensor, on a
/// non-finite gradient, leaving parameters and state untouched.
pub fn adam_step<F: Real>(
    params: &mut ParamSet<F>,
    grads: &ParamSet<F>,
    state: &mut AdamState<F>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_step_with(params, grads, state, |_| lr, cfg)
}

/// [`adam_step`] with a learning rate per tensor name.
pub fn adam_step_with<F: Real>(
    params: &mut ParamSet<F>,
    grads: &ParamSet<F>,
    state: &mut AdamState<F>,
    lr_for: impl Fn(&str) -> f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.tensor(name)?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                donor: g.shape().to_vec(),
                target: p.shape().to_vec(),
            });
        }
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let clip = match cfg.clip_norm {
        Some(c) => {
            let n = grads.global_norm();
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (ob1, ob2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
    let (bc1, bc2, eps, clip) = (F::of(bc1), F::of(bc2), F::of(cfg.eps), F::of(clip));
    for (name, p) in params.iter_mut() {
        let lr = F::of(lr_for(name));
        let g = grads.get(name).expect("checked").data();
        let m = state.m.get_mut(name).expect("state mirrors params").data_mut();
        let v = state.v.get_mut(name).expect("state mirrors params").data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i] * clip;
            m[i] = b1 * m[i] + ob1 * gi;
            v[i] = b2 * v[i] + ob2 * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *w -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Random,
    Transfer {
        donor: PathBuf,
        donor_tokenizer: PathBuf,
        token_type_donor: Option<PathBuf>,
        conventions: Option<PathBuf>,
    },
}

/// Where training text comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum CorpusSpec {
    Files {
        paths: Vec<PathBuf>,
        format: crate::corpus::Format,
    },
    Synthetic {
        preset: CorpusPreset,
        docs_per_source: usize,
        language_seed: u64,
        lexicon_size: usize,
        /// Seed of the document draw; the language itself is fixed by
        /// `language_seed`.
        corpus_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub alpha: f64,
    pub bpe_dropout_p: f64,
    pub mask_rate: f64,
    pub schedule: ScheduleSpec,
    pub adam: AdamConfig,
    pub model: ModelConfig,
    pub init: InitSpec,
    pub corpus: Option<CorpusSpec>,
    pub tokenizer: Option<PathBuf>,
    /// Also write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl TrainConfig {
    /// Desk defaults around a given model and schedule.
    pub fn new(model: ModelConfig, schedule: ScheduleSpec) -> Self {
        TrainConfig {
            batch_size: 32,
            total_steps: schedule.total_steps(),
            seed: 0,
            alpha: 1.0,
            bpe_dropout_p: 0.1,
            mask_rate: DEFAULT_MASK_RATE,
            schedule,
            adam: AdamConfig::default(),
            model,
            init: InitSpec::Random,
            corpus: None,
            tokenizer: None,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.total_steps != self.schedule.total_steps() {
            return Err(Error::Config(format!(
                "total_steps {} differs from the schedule end {}",
                self.total_steps,
                self.schedule.total_steps()
            )));
        }
        if !(0.0..=1.0).contains(&self.bpe_dropout_p) {
            return Err(Error::Config("bpe_dropout_p outside [0, 1]".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("alpha must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Reads a `key = value` file. Relative paths resolve against `base`.
    /// `vocab_size` may be left out when the tokenizer will supply it.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        TrainConfig::from_map(crate::config::parse_kv(text)?, base)
    }

    pub fn from_map(map: BTreeMap<String, String>, base: &Path) -> Result<Self> {
        let mut kv = Kv::new(map);
        let path = |p: String| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let desk = ModelConfig::desk(0);
        let max_seq_len = kv.get_or("max_seq_len", desk.max_seq_len)?;
        let model = ModelConfig {
            layers: kv.get_or("layers", desk.layers)?,
            heads: kv.get_or("heads", desk.heads)?,
            hidden: kv.get_or("hidden", desk.hidden)?,
            ff_dim: kv.get_or("ff_dim", desk.ff_dim)?,
            vocab_size: kv.get_or("vocab_size", 0)?,
            max_positions: kv.get_or("max_positions", max_seq_len)?,
            type_vocab_size: 2,
            dropout_rate: kv.get_or("dropout_rate", desk.dropout_rate)?,
            max_seq_len,
        };

        let warmup = kv.get("warmup_steps")?;
        let schedule = match kv.raw("schedule").map(str::to_string).as_deref() {
            None | Some("linear") => {
                let total = kv
                    .get("total_steps")?
                    .ok_or_else(|| Error::Config("linear schedule needs total_steps".into()))?;
                let peak = kv.get_or("peak_lr", 1e-3)?;
                ScheduleSpec::linear(warmup.unwrap_or(0), total, peak)
            }
            Some("segments") => {
                let segs = kv
                    .raw("segments")
                    .map(str::to_string)
                    .ok_or_else(|| Error::Config("segment schedule needs `segments`".into()))?;
                ScheduleSpec::parse_segments(warmup.unwrap_or(0), &segs)?
            }
            Some(name) => {
                let s = name.parse::<SchedulePreset>()?.spec();
                if warmup.is_some_and(|w| w != s.warmup_steps) {
                    return Err(Error::Config("a schedule preset fixes its own warmup".into()));
                }
                s
            }
        };
        let mut cfg = TrainConfig::new(model, schedule);
        cfg.total_steps = kv.get_or("total_steps", cfg.total_steps)?;
        cfg.batch_size = kv.get_or("batch_size", cfg.batch_size)?;
        cfg.seed = kv.get_or("seed", cfg.seed)?;
        cfg.alpha = kv.get_or("alpha", cfg.alpha)?;
        cfg.bpe_dropout_p = kv.get_or("bpe_dropout_p", cfg.bpe_dropout_p)?;
        cfg.mask_rate = kv.get_or("mask_rate", cfg.mask_rate)?;
        cfg.adam.clip_norm = kv.get("clip_norm")?;
        cfg.checkpoint_every = kv.get_or("checkpoint_every", 0)?;
        cfg.tokenizer = kv.raw("tokenizer").map(|s| path(s.to_string()));

        cfg.init = match kv.raw("init").unwrap_or("random").to_string().as_str() {
            "random" => InitSpec::Random,
            "transfer" => InitSpec::Transfer {
                donor: path(
                    kv.raw("donor")
                        .ok_or_else(|| Error::Config("transfer init needs `donor`".into()))?
                        .to_string(),
                ),
                donor_tokenizer: path(
                    kv.raw("donor_tokenizer")
                        .ok_or_else(|| Error::Config("transfer init needs `donor_tokenizer`".into()))?
                        .to_string(),
                ),
                token_type_donor: kv.raw("token_type_donor").map(|s| path(s.to_string())),
                conventions: kv.raw("conventions").map(|s| path(s.to_string())),
            },
            other => return Err(Error::Config(format!("unknown init `{other}`"))),
        };

        let files = kv.raw("corpus").map(str::to_string);
        let preset = kv.raw("corpus_preset").map(str::to_string);
        cfg.corpus = match (files, preset) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("set either `corpus` or `corpus_preset`".into()))
            }
            (Some(f), None) => Some(CorpusSpec::Files {
                paths: f.split(',').map(|p| path(p.trim().to_string())).collect(),
                format: kv.raw("corpus_format").unwrap_or("plain-blankline").parse()?,
            }),
            (None, Some(p)) => Some(CorpusSpec::Synthetic {
                preset: p.parse()?,
                docs_per_source: kv.get_or("docs_per_source", 200)?,
                language_seed: kv.get_or("language_seed", 0)?,
                lexicon_size: kv.get_or("lexicon_size", 120)?,
                corpus_seed: kv.get_or("corpus_seed", 0)?,
            }),
            (None, None) => None,
        };
        kv.finish()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Starting parameters for `cfg`: a fresh draw from the INIT stream, or a
/// warm start from the configured donor.
pub fn initial_params(
    cfg: &TrainConfig,
    tokenizer: &Tokenizer,
) -> Result<(ParamSet<f32>, Option<crate::transfer::TransferReport>)> {
    match &cfg.init {
        InitSpec::Random => Ok((
            model::init_params(&cfg.model, rng::derive_seed(cfg.seed, rng::stream::INIT))?,
            None,
        )),
        InitSpec::Transfer {
            donor,
            donor_tokenizer,
            token_type_donor,
            conventions,
        } => {
            use crate::transfer::{warm_start, DonorModel, EmbeddingMatrix, TokenConventions};
            let mut d = DonorModel::load(donor, donor_tokenizer)?;
            if let Some(c) = conventions {
                let text = std::fs::read_to_string(c).map_err(|e| Error::io(c, e))?;
                d = d.with_conventions(TokenConventions::parse(&text)?);
            }
            let tt = match token_type_donor {
                Some(p) => {
                    let params = crate::checkpoint::load(p)?;
                    Some(EmbeddingMatrix::from_tensor(params.tensor(model::names::TOKEN_TYPE)?)?)
                }
                None => None,
            };
            let (params, report) = warm_start(&d, tokenizer.vocab(), &cfg.model, tt.as_ref(), cfg.seed)?;
            Ok((params, Some(report)))
        }
    }
}

/// Documents named by the corpus section of `cfg`.
pub fn load_corpus(spec: &CorpusSpec) -> Result<Vec<Document>> {
    match spec {
        CorpusSpec::Files { paths, format } => crate::corpus::ingest_all(paths, *format),
        CorpusSpec::Synthetic {
            preset,
            docs_per_source,
            language_seed,
            lexicon_size,
            corpus_seed,
        } => Ok(crate::synthetic::SyntheticLanguage::new(*language_seed, *lexicon_size, 6)
            .preset(*preset, *docs_per_source, rng::derive_seed(*corpus_seed, rng::stream::CORPUS))),
    }
}

/// Sentence pairs built on the fly, keyed by `(step, example)` so that a
/// batch depends only on the seed, never on thread count or earlier draws.
pub struct PretrainData<'a> {
    tokenizer: &'a Tokenizer,
    pool: SentencePool,
    /// Documents that can anchor a PREVIOUS/NEXT pair.
    multi: Vec<usize>,
    plain: Vec<Vec<Encoding>>,
    max_len: usize,
    mask_rate: f64,
}

/// One finished training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input_ids: Vec<u32>,
    pub token_type_ids: Vec<u32>,
    pub labels: Vec<i32>,
    pub sso_label: SsoLabel,
    pub first: (usize, usize),
    pub second: (usize, usize),
}

impl<'a> PretrainData<'a> {
    pub fn new(tokenizer: &'a Tokenizer, docs: &[Document], max_len: usize, mask_rate: f64) -> Result<Self> {
        let lists: Vec<_> = docs
            .iter()
            .map(split_sentences)
            .filter(|l| !l.sentences.is_empty())
            .collect();
        if lists.len() < 2 {
            return Err(Error::Config("training needs at least two non-empty documents".into()));
        }
        let multi: Vec<usize> = (0..lists.len())
            .filter(|&d| lists[d].sentences.len() >= 2)
            .collect();
        if multi.is_empty() {
            return Err(Error::Config("no document has two sentences".into()));
        }
        let plain = lists
            .par_iter()
            .map(|l| {
                l.sentences
                    .iter()
                    .map(|s| tokenizer.encode_words(s, EncodeOptions::deterministic()))
                    .collect()
            })
            .collect();
        Ok(PretrainData {
            tokenizer,
            pool: SentencePool::new(lists),
            multi,
            plain,
            max_len,
            mask_rate,
        })
    }

    pub fn pool(&self) -> &SentencePool {
        &self.pool
    }

    fn encode(&self, at: (usize, usize), bpe_p: f64, rng: &mut rng::Rng) -> Encoding {
        if bpe_p > 0.0 {
            self.tokenizer
                .encode_words(self.pool.sentence(at.0, at.1), EncodeOptions::dropout(bpe_p, rng))
        } else {
            self.plain[at.0][at.1].clone()
        }
    }

    /// Example `index` of `step` under `seed`.
    pub fn example(&self, seed: u64, step: u64, index: u64, bpe_p: f64) -> Result<TrainingExample> {
        let key = rng::pair_key(step, index);
        let mut r = rng::keyed(rng::derive_seed(seed, rng::stream::DATA), key);
        let label = SsoLabel::ALL[r.gen_range(0..3)];
        let doc = match label {
            SsoLabel::Random => r.gen_range(0..self.pool.docs().len()),
            _ => self.multi[r.gen_range(0..self.multi.len())],
        };
        let draw = sample_sso_pair(&self.pool, doc, &mut r, Some(label))
            .ok_or_else(|| Error::Config("sentence pool cannot supply the drawn class".into()))?;
        let mut bpe = rng::keyed(rng::derive_seed(seed, "bpe-dropout"), key);
        let a = self.encode(draw.first, bpe_p, &mut bpe);
        let b = self.encode(draw.second, bpe_p, &mut bpe);
        let pair = build_pair(&a, &b, label, self.max_len)?;
        let spec = MaskingSpec {
            mask_id: MASK_ID,
            vocab_size: self.tokenizer.vocab_size(),
            num_specials: self.tokenizer.vocab().num_specials(),
        };
        let mut mr = rng::keyed(rng::derive_seed(seed, rng::stream::MASKING), key);
        let m = whole_word_mask(&pair.input_ids, &pair.word_spans, &mut mr, self.mask_rate, &spec)?;
        Ok(TrainingExample {
            input_ids: m.input_ids,
            token_type_ids: pair.token_type_ids,
            labels: m.labels,
            sso_label: label,
            first: draw.first,
            second: draw.second,
        })
    }

    pub fn batch(&self, seed: u64, step: u64, size: usize, bpe_p: f64) -> Result<Batch> {
        let ex: Vec<TrainingExample> = (0..size as u64)
            .into_par_iter()
            .map(|i| self.example(seed, step, i, bpe_p))
            .collect::<Result<_>>()?;
        Ok(to_batch(ex))
    }
}

pub fn to_batch(examples: Vec<TrainingExample>) -> Batch {
    let sso = examples.iter().map(|e| e.sso_label).collect();
    let rows: Vec<_> = examples
        .into_iter()
        .map(|e| (e.input_ids, e.token_type_ids, e.labels))
        .collect();
    Batch::collate(&rows, sso)
}

/// Batch as a tensor set (integers stored as f32) for the checkpoint container.
pub fn pack_batch(b: &Batch) -> ParamSet<f32> {
    let (n, t) = (b.len(), b.seq_len());
    let flat = |rows: Vec<f32>| Tensor::from_vec(&[n, t], rows).expect("rectangular batch");
    let mut p = ParamSet::new();
    p.insert("input_ids", flat(b.input_ids.iter().flatten().map(|&x| x as f32).collect()));
    p.insert("token_type_ids", flat(b.token_type_ids.iter().flatten().map(|&x| x as f32).collect()));
    p.insert("attention_mask", flat(b.attention_mask.iter().flatten().map(|&x| x as f32).collect()));
    p.insert("labels", flat(b.labels.iter().flatten().map(|&x| x as f32).collect()));
    p.insert(
        "sso_labels",
        Tensor::from_vec(&[n], b.sso_labels.iter().map(|l| l.index() as f32).collect()).unwrap(),
    );
    p
}

pub fn unpack_batch(p: &ParamSet<f32>) -> Result<Batch> {
    let ids = p.tensor("input_ids")?;
    let (n, t) = match ids.shape() {
        &[n, t] => (n, t),
        s => return Err(Error::Checkpoint(format!("input_ids has shape {s:?}"))),
    };
    let rows = |name: &str| -> Result<Vec<Vec<f32>>> {
        let x = p.tensor(name)?;
        if x.shape() != [n, t] {
            return Err(Error::Checkpoint(format!("{name} has shape {:?}", x.shape())));
        }
        Ok(x.data().chunks(t).map(<[f32]>::to_vec).collect())
    };
    let sso = p
        .tensor("sso_labels")?
        .data()
        .iter()
        .map(|&x| {
            SsoLabel::ALL
                .get(x as usize)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("bad SSO label {x}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        input_ids: rows("input_ids")?.into_iter().map(|r| r.into_iter().map(|x| x as u32).collect()).collect(),
        token_type_ids: rows("token_type_ids")?.into_iter().map(|r| r.into_iter().map(|x| x as u32).collect()).collect(),
        attention_mask: rows("attention_mask")?.into_iter().map(|r| r.into_iter().map(|x| x as u8).collect()).collect(),
        labels: rows("labels")?.into_iter().map(|r| r.into_iter().map(|x| x as i32).collect()).collect(),
        sso_labels: sso,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub mlm_loss: f64,
    pub sso_loss: f64,
    pub combined_loss: f64,
}

pub const METRICS_HEADER: &str = "step,lr,mlm_loss,sso_loss,combined_loss";

pub fn metrics_csv(rows: &[StepMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in rows {
        writeln!(s, "{},{},{},{},{}", m.step, m.lr, m.mlm_loss, m.sso_loss, m.combined_loss)
            .expect("writing to a string");
    }
    s
}

pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    pub metrics: Vec<StepMetrics>,
}

/// Called with `(step, params)` every `checkpoint_every` steps and after
/// the final step.
pub type CheckpointHook<'h> = dyn FnMut(u64, &ParamSet<f32>) -> Result<()> + 'h;

/// One forward/backward pass: losses and gradients of `mlm + alpha · sso`.
pub fn loss_and_grads<F: Real>(
    config: &ModelConfig,
    params: &ParamSet<F>,
    batch: &Batch,
    alpha: f64,
    mode: Mode,
    dropout_rng: &mut rng::Rng,
) -> Result<(LossBreakdown, ParamSet<F>)> {
    let mut out = model::forward(config, params, batch, mode, dropout_rng)?;
    let (loss, seeds) = model::objective_gradients(config, &out, batch, alpha)?;
    let grads = model::backward(config, params, &mut out, &seeds)?;
    Ok((loss, grads))
}

/// Runs `cfg.total_steps` optimization steps from `init`.
pub fn pretrain(
    cfg: &TrainConfig,
    tokenizer: &Tokenizer,
    docs: &[Document],
    init: ParamSet<f32>,
    hook: &mut CheckpointHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.model.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "model vocabulary {} differs from tokenizer vocabulary {}",
            cfg.model.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    model::check_params(&cfg.model, &init)?;
    let data = PretrainData::new(tokenizer, docs, cfg.model.max_seq_len, cfg.mask_rate)?;
    let dropout_seed = rng::derive_seed(cfg.seed, rng::stream::DROPOUT);
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut metrics = Vec::with_capacity(cfg.total_steps as usize);
    for step in 1..=cfg.total_steps {
        let lr = cfg.schedule.lr_at(step)?;
        let flags = cfg.schedule.flags_at(step)?;
        let bpe_p = if flags.bpe_dropout { cfg.bpe_dropout_p } else { 0.0 };
        let batch = data.batch(cfg.seed, step, cfg.batch_size, bpe_p)?;
        let mode = if flags.model_dropout { Mode::Train } else { Mode::Eval };
        let mut drng = rng::keyed(dropout_seed, step);
        let diverged = |reason: String, params: &ParamSet<f32>| Error::Diverged {
            step,
            reason,
            last_good: Box::new(params.clone()),
        };
        let (loss, grads) = match loss_and_grads(&cfg.model, &params, &batch, cfg.alpha, mode, &mut drng) {
            Ok(x) => x,
            Err(Error::NonFinite(what)) => return Err(diverged(format!("non-finite {what}"), &params)),
            Err(e) => return Err(e),
        };
        if !loss.combined.is_finite() {
            return Err(diverged("non-finite loss".into(), &params));
        }
        if let Err(Error::NonFinite(what)) = adam_step(&mut params, &grads, &mut state, lr, &cfg.adam) {
            return Err(diverged(what, &params));
        }
        metrics.push(StepMetrics {
            step,
            lr,
            mlm_loss: loss.mlm,
            sso_loss: loss.sso,
            combined_loss: loss.combined,
        });
        if step == cfg.total_steps || (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
            hook(step, &params)?;
        }
    }
    Ok(TrainOutcome { params, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_anchors() {
        let s = SchedulePreset::Ablation10k.spec();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(500).unwrap(), 7e-4);
        assert_eq!(s.lr_at(5250).unwrap(), 3.5e-4);
        assert_eq!(s.lr_at(10_000).unwrap(), 0.0);
        assert!(s.lr_at(10_001).is_err());
    }

    #[test]
    fn large_preset_drops_after_boundaries() {
        let s = SchedulePreset::HerbertLarge60k.spec();
        assert_eq!(s.lr_at(15_000).unwrap(), 2.5e-4);
        assert!((s.lr_at(15_001).unwrap() - 1e-4).abs() < 1e-8);
        assert_eq!(s.lr_at(40_000).unwrap(), 7e-5);
        assert!((s.lr_at(40_001).unwrap() - 3e-5).abs() < 1e-8);
        assert_eq!(s.lr_at(60_000).unwrap(), 0.0);
        assert!(s.flags_at(40_000).unwrap().model_dropout);
        assert!(!s.flags_at(40_001).unwrap().model_dropout);
        assert!(!s.flags_at(40_001).unwrap().bpe_dropout);
    }

    #[test]
    fn segments_parse_and_validate() {
        let s = ScheduleSpec::parse_segments(10, "10-20:1e-3>5e-4, 20-30:1e-4>0:nodropout:nobpe").unwrap();
        assert_eq!(s.total_steps(), 30);
        assert!(!s.segments[1].model_dropout_on && !s.segments[1].bpe_dropout_on);
        assert!(ScheduleSpec::parse_segments(0, "0-10:1>0, 11-20:1>0").is_err());
        assert!(ScheduleSpec::parse_segments(5, "0-10:1>0").is_err());
    }

    #[test]
    fn first_adam_step_is_closed_form() {
        let mut p: ParamSet<f64> = [("w".to_string(), Tensor::from_vec(&[1], vec![0.0]).unwrap())]
            .into_iter()
            .collect();
        let g: ParamSet<f64> = [("w".to_string(), Tensor::from_vec(&[1], vec![1.0]).unwrap())]
            .into_iter()
            .collect();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], -1e-3 / (1.0 + 1e-8));
        let bad: ParamSet<f64> = [("w".to_string(), Tensor::from_vec(&[1], vec![f64::NAN]).unwrap())]
            .into_iter()
            .collect();
        let err = adam_step(&mut p, &bad, &mut st, 1e-3, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains('w'));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn config_parses_presets_and_rejects_typos() {
        let c = TrainConfig::parse("schedule = ablation-10k\nalpha = 0.1\nvocab_size = 300\n", Path::new("/x")).unwrap();
        assert_eq!(c.total_steps, 10_000);
        assert_eq!(c.alpha, 0.1);
        assert!(TrainConfig::parse("schedule = ablation-10k\nalpah = 0.1\n", Path::new("/")).is_err());
        let c = TrainConfig::parse(
            "total_steps = 40\nwarmup_steps = 4\npeak_lr = 5e-3\ncorpus_preset = small\ninit = transfer\ndonor = d.ckpt\ndonor_tokenizer = tok\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(c.schedule, ScheduleSpec::linear(4, 40, 5e-3));
        assert!(matches!(c.init, InitSpec::Transfer { ref donor, .. } if donor == Path::new("/base/d.ckpt")));
    }
}
