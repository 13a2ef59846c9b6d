//! Training-example construction and losses: whole-word masked language
//! modelling plus the three-way sentence-structure objective
//! (previous / next / random sentence).

use rand::seq::SliceRandom;
use rand::Rng;

use crate::corpus::SentenceList;
use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::tokenizer::{Encoding, CLS_ID, SEP_ID};

/// Label value for positions that do not contribute to the MLM loss.
pub const IGNORE: i32 = -1;

/// Fraction of word tokens selected for prediction.
pub const DEFAULT_MASK_RATE: f64 = 0.15;
/// Probabilities of replacing a selected word by MASK or by random tokens;
/// the remainder is left unchanged.
pub const MASK_PROB: f64 = 0.8;
pub const RANDOM_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, Copy)]
pub struct MaskingSpec {
    pub mask_id: u32,
    pub vocab_size: usize,
    /// Ids below this are special and never used as random replacements.
    pub num_specials: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub input_ids: Vec<u32>,
    pub labels: Vec<i32>,
    pub word_spans: Vec<(usize, usize)>,
    /// Selected words as `(index into word_spans, corruption mode)`.
    pub selected: Vec<(usize, Corruption)>,
}

fn validate_spans(spans: &[(usize, usize)], len: usize) -> Result<()> {
    let mut prev_end = 0;
    for &(s, e) in spans {
        if s < prev_end || s >= e || e > len {
            return Err(Error::Config(format!(
                "word span ({s}, {e}) is empty, unsorted, overlapping or out of range"
            )));
        }
        prev_end = e;
    }
    Ok(())
}

/// Selects whole words in shuffled order until `round(mask_rate × tokens)`
/// word tokens are selected (words that would overshoot the budget are
/// passed over), then corrupts each selected word with one mode shared by
/// all of its tokens.
pub fn whole_word_mask<R: Rng + ?Sized>(
    ids: &[u32],
    word_spans: &[(usize, usize)],
    rng: &mut R,
    mask_rate: f64,
    spec: &MaskingSpec,
) -> Result<MaskedExample> {
    if (spec.mask_id as usize) >= spec.num_specials {
        return Err(Error::Config(format!(
            "mask id {} is not a special token",
            spec.mask_id
        )));
    }
    if !(0.0..=1.0).contains(&mask_rate) {
        return Err(Error::Config(format!("mask rate {mask_rate} outside [0, 1]")));
    }
    if spec.vocab_size <= spec.num_specials {
        return Err(Error::Config("vocabulary has no regular tokens".into()));
    }
    validate_spans(word_spans, ids.len())?;

    let mut input_ids = ids.to_vec();
    let mut labels = vec![IGNORE; ids.len()];
    let total: usize = word_spans.iter().map(|(s, e)| e - s).sum();
    let budget = (mask_rate * total as f64).round() as usize;

    let mut order: Vec<usize> = (0..word_spans.len()).collect();
    if budget > 0 {
        order.shuffle(rng);
    }
    let mut selected = Vec::new();
    let mut covered = 0usize;
    for w in order {
        if covered >= budget {
            break;
        }
        let (s, e) = word_spans[w];
        if covered + (e - s) > budget {
            continue;
        }
        covered += e - s;
        let u: f64 = rng.gen();
        let mode = if u < MASK_PROB {
            Corruption::Mask
        } else if u < MASK_PROB + RANDOM_PROB {
            Corruption::Random
        } else {
            Corruption::Keep
        };
        for p in s..e {
            labels[p] = ids[p] as i32;
            input_ids[p] = match mode {
                Corruption::Mask => spec.mask_id,
                Corruption::Random => rng.gen_range(spec.num_specials..spec.vocab_size) as u32,
                Corruption::Keep => ids[p],
            };
        }
        selected.push((w, mode));
    }
    selected.sort_by_key(|&(w, _)| w);
    Ok(MaskedExample {
        input_ids,
        labels,
        word_spans: word_spans.to_vec(),
        selected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SsoLabel {
    Previous = 0,
    Next = 1,
    Random = 2,
}

impl SsoLabel {
    pub const ALL: [SsoLabel; 3] = [SsoLabel::Previous, SsoLabel::Next, SsoLabel::Random];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// All sentences of a corpus, addressable by `(document, sentence)`.
#[derive(Debug, Clone, Default)]
pub struct SentencePool {
    docs: Vec<SentenceList>,
    /// Index of each document's first sentence in the flat numbering.
    offsets: Vec<usize>,
    total: usize,
}

impl SentencePool {
    pub fn new(docs: Vec<SentenceList>) -> Self {
        let mut offsets = Vec::with_capacity(docs.len());
        let mut total = 0;
        for d in &docs {
            offsets.push(total);
            total += d.sentences.len();
        }
        SentencePool {
            docs,
            offsets,
            total,
        }
    }

    pub fn docs(&self) -> &[SentenceList] {
        &self.docs
    }

    pub fn sentence(&self, doc: usize, idx: usize) -> &str {
        &self.docs[doc].sentences[idx]
    }

    pub fn total_sentences(&self) -> usize {
        self.total
    }

    /// Flat sentence number of `(doc, idx)`.
    pub fn flat_index(&self, doc: usize, idx: usize) -> usize {
        self.offsets[doc] + idx
    }

    fn locate(&self, flat: usize) -> (usize, usize) {
        let doc = self.offsets.partition_point(|&o| o <= flat) - 1;
        (doc, flat - self.offsets[doc])
    }
}

/// A sampled sentence pair with its provenance `(document, sentence)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairDraw {
    pub label: SsoLabel,
    pub first: (usize, usize),
    pub second: (usize, usize),
}

/// Draws a labelled pair anchored in document `doc`. The label is uniform
/// over the three classes (or `forced`); `None` means the drawn class is
/// unavailable for this document and the caller should resample.
pub fn sample_sso_pair<R: Rng + ?Sized>(
    pool: &SentencePool,
    doc: usize,
    rng: &mut R,
    forced: Option<SsoLabel>,
) -> Option<PairDraw> {
    let n = pool.docs[doc].sentences.len();
    if n == 0 {
        return None;
    }
    let label = forced.unwrap_or_else(|| SsoLabel::ALL[rng.gen_range(0..3)]);
    match label {
        SsoLabel::Next => {
            if n < 2 {
                return None;
            }
            let i = rng.gen_range(0..n - 1);
            Some(PairDraw {
                label,
                first: (doc, i),
                second: (doc, i + 1),
            })
        }
        SsoLabel::Previous => {
            if n < 2 {
                return None;
            }
            let i = rng.gen_range(1..n);
            Some(PairDraw {
                label,
                first: (doc, i),
                second: (doc, i - 1),
            })
        }
        SsoLabel::Random => {
            let others = pool.total - n;
            if others == 0 {
                return None;
            }
            let i = rng.gen_range(0..n);
            let mut k = rng.gen_range(0..others);
            if k >= pool.offsets[doc] {
                k += n;
            }
            Some(PairDraw {
                label,
                first: (doc, i),
                second: pool.locate(k),
            })
        }
    }
}

/// `[CLS] a [SEP] b [SEP]` with segment ids 0 then 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePairExample {
    pub tokens_a: Vec<u32>,
    pub tokens_b: Vec<u32>,
    pub sso_label: SsoLabel,
    pub input_ids: Vec<u32>,
    pub token_type_ids: Vec<u32>,
    /// Word spans of both sentences in `input_ids` coordinates.
    pub word_spans: Vec<(usize, usize)>,
}

fn truncate_encoding(enc: &Encoding, len: usize) -> (Vec<u32>, Vec<(usize, usize)>) {
    let ids = enc.ids[..len].to_vec();
    let spans = enc
        .word_spans
        .iter()
        .filter(|(s, _)| *s < len)
        .map(|&(s, e)| (s, e.min(len)))
        .collect();
    (ids, spans)
}

/// Lays out an encoded pair, trimming the longer side first until it fits
/// in `max_len` positions.
pub fn build_pair(
    a: &Encoding,
    b: &Encoding,
    label: SsoLabel,
    max_len: usize,
) -> Result<SentencePairExample> {
    if max_len < 5 {
        return Err(Error::Config(format!("max length {max_len} cannot hold a pair")));
    }
    let room = max_len - 3;
    let (mut la, mut lb) = (a.ids.len(), b.ids.len());
    while la + lb > room {
        if la >= lb {
            la -= 1;
        } else {
            lb -= 1;
        }
    }
    let (ta, sa) = truncate_encoding(a, la);
    let (tb, sb) = truncate_encoding(b, lb);

    let mut input_ids = Vec::with_capacity(la + lb + 3);
    input_ids.push(CLS_ID);
    input_ids.extend_from_slice(&ta);
    input_ids.push(SEP_ID);
    input_ids.extend_from_slice(&tb);
    input_ids.push(SEP_ID);
    let mut token_type_ids = vec![0; la + 2];
    token_type_ids.resize(la + lb + 3, 1);
    let word_spans = sa
        .iter()
        .map(|&(s, e)| (s + 1, e + 1))
        .chain(sb.iter().map(|&(s, e)| (s + la + 2, e + la + 2)))
        .collect();
    Ok(SentencePairExample {
        tokens_a: ta,
        tokens_b: tb,
        sso_label: label,
        input_ids,
        token_type_ids,
        word_spans,
    })
}

/// Mean loss and the number of contributing positions; `count == 0` flags
/// an empty selection (loss reported as 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub count: usize,
}

fn log_softmax_pick<F: Real>(row: &[F], target: usize) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
    let lse = m + row.iter().map(|x| (x.f64() - m).exp()).sum::<f64>().ln();
    lse - row[target].f64()
}

fn check_finite<F: Real>(xs: &[F], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Sum of cross-entropies over labelled rows and its gradient with respect
/// to the logits, scaled by `scale`.
pub(crate) fn xent_rows<F: Real>(
    logits: &[F],
    vocab: usize,
    labels: &[i32],
    scale: f64,
) -> Result<(f64, usize, Vec<F>)> {
    if logits.len() != labels.len() * vocab {
        return Err(Error::Config(format!(
            "logits hold {} values, expected {} rows × {vocab}",
            logits.len(),
            labels.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0;
    let mut grad = vec![F::zero(); logits.len()];
    for (r, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let row = &logits[r * vocab..(r + 1) * vocab];
        check_finite(row, "MLM logits")?;
        let t = label as usize;
        if label < 0 || t >= vocab {
            return Err(Error::Config(format!("label {label} outside vocabulary")));
        }
        sum += log_softmax_pick(row, t);
        count += 1;
        let m = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
        let z: f64 = row.iter().map(|x| (x.f64() - m).exp()).sum();
        let g = &mut grad[r * vocab..(r + 1) * vocab];
        for (j, x) in row.iter().enumerate() {
            let p = (x.f64() - m).exp() / z;
            let y = if j == t { 1.0 } else { 0.0 };
            g[j] = F::of(scale * (p - y));
        }
    }
    Ok((sum, count, grad))
}

/// Mean cross-entropy over positions whose label is not [`IGNORE`].
/// `logits` is row-major `labels.len() × vocab`.
pub fn mlm_loss<F: Real>(logits: &[F], vocab: usize, labels: &[i32]) -> Result<LossValue> {
    let (sum, count, _) = xent_rows(logits, vocab, labels, 0.0)?;
    Ok(LossValue {
        loss: if count == 0 { 0.0 } else { sum / count as f64 },
        count,
    })
}

/// Three-way cross-entropy of the sentence-structure head.
pub fn sso_loss<F: Real>(logits: &[F], label: SsoLabel) -> Result<f64> {
    if logits.len() != 3 {
        return Err(Error::Config(format!("SSO logits must have 3 entries, got {}", logits.len())));
    }
    check_finite(logits, "SSO logits")?;
    Ok(log_softmax_pick(logits, label.index()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the sentence-structure loss.
    pub alpha: f64,
}

/// `l_mlm + alpha · l_sso`.
pub fn combined_loss(l_mlm: f64, l_sso: f64, w: LossWeights) -> f64 {
    l_mlm + w.alpha * l_sso
}
