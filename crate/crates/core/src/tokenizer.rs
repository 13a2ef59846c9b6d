//! Byte-pair encoding over characters, with merge dropout at encode time.
//!
//! Text is pre-tokenized into words by whitespace, with every punctuation
//! character isolated as its own word. The first symbol of a
//! whitespace-delimited chunk carries the boundary [`MARKER`], so `"ala ma."`
//! starts as `▁a l a ▁m a .`. Merges are learned greedily by pair frequency
//! and replayed in rank order when encoding.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::corpus::Document;
use crate::error::{Error, Result};

/// Word-boundary marker prefixed to word-initial symbols.
pub const MARKER: char = '\u{2581}';

pub const VOCAB_FILE: &str = "vocab.txt";
pub const MERGES_FILE: &str = "merges.txt";

/// Names of the five reserved tokens, in id order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Specials {
    pub pad: String,
    pub unk: String,
    pub cls: String,
    pub sep: String,
    pub mask: String,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            pad: "[PAD]".into(),
            unk: "[UNK]".into(),
            cls: "[CLS]".into(),
            sep: "[SEP]".into(),
            mask: "[MASK]".into(),
        }
    }
}

impl Specials {
    pub const COUNT: usize = 5;

    pub fn names(&self) -> [&str; 5] {
        [&self.pad, &self.unk, &self.cls, &self.sep, &self.mask]
    }
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Bijection between token strings and dense ids; specials occupy the
/// lowest ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// `tokens[0..5]` must be the specials in role order.
    pub fn from_tokens(tokens: Vec<String>, specials: &Specials) -> Result<Self> {
        if tokens.len() < Specials::COUNT
            || tokens[..Specials::COUNT]
                .iter()
                .zip(specials.names())
                .any(|(t, s)| t != s)
        {
            return Err(Error::Config(
                "vocabulary must start with the five special tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?} at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < Specials::COUNT
    }

    pub fn num_specials(&self) -> usize {
        Specials::COUNT
    }

    fn push(&mut self, token: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }
}

/// Ranked merge rules; rank is list position.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
}

impl MergeTable {
    pub fn new(merges: Vec<(String, String)>) -> Self {
        MergeTable { merges }
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(String, String)> {
        self.merges.iter()
    }
}

/// Ordering used to break frequency ties: lexicographic on `(left, right)`
/// with the boundary marker collating before every other character.
pub fn collate(a: &str, b: &str) -> Ordering {
    let key = |c: char| if c == MARKER { '\0' } else { c };
    a.chars().map(key).cmp(b.chars().map(key))
}

fn collate_pair(a: (&str, &str), b: (&str, &str)) -> Ordering {
    collate(a.0, b.0).then_with(|| collate(a.1, b.1))
}

pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '„' | '”' | '“' | '‘' | '’' | '«' | '»' | '–' | '—' | '…' | '¿' | '¡'
        )
}

/// One pre-tokenized word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Word<'a> {
    pub surface: &'a str,
    /// Starts a whitespace-delimited chunk, so its first symbol is marked.
    pub initial: bool,
}

/// Splits on whitespace, isolating punctuation characters.
pub fn pre_tokenize(text: &str) -> Vec<Word<'_>> {
    let mut words = Vec::new();
    for chunk in text.split_whitespace() {
        let mut initial = true;
        let mut run_start: Option<usize> = None;
        for (i, c) in chunk.char_indices() {
            if is_punctuation(c) {
                if let Some(s) = run_start.take() {
                    words.push(Word {
                        surface: &chunk[s..i],
                        initial,
                    });
                    initial = false;
                }
                words.push(Word {
                    surface: &chunk[i..i + c.len_utf8()],
                    initial,
                });
                initial = false;
            } else if run_start.is_none() {
                run_start = Some(i);
            }
        }
        if let Some(s) = run_start {
            words.push(Word {
                surface: &chunk[s..],
                initial,
            });
        }
    }
    words
}

/// Base symbols of a word: one per character, the first marked if initial.
pub fn base_symbols(surface: &str, initial: bool) -> Vec<String> {
    surface
        .chars()
        .enumerate()
        .map(|(i, c)| {
            if i == 0 && initial {
                format!("{MARKER}{c}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Per-call encoding options. With `dropout_p == 0` the RNG is never
/// touched and encoding is deterministic.
pub struct EncodeOptions<'a, R: Rng + ?Sized> {
    pub dropout_p: f64,
    pub rng: Option<&'a mut R>,
}

impl<'a, R: Rng + ?Sized> EncodeOptions<'a, R> {
    pub fn dropout(p: f64, rng: &'a mut R) -> Self {
        EncodeOptions {
            dropout_p: p,
            rng: Some(rng),
        }
    }
}

impl EncodeOptions<'static, crate::rng::Rng> {
    pub fn deterministic() -> Self {
        EncodeOptions {
            dropout_p: 0.0,
            rng: None,
        }
    }
}

/// Token ids plus the position range of every word.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Encoding {
    pub ids: Vec<u32>,
    /// Half-open `[start, end)` ranges into `ids`, sorted and disjoint.
    pub word_spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocab,
    merges: MergeTable,
    ranks: HashMap<(u32, u32), (u32, u32)>,
    specials: Specials,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, merges: MergeTable, specials: Specials) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                vocab.id(t).ok_or_else(|| {
                    Error::Config(format!("merge {rank} references unknown token {t:?}"))
                })
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            let out = lookup(&format!("{l}{r}"))?;
            if ranks.insert((li, ri), (rank as u32, out)).is_some() {
                return Err(Error::Config(format!("duplicate merge ({l:?}, {r:?})")));
            }
        }
        Ok(Tokenizer {
            vocab,
            merges,
            ranks,
            specials,
        })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn merges(&self) -> &MergeTable {
        &self.merges
    }

    pub fn specials(&self) -> &Specials {
        &self.specials
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Is `id` a single base character (optionally marked)?
    pub fn is_base_symbol(&self, id: u32) -> bool {
        if self.vocab.is_special(id) {
            return false;
        }
        let t = self.vocab.token(id).unwrap_or("");
        t.trim_start_matches(MARKER).chars().count() == 1
    }

    fn symbol_ids(&self, surface: &str, initial: bool) -> Vec<u32> {
        base_symbols(surface, initial)
            .iter()
            .map(|s| self.vocab.id(s).unwrap_or(UNK_ID))
            .collect()
    }

    fn apply_merges<R: Rng + ?Sized>(&self, symbols: &mut Vec<u32>, p: f64, mut rng: Option<&mut R>) {
        loop {
            let mut best: Option<(u32, usize, u32)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                let Some(&(rank, out)) = self.ranks.get(&(symbols[i], symbols[i + 1])) else {
                    continue;
                };
                if p > 0.0 {
                    let r = rng
                        .as_deref_mut()
                        .expect("dropout requires an RNG");
                    if r.gen_bool(p.min(1.0)) {
                        continue;
                    }
                }
                if best.map_or(true, |(b, _, _)| rank < b) {
                    best = Some((rank, i, out));
                }
            }
            match best {
                Some((_, i, out)) => {
                    symbols[i] = out;
                    symbols.remove(i + 1);
                }
                None => return,
            }
        }
    }

    /// Deterministic segmentation of one piece, as used for embedding
    /// transfer.
    pub fn segment_piece(&self, surface: &str, initial: bool) -> Vec<u32> {
        let mut s = self.symbol_ids(surface, initial);
        self.apply_merges::<crate::rng::Rng>(&mut s, 0.0, None);
        s
    }

    pub fn encode_words<R: Rng + ?Sized>(&self, text: &str, opts: EncodeOptions<'_, R>) -> Encoding {
        let EncodeOptions { dropout_p, mut rng } = opts;
        let mut enc = Encoding::default();
        for w in pre_tokenize(text) {
            let mut s = self.symbol_ids(w.surface, w.initial);
            self.apply_merges(&mut s, dropout_p, rng.as_deref_mut());
            let start = enc.ids.len();
            enc.ids.extend_from_slice(&s);
            enc.word_spans.push((start, enc.ids.len()));
        }
        enc
    }

    pub fn encode<R: Rng + ?Sized>(&self, text: &str, opts: EncodeOptions<'_, R>) -> Vec<u32> {
        self.encode_words(text, opts).ids
    }

    /// Dropout-free encoding.
    pub fn encode_plain(&self, text: &str) -> Vec<u32> {
        self.encode(text, EncodeOptions::deterministic())
    }

    /// Concatenates token strings, turning boundary markers into spaces.
    /// Unknown ids decode to the UNK placeholder.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for (position, &id) in ids.iter().enumerate() {
            let tok = self.vocab.token(id).ok_or(Error::IdOutOfRange {
                position,
                id,
                size: self.vocab.len(),
            })?;
            for c in tok.chars() {
                out.push(if c == MARKER { ' ' } else { c });
            }
        }
        Ok(out.strip_prefix(' ').map(str::to_string).unwrap_or(out))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab: String = self.vocab.tokens.iter().map(|t| format!("{t}\n")).collect();
        let merges: String = self.merges.iter().map(|(l, r)| format!("{l} {r}\n")).collect();
        let vp = dir.join(VOCAB_FILE);
        fs::write(&vp, vocab).map_err(|e| Error::io(&vp, e))?;
        let mp = dir.join(MERGES_FILE);
        fs::write(&mp, merges).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let vp = dir.join(VOCAB_FILE);
        let vocab_text = fs::read_to_string(&vp).map_err(|e| Error::io(&vp, e))?;
        let mp = dir.join(MERGES_FILE);
        let merges_text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let specials = Specials::default();
        let vocab = Vocab::from_tokens(vocab_text.lines().map(str::to_string).collect(), &specials)?;
        let merges = merges_text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let mut parts = line.split(' ');
                match (parts.next(), parts.next(), parts.next()) {
                    (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                        Ok((l.to_string(), r.to_string()))
                    }
                    _ => Err(Error::Malformed {
                        line: i + 1,
                        message: format!("expected `left right`, got {line:?}"),
                    }),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Tokenizer::new(vocab, MergeTable::new(merges), specials)
    }
}

/// Result of training, including the final segmentation of every distinct
/// training word.
pub struct TrainedBpe {
    pub tokenizer: Tokenizer,
    /// `(surface, initial, count, token ids)` in first-seen order.
    pub words: Vec<(String, bool, u64, Vec<u32>)>,
}

/// Learns a vocabulary of at most `vocab_size` tokens. Stops early once no
/// adjacent pair occurs at least twice.
pub fn train_bpe<I>(corpus: I, vocab_size: usize, specials: &Specials) -> Result<Tokenizer>
where
    I: IntoIterator<Item = Document>,
{
    train_bpe_detailed(corpus, vocab_size, specials).map(|t| t.tokenizer)
}

pub fn train_bpe_detailed<I>(corpus: I, vocab_size: usize, specials: &Specials) -> Result<TrainedBpe>
where
    I: IntoIterator<Item = Document>,
{
    let mut counts: HashMap<(String, bool), u64> = HashMap::new();
    let mut order: Vec<(String, bool)> = Vec::new();
    let mut any = false;
    for doc in corpus {
        any = true;
        for w in pre_tokenize(&doc.text) {
            let key = (w.surface.to_string(), w.initial);
            let c = counts.entry(key.clone()).or_insert(0);
            if *c == 0 {
                order.push(key);
            }
            *c += 1;
        }
    }
    if !any {
        return Err(Error::Config("tokenizer training corpus is empty".into()));
    }

    let alphabet: BTreeSet<String> = order
        .iter()
        .flat_map(|(s, init)| base_symbols(s, *init))
        .collect();
    let mut alphabet: Vec<String> = alphabet.into_iter().collect();
    alphabet.sort_by(|a, b| collate(a, b));
    if vocab_size < alphabet.len() + Specials::COUNT {
        return Err(Error::Config(format!(
            "vocab size {vocab_size} is smaller than alphabet ({}) plus specials ({})",
            alphabet.len(),
            Specials::COUNT
        )));
    }

    let mut vocab = Vocab::from_tokens(
        specials.names().iter().map(|s| s.to_string()).collect(),
        specials,
    )?;
    for a in alphabet {
        vocab.push(a);
    }

    let mut words: Vec<(Vec<u32>, u64)> = order
        .iter()
        .map(|k| {
            let ids = base_symbols(&k.0, k.1)
                .iter()
                .map(|s| vocab.id(s).expect("alphabet covers corpus"))
                .collect();
            (ids, counts[k])
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    for (w, c) in &words {
        for p in w.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_insert(0) += c;
        }
    }

    let mut merges = Vec::new();
    while vocab.len() < vocab_size {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (vocab.token(pa.0).unwrap(), vocab.token(pa.1).unwrap());
                    let kb = (vocab.token(pb.0).unwrap(), vocab.token(pb.1).unwrap());
                    collate_pair(kb, ka)
                })
            })
            .map(|(&p, _)| p);
        let Some((l, r)) = best else { break };

        let left = vocab.token(l).unwrap().to_string();
        let right = vocab.token(r).unwrap().to_string();
        let merged = format!("{left}{right}");
        let out = match vocab.id(&merged) {
            Some(id) => id,
            None => vocab.push(merged),
        };
        merges.push((left, right));

        for (w, c) in words.iter_mut() {
            if !w.windows(2).any(|p| p[0] == l && p[1] == r) {
                continue;
            }
            for p in w.windows(2) {
                let e = pair_counts.get_mut(&(p[0], p[1])).unwrap();
                *e -= *c;
            }
            let mut merged_word = Vec::with_capacity(w.len());
            let mut i = 0;
            while i < w.len() {
                if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                    merged_word.push(out);
                    i += 2;
                } else {
                    merged_word.push(w[i]);
                    i += 1;
                }
            }
            *w = merged_word;
            for p in w.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_insert(0) += *c;
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }

    let tokenizer = Tokenizer::new(vocab, MergeTable::new(merges), specials.clone())?;
    let words = order
        .into_iter()
        .zip(words)
        .map(|((s, init), (ids, c))| (s, init, c, ids))
        .collect();
    Ok(TrainedBpe { tokenizer, words })
}
