//! Document ingestion, corpus statistics, sentence segmentation and corpus
//! mixtures.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::Deserialize;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub source: String,
    pub text: String,
}

impl Document {
    /// Builds a document with NFC-normalized text. Blank text is rejected.
    pub fn new(id: impl Into<String>, source: impl Into<String>, text: &str) -> Result<Self> {
        let text: String = text.nfc().collect();
        if text.trim().is_empty() {
            return Err(Error::Config("document text is empty".into()));
        }
        Ok(Document {
            id: id.into(),
            source: source.into(),
            text,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// Documents separated by one or more blank lines.
    PlainBlankline,
    /// One JSON object per line: `{"text": ..., "id": ...?}`.
    JsonLines,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain-blankline" | "plain" => Ok(Format::PlainBlankline),
            "jsonlines" | "jsonl" => Ok(Format::JsonLines),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

#[derive(Deserialize)]
struct JsonRecord {
    id: Option<String>,
    text: String,
}

/// Lazy document stream over one file.
pub struct Ingest {
    lines: std::io::Lines<BufReader<File>>,
    path: PathBuf,
    format: Format,
    source: String,
    line_no: usize,
    emitted: usize,
    done: bool,
}

/// Opens `path` and streams its documents in file order.
pub fn ingest(path: impl AsRef<Path>, format: Format) -> Result<Ingest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let source = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Ingest {
        lines: BufReader::new(file).lines(),
        path: path.to_path_buf(),
        format,
        source,
        line_no: 0,
        emitted: 0,
        done: false,
    })
}

impl Ingest {
    fn next_line(&mut self) -> Option<Result<String>> {
        let line = self.lines.next()?;
        self.line_no += 1;
        Some(line.map_err(|e| Error::io(&self.path, e)))
    }

    fn next_plain(&mut self) -> Option<Result<Document>> {
        let mut buf: Vec<String> = Vec::new();
        loop {
            match self.next_line() {
                None => break,
                Some(Err(e)) => return Some(Err(e)),
                Some(Ok(line)) => {
                    if line.trim().is_empty() {
                        if buf.is_empty() {
                            continue;
                        }
                        break;
                    }
                    buf.push(line);
                }
            }
        }
        if buf.is_empty() {
            return None;
        }
        let id = format!("{}-{}", self.source, self.emitted);
        Some(Document::new(id, self.source.clone(), buf.join("\n").trim()))
    }

    fn next_json(&mut self) -> Option<Result<Document>> {
        loop {
            let line = match self.next_line()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e)),
            };
            if line.trim().is_empty() {
                continue;
            }
            let line_no = self.line_no;
            let rec: JsonRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(Error::Malformed {
                        line: line_no,
                        message: e.to_string(),
                    }))
                }
            };
            let id = rec
                .id
                .unwrap_or_else(|| format!("{}-{}", self.source, self.emitted));
            return Some(
                Document::new(id, self.source.clone(), &rec.text).map_err(|_| Error::Malformed {
                    line: line_no,
                    message: "empty text".into(),
                }),
            );
        }
    }
}

impl Iterator for Ingest {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = match self.format {
            Format::PlainBlankline => self.next_plain(),
            Format::JsonLines => self.next_json(),
        };
        match &item {
            Some(Ok(_)) => self.emitted += 1,
            // A malformed record ends the stream.
            Some(Err(_)) | None => self.done = true,
        }
        item
    }
}

/// Reads every document from the listed files, in list order.
pub fn ingest_all(paths: &[PathBuf], format: Format) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for p in paths {
        for d in ingest(p, format)? {
            docs.push(d?);
        }
    }
    Ok(docs)
}

/// Writes documents in the plain-blankline format.
pub fn write_plain(docs: &[Document], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let body = docs
        .iter()
        .map(|d| d.text.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");
    std::fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CorpusStats {
    pub token_count: u64,
    pub document_count: u64,
    /// Tokens per document; 0 for an empty corpus.
    pub avg_len: f64,
}

/// Streaming accumulator behind [`corpus_stats`].
#[derive(Debug, Default, Clone, Copy)]
pub struct StatsAccumulator {
    tokens: u64,
    docs: u64,
}

impl StatsAccumulator {
    pub fn add(&mut self, token_count: usize) {
        self.tokens += token_count as u64;
        self.docs += 1;
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.tokens += other.tokens;
        self.docs += other.docs;
    }

    pub fn finish(&self) -> CorpusStats {
        CorpusStats {
            token_count: self.tokens,
            document_count: self.docs,
            avg_len: if self.docs == 0 {
                0.0
            } else {
                self.tokens as f64 / self.docs as f64
            },
        }
    }
}

/// Token and document counts under dropout-free encoding, single pass.
pub fn corpus_stats<I>(docs: I, tok: &Tokenizer) -> Result<CorpusStats>
where
    I: IntoIterator<Item = Result<Document>>,
{
    let mut acc = StatsAccumulator::default();
    for d in docs {
        acc.add(tok.encode_plain(&d?.text).len());
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceList {
    pub document_id: String,
    pub sentences: Vec<String>,
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Rule-based segmentation: a sentence ends at a newline, or after a run of
/// `.`/`!`/`?` that is followed by whitespace and then an uppercase letter
/// or a digit.
pub fn split_sentences(doc: &Document) -> SentenceList {
    let text = &doc.text;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let push = |from: usize, to: usize, out: &mut Vec<String>| {
        let s = text[from..to].trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    };

    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c == '\n' {
            push(start, pos, &mut sentences);
            start = pos + 1;
            i += 1;
            continue;
        }
        if is_terminal(c) {
            let mut j = i;
            while j + 1 < chars.len() && is_terminal(chars[j + 1].1) {
                j += 1;
            }
            let end = chars[j].0 + chars[j].1.len_utf8();
            let mut k = j + 1;
            while k < chars.len() && chars[k].1.is_whitespace() && chars[k].1 != '\n' {
                k += 1;
            }
            let gap = k > j + 1;
            let next_opens = chars
                .get(k)
                .map(|&(_, n)| n.is_uppercase() || n.is_ascii_digit())
                .unwrap_or(false);
            if gap && next_opens {
                push(start, end, &mut sentences);
                start = end;
            }
            i = j + 1;
            continue;
        }
        i += 1;
    }
    push(start, text.len(), &mut sentences);

    SentenceList {
        document_id: doc.id.clone(),
        sentences,
    }
}

/// Concatenates named document streams, tagging each document with its
/// source name.
pub fn mix_corpora<'a>(
    sources: Vec<(String, Box<dyn Iterator<Item = Result<Document>> + 'a>)>,
) -> Result<impl Iterator<Item = Result<Document>> + 'a> {
    let mut seen = HashSet::new();
    for (name, _) in &sources {
        if !seen.insert(name.clone()) {
            return Err(Error::Config(format!("duplicate source name `{name}`")));
        }
    }
    Ok(sources.into_iter().flat_map(|(name, stream)| {
        stream.map(move |d| {
            d.map(|mut d| {
                d.source = name.clone();
                d
            })
        })
    }))
}

/// Seeded document shuffle. Source weighting during training is otherwise
/// plain concatenation.
pub fn shuffle_documents(docs: &mut [Document], seed: u64) {
    docs.shuffle(&mut rng::named(seed, rng::stream::CORPUS));
}

/// Full-scale reference composition (tokens, documents, average length) of
/// the corpora the toy presets stand in for. Documentation only.
pub const REFERENCE_COMPOSITION: &[(&str, &str, &str, u32)] = &[
    ("NKJP", "1357M", "3.9M", 347),
    ("Wikipedia", "260M", "1.4M", 190),
    ("Wolne Lektury", "41M", "5.5k", 7447),
    ("CCNet Head", "2641M", "7.0M", 379),
    ("CCNet Middle", "3243M", "7.9M", 409),
    ("Open Subtitles", "1056M", "1.1M", 961),
    ("Small", "1658M", "5.3M", 313),
    ("Large", "8599M", "21.3M", 404),
];

/// Named corpus mixtures. `Small` holds only the curated sources; `Large`
/// adds the web-crawled and conversational ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusPreset {
    Small,
    Large,
}

impl CorpusPreset {
    pub fn sources(self) -> &'static [&'static str] {
        const SMALL: &[&str] = &["balanced", "encyclopedic", "literature"];
        const LARGE: &[&str] = &[
            "balanced",
            "encyclopedic",
            "literature",
            "web-head",
            "web-middle",
            "subtitles",
        ];
        match self {
            CorpusPreset::Small => SMALL,
            CorpusPreset::Large => LARGE,
        }
    }
}

impl FromStr for CorpusPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(CorpusPreset::Small),
            "large" => Ok(CorpusPreset::Large),
            other => Err(Error::Config(format!("unknown corpus preset `{other}`"))),
        }
    }
}
