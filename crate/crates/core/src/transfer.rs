//! Warm-start initialization from a donor model with a different
//! tokenizer: shared tokens copy their donor embedding, the rest average
//! the embeddings of their donor segmentation, encoder layers are grafted
//! unchanged.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{self, names, ModelConfig};
use crate::rng;
use crate::tensor::{ParamSet, Tensor};
use crate::tokenizer::{Tokenizer, Vocab, MARKER, UNK_ID};

pub const FALLBACK_STD: f64 = 0.02;

/// Row-major `rows × dim` embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Config(format!(
                "embedding data holds {} values, expected {rows} × {dim}",
                data.len()
            )));
        }
        Ok(EmbeddingMatrix { rows, dim, data })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingMatrix {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.shape() {
            &[rows, dim] => EmbeddingMatrix::new(rows, dim, t.data().to_vec()),
            s => Err(Error::Config(format!("embedding tensor has shape {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.rows, self.dim], self.data.clone()).expect("consistent shape")
    }
}

/// How a donor's tokens are spelled relative to ours.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenConventions {
    /// Word-initial marker used by the donor vocabulary.
    pub donor_marker: String,
    /// Target special token → donor token.
    pub special_map: BTreeMap<String, String>,
}

impl Default for TokenConventions {
    fn default() -> Self {
        TokenConventions {
            donor_marker: MARKER.to_string(),
            special_map: BTreeMap::new(),
        }
    }
}

impl TokenConventions {
    /// Reads a mapping file: `marker = Ġ` sets the donor marker, every other
    /// `target = donor` line maps a special token.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = TokenConventions::default();
        for (k, v) in crate::config::parse_kv(text)? {
            if k == "marker" {
                c.donor_marker = v;
            } else {
                c.special_map.insert(k, v);
            }
        }
        Ok(c)
    }

    fn canonical_donor(&self, token: &str) -> String {
        match token.strip_prefix(self.donor_marker.as_str()) {
            Some(rest) if !self.donor_marker.is_empty() => format!("{MARKER}{rest}"),
            _ => token.to_string(),
        }
    }
}

pub struct DonorModel {
    pub tokenizer: Tokenizer,
    pub embeddings: EmbeddingMatrix,
    /// Every tensor of the donor checkpoint except the word embeddings.
    pub encoder_params: ParamSet<f32>,
    pub token_type_embeddings: Option<EmbeddingMatrix>,
    pub conventions: TokenConventions,
}

impl DonorModel {
    pub fn new(tokenizer: Tokenizer, mut params: ParamSet<f32>) -> Result<Self> {
        let word = params
            .remove(names::WORD)
            .ok_or_else(|| Error::Checkpoint(format!("donor has no `{}` tensor", names::WORD)))?;
        let embeddings = EmbeddingMatrix::from_tensor(&word)?;
        if tokenizer.vocab().is_empty() {
            return Err(Error::Config("donor vocabulary is empty".into()));
        }
        if embeddings.dim == 0 {
            return Err(Error::Config("donor embedding dimension is 0".into()));
        }
        if embeddings.rows != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "donor has {} embedding rows for {} tokens",
                embeddings.rows,
                tokenizer.vocab_size()
            )));
        }
        if !embeddings.data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("donor embeddings".into()));
        }
        let token_type_embeddings = params
            .get(names::TOKEN_TYPE)
            .map(EmbeddingMatrix::from_tensor)
            .transpose()?;
        Ok(DonorModel {
            tokenizer,
            embeddings,
            encoder_params: params,
            token_type_embeddings,
            conventions: TokenConventions::default(),
        })
    }

    pub fn load(checkpoint_path: impl AsRef<Path>, tokenizer_dir: impl AsRef<Path>) -> Result<Self> {
        let tok = Tokenizer::load(tokenizer_dir)?;
        DonorModel::new(tok, checkpoint::load(checkpoint_path)?)
    }

    pub fn with_conventions(mut self, c: TokenConventions) -> Self {
        self.conventions = c;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Copied,
    Averaged,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenProvenance {
    pub id: u32,
    pub token: String,
    pub source: Provenance,
    /// Donor rows that contributed (one for a copy, several for an average).
    pub donor_ids: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferReport {
    pub direct_copies: usize,
    pub averaged: usize,
    pub fallback_random: usize,
    pub tokens: Vec<TokenProvenance>,
}

impl TransferReport {
    pub fn total(&self) -> usize {
        self.direct_copies + self.averaged + self.fallback_random
    }

    /// One JSON object per target token.
    pub fn provenance_jsonl(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(&serde_json::to_string(t).expect("serializable"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = format!("{self}\n{}", self.provenance_jsonl());
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for TransferReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# target tokens: {}", self.total())?;
        writeln!(f, "# copied: {}", self.direct_copies)?;
        writeln!(f, "# averaged (donor segmentation, p=0): {}", self.averaged)?;
        write!(f, "# random N(0, {FALLBACK_STD}): {}", self.fallback_random)
    }
}

/// Splits a target vocabulary entry into (surface, word-initial).
fn piece_of(token: &str) -> (&str, bool) {
    match token.strip_prefix(MARKER) {
        Some(rest) => (rest, true),
        None => (token, false),
    }
}

/// Builds the target embedding table. Each target token is, in order of
/// preference: copied from the donor row with the same canonical spelling;
/// the mean of the donor rows of its donor segmentation (UNK pieces are
/// left out); or drawn from N(0, 0.02) with a stream keyed by its id.
pub fn transfer_embeddings(
    donor: &DonorModel,
    target: &Vocab,
    seed: u64,
) -> Result<(EmbeddingMatrix, TransferReport)> {
    let dim = donor.embeddings.dim;
    if donor.tokenizer.vocab().is_empty() {
        return Err(Error::Config("donor vocabulary is empty".into()));
    }
    if dim == 0 {
        return Err(Error::Config("donor embedding dimension is 0".into()));
    }
    let conv = &donor.conventions;
    let donor_vocab = donor.tokenizer.vocab();
    let mut canonical: BTreeMap<String, u32> = BTreeMap::new();
    for (id, tok) in donor_vocab.tokens().iter().enumerate() {
        canonical.entry(conv.canonical_donor(tok)).or_insert(id as u32);
    }
    let normal = Normal::new(0.0, FALLBACK_STD).expect("valid std");

    let rows: Vec<(Vec<f32>, TokenProvenance)> = target
        .tokens()
        .par_iter()
        .enumerate()
        .map(|(id, tok)| {
            let id = id as u32;
            let direct = if target.is_special(id) {
                let mapped = conv.special_map.get(tok).unwrap_or(tok);
                donor_vocab.id(mapped)
            } else {
                canonical.get(tok).copied()
            };
            let mut prov = TokenProvenance {
                id,
                token: tok.clone(),
                source: Provenance::Copied,
                donor_ids: Vec::new(),
            };
            if let Some(d) = direct {
                prov.donor_ids.push(d);
                return (donor.embeddings.row(d as usize).to_vec(), prov);
            }
            if !target.is_special(id) {
                let (surface, initial) = piece_of(tok);
                let pieces: Vec<u32> = donor
                    .tokenizer
                    .segment_piece(surface, initial)
                    .into_iter()
                    .filter(|&p| p != UNK_ID)
                    .collect();
                if !pieces.is_empty() {
                    let mut acc = vec![0.0f64; dim];
                    for &p in &pieces {
                        for (a, &x) in acc.iter_mut().zip(donor.embeddings.row(p as usize)) {
                            *a += x as f64;
                        }
                    }
                    let n = pieces.len() as f64;
                    prov.source = Provenance::Averaged;
                    prov.donor_ids = pieces;
                    return (acc.into_iter().map(|a| (a / n) as f32).collect(), prov);
                }
            }
            let mut r = rng::keyed(seed, id as u64);
            prov.source = Provenance::Random;
            let row = (0..dim).map(|_| normal.sample(&mut r) as f32).collect();
            (row, prov)
        })
        .collect();

    let mut report = TransferReport::default();
    let mut data = Vec::with_capacity(target.len() * dim);
    for (row, prov) in rows {
        data.extend_from_slice(&row);
        match prov.source {
            Provenance::Copied => report.direct_copies += 1,
            Provenance::Averaged => report.averaged += 1,
            Provenance::Random => report.fallback_random += 1,
        }
        report.tokens.push(prov);
    }
    Ok((EmbeddingMatrix::new(target.len(), dim, data)?, report))
}

fn shape_error(name: &str, donor: &[usize], target: &[usize]) -> Error {
    Error::ShapeMismatch {
        name: name.to_string(),
        donor: donor.to_vec(),
        target: target.to_vec(),
    }
}

/// Copies every vocabulary-independent tensor of the donor. Position
/// embeddings are copied up to the shorter table; extra target rows come
/// from N(0, 0.02). Output heads missing from the donor are left out, so the
/// caller keeps its own initialization for them.
pub fn graft_encoder(
    donor: &DonorModel,
    target: &ModelConfig,
    seed: u64,
) -> Result<ParamSet<f32>> {
    target.validate()?;
    let shapes: BTreeMap<String, Vec<usize>> = target.shapes().into_iter().collect();
    let src = &donor.encoder_params;
    for (name, t) in src.iter() {
        if name.starts_with("layer.") && !shapes.contains_key(name) {
            return Err(shape_error(name, t.shape(), &[]));
        }
    }
    let mut out = ParamSet::new();
    for (name, shape) in &shapes {
        if names::is_vocab_dependent(name) || name == names::TOKEN_TYPE {
            continue;
        }
        let Some(t) = src.get(name) else {
            if name.starts_with("layer.") || name.starts_with("embeddings.") {
                return Err(shape_error(name, &[], shape));
            }
            continue;
        };
        if name == names::POSITION {
            if t.shape().len() != 2 || t.shape()[1] != shape[1] {
                return Err(shape_error(name, t.shape(), shape));
            }
            let (rows, dim) = (shape[0], shape[1]);
            let keep = rows.min(t.shape()[0]);
            let mut data = t.data()[..keep * dim].to_vec();
            let normal = Normal::new(0.0, FALLBACK_STD).expect("valid std");
            for r in keep..rows {
                let mut g = rng::keyed(seed, r as u64);
                data.extend((0..dim).map(|_| normal.sample(&mut g) as f32));
            }
            out.insert(name.clone(), Tensor::from_vec(shape, data)?);
            continue;
        }
        if t.shape() != shape.as_slice() {
            return Err(shape_error(name, t.shape(), shape));
        }
        out.insert(name.clone(), t.clone());
    }
    Ok(out)
}

/// Token-type table: a copy of the secondary donor's rows, or zeros.
pub fn init_token_type(secondary: Option<&EmbeddingMatrix>, dim: usize) -> Result<EmbeddingMatrix> {
    match secondary {
        None => Ok(EmbeddingMatrix::zeros(2, dim)),
        Some(m) if m.dim != dim => Err(Error::Config(format!(
            "token-type donor has dimension {}, target {dim}",
            m.dim
        ))),
        Some(m) if m.rows < 2 => Err(Error::Config("token-type donor has fewer than 2 rows".into())),
        Some(m) => Ok(EmbeddingMatrix::new(2, dim, m.data[..2 * dim].to_vec())?),
    }
}

/// Full warm-start parameter set: fresh initialization, overwritten by the
/// grafted encoder, transferred word embeddings and the token-type table.
pub fn warm_start(
    donor: &DonorModel,
    target_vocab: &Vocab,
    config: &ModelConfig,
    token_type_donor: Option<&EmbeddingMatrix>,
    seed: u64,
) -> Result<(ParamSet<f32>, TransferReport)> {
    if config.vocab_size != target_vocab.len() {
        return Err(Error::Config(format!(
            "config vocabulary {} differs from tokenizer vocabulary {}",
            config.vocab_size,
            target_vocab.len()
        )));
    }
    if donor.embeddings.dim != config.hidden {
        return Err(shape_error(
            names::WORD,
            &[donor.embeddings.rows, donor.embeddings.dim],
            &[config.vocab_size, config.hidden],
        ));
    }
    let mut params = model::init_params::<f32>(config, rng::derive_seed(seed, rng::stream::INIT))?;
    let transfer_seed = rng::derive_seed(seed, rng::stream::TRANSFER);
    for (name, t) in graft_encoder(donor, config, transfer_seed ^ 0x9e37)? {
        params.insert(name, t);
    }
    let (emb, report) = transfer_embeddings(donor, target_vocab, transfer_seed)?;
    params.insert(names::WORD, emb.to_tensor());
    params.insert(names::TOKEN_TYPE, init_token_type(token_type_donor, config.hidden)?.to_tensor());
    model::check_params(config, &params)?;
    Ok((params, report))
}
