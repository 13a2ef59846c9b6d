//! Bidirectional transformer encoder (post-norm residual blocks, GELU)
//! with a tied-embedding MLM head and a pooled three-way sentence-structure
//! head. Forward and backward passes are written out by hand.
//!
//! Tensor naming, shared with checkpoints and encoder grafting:
//!
//! | name | shape |
//! |------|-------|
//! | `embeddings.word` | vocab × hidden |
//! | `embeddings.position` | max_positions × hidden |
//! | `embeddings.token_type` | 2 × hidden |
//! | `embeddings.ln.{gamma,beta}` | hidden |
//! | `layer.N.attn.{q,k,v,o}.{weight,bias}` | hidden × hidden, hidden |
//! | `layer.N.attn.ln.{gamma,beta}` | hidden |
//! | `layer.N.ffn.in.{weight,bias}` | hidden × ff, ff |
//! | `layer.N.ffn.out.{weight,bias}` | ff × hidden, hidden |
//! | `layer.N.ffn.ln.{gamma,beta}` | hidden |
//! | `pooler.{weight,bias}` | hidden × hidden, hidden |
//! | `sso.{weight,bias}` | hidden × 3, 3 |
//! | `mlm.transform.{weight,bias}` | hidden × hidden, hidden |
//! | `mlm.ln.{gamma,beta}` | hidden |
//! | `mlm.bias` | vocab |
//!
//! Weights are stored `in × out`, so a dense layer is `y = x·W + b`. The MLM
//! decoder reuses `embeddings.word`.

pub mod ops;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objectives::{xent_rows, SsoLabel, IGNORE};
use crate::rng;
use crate::tensor::{ParamSet, Real, Tensor};
use crate::tokenizer::PAD_ID;
use ops::*;

pub const INIT_STD: f64 = 0.02;
pub const SSO_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Small enough for finite-difference checks and laptop training.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 64,
            ff_dim: 256,
            vocab_size,
            max_positions: 128,
            type_vocab_size: 2,
            dropout_rate: 0.1,
            max_seq_len: 128,
        }
    }

    pub fn base(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 12,
            heads: 12,
            hidden: 768,
            ff_dim: 3072,
            max_positions: 512,
            max_seq_len: 512,
            ..Self::desk(vocab_size)
        }
    }

    pub fn large(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 24,
            heads: 16,
            hidden: 1024,
            ff_dim: 4096,
            ..Self::base(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("hidden", self.hidden),
            ("ff_dim", self.ff_dim),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.type_vocab_size != 2 {
            return Err(Error::Config("type_vocab_size must be 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.max_seq_len > self.max_positions {
            return Err(Error::Config("max_seq_len exceeds max_positions".into()));
        }
        Ok(())
    }

    /// Every parameter tensor with its shape.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden, self.ff_dim);
        let mut v = vec![
            (names::WORD.to_string(), vec![self.vocab_size, h]),
            (names::POSITION.to_string(), vec![self.max_positions, h]),
            (names::TOKEN_TYPE.to_string(), vec![self.type_vocab_size, h]),
            (names::EMB_LN_GAMMA.to_string(), vec![h]),
            (names::EMB_LN_BETA.to_string(), vec![h]),
            (names::POOLER_W.to_string(), vec![h, h]),
            (names::POOLER_B.to_string(), vec![h]),
            (names::SSO_W.to_string(), vec![h, SSO_CLASSES]),
            (names::SSO_B.to_string(), vec![SSO_CLASSES]),
            (names::MLM_W.to_string(), vec![h, h]),
            (names::MLM_B.to_string(), vec![h]),
            (names::MLM_LN_GAMMA.to_string(), vec![h]),
            (names::MLM_LN_BETA.to_string(), vec![h]),
            (names::MLM_BIAS.to_string(), vec![self.vocab_size]),
        ];
        for l in 0..self.layers {
            let n = names::Layer::new(l);
            for (w, b) in [(&n.q_w, &n.q_b), (&n.k_w, &n.k_b), (&n.v_w, &n.v_b), (&n.o_w, &n.o_b)] {
                v.push((w.clone(), vec![h, h]));
                v.push((b.clone(), vec![h]));
            }
            v.push((n.attn_ln_g.clone(), vec![h]));
            v.push((n.attn_ln_b.clone(), vec![h]));
            v.push((n.ffn_in_w.clone(), vec![h, f]));
            v.push((n.ffn_in_b.clone(), vec![f]));
            v.push((n.ffn_out_w.clone(), vec![f, h]));
            v.push((n.ffn_out_b.clone(), vec![h]));
            v.push((n.ffn_ln_g.clone(), vec![h]));
            v.push((n.ffn_ln_b.clone(), vec![h]));
        }
        v
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        self.shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn to_kv(&self) -> String {
        format!(
            "layers = {}\nheads = {}\nhidden = {}\nff_dim = {}\nvocab_size = {}\n\
             max_positions = {}\ntype_vocab_size = {}\ndropout_rate = {}\nmax_seq_len = {}\n",
            self.layers,
            self.heads,
            self.hidden,
            self.ff_dim,
            self.vocab_size,
            self.max_positions,
            self.type_vocab_size,
            self.dropout_rate,
            self.max_seq_len
        )
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<&str> {
            map.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("model config is missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Config(format!("`{k}` must be an integer")))
        };
        let cfg = ModelConfig {
            layers: num("layers")?,
            heads: num("heads")?,
            hidden: num("hidden")?,
            ff_dim: num("ff_dim")?,
            vocab_size: num("vocab_size")?,
            max_positions: num("max_positions")?,
            type_vocab_size: num("type_vocab_size")?,
            dropout_rate: get("dropout_rate")?
                .parse()
                .map_err(|_| Error::Config("`dropout_rate` must be a number".into()))?,
            max_seq_len: num("max_seq_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sidecar written next to a checkpoint (`<ckpt>.config`).
    pub fn save_sidecar(&self, checkpoint: impl AsRef<Path>) -> Result<()> {
        let p = sidecar_path(checkpoint.as_ref());
        std::fs::write(&p, self.to_kv()).map_err(|e| Error::io(&p, e))
    }

    pub fn load_sidecar(checkpoint: impl AsRef<Path>) -> Result<Self> {
        let p = sidecar_path(checkpoint.as_ref());
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        ModelConfig::from_kv(&crate::config::parse_kv(&text)?)
    }
}

pub fn sidecar_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".config");
    s.into()
}

pub mod names {
    pub const WORD: &str = "embeddings.word";
    pub const POSITION: &str = "embeddings.position";
    pub const TOKEN_TYPE: &str = "embeddings.token_type";
    pub const EMB_LN_GAMMA: &str = "embeddings.ln.gamma";
    pub const EMB_LN_BETA: &str = "embeddings.ln.beta";
    pub const POOLER_W: &str = "pooler.weight";
    pub const POOLER_B: &str = "pooler.bias";
    pub const SSO_W: &str = "sso.weight";
    pub const SSO_B: &str = "sso.bias";
    pub const MLM_W: &str = "mlm.transform.weight";
    pub const MLM_B: &str = "mlm.transform.bias";
    pub const MLM_LN_GAMMA: &str = "mlm.ln.gamma";
    pub const MLM_LN_BETA: &str = "mlm.ln.beta";
    pub const MLM_BIAS: &str = "mlm.bias";

    /// Tensor names of one encoder layer.
    #[derive(Debug, Clone)]
    pub struct Layer {
        pub q_w: String,
        pub q_b: String,
        pub k_w: String,
        pub k_b: String,
        pub v_w: String,
        pub v_b: String,
        pub o_w: String,
        pub o_b: String,
        pub attn_ln_g: String,
        pub attn_ln_b: String,
        pub ffn_in_w: String,
        pub ffn_in_b: String,
        pub ffn_out_w: String,
        pub ffn_out_b: String,
        pub ffn_ln_g: String,
        pub ffn_ln_b: String,
    }

    impl Layer {
        pub fn new(l: usize) -> Self {
            let n = |s: &str| format!("layer.{l}.{s}");
            Layer {
                q_w: n("attn.q.weight"),
                q_b: n("attn.q.bias"),
                k_w: n("attn.k.weight"),
                k_b: n("attn.k.bias"),
                v_w: n("attn.v.weight"),
                v_b: n("attn.v.bias"),
                o_w: n("attn.o.weight"),
                o_b: n("attn.o.bias"),
                attn_ln_g: n("attn.ln.gamma"),
                attn_ln_b: n("attn.ln.beta"),
                ffn_in_w: n("ffn.in.weight"),
                ffn_in_b: n("ffn.in.bias"),
                ffn_out_w: n("ffn.out.weight"),
                ffn_out_b: n("ffn.out.bias"),
                ffn_ln_g: n("ffn.ln.gamma"),
                ffn_ln_b: n("ffn.ln.beta"),
            }
        }
    }

    /// Tensors whose shape depends on the vocabulary.
    pub fn is_vocab_dependent(name: &str) -> bool {
        name == WORD || name == MLM_BIAS
    }
}

/// Gaussian(0, 0.02) weights and embeddings, zero biases, unit layer-norm
/// scales. Deterministic in `seed`.
pub fn init_params<F: Real>(config: &ModelConfig, seed: u64) -> Result<ParamSet<F>> {
    config.validate()?;
    let mut rng = rng::Rng::seed_from_u64(seed);
    let mut shapes = config.shapes();
    shapes.sort();
    let mut p = ParamSet::new();
    for (name, shape) in shapes {
        let t = if name.ends_with(".gamma") {
            Tensor::filled(&shape, F::one())
        } else if name.ends_with(".beta") || name.ends_with("bias") {
            Tensor::zeros(&shape)
        } else {
            Tensor::normal(&shape, INIT_STD, &mut rng)
        };
        p.insert(name, t);
    }
    Ok(p)
}

/// Checks that `params` holds exactly the tensors `config` implies.
pub fn check_params<F: Real>(config: &ModelConfig, params: &ParamSet<F>) -> Result<()> {
    let shapes = config.shapes();
    for (name, shape) in &shapes {
        let t = params.tensor(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                donor: t.shape().to_vec(),
                target: shape.clone(),
            });
        }
    }
    if params.len() != shapes.len() {
        return Err(Error::Config(format!(
            "parameter set has {} tensors, config implies {}",
            params.len(),
            shapes.len()
        )));
    }
    Ok(())
}

/// Padded batch. All rows have the same length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub input_ids: Vec<Vec<u32>>,
    pub token_type_ids: Vec<Vec<u32>>,
    /// 1 for real tokens, 0 for padding.
    pub attention_mask: Vec<Vec<u8>>,
    /// Original ids at positions to predict, [`IGNORE`] elsewhere.
    pub labels: Vec<Vec<i32>>,
    pub sso_labels: Vec<SsoLabel>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.input_ids.first().map_or(0, Vec::len)
    }

    /// Pads variable-length examples with PAD / type 0 / mask 0 / IGNORE.
    pub fn collate(
        examples: &[(Vec<u32>, Vec<u32>, Vec<i32>)],
        sso_labels: Vec<SsoLabel>,
    ) -> Batch {
        let t = examples.iter().map(|e| e.0.len()).max().unwrap_or(0);
        let mut b = Batch {
            sso_labels,
            ..Batch::default()
        };
        for (ids, types, labels) in examples {
            let n = ids.len();
            let mut i = ids.clone();
            i.resize(t, PAD_ID);
            let mut ty = types.clone();
            ty.resize(t, 0);
            let mut m = vec![1u8; n];
            m.resize(t, 0);
            let mut l = labels.clone();
            l.resize(t, IGNORE);
            b.input_ids.push(i);
            b.token_type_ids.push(ty);
            b.attention_mask.push(m);
            b.labels.push(l);
        }
        b
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let t = self.seq_len();
        if t == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        if t > config.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {t} exceeds max {}",
                config.max_seq_len
            )));
        }
        for b in 0..self.len() {
            let rows = [
                self.input_ids[b].len(),
                self.token_type_ids[b].len(),
                self.attention_mask[b].len(),
            ];
            if rows.iter().any(|&r| r != t) {
                return Err(Error::Config(format!("example {b} is not padded to {t}")));
            }
            if let Some((pos, &id)) = self.input_ids[b]
                .iter()
                .enumerate()
                .find(|(_, &id)| id as usize >= config.vocab_size)
            {
                return Err(Error::IdOutOfRange {
                    position: pos,
                    id,
                    size: config.vocab_size,
                });
            }
            if self.token_type_ids[b].iter().any(|&x| x as usize >= config.type_vocab_size) {
                return Err(Error::Config(format!("example {b} has a token type ≥ 2")));
            }
            if self.attention_mask[b][0] == 0 {
                return Err(Error::Config(format!("example {b} masks its first position")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct LayerCache<F> {
    x: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// heads × T × T
    probs: Vec<F>,
    ctx: Vec<F>,
    attn_drop: Option<Vec<F>>,
    ln1: LnCache<F>,
    x1: Vec<F>,
    ffn_pre: Vec<F>,
    ffn_act: Vec<F>,
    ffn_drop: Option<Vec<F>>,
    ln2: LnCache<F>,
}

/// Activations of one example, kept for the backward pass.
pub struct ExampleCache<F> {
    t: usize,
    ids: Vec<u32>,
    types: Vec<u32>,
    emb_ln: LnCache<F>,
    emb_drop: Option<Vec<F>>,
    layers: Vec<LayerCache<F>>,
    hidden: Vec<F>,
    mlm_pre: Vec<F>,
    mlm_ln: LnCache<F>,
    mlm_h: Vec<F>,
    pooled: Vec<F>,
}

impl<F: Real> ExampleCache<F> {
    /// Attention probabilities of `layer`, `head`: a `T × T` row-major block.
    pub fn attention(&self, layer: usize, head: usize) -> &[F] {
        let tt = self.t * self.t;
        &self.layers[layer].probs[head * tt..(head + 1) * tt]
    }

    /// Final encoder hidden states, `T × hidden`.
    pub fn hidden(&self) -> &[F] {
        &self.hidden
    }
}

pub struct ForwardOutput<F> {
    pub seq_len: usize,
    /// Per example, row-major `seq_len × vocab`.
    pub mlm_logits: Vec<Vec<F>>,
    pub sso_logits: Vec<[F; SSO_CLASSES]>,
    cache: Option<Vec<ExampleCache<F>>>,
}

impl<F: Real> ForwardOutput<F> {
    /// Cached activations, `None` once consumed by [`backward`].
    pub fn cache(&self) -> Option<&[ExampleCache<F>]> {
        self.cache.as_deref()
    }
}

fn dropout_mask<F: Real, R: Rng>(n: usize, rate: f64, rng: &mut R) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.gen_bool(rate) { F::zero() } else { keep })
        .collect()
}

fn apply_mask<F: Real>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

struct View<'a, F> {
    cfg: &'a ModelConfig,
    p: &'a ParamSet<F>,
    layers: &'a [names::Layer],
}

impl<'a, F: Real> View<'a, F> {
    fn t(&self, name: &str) -> &'a [F] {
        self.p.get(name).expect("parameters checked").data()
    }
}

fn check_finite<F: Real>(x: &[F], what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn forward_example<F: Real>(
    view: &View<'_, F>,
    ids: &[u32],
    types: &[u32],
    attn_mask: &[u8],
    dropout: Option<(f64, &mut rng::Rng)>,
) -> Result<(Vec<F>, [F; SSO_CLASSES], ExampleCache<F>)> {
    let cfg = view.cfg;
    let (t, h, nh) = (ids.len(), cfg.hidden, cfg.heads);
    let dh = h / nh;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let (rate, mut drng) = match dropout {
        Some((r, g)) if r > 0.0 => (r, Some(g)),
        _ => (0.0, None),
    };
    let mut draw = |n: usize| -> Option<Vec<F>> {
        drng.as_deref_mut().map(|g| dropout_mask(n, rate, g))
    };

    let word = view.t(names::WORD);
    let pos = view.t(names::POSITION);
    let typ = view.t(names::TOKEN_TYPE);
    let mut e = vec![F::zero(); t * h];
    for i in 0..t {
        let (w, ty) = (ids[i] as usize, types[i] as usize);
        let row = &mut e[i * h..(i + 1) * h];
        for d in 0..h {
            row[d] = word[w * h + d] + pos[i * h + d] + typ[ty * h + d];
        }
    }
    let (mut x, emb_ln) = layer_norm(&e, h, view.t(names::EMB_LN_GAMMA), view.t(names::EMB_LN_BETA));
    let emb_drop = draw(t * h);
    apply_mask(&mut x, &emb_drop);
    check_finite(&x, "embeddings")?;

    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, n) in view.layers.iter().enumerate() {
        let mut q = matmul(&x, t, h, view.t(&n.q_w), h);
        add_bias(&mut q, view.t(&n.q_b));
        let mut k = matmul(&x, t, h, view.t(&n.k_w), h);
        add_bias(&mut k, view.t(&n.k_b));
        let mut v = matmul(&x, t, h, view.t(&n.v_w), h);
        add_bias(&mut v, view.t(&n.v_b));

        let mut probs = vec![F::zero(); nh * t * t];
        let mut ctx = vec![F::zero(); t * h];
        for hd in 0..nh {
            let off = hd * dh;
            for i in 0..t {
                let prow = &mut probs[(hd * t + i) * t..(hd * t + i + 1) * t];
                let qi = &q[i * h + off..i * h + off + dh];
                let mut mx = F::neg_infinity();
                for j in 0..t {
                    if attn_mask[j] != 0 {
                        let s = dot(qi, &k[j * h + off..j * h + off + dh]) * scale;
                        prow[j] = s;
                        mx = mx.max(s);
                    }
                }
                let mut z = F::zero();
                for j in 0..t {
                    if attn_mask[j] != 0 {
                        let ev = (prow[j] - mx).exp();
                        prow[j] = ev;
                        z += ev;
                    }
                }
                for j in 0..t {
                    if attn_mask[j] != 0 {
                        prow[j] = prow[j] / z;
                    }
                }
                let crow = &mut ctx[i * h + off..i * h + off + dh];
                for j in 0..t {
                    let pj = prow[j];
                    if pj == F::zero() {
                        continue;
                    }
                    for (c, &vv) in crow.iter_mut().zip(&v[j * h + off..j * h + off + dh]) {
                        *c += pj * vv;
                    }
                }
            }
        }
        let mut a = matmul(&ctx, t, h, view.t(&n.o_w), h);
        add_bias(&mut a, view.t(&n.o_b));
        let attn_drop = draw(t * h);
        apply_mask(&mut a, &attn_drop);
        for (ai, &xi) in a.iter_mut().zip(&x) {
            *ai += xi;
        }
        let (x1, ln1) = layer_norm(&a, h, view.t(&n.attn_ln_g), view.t(&n.attn_ln_b));

        let f = cfg.ff_dim;
        let mut ffn_pre = matmul(&x1, t, h, view.t(&n.ffn_in_w), f);
        add_bias(&mut ffn_pre, view.t(&n.ffn_in_b));
        let ffn_act: Vec<F> = ffn_pre.iter().map(|&v| gelu(v)).collect();
        let mut g = matmul(&ffn_act, t, f, view.t(&n.ffn_out_w), h);
        add_bias(&mut g, view.t(&n.ffn_out_b));
        let ffn_drop = draw(t * h);
        apply_mask(&mut g, &ffn_drop);
        for (gi, &xi) in g.iter_mut().zip(&x1) {
            *gi += xi;
        }
        let (x2, ln2) = layer_norm(&g, h, view.t(&n.ffn_ln_g), view.t(&n.ffn_ln_b));
        check_finite(&x2, &format!("layer.{l}"))?;

        layers.push(LayerCache {
            x: std::mem::replace(&mut x, x2),
            q,
            k,
            v,
            probs,
            ctx,
            attn_drop,
            ln1,
            x1,
            ffn_pre,
            ffn_act,
            ffn_drop,
            ln2,
        });
    }

    let mut mlm_pre = matmul(&x, t, h, view.t(names::MLM_W), h);
    add_bias(&mut mlm_pre, view.t(names::MLM_B));
    let act: Vec<F> = mlm_pre.iter().map(|&v| gelu(v)).collect();
    let (mlm_h, mlm_ln) = layer_norm(&act, h, view.t(names::MLM_LN_GAMMA), view.t(names::MLM_LN_BETA));
    let mut logits = matmul_bt(&mlm_h, t, h, word, cfg.vocab_size);
    add_bias(&mut logits, view.t(names::MLM_BIAS));
    check_finite(&logits, "mlm head")?;

    let mut pooled = matmul(&x[..h], 1, h, view.t(names::POOLER_W), h);
    add_bias(&mut pooled, view.t(names::POOLER_B));
    for p in pooled.iter_mut() {
        *p = p.tanh();
    }
    let mut sso = matmul(&pooled, 1, h, view.t(names::SSO_W), SSO_CLASSES);
    add_bias(&mut sso, view.t(names::SSO_B));
    check_finite(&sso, "sso head")?;

    let cache = ExampleCache {
        t,
        ids: ids.to_vec(),
        types: types.to_vec(),
        emb_ln,
        emb_drop,
        layers,
        hidden: x,
        mlm_pre,
        mlm_ln,
        mlm_h,
        pooled,
    };
    Ok((logits, [sso[0], sso[1], sso[2]], cache))
}

/// Runs the encoder over a batch. `Train` mode applies dropout drawn from
/// `rng` (one seed per call, then a keyed stream per example); `Eval` mode
/// is deterministic and leaves `rng` untouched.
pub fn forward<F: Real, R: RngCore>(
    config: &ModelConfig,
    params: &ParamSet<F>,
    batch: &Batch,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardOutput<F>> {
    check_params(config, params)?;
    batch.validate(config)?;
    let layer_names: Vec<_> = (0..config.layers).map(names::Layer::new).collect();
    let view = View {
        cfg: config,
        p: params,
        layers: &layer_names,
    };
    let dropout_seed = match mode {
        Mode::Train if config.dropout_rate > 0.0 => Some(rng.next_u64()),
        _ => None,
    };
    let results: Vec<_> = (0..batch.len())
        .into_par_iter()
        .map(|b| {
            let mut g = dropout_seed.map(|s| rng::keyed(s, b as u64));
            let dropout = g.as_mut().map(|g| (config.dropout_rate, g));
            forward_example(
                &view,
                &batch.input_ids[b],
                &batch.token_type_ids[b],
                &batch.attention_mask[b],
                dropout,
            )
        })
        .collect();
    let mut out = ForwardOutput {
        seq_len: batch.seq_len(),
        mlm_logits: Vec::with_capacity(batch.len()),
        sso_logits: Vec::with_capacity(batch.len()),
        cache: Some(Vec::with_capacity(batch.len())),
    };
    for r in results {
        let (logits, sso, cache) = r?;
        out.mlm_logits.push(logits);
        out.sso_logits.push(sso);
        out.cache.as_mut().unwrap().push(cache);
    }
    Ok(out)
}

/// Loss gradients with respect to the model outputs.
#[derive(Debug, Clone)]
pub struct GradSeeds<F> {
    /// Per example `seq_len × vocab`; an empty vector means zero.
    pub mlm: Vec<Vec<F>>,
    pub sso: Vec<[F; SSO_CLASSES]>,
    /// Optional extra gradient on the final hidden states (`seq_len × hidden`).
    pub hidden: Option<Vec<Vec<F>>>,
}

impl<F: Real> GradSeeds<F> {
    pub fn zeros(batch_len: usize) -> Self {
        GradSeeds {
            mlm: vec![Vec::new(); batch_len],
            sso: vec![[F::zero(); SSO_CLASSES]; batch_len],
            hidden: None,
        }
    }
}

fn backward_example<F: Real>(
    view: &View<'_, F>,
    c: &ExampleCache<F>,
    d_logits: &[F],
    d_sso: &[F; SSO_CLASSES],
    d_hidden: Option<&[F]>,
) -> ParamSet<F> {
    let cfg = view.cfg;
    let (t, h, nh, f) = (c.t, cfg.hidden, cfg.heads, cfg.ff_dim);
    let dh = h / nh;
    let scale = F::of(1.0 / (dh as f64).sqrt());
    let mut g = view.p.zeros_like();
    macro_rules! gm {
        ($name:expr) => {
            g.get_mut($name).expect("gradient layout").data_mut()
        };
    }

    let mut dx = vec![F::zero(); t * h];
    if let Some(dhid) = d_hidden {
        dx.copy_from_slice(dhid);
    }

    // MLM head.
    if !d_logits.is_empty() {
        let word = view.t(names::WORD);
        sum_rows_acc(d_logits, cfg.vocab_size, gm!(names::MLM_BIAS));
        matmul_at_acc(d_logits, t, cfg.vocab_size, &c.mlm_h, h, gm!(names::WORD));
        let d_mlm_h = matmul(d_logits, t, cfg.vocab_size, word, h);
        let mut dgam = vec![F::zero(); h];
        let mut dbet = vec![F::zero(); h];
        let d_act = layer_norm_backward(
            &d_mlm_h,
            h,
            &c.mlm_ln,
            view.t(names::MLM_LN_GAMMA),
            &mut dgam,
            &mut dbet,
        );
        gm!(names::MLM_LN_GAMMA).copy_from_slice(&dgam);
        gm!(names::MLM_LN_BETA).copy_from_slice(&dbet);
        let d_pre: Vec<F> = d_act
            .iter()
            .zip(&c.mlm_pre)
            .map(|(&d, &x)| d * gelu_grad(x))
            .collect();
        matmul_at_acc(&c.hidden, t, h, &d_pre, h, gm!(names::MLM_W));
        sum_rows_acc(&d_pre, h, gm!(names::MLM_B));
        let back = matmul_bt(&d_pre, t, h, view.t(names::MLM_W), h);
        for (a, b) in dx.iter_mut().zip(back) {
            *a += b;
        }
    }

    // SSO head through the pooler.
    {
        matmul_at_acc(&c.pooled, 1, h, d_sso, SSO_CLASSES, gm!(names::SSO_W));
        sum_rows_acc(d_sso, SSO_CLASSES, gm!(names::SSO_B));
        let d_pooled = matmul_bt(d_sso, 1, SSO_CLASSES, view.t(names::SSO_W), h);
        let d_pre: Vec<F> = d_pooled
            .iter()
            .zip(&c.pooled)
            .map(|(&d, &p)| d * (F::one() - p * p))
            .collect();
        matmul_at_acc(&c.hidden[..h], 1, h, &d_pre, h, gm!(names::POOLER_W));
        sum_rows_acc(&d_pre, h, gm!(names::POOLER_B));
        let back = matmul_bt(&d_pre, 1, h, view.t(names::POOLER_W), h);
        for (a, b) in dx[..h].iter_mut().zip(back) {
            *a += b;
        }
    }

    for (lc, n) in c.layers.iter().zip(view.layers).rev() {
        // Feed-forward block.
        let mut dgam = vec![F::zero(); h];
        let mut dbet = vec![F::zero(); h];
        let d_r2 = layer_norm_backward(&dx, h, &lc.ln2, view.t(&n.ffn_ln_g), &mut dgam, &mut dbet);
        gm!(&n.ffn_ln_g).copy_from_slice(&dgam);
        gm!(&n.ffn_ln_b).copy_from_slice(&dbet);
        let mut d_g = d_r2.clone();
        apply_mask(&mut d_g, &lc.ffn_drop);
        matmul_at_acc(&lc.ffn_act, t, f, &d_g, h, gm!(&n.ffn_out_w));
        sum_rows_acc(&d_g, h, gm!(&n.ffn_out_b));
        let d_act = matmul_bt(&d_g, t, h, view.t(&n.ffn_out_w), f);
        let d_pre: Vec<F> = d_act
            .iter()
            .zip(&lc.ffn_pre)
            .map(|(&d, &x)| d * gelu_grad(x))
            .collect();
        matmul_at_acc(&lc.x1, t, h, &d_pre, f, gm!(&n.ffn_in_w));
        sum_rows_acc(&d_pre, f, gm!(&n.ffn_in_b));
        let mut d_x1 = matmul_bt(&d_pre, t, f, view.t(&n.ffn_in_w), h);
        for (a, &b) in d_x1.iter_mut().zip(&d_r2) {
            *a += b;
        }

        // Attention block.
        let mut dgam = vec![F::zero(); h];
        let mut dbet = vec![F::zero(); h];
        let d_r1 = layer_norm_backward(&d_x1, h, &lc.ln1, view.t(&n.attn_ln_g), &mut dgam, &mut dbet);
        gm!(&n.attn_ln_g).copy_from_slice(&dgam);
        gm!(&n.attn_ln_b).copy_from_slice(&dbet);
        let mut d_a = d_r1.clone();
        apply_mask(&mut d_a, &lc.attn_drop);
        matmul_at_acc(&lc.ctx, t, h, &d_a, h, gm!(&n.o_w));
        sum_rows_acc(&d_a, h, gm!(&n.o_b));
        let d_ctx = matmul_bt(&d_a, t, h, view.t(&n.o_w), h);

        let mut d_q = vec![F::zero(); t * h];
        let mut d_k = vec![F::zero(); t * h];
        let mut d_v = vec![F::zero(); t * h];
        let mut d_p = vec![F::zero(); t];
        for hd in 0..nh {
            let off = hd * dh;
            for i in 0..t {
                let prow = &lc.probs[(hd * t + i) * t..(hd * t + i + 1) * t];
                let dci = &d_ctx[i * h + off..i * h + off + dh];
                let mut weighted = F::zero();
                for j in 0..t {
                    let pj = prow[j];
                    if pj == F::zero() {
                        d_p[j] = F::zero();
                        continue;
                    }
                    let vj = &lc.v[j * h + off..j * h + off + dh];
                    d_p[j] = dot(dci, vj);
                    weighted += pj * d_p[j];
                    for (dv, &dc) in d_v[j * h + off..j * h + off + dh].iter_mut().zip(dci) {
                        *dv += pj * dc;
                    }
                }
                let qi = &lc.q[i * h + off..i * h + off + dh];
                for j in 0..t {
                    let pj = prow[j];
                    if pj == F::zero() {
                        continue;
                    }
                    let ds = pj * (d_p[j] - weighted) * scale;
                    let kj = &lc.k[j * h + off..j * h + off + dh];
                    for d in 0..dh {
                        d_q[i * h + off + d] += ds * kj[d];
                        d_k[j * h + off + d] += ds * qi[d];
                    }
                }
            }
        }

        let mut d_x = d_r1;
        for (dw, dbias, w, grad) in [
            (&n.q_w, &n.q_b, &n.q_w, &d_q),
            (&n.k_w, &n.k_b, &n.k_w, &d_k),
            (&n.v_w, &n.v_b, &n.v_w, &d_v),
        ] {
            matmul_at_acc(&lc.x, t, h, grad, h, gm!(dw));
            sum_rows_acc(grad, h, gm!(dbias));
            let back = matmul_bt(grad, t, h, view.t(w), h);
            for (a, b) in d_x.iter_mut().zip(back) {
                *a += b;
            }
        }
        dx = d_x;
    }

    // Embeddings.
    apply_mask(&mut dx, &c.emb_drop);
    let mut dgam = vec![F::zero(); h];
    let mut dbet = vec![F::zero(); h];
    let d_e = layer_norm_backward(&dx, h, &c.emb_ln, view.t(names::EMB_LN_GAMMA), &mut dgam, &mut dbet);
    gm!(names::EMB_LN_GAMMA).copy_from_slice(&dgam);
    gm!(names::EMB_LN_BETA).copy_from_slice(&dbet);
    for i in 0..t {
        let row = &d_e[i * h..(i + 1) * h];
        let (w, ty) = (c.ids[i] as usize, c.types[i] as usize);
        for (name, r) in [(names::WORD, w), (names::POSITION, i), (names::TOKEN_TYPE, ty)] {
            let gw = gm!(name);
            for d in 0..h {
                gw[r * h + d] += row[d];
            }
        }
    }
    g
}

/// Gradients of the scalar whose output-gradients are `seeds`. Consumes the
/// activation cache; a second call on the same output fails.
pub fn backward<F: Real>(
    config: &ModelConfig,
    params: &ParamSet<F>,
    output: &mut ForwardOutput<F>,
    seeds: &GradSeeds<F>,
) -> Result<ParamSet<F>> {
    let cache = output.cache.take().ok_or(Error::CacheConsumed)?;
    if seeds.mlm.len() != cache.len() || seeds.sso.len() != cache.len() {
        return Err(Error::Config("gradient seeds do not match the batch".into()));
    }
    let layer_names: Vec<_> = (0..config.layers).map(names::Layer::new).collect();
    let view = View {
        cfg: config,
        p: params,
        layers: &layer_names,
    };
    let per_example: Vec<ParamSet<F>> = cache
        .par_iter()
        .enumerate()
        .map(|(b, c)| {
            let dh = seeds.hidden.as_ref().map(|v| v[b].as_slice());
            backward_example(&view, c, &seeds.mlm[b], &seeds.sso[b], dh)
        })
        .collect();
    let mut iter = per_example.into_iter();
    let mut total = iter.next().unwrap_or_else(|| params.zeros_like());
    for g in iter {
        total.accumulate(&g);
    }
    Ok(total)
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub mlm: f64,
    pub sso: f64,
    pub combined: f64,
    /// Number of labelled MLM positions.
    pub mlm_count: usize,
}

/// Batch-mean MLM loss over all labelled positions, batch-mean SSO loss,
/// their combination `mlm + alpha · sso`, and the matching output gradients.
pub fn objective_gradients<F: Real>(
    config: &ModelConfig,
    output: &ForwardOutput<F>,
    batch: &Batch,
    alpha: f64,
) -> Result<(LossBreakdown, GradSeeds<F>)> {
    let v = config.vocab_size;
    let mut total = 0usize;
    for l in &batch.labels {
        total += l.iter().filter(|&&x| x != IGNORE).count();
    }
    let scale = if total == 0 { 0.0 } else { 1.0 / total as f64 };
    let mut mlm_sum = 0.0;
    let mut seeds = GradSeeds::zeros(batch.len());
    for b in 0..batch.len() {
        let (sum, _, grad) = xent_rows(&output.mlm_logits[b], v, &batch.labels[b], scale)?;
        mlm_sum += sum;
        seeds.mlm[b] = grad;
    }
    let n = batch.len() as f64;
    let mut sso_sum = 0.0;
    for b in 0..batch.len() {
        let logits = output.sso_logits[b];
        let label = batch.sso_labels[b].index();
        sso_sum += crate::objectives::sso_loss(&logits, batch.sso_labels[b])?;
        let m = logits.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
        let z: f64 = logits.iter().map(|x| (x.f64() - m).exp()).sum();
        for c in 0..SSO_CLASSES {
            let p = (logits[c].f64() - m).exp() / z;
            let y = if c == label { 1.0 } else { 0.0 };
            seeds.sso[b][c] = F::of(alpha * (p - y) / n);
        }
    }
    let mlm = if total == 0 { 0.0 } else { mlm_sum / total as f64 };
    let sso = sso_sum / n;
    let combined = crate::objectives::combined_loss(
        mlm,
        sso,
        crate::objectives::LossWeights { alpha },
    );
    Ok((
        LossBreakdown {
            mlm,
            sso,
            combined,
            mlm_count: total,
        },
        seeds,
    ))
}

#[cfg(test)]
mod tests;
