//! A small character-level decoder-only transformer used to produce
//! activation dumps without any external checkpoint.
//!
//! Pre-norm residual blocks (LayerNorm -> causal multi-head attention ->
//! add, LayerNorm -> GELU MLP -> add), learned positional embeddings, a
//! final LayerNorm and an LM head tied to the token embedding. Linear maps
//! carry no bias. Everything runs in f32 on the CPU.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hsdata::{
    sample_token_positions, save_dataset, split_by_group, ActivationManifest, FinalNorm,
    HiddenPairDataset, HsDataError, NormKind, DEFAULT_TRAIN_FRACTION,
};
use crate::io::{f32_to_le_bytes, le_bytes_to_f32, write_atomic};
use crate::metrics::Unembedder;

pub const LN_EPSILON: f32 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Positions sampled per sentence in toy dumps. The bundled corpus has only
/// a few hundred sentences, so one position each would leave far fewer
/// train samples than a full `H x H` head has parameters.
pub const TOY_POSITIONS_PER_SENTENCE: usize = 16;

const WEIGHTS_MAGIC: &[u8; 4] = b"TOYL";
const WEIGHTS_VERSION: u32 = 1;

/// Characters understood by [`CharTokenizer`]; anything else maps to the
/// last id.
pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz.,'?";
pub const UNKNOWN_CHAR: char = '#';

static BUNDLED_CORPUS: &str = include_str!("../data/corpus.txt");

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("token id {id} out of vocabulary of size {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("training diverged at step {0}")]
    Diverged(usize),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("weights file: {0}")]
    Weights(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] HsDataError),
}

pub type Result<T> = std::result::Result<T, ToyError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLMConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ToyLMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            hidden_dim: 128,
            num_blocks: 8,
            num_heads: 4,
            mlp_ratio: 4,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ToyLMConfig {
    /// Named profiles: `default` (H = 128, rank 1) and `wide` (H = 256, rank 2).
    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "wide" => Some(Self {
                hidden_dim: 256,
                ..Self::default()
            }),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ToyError::Config(m));
        if self.vocab_size == 0
            || self.hidden_dim == 0
            || self.num_blocks == 0
            || self.num_heads == 0
            || self.mlp_ratio == 0
            || self.max_seq_len == 0
        {
            return bad("all dimensions must be positive".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, h, t, f) = (
            self.vocab_size,
            self.hidden_dim,
            self.max_seq_len,
            self.mlp_dim(),
        );
        v * h + t * h + self.num_blocks * (4 * h * h + 2 * h * f + 4 * h) + 2 * h
    }
}

/// Character-level tokenizer over [`ALPHABET`] plus an unknown id.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharTokenizer;

impl CharTokenizer {
    pub const VOCAB: usize = 32;

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| {
                let c = match c.to_ascii_lowercase() {
                    '\n' | '\t' | '-' => ' ',
                    '!' | ';' | ':' => '.',
                    '"' => '\'',
                    other => other,
                };
                ALPHABET
                    .chars()
                    .position(|a| a == c)
                    .unwrap_or(Self::VOCAB - 1)
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| ALPHABET.chars().nth(i).unwrap_or(UNKNOWN_CHAR))
            .collect()
    }
}

/// The bundled text split into sentences of at most `max_len` characters,
/// each tokenized. Sentences shorter than 8 characters are dropped and long
/// ones are cut into consecutive chunks.
pub fn bundled_corpus(max_len: usize) -> Vec<Vec<usize>> {
    corpus_from_text(BUNDLED_CORPUS, max_len)
}

pub fn corpus_from_text(text: &str, max_len: usize) -> Vec<Vec<usize>> {
    let tok = CharTokenizer;
    let flat: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut out = Vec::new();
    let mut current = String::new();
    for c in flat.chars() {
        current.push(c);
        if matches!(c, '.' | '?' | '!') {
            push_sentence(&mut out, &tok, &current, max_len);
            current.clear();
        }
    }
    push_sentence(&mut out, &tok, &current, max_len);
    out
}

fn push_sentence(out: &mut Vec<Vec<usize>>, tok: &CharTokenizer, s: &str, max_len: usize) {
    let ids = tok.encode(s.trim());
    for chunk in ids.chunks(max_len.max(1)) {
        if chunk.len() >= 8 {
            out.push(chunk.to_vec());
        }
    }
}

/// Every tenth sentence (index % 10 == 9) is held out.
pub fn split_corpus(corpus: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, s) in corpus.iter().enumerate() {
        if i % 10 == 9 {
            held.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, held)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_scale: Array1<f32>,
    pub ln1_bias: Array1<f32>,
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
    pub wo: Array2<f32>,
    pub ln2_scale: Array1<f32>,
    pub ln2_bias: Array1<f32>,
    /// `H x F`
    pub w1: Array2<f32>,
    /// `F x H`
    pub w2: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyLM {
    pub config: ToyLMConfig,
    /// `V x H`, also the LM head.
    pub tok_emb: Array2<f32>,
    /// `max_seq_len x H`
    pub pos_emb: Array2<f32>,
    pub blocks: Vec<Block>,
    pub lnf_scale: Array1<f32>,
    pub lnf_bias: Array1<f32>,
}

impl ToyLM {
    /// Gaussian(0, 0.02) weights, unit LayerNorm scales and zero biases.
    pub fn init(config: ToyLMConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gauss = |r: usize, c: usize| {
            Array2::from_shape_simple_fn((r, c), || normal.sample(&mut rng) as f32)
        };
        let (v, h, f) = (config.vocab_size, config.hidden_dim, config.mlp_dim());
        let tok_emb = gauss(v, h);
        let pos_emb = gauss(config.max_seq_len, h);
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                ln1_scale: Array1::ones(h),
                ln1_bias: Array1::zeros(h),
                wq: gauss(h, h),
                wk: gauss(h, h),
                wv: gauss(h, h),
                wo: gauss(h, h),
                ln2_scale: Array1::ones(h),
                ln2_bias: Array1::zeros(h),
                w1: gauss(h, f),
                w2: gauss(f, h),
            })
            .collect();
        Ok(Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_scale: Array1::ones(h),
            lnf_bias: Array1::zeros(h),
            config,
        })
    }

    fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f32>| Array2::zeros(a.dim());
        let z1 = |a: &Array1<f32>| Array1::zeros(a.len());
        Self {
            config: self.config.clone(),
            tok_emb: z2(&self.tok_emb),
            pos_emb: z2(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_scale: z1(&b.ln1_scale),
                    ln1_bias: z1(&b.ln1_bias),
                    wq: z2(&b.wq),
                    wk: z2(&b.wk),
                    wv: z2(&b.wv),
                    wo: z2(&b.wo),
                    ln2_scale: z1(&b.ln2_scale),
                    ln2_bias: z1(&b.ln2_bias),
                    w1: z2(&b.w1),
                    w2: z2(&b.w2),
                })
                .collect(),
            lnf_scale: z1(&self.lnf_scale),
            lnf_bias: z1(&self.lnf_bias),
        }
    }

    /// All tensors in a fixed order (used for optimizers and weight files).
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![
            self.tok_emb.as_slice().unwrap(),
            self.pos_emb.as_slice().unwrap(),
        ];
        for b in &self.blocks {
            out.extend([
                b.ln1_scale.as_slice().unwrap(),
                b.ln1_bias.as_slice().unwrap(),
                b.wq.as_slice().unwrap(),
                b.wk.as_slice().unwrap(),
                b.wv.as_slice().unwrap(),
                b.wo.as_slice().unwrap(),
                b.ln2_scale.as_slice().unwrap(),
                b.ln2_bias.as_slice().unwrap(),
                b.w1.as_slice().unwrap(),
                b.w2.as_slice().unwrap(),
            ]);
        }
        out.push(self.lnf_scale.as_slice().unwrap());
        out.push(self.lnf_bias.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![
            self.tok_emb.as_slice_mut().unwrap(),
            self.pos_emb.as_slice_mut().unwrap(),
        ];
        for b in &mut self.blocks {
            out.extend([
                b.ln1_scale.as_slice_mut().unwrap(),
                b.ln1_bias.as_slice_mut().unwrap(),
                b.wq.as_slice_mut().unwrap(),
                b.wk.as_slice_mut().unwrap(),
                b.wv.as_slice_mut().unwrap(),
                b.wo.as_slice_mut().unwrap(),
                b.ln2_scale.as_slice_mut().unwrap(),
                b.ln2_bias.as_slice_mut().unwrap(),
                b.w1.as_slice_mut().unwrap(),
                b.w2.as_slice_mut().unwrap(),
            ]);
        }
        out.push(self.lnf_scale.as_slice_mut().unwrap());
        out.push(self.lnf_bias.as_slice_mut().unwrap());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// The model's own decoding path: final LayerNorm then tied LM head.
    pub fn unembedder(&self) -> Unembedder {
        Unembedder::new(self.tok_emb.clone(), Some(self.final_norm()))
    }

    pub fn final_norm(&self) -> FinalNorm {
        FinalNorm {
            kind: NormKind::LayerNorm,
            scale: self.lnf_scale.to_vec(),
            bias: self.lnf_bias.to_vec(),
            epsilon: LN_EPSILON as f64,
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() {
            return Err(ToyError::EmptySequence);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(ToyError::TooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(ToyError::OutOfVocab {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, ids: &[usize]) -> Array2<f32> {
        let h = self.config.hidden_dim;
        let mut x = Array2::<f32>::zeros((ids.len(), h));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(t);
            row.assign(&self.tok_emb.row(id));
            row += &self.pos_emb.row(t);
        }
        x
    }

    /// Hidden states after the embedding (index 0) and after every block
    /// (`(num_blocks + 1) x T x H`), plus next-token logits (`T x V`) decoded
    /// from the last state through [`ToyLM::unembedder`].
    pub fn forward_with_states(&self, ids: &[usize]) -> Result<(Array3<f32>, Array2<f64>)> {
        self.check_ids(ids)?;
        let (t, h) = (ids.len(), self.config.hidden_dim);
        let mut states = Array3::<f32>::zeros((self.config.num_blocks + 1, t, h));
        let mut x = self.embed(ids);
        states.index_axis_mut(Axis(0), 0).assign(&x);
        for (k, blk) in self.blocks.iter().enumerate() {
            x = self.block_forward(blk, &x, false).0;
            states.index_axis_mut(Axis(0), k + 1).assign(&x);
        }
        let unembedder = self.unembedder();
        let mut logits = Array2::<f64>::zeros((t, self.config.vocab_size));
        for i in 0..t {
            let row = x.row(i).mapv(|v| v as f64);
            let l = unembedder.unembed(row.view()).expect("width matches");
            logits.row_mut(i).assign(&Array1::from(l));
        }
        Ok((states, logits))
    }

    fn block_forward(
        &self,
        blk: &Block,
        x: &Array2<f32>,
        keep: bool,
    ) -> (Array2<f32>, Option<BlockCache>) {
        let cfg = &self.config;
        let (t, h) = x.dim();
        let nh = cfg.num_heads;
        let d = h / nh;
        let scale = 1.0 / (d as f32).sqrt();

        let (a, ln1) = ln_forward(x, &blk.ln1_scale, &blk.ln1_bias);
        let q = a.dot(&blk.wq);
        let k = a.dot(&blk.wk);
        let v = a.dot(&blk.wv);
        let mut o = Array2::<f32>::zeros((t, h));
        let mut probs = Vec::with_capacity(if keep { nh } else { 0 });
        for head in 0..nh {
            let cols = s![.., head * d..(head + 1) * d];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut p = qh.dot(&kh.t()) * scale;
            for i in 0..t {
                let mut row = p.row_mut(i);
                let max = (0..=i).map(|j| row[j]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for j in 0..t {
                    if j <= i {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    } else {
                        row[j] = 0.0;
                    }
                }
                row.mapv_inplace(|e| e / sum);
            }
            o.slice_mut(cols).assign(&p.dot(&vh));
            if keep {
                probs.push(p);
            }
        }
        let x_mid = x + &o.dot(&blk.wo);
        let (b, ln2) = ln_forward(&x_mid, &blk.ln2_scale, &blk.ln2_bias);
        let u = b.dot(&blk.w1);
        let g = u.mapv(gelu);
        let out = &x_mid + &g.dot(&blk.w2);
        let cache = keep.then(|| BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            ln2,
            b,
            u,
            g,
        });
        (out, cache)
    }

    /// Mean next-token cross-entropy (nats) over every position of every
    /// sequence with at least two tokens.
    pub fn mean_cross_entropy(&self, corpus: &[Vec<usize>]) -> Result<f64> {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for seq in corpus.iter().filter(|s| s.len() >= 2) {
            let seq = &seq[..seq.len().min(self.config.max_seq_len + 1)];
            let (input, target) = (&seq[..seq.len() - 1], &seq[1..]);
            self.check_ids(input)?;
            self.check_ids(target)?;
            let (_, logits) = self.forward_with_states(input)?;
            for (t, &y) in target.iter().enumerate() {
                let row = logits.row(t);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[y];
                count += 1;
            }
        }
        if count == 0 {
            return Err(ToyError::EmptyCorpus);
        }
        Ok(total / count as f64)
    }

    /// Loss and gradient of the summed cross-entropy of one sequence,
    /// scaled by `1 / denom`. Gradients are accumulated into `grads`.
    fn accumulate_gradients(&self, seq: &[usize], denom: f32, grads: &mut ToyLM) -> f64 {
        let (input, target) = (&seq[..seq.len() - 1], &seq[1..]);
        let t = input.len();
        let mut x = self.embed(input);
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut inputs = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (out, cache) = self.block_forward(blk, &x, true);
            inputs.push(x);
            caches.push(cache.expect("kept"));
            x = out;
        }
        let (f, lnf) = ln_forward(&x, &self.lnf_scale, &self.lnf_bias);
        let logits = f.dot(&self.tok_emb.t());

        let mut loss = 0.0f64;
        let mut dlogits = Array2::<f32>::zeros(logits.dim());
        for i in 0..t {
            let row = logits.row(i);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let exps: Vec<f32> = row.iter().map(|&z| (z - max).exp()).collect();
            let sum: f32 = exps.iter().sum();
            loss += (sum.ln() + max - row[target[i]]) as f64;
            for (j, e) in exps.iter().enumerate() {
                dlogits[[i, j]] = e / sum / denom;
            }
            dlogits[[i, target[i]]] -= 1.0 / denom;
        }

        grads.tok_emb += &dlogits.t().dot(&f);
        let df = dlogits.dot(&self.tok_emb);
        let (mut dx, ds, db) = ln_backward(&df, &lnf, &self.lnf_scale);
        grads.lnf_scale += &ds;
        grads.lnf_bias += &db;

        for k in (0..self.blocks.len()).rev() {
            dx = self.block_backward(
                &self.blocks[k],
                &inputs[k],
                &caches[k],
                &dx,
                &mut grads.blocks[k],
            );
        }
        for (i, &id) in input.iter().enumerate() {
            let row = dx.row(i);
            let mut te = grads.tok_emb.row_mut(id);
            te += &row;
            let mut pe = grads.pos_emb.row_mut(i);
            pe += &row;
        }
        loss
    }

    fn block_backward(
        &self,
        blk: &Block,
        x: &Array2<f32>,
        c: &BlockCache,
        dout: &Array2<f32>,
        g: &mut Block,
    ) -> Array2<f32> {
        let (t, h) = x.dim();
        let nh = self.config.num_heads;
        let d = h / nh;
        let scale = 1.0 / (d as f32).sqrt();

        // MLP branch: out = x_mid + gelu(b W1) W2
        g.w2 += &c.g.t().dot(dout);
        let dg = dout.dot(&blk.w2.t());
        let du = &dg * &c.u.mapv(gelu_grad);
        g.w1 += &c.b.t().dot(&du);
        let db_ln = du.dot(&blk.w1.t());
        let (dx_mid_ln, ds2, dbias2) = ln_backward(&db_ln, &c.ln2, &blk.ln2_scale);
        g.ln2_scale += &ds2;
        g.ln2_bias += &dbias2;
        let dx_mid = dout + &dx_mid_ln;

        // attention branch: x_mid = x + O Wo
        g.wo += &c.o.t().dot(&dx_mid);
        let d_o = dx_mid.dot(&blk.wo.t());
        let mut dq = Array2::<f32>::zeros((t, h));
        let mut dk = Array2::<f32>::zeros((t, h));
        let mut dv = Array2::<f32>::zeros((t, h));
        for head in 0..nh {
            let cols = s![.., head * d..(head + 1) * d];
            let p = &c.probs[head];
            let doh = d_o.slice(cols);
            let dp = doh.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = p * &(&dp - &row_dot) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        g.wq += &c.a.t().dot(&dq);
        g.wk += &c.a.t().dot(&dk);
        g.wv += &c.a.t().dot(&dv);
        let da = dq.dot(&blk.wq.t()) + dk.dot(&blk.wk.t()) + dv.dot(&blk.wv.t());
        let (dx_ln, ds1, dbias1) = ln_backward(&da, &c.ln1, &blk.ln1_scale);
        g.ln1_scale += &ds1;
        g.ln1_bias += &dbias1;
        dx_mid + dx_ln
    }

    /// Weight file: magic, version, config (u64 LE each), then every tensor
    /// in [`ToyLM::tensors`] order as float32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for v in [
            c.vocab_size as u64,
            c.hidden_dim as u64,
            c.num_blocks as u64,
            c.num_heads as u64,
            c.mlp_ratio as u64,
            c.max_seq_len as u64,
            c.seed,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.tensors() {
            out.extend(f32_to_le_bytes(t.iter().copied()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| ToyError::Weights(m.to_string());
        let header = 4 + 4 + 7 * 8;
        if bytes.len() < header || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != WEIGHTS_VERSION {
            return Err(bad("unsupported version"));
        }
        let field = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().unwrap());
        let config = ToyLMConfig {
            vocab_size: field(0) as usize,
            hidden_dim: field(1) as usize,
            num_blocks: field(2) as usize,
            num_heads: field(3) as usize,
            mlp_ratio: field(4) as usize,
            max_seq_len: field(5) as usize,
            seed: field(6),
        };
        config.validate()?;
        if config.param_count() * 4 != bytes.len() - header {
            return Err(bad("payload size does not match config"));
        }
        let values = le_bytes_to_f32(&bytes[header..]);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite weight"));
        }
        let mut model = Self::init(config)?;
        let mut offset = 0;
        for t in model.tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()).map_err(|source| ToyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ToyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct LnCache {
    x_hat: Array2<f32>,
    inv_std: Array1<f32>,
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f32>,
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    probs: Vec<Array2<f32>>,
    o: Array2<f32>,
    ln2: LnCache,
    b: Array2<f32>,
    u: Array2<f32>,
    g: Array2<f32>,
}

fn ln_forward(x: &Array2<f32>, scale: &Array1<f32>, bias: &Array1<f32>) -> (Array2<f32>, LnCache) {
    let h = x.ncols() as f32;
    let mut x_hat = x.clone();
    let mut inv_std = Array1::<f32>::zeros(x.nrows());
    for (mut row, inv) in x_hat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / h;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f32>() / h;
        *inv = 1.0 / (var + LN_EPSILON).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &x_hat * scale + bias;
    (y, LnCache { x_hat, inv_std })
}

fn ln_backward(
    dy: &Array2<f32>,
    c: &LnCache,
    scale: &Array1<f32>,
) -> (Array2<f32>, Array1<f32>, Array1<f32>) {
    let h = dy.ncols() as f32;
    let dscale = (dy * &c.x_hat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dx_hat = dy * scale;
    let mut dx = Array2::<f32>::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let g = dx_hat.row(i);
        let xh = c.x_hat.row(i);
        let sum_g = g.sum();
        let sum_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f32>();
        let inv = c.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = inv / h * (h * g[j] - sum_g - xh[j] * sum_gx);
        }
    }
    (dx, dscale, dbias)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)

fn gelu(u: f32) -> f32 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f32) -> f32 {
    let inner = GELU_C * (u + 0.044715 * u * u * u);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f32,
    /// Sequences per step.
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm clip.
    pub clip_norm: f32,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 3e-3,
            batch_size: 4,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    /// Mean per-token loss of each step's batch.
    pub loss_trace: Vec<f64>,
}

/// Next-token cross-entropy training with Adam. Returns a new model; the
/// input is left untouched. Deterministic for a given `opts.seed`.
pub fn train_toylm(
    model: &ToyLM,
    corpus: &[Vec<usize>],
    opts: &TrainOptions,
) -> Result<(ToyLM, TrainStats)> {
    let mut model = model.clone();
    if opts.steps == 0 {
        return Ok((
            model,
            TrainStats {
                steps: 0,
                loss_trace: Vec::new(),
            },
        ));
    }
    let max = model.config.max_seq_len + 1;
    let seqs: Vec<&[usize]> = corpus
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| &s[..s.len().min(max)])
        .collect();
    if seqs.is_empty() {
        return Err(ToyError::EmptyCorpus);
    }
    for s in &seqs {
        model.check_ids(&s[..s.len() - 1])?;
        model.check_ids(&s[1..])?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (beta1, beta2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
    let mut m: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut v: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size.max(1) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(seqs[order[cursor]]);
            cursor += 1;
        }
        let tokens: usize = batch.iter().map(|s| s.len() - 1).sum();
        let mut grads = model.zeros_like();
        let mut loss = 0.0;
        for seq in &batch {
            loss += model.accumulate_gradients(seq, tokens as f32, &mut grads);
        }
        let loss = loss / tokens as f64;
        if !loss.is_finite() {
            return Err(ToyError::Diverged(step));
        }
        trace.push(loss);

        let norm = grads
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| (*g as f64) * (*g as f64))
            .sum::<f64>()
            .sqrt() as f32;
        if !norm.is_finite() {
            return Err(ToyError::Diverged(step));
        }
        let clip = if norm > opts.clip_norm {
            opts.clip_norm / norm
        } else {
            1.0
        };
        let t = (step + 1) as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = opts.learning_rate;
        for (k, (p, g)) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .enumerate()
        {
            let (mk, vk) = (&mut m[k], &mut v[k]);
            for i in 0..p.len() {
                let gi = g[i] * clip;
                mk[i] = beta1 * mk[i] + (1.0 - beta1) * gi;
                vk[i] = beta2 * vk[i] + (1.0 - beta2) * gi * gi;
                p[i] -= lr * (mk[i] / c1) / ((vk[i] / c2).sqrt() + eps);
            }
        }
    }
    Ok((
        model,
        TrainStats {
            steps: opts.steps,
            loss_trace: trace,
        },
    ))
}

/// Runs every sentence through the model, keeps `per_sentence` random
/// positions of each, and writes a dump directory (blocks 0..=num_blocks,
/// tied LM head, final LayerNorm, sample provenance and a by-sentence
/// 75/25 split).
pub fn dump_activations(
    model: &ToyLM,
    corpus: &[Vec<usize>],
    per_sentence: usize,
    sample_seed: u64,
    model_name: &str,
    path: &Path,
) -> Result<ActivationManifest> {
    let dataset = build_dataset(model, corpus, per_sentence, sample_seed, model_name)?;
    save_dataset(&dataset, path)?;
    Ok(dataset.manifest)
}

/// In-memory variant of [`dump_activations`].
pub fn build_dataset(
    model: &ToyLM,
    corpus: &[Vec<usize>],
    per_sentence: usize,
    sample_seed: u64,
    model_name: &str,
) -> Result<HiddenPairDataset> {
    if corpus.is_empty() {
        return Err(ToyError::EmptyCorpus);
    }
    let lengths: Vec<usize> = corpus.iter().map(|s| s.len()).collect();
    let specs = sample_token_positions(&lengths, per_sentence, sample_seed)?;
    let (n, h) = (specs.len(), model.config.hidden_dim);
    let mut blocks = vec![Array2::<f32>::zeros((n, h)); model.config.num_blocks + 1];
    let mut row = 0;
    for (sid, seq) in corpus.iter().enumerate() {
        let (states, _) = model.forward_with_states(seq)?;
        while row < n && specs[row].sentence_id == sid as u64 {
            let pos = specs[row].token_position;
            for (k, block) in blocks.iter_mut().enumerate() {
                block.row_mut(row).assign(&states.slice(s![k, pos, ..]));
            }
            row += 1;
        }
    }
    let groups: Vec<u64> = specs.iter().map(|s| s.sentence_id).collect();
    let split = if corpus.len() >= 2 {
        split_by_group(&groups, DEFAULT_TRAIN_FRACTION, sample_seed)?
    } else {
        crate::hsdata::Split::all_train(n)
    };
    Ok(HiddenPairDataset::new(
        model_name,
        blocks,
        Some(model.tok_emb.clone()),
        Some(model.final_norm()),
        Some(specs),
        Some(split),
    )?)
}

/// Picks `count` sequences at random (used for quick smoke runs).
pub fn sample_sequences(corpus: &[Vec<usize>], count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| corpus[rng.random_range(0..corpus.len())].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsdata::load_dataset;

    fn tiny() -> ToyLMConfig {
        ToyLMConfig {
            vocab_size: 7,
            hidden_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            mlp_ratio: 2,
            max_seq_len: 6,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = ToyLM::init(tiny()).unwrap();
        let b = ToyLM::init(tiny()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let bad = ToyLMConfig {
            hidden_dim: 130,
            num_heads: 4,
            ..ToyLMConfig::default()
        };
        assert!(matches!(ToyLM::init(bad), Err(ToyError::Config(_))));
    }

    #[test]
    fn parameter_count_by_enumeration() {
        let cfg = ToyLMConfig::default();
        let model = ToyLM::init(cfg.clone()).unwrap();
        let (v, h, t, f) = (32, 128, 64, 512);
        let per_block = [h, h, h * h, h * h, h * h, h * h, h, h, h * f, f * h];
        let expected = v * h + t * h + 8 * per_block.iter().sum::<usize>() + h + h;
        assert_eq!(model.param_count(), expected);
        assert_eq!(cfg.param_count(), expected);
    }

    #[test]
    fn forward_shapes_and_errors() {
        let model = ToyLM::init(tiny()).unwrap();
        let (states, logits) = model.forward_with_states(&[1]).unwrap();
        assert_eq!(states.dim(), (3, 1, 8));
        assert_eq!(logits.dim(), (1, 7));
        assert!(matches!(
            model.forward_with_states(&[0; 7]),
            Err(ToyError::TooLong { .. })
        ));
        assert!(matches!(
            model.forward_with_states(&[7]),
            Err(ToyError::OutOfVocab { .. })
        ));
        assert!(matches!(
            model.forward_with_states(&[]),
            Err(ToyError::EmptySequence)
        ));
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let model = ToyLM::init(tiny()).unwrap();
        let (_, logits) = model.forward_with_states(&[1, 2, 3]).unwrap();
        for row in logits.rows() {
            let p = crate::metrics::softmax(row.as_slice().unwrap());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_prefix_invariance() {
        let model = ToyLM::init(ToyLMConfig { seed: 9, ..tiny() }).unwrap();
        let ids = [1, 4, 2, 6, 0, 3];
        let (full, _) = model.forward_with_states(&ids).unwrap();
        for t in 1..ids.len() {
            let (pre, _) = model.forward_with_states(&ids[..t]).unwrap();
            for k in 0..3 {
                for p in 0..t {
                    for j in 0..8 {
                        assert!((pre[[k, p, j]] - full[[k, p, j]]).abs() <= 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn zeroed_blocks_pass_residual_through() {
        let mut model = ToyLM::init(tiny()).unwrap();
        for b in &mut model.blocks {
            b.wo.fill(0.0);
            b.w2.fill(0.0);
        }
        let (states, _) = model.forward_with_states(&[1, 2, 3, 4]).unwrap();
        for k in 1..3 {
            assert_eq!(states.index_axis(Axis(0), k), states.index_axis(Axis(0), 0));
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let model = ToyLM::init(ToyLMConfig { seed: 11, ..tiny() }).unwrap();
        // larger weights so every path carries signal
        let mut model = model;
        for t in model.tensors_mut() {
            for v in t.iter_mut() {
                *v *= 4.0;
            }
        }
        let seq = [1usize, 5, 2, 6, 0, 3];
        let mut grads = model.zeros_like();
        model.accumulate_gradients(&seq, 1.0, &mut grads);
        let loss_of = |m: &ToyLM| {
            let mut g = m.zeros_like();
            m.accumulate_gradients(&seq, 1.0, &mut g)
        };
        let analytic: Vec<Vec<f32>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut checked = 0;
        for (k, g) in analytic.iter().enumerate() {
            for _ in 0..6 {
                let i = rng.random_range(0..g.len());
                let step = 3e-3f32;
                let mut up = model.clone();
                up.tensors_mut()[k][i] += step;
                let mut down = model.clone();
                down.tensors_mut()[k][i] -= step;
                let fd = (loss_of(&up) - loss_of(&down)) / (2.0 * step as f64);
                let a = g[i] as f64;
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
                assert!(err < 2e-2, "tensor {k} index {i}: analytic {a} fd {fd}");
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn training_zero_steps_is_identity_and_deterministic() {
        let model = ToyLM::init(tiny()).unwrap();
        let corpus = vec![vec![1, 2, 3, 4, 5], vec![2, 3, 4, 5, 6, 0]];
        let (same, _) = train_toylm(
            &model,
            &corpus,
            &TrainOptions {
                steps: 0,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(same, model);
        let opts = TrainOptions {
            steps: 30,
            batch_size: 2,
            learning_rate: 1e-2,
            ..TrainOptions::default()
        };
        let (a, sa) = train_toylm(&model, &corpus, &opts).unwrap();
        let (b, _) = train_toylm(&model, &corpus, &opts).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert!(sa.loss_trace.last().unwrap() < sa.loss_trace.first().unwrap());
        assert!(
            a.mean_cross_entropy(&corpus).unwrap() < model.mean_cross_entropy(&corpus).unwrap()
        );
    }

    #[test]
    fn weights_round_trip() {
        let model = ToyLM::init(tiny()).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(ToyLM::from_bytes(&bytes).unwrap(), model);
        assert!(ToyLM::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }

    #[test]
    fn tokenizer_and_corpus() {
        let tok = CharTokenizer;
        let ids = tok.encode("Hi, there!");
        assert_eq!(tok.decode(&ids), "hi, there.");
        assert!(ids.iter().all(|&i| i < CharTokenizer::VOCAB));
        let corpus = bundled_corpus(64);
        assert!(corpus.len() > 100);
        assert!(corpus.iter().all(|s| (8..=64).contains(&s.len())));
    }

    #[test]
    fn dump_matches_forward_rows() {
        let model = ToyLM::init(ToyLMConfig {
            max_seq_len: 6,
            ..tiny()
        })
        .unwrap();
        let corpus: Vec<Vec<usize>> = (0..10)
            .map(|i| vec![i % 7, (i + 1) % 7, (i * 3) % 7, 2, 5])
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let manifest = dump_activations(&model, &corpus, 1, 4, "tiny", dir.path()).unwrap();
        assert_eq!(manifest.num_samples, 10);
        let ds = load_dataset(dir.path()).unwrap();
        let specs = ds.samples.clone().unwrap();
        for (i, spec) in specs.iter().enumerate() {
            let (states, logits) = model
                .forward_with_states(&corpus[spec.sentence_id as usize])
                .unwrap();
            for k in 0..=2 {
                for j in 0..8 {
                    assert_eq!(
                        ds.blocks[k][[i, j]].to_bits(),
                        states[[k, spec.token_position, j]].to_bits()
                    );
                }
            }
            let u = Unembedder::from_dataset(&ds, true).unwrap();
            let h = ds.blocks[2].row(i).mapv(|v| v as f64);
            let l = u.unembed(h.view()).unwrap();
            for (a, b) in l.iter().zip(logits.row(spec.token_position)) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
