// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-LayerNorm decoder-only transformer with learned absolute positions and
//! an output projection that is not tied to the token embedding table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenizer::{TokenId, Tokenizer};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_ff: 256,
            vocab_size: 0,
            max_seq_len: 64,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::InvalidConfig("layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w_up: T,
    pub b_up: T,
    pub w_down: T,
    pub b_down: T,
}

/// All model parameters. `T` is [`Tensor`] for storage and [`Var`] once bound
/// to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub token_embedding: T,
    pub position_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub ln_f_gain: T,
    pub ln_f_bias: T,
    pub w_out: T,
    pub b_out: T,
}

impl<T> LayerParams<T> {
    fn iter(&self) -> impl Iterator<Item = &T> {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
        .into_iter()
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            w_q: it.next()?,
            b_q: it.next()?,
            w_k: it.next()?,
            b_k: it.next()?,
            w_v: it.next()?,
            b_v: it.next()?,
            w_o: it.next()?,
            b_o: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w_up: it.next()?,
            b_up: it.next()?,
            w_down: it.next()?,
            b_down: it.next()?,
        })
    }
}

impl<T> ModelParams<T> {
    /// Parameters in checkpoint order: token embedding, position embedding,
    /// each layer's sixteen tensors, final norm gain/bias, output weight/bias.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [&self.token_embedding, &self.position_embedding]
            .into_iter()
            .chain(self.layers.iter().flat_map(LayerParams::iter))
            .chain([&self.ln_f_gain, &self.ln_f_bias, &self.w_out, &self.b_out])
    }

    /// Inverse of [`ModelParams::iter`].
    pub fn from_ordered(n_layers: usize, items: impl IntoIterator<Item = T>) -> Option<Self> {
        let mut it = items.into_iter();
        let token_embedding = it.next()?;
        let position_embedding = it.next()?;
        let layers = (0..n_layers)
            .map(|_| LayerParams::from_iter(&mut it))
            .collect::<Option<Vec<_>>>()?;
        let out = Self {
            token_embedding,
            position_embedding,
            layers,
            ln_f_gain: it.next()?,
            ln_f_bias: it.next()?,
            w_out: it.next()?,
            b_out: it.next()?,
        };
        it.next().is_none().then_some(out)
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams::from_ordered(self.layers.len(), self.iter().map(f).collect::<Vec<_>>())
            .expect("same layout")
    }
}

impl ModelParams<Tensor> {
    /// Shapes in checkpoint order.
    pub fn shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
        let (h, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut shapes = vec![vec![v, h], vec![config.max_seq_len, h]];
        for _ in 0..config.n_layers {
            shapes.extend([
                vec![h],
                vec![h],
                vec![h, h],
                vec![h],
                vec![h, h],
                vec![h],
                vec![h, h],
                vec![h],
                vec![h, h],
                vec![h],
                vec![h],
                vec![h],
                vec![h, f],
                vec![f],
                vec![f, h],
                vec![h],
            ]);
        }
        shapes.extend([vec![h], vec![h], vec![h, v], vec![v]]);
        shapes
    }

    /// GPT-2 style init: N(0, 0.02) weights, zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut sample = |shape: &[usize]| Tensor::from_fn(shape, |_| normal.sample(&mut rng));
        let (h, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let ones = |n| Tensor::full(&[n], 1.0);
        let zeros = |n| Tensor::zeros(&[n]);
        let token_embedding = sample(&[v, h]);
        let position_embedding = sample(&[config.max_seq_len, h]);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: ones(h),
                ln1_bias: zeros(h),
                w_q: sample(&[h, h]),
                b_q: zeros(h),
                w_k: sample(&[h, h]),
                b_k: zeros(h),
                w_v: sample(&[h, h]),
                b_v: zeros(h),
                w_o: sample(&[h, h]),
                b_o: zeros(h),
                ln2_gain: ones(h),
                ln2_bias: zeros(h),
                w_up: sample(&[h, f]),
                b_up: zeros(f),
                w_down: sample(&[f, h]),
                b_down: zeros(h),
            })
            .collect();
        Self {
            token_embedding,
            position_embedding,
            layers,
            ln_f_gain: ones(h),
            ln_f_bias: zeros(h),
            w_out: sample(&[h, v]),
            b_out: zeros(v),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.iter().map(Tensor::numel).sum()
    }
}

/// Additive patch on the input word embeddings of positions
/// `[start, start + deltas.rows)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanPatch {
    pub start: usize,
    pub deltas: Tensor,
}

/// Tokenizer plus transformer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: ModelParams<Tensor>,
}

impl LanguageModel {
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, params: ModelParams<Tensor>) -> Result<Self> {
        config.validate()?;
        if config.vocab_size != tokenizer.len() {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} but tokenizer has {} tokens",
                config.vocab_size,
                tokenizer.len()
            )));
        }
        let shapes = ModelParams::shapes(&config);
        for (i, (t, s)) in params.iter().zip(&shapes).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(Error::shape(
                    "model params",
                    format!("tensor {i} has shape {:?}, expected {s:?}", t.shape()),
                ));
            }
        }
        Ok(Self {
            config,
            tokenizer,
            params,
        })
    }

    /// Randomly initialized model over `tokenizer`'s vocabulary.
    pub fn init(mut config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.vocab_size = tokenizer.len();
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Self::new(config, tokenizer, params)
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<Vec<usize>> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        ids.iter()
            .map(|&id| {
                let id = id as usize;
                if id < self.config.vocab_size {
                    Ok(id)
                } else {
                    Err(Error::TokenOutOfRange {
                        id,
                        vocab_size: self.config.vocab_size,
                    })
                }
            })
            .collect()
    }

    /// Input word embeddings `X = E[ids]`, shape `[len, h]`.
    pub fn embed(&self, ids: &[TokenId]) -> Result<Tensor> {
        let ids = self.check_ids(ids)?;
        let h = self.d_model();
        let table = &self.params.token_embedding;
        let mut data = Vec::with_capacity(ids.len() * h);
        for id in ids {
            data.extend_from_slice(table.row(id));
        }
        Tensor::new(vec![data.len() / h.max(1), h], data)
    }

    /// Binds every parameter to `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelParams<Var> {
        self.params.map(|t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Logits `[len - from_row, vocab]` for rows `from_row..` of the input
    /// word embeddings `x: [len, h]`.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        p: &ModelParams<Var>,
        x: Var,
        from_row: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let (len, h) = tape.value(x).dims2()?;
        if h != cfg.d_model {
            return Err(Error::shape("forward", format!("embedding width {h} vs d_model {}", cfg.d_model)));
        }
        if len == 0 {
            return Err(Error::Empty("forward input"));
        }
        if len > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: cfg.max_seq_len,
            });
        }
        if from_row >= len {
            return Err(Error::SpanOutOfRange {
                start: from_row,
                end: len,
                len,
            });
        }
        let dk = cfg.head_dim();
        let inv_sqrt_dk = 1.0 / (dk as f64).sqrt();
        let eps = cfg.layer_norm_eps;

        let pos = tape.slice_rows(p.position_embedding, 0, len)?;
        let mut hidden = tape.add(x, pos)?;
        for layer in &p.layers {
            let a = tape.layer_norm(hidden, layer.ln1_gain, layer.ln1_bias, eps)?;
            let q = tape.matmul(a, layer.w_q)?;
            let q = tape.add_bias(q, layer.b_q)?;
            let k = tape.matmul(a, layer.w_k)?;
            let k = tape.add_bias(k, layer.b_k)?;
            let v = tape.matmul(a, layer.w_v)?;
            let v = tape.add_bias(v, layer.b_v)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let (lo, hi) = (head * dk, (head + 1) * dk);
                let qh = tape.slice_cols(q, lo, hi)?;
                let kh = tape.slice_cols(k, lo, hi)?;
                let vh = tape.slice_cols(v, lo, hi)?;
                let scores = tape.matmul_t(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt_dk);
                let scores = tape.causal_mask(scores)?;
                let attn = tape.softmax(scores, 1)?;
                heads.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_cols(&heads)?;
            let o = tape.matmul(merged, layer.w_o)?;
            let o = tape.add_bias(o, layer.b_o)?;
            hidden = tape.add(hidden, o)?;

            let m = tape.layer_norm(hidden, layer.ln2_gain, layer.ln2_bias, eps)?;
            let f = tape.matmul(m, layer.w_up)?;
            let f = tape.add_bias(f, layer.b_up)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, layer.w_down)?;
            let f = tape.add_bias(f, layer.b_down)?;
            hidden = tape.add(hidden, f)?;
        }
        let hidden = if from_row > 0 {
            tape.slice_rows(hidden, from_row, len)?
        } else {
            hidden
        };
        let hf = tape.layer_norm(hidden, p.ln_f_gain, p.ln_f_bias, eps)?;
        let logits = tape.matmul(hf, p.w_out)?;
        tape.add_bias(logits, p.b_out)
    }

    /// Logits for every row of the input embeddings `x: [len, h]`.
    pub fn forward_embeddings(&self, x: Tensor) -> Result<Tensor> {
        self.forward_embeddings_from(x, 0)
    }

    fn forward_embeddings_from(&self, x: Tensor, from_row: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(x);
        let logits = self.logits_on_tape(&mut tape, &p, x, from_row)?;
        Ok(tape.value(logits).clone())
    }

    /// Causal logits `[len(ids), vocab]`, with `patch` added to the input word
    /// embeddings over its span.
    pub fn forward(&self, ids: &[TokenId], patch: Option<&SpanPatch>) -> Result<Tensor> {
        let mut x = self.embed(ids)?;
        if let Some(patch) = patch {
            apply_span_patch(&mut x, patch)?;
        }
        self.forward_embeddings(x)
    }

    /// `Σ log P(continuation[i] | ids ++ continuation[..i])`, teacher forced.
    pub fn sequence_logprob(
        &self,
        ids: &[TokenId],
        continuation: &[TokenId],
        patch: Option<&SpanPatch>,
    ) -> Result<f64> {
        let mut x = self.embed(ids)?;
        if let Some(patch) = patch {
            apply_span_patch(&mut x, patch)?;
        }
        self.continuation_logprob(x, continuation)
    }

    /// Like [`LanguageModel::sequence_logprob`] but starting from already
    /// computed (possibly patched) prompt embeddings.
    pub fn continuation_logprob(&self, prompt_embeddings: Tensor, continuation: &[TokenId]) -> Result<f64> {
        let (prompt_len, h) = prompt_embeddings.dims2()?;
        if prompt_len == 0 {
            return Err(Error::Empty("prompt"));
        }
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let cont = self.check_ids(continuation)?;
        let tail = self.embed(&continuation[..continuation.len() - 1])?;
        let mut data = prompt_embeddings.into_data();
        data.extend_from_slice(tail.data());
        let x = Tensor::new(vec![data.len() / h, h], data)?;
        let logits = self.forward_embeddings_from(x, prompt_len - 1)?;
        let mut total = 0.0;
        let mut lp = vec![0.0; self.vocab_size()];
        for (r, &t) in cont.iter().enumerate() {
            log_softmax_into(logits.row(r), &mut lp);
            total += lp[t];
        }
        Ok(total)
    }

    /// Greedy decoding of `n` tokens after `ids`.
    pub fn greedy_continuation(&self, ids: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
        let mut seq = ids.to_vec();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.embed(&seq)?;
            let logits = self.forward_embeddings_from(x, seq.len() - 1)?;
            let next = argmax(logits.row(0)) as TokenId;
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// `count` prefixes of exactly `length` tokens, sampled from the model
    /// after `<bos>` with a fixed-seed multinomial draw. Special tokens are
    /// never sampled.
    pub fn generate_prefixes(&self, count: usize, length: usize, seed: u64) -> Result<Vec<Vec<TokenId>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(count);
        let mut probs = vec![0.0; self.vocab_size()];
        for _ in 0..count {
            let mut seq = vec![Tokenizer::BOS];
            for _ in 0..length {
                let x = self.embed(&seq)?;
                let logits = self.forward_embeddings_from(x, seq.len() - 1)?;
                log_softmax_into(logits.row(0), &mut probs);
                probs.iter_mut().for_each(|p| *p = p.exp());
                probs[Tokenizer::PAD as usize] = 0.0;
                probs[Tokenizer::BOS as usize] = 0.0;
                let total: f64 = probs.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut pick = probs.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    if u < *p {
                        pick = i;
                        break;
                    }
                    u -= p;
                }
                seq.push(pick as TokenId);
            }
            out.push(seq[1..].to_vec());
        }
        Ok(out)
    }
}

/// Adds `patch.deltas` to rows `[start, start + rows)` of `x: [len, h]`.
pub fn apply_span_patch(x: &mut Tensor, patch: &SpanPatch) -> Result<()> {
    let (len, h) = x.dims2()?;
    let (rows, w) = patch.deltas.dims2()?;
    if w != h {
        return Err(Error::shape("patch", format!("delta width {w} vs embedding width {h}")));
    }
    let end = patch.start + rows;
    if end > len {
        return Err(Error::SpanOutOfRange {
            start: patch.start,
            end,
            len,
        });
    }
    let dst = &mut x.data_mut()[patch.start * h..end * h];
    dst.iter_mut().zip(patch.deltas.data()).for_each(|(v, d)| *v += d);
    Ok(())
}

pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(logits) {
        *o = v - lse;
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
