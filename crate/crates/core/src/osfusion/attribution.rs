// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::toylm::{LanguageModel, TokenId};

/// Per-dimension attribution of the original object to the subject embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionReport {
    /// `[|S|, h]`.
    pub scores: Tensor,
    /// `(subject row, dimension)` pairs selected as knowledge-carrying, row-major.
    pub keds: Vec<(usize, usize)>,
    /// Maximum over all of `scores`.
    pub max_score: f64,
}

impl AttributionReport {
    /// `n` highest-scoring `(row, dim, score)` triples, ties in row-major order.
    pub fn top_k(&self, n: usize) -> Vec<(usize, usize, f64)> {
        let h = self.scores.shape()[1];
        let mut all: Vec<_> = self
            .scores
            .data()
            .iter()
            .enumerate()
            .map(|(i, &s)| (i / h, i % h, s))
            .collect();
        all.sort_by(|a, b| b.2.total_cmp(&a.2));
        all.truncate(n);
        all
    }
}

/// Integrated-gradients attribution of `P(object | prompt)` to each subject
/// embedding dimension, with `n` right-endpoint Riemann steps along the
/// straight path from zero.
///
/// `prompt` includes `<bos>`; the subject occupies `subject_span` in it.
/// The probability is the joint probability of all object tokens.
pub fn attribute(
    model: &LanguageModel,
    prompt: &[TokenId],
    subject_span: (usize, usize),
    object: &[TokenId],
    n: usize,
    t_threshold: f64,
) -> Result<AttributionReport> {
    let scores = attribution_scores(model, prompt, subject_span, object, n)?;
    let max_score = max_score(&scores);
    let keds = select_keds(&scores, t_threshold);
    Ok(AttributionReport {
        scores,
        keds,
        max_score,
    })
}

pub fn attribution_scores(
    model: &LanguageModel,
    prompt: &[TokenId],
    subject_span: (usize, usize),
    object: &[TokenId],
    n: usize,
) -> Result<Tensor> {
    if object.is_empty() {
        return Err(Error::Empty("attribution object"));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("riemann_n must be >= 1".into()));
    }
    let (start, end) = subject_span;
    if start >= end || end > prompt.len() {
        return Err(Error::SpanOutOfRange {
            start,
            end,
            len: prompt.len(),
        });
    }
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(&object[..object.len() - 1]);
    let x = model.embed(&ids)?;
    let targets: Vec<usize> = object.iter().map(|&t| t as usize).collect();
    let from_row = prompt.len() - 1;
    let h = model.d_model();
    let mut scores = Tensor::zeros(&[end - start, h]);

    for z in start..end {
        let original = x.slice_rows(z, z + 1)?;
        let mut sum = vec![0.0; h];
        for k in 1..=n {
            let mut tape = Tape::new();
            let p = model.bind(&mut tape, false);
            let base = tape.constant(x.clone());
            let scaled = tape.leaf(original.map(|v| v * k as f64 / n as f64));
            let input = tape.replace_rows_at(base, scaled, z)?;
            let logits = model.logits_on_tape(&mut tape, &p, input, from_row)?;
            let lsm = tape.log_softmax(logits, 1)?;
            let nll = tape.nll_loss(lsm, &targets)?;
            let logp = tape.scale(nll, -(targets.len() as f64));
            let prob = tape.exp(logp);
            let grads = tape.backward(prob)?;
            if let Some(g) = grads.get(scaled) {
                sum.iter_mut().zip(g.data()).for_each(|(s, g)| *s += g);
            }
        }
        let row = scores.row_mut(z - start);
        for ((r, &xv), s) in row.iter_mut().zip(original.data()).zip(&sum) {
            *r = xv / n as f64 * s;
        }
    }
    if !scores.all_finite() {
        return Err(Error::NonFinite("attribution scores".into()));
    }
    Ok(scores)
}

fn max_score(scores: &Tensor) -> f64 {
    scores.data().iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Dimensions scoring strictly above `t * max`, plus the maximizers
/// themselves when the maximum is positive (so `t = 1` keeps the argmax).
/// Non-positive scores are never selected.
pub fn select_keds(scores: &Tensor, t: f64) -> Vec<(usize, usize)> {
    let max = max_score(scores);
    let h = *scores.shape().last().unwrap_or(&1);
    let cut = t * max;
    scores
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > cut || (max > 0.0 && s == max))
        .map(|(i, _)| (i / h, i % h))
        .collect()
}

/// `e - gamma * x^S` at the KED slots, `e` elsewhere.
pub fn fuse(e: &Tensor, x_subject: &Tensor, keds: &[(usize, usize)], gamma: f64) -> Result<Tensor> {
    if e.shape() != x_subject.shape() {
        return Err(Error::shape(
            "fuse",
            format!("delta {:?} vs subject embeddings {:?}", e.shape(), x_subject.shape()),
        ));
    }
    let (rows, h) = e.dims2()?;
    if let Some(&(r, d)) = keds.iter().find(|&&(r, d)| r >= rows || d >= h) {
        return Err(Error::shape("fuse", format!("KED ({r}, {d}) outside {rows}x{h}")));
    }
    let mut out = e.clone();
    if gamma == 0.0 {
        return Ok(out);
    }
    for &(r, d) in keds {
        out.data_mut()[r * h + d] -= gamma * x_subject.data()[r * h + d];
    }
    Ok(out)
}
