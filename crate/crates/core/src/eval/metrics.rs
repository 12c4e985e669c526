// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::matcher::patch_row;
use crate::osfusion::{find_span, with_bos, EditRequest};
use crate::store::EditingStore;
use crate::toylm::{LanguageModel, TokenId};

/// Per-request evaluation outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub request_id: String,
    /// `P(new | prompt) > P(original | prompt)` under the edited model.
    pub efficacy: bool,
    /// Greedy decoding of the prompt yields exactly the new object.
    pub efficacy_argmax: bool,
    /// Fraction of paraphrases passing the efficacy test; `None` without paraphrases.
    pub generalization: Option<f64>,
    /// Paraphrases not containing the subject tokens (counted as failures).
    pub flagged_paraphrases: Vec<usize>,
    /// Neighborhood probes where `P(true) > P(new object of this request)`.
    pub specificity_passed: usize,
    pub specificity_total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub requests: usize,
    pub efficacy: f64,
    pub efficacy_argmax: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub score: f64,
    pub per_request: Vec<RequestOutcome>,
}

/// Harmonic mean of the three components, 0 if any is 0.
pub fn harmonic_score(efficacy: f64, generalization: f64, specificity: f64) -> f64 {
    if efficacy <= 0.0 || generalization <= 0.0 || specificity <= 0.0 {
        return 0.0;
    }
    3.0 / (1.0 / efficacy + 1.0 / generalization + 1.0 / specificity)
}

/// Log-probability of `object` after `prompt` (text) with the stored edits
/// applied to the prompt tokens.
pub fn edited_logprob(model: &LanguageModel, store: &EditingStore, prompt: &str, object: &str) -> Result<f64> {
    let ids = with_bos(model.tokenizer.encode(prompt)?);
    let object = model.tokenizer.encode(object)?;
    edited_logprob_ids(model, store, &ids, &object)
}

fn edited_logprob_ids(model: &LanguageModel, store: &EditingStore, ids: &[TokenId], object: &[TokenId]) -> Result<f64> {
    let mut x = model.embed(ids)?;
    patch_row(ids, &mut x, store)?;
    model.continuation_logprob(x, object)
}

/// Greedy continuation of `ids`, re-matching the store on every step.
pub fn edited_greedy(model: &LanguageModel, store: &EditingStore, ids: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
    let mut seq = ids.to_vec();
    for _ in 0..n {
        let mut x = model.embed(&seq)?;
        patch_row(&seq, &mut x, store)?;
        let logits = model.forward_embeddings(x)?;
        let last = logits.row(seq.len() - 1);
        let mut best = 0;
        for (i, v) in last.iter().enumerate() {
            if *v > last[best] {
                best = i;
            }
        }
        seq.push(best as TokenId);
    }
    Ok(seq[ids.len()..].to_vec())
}

fn prefers_new(model: &LanguageModel, store: &EditingStore, prompt: &[TokenId], new: &[TokenId], old: &[TokenId]) -> Result<bool> {
    Ok(edited_logprob_ids(model, store, prompt, new)? > edited_logprob_ids(model, store, prompt, old)?)
}

pub fn evaluate_request(model: &LanguageModel, store: &EditingStore, request: &EditRequest) -> Result<RequestOutcome> {
    let tok = &model.tokenizer;
    let subject = tok.encode(&request.subject)?;
    let new = tok.encode(&request.new_object)?;
    let old = tok.encode(&request.original_object)?;
    let prompt = with_bos(tok.encode(&request.prompt)?);

    let efficacy = prefers_new(model, store, &prompt, &new, &old)?;
    let efficacy_argmax = edited_greedy(model, store, &prompt, new.len())? == new;

    let mut flagged = Vec::new();
    let mut passed = 0usize;
    for (i, p) in request.paraphrases.iter().enumerate() {
        let ids = match tok.encode(p) {
            Ok(ids) => with_bos(ids),
            Err(_) => {
                flagged.push(i);
                continue;
            }
        };
        if find_span(&ids, &subject).is_none() {
            flagged.push(i);
            continue;
        }
        passed += usize::from(prefers_new(model, store, &ids, &new, &old)?);
    }
    let generalization =
        (!request.paraphrases.is_empty()).then(|| passed as f64 / request.paraphrases.len() as f64);

    let mut specificity_passed = 0;
    for probe in &request.neighborhood {
        let ids = with_bos(tok.encode(&probe.prompt)?);
        let truth = tok.encode(&probe.object)?;
        specificity_passed += usize::from(prefers_new(model, store, &ids, &truth, &new)?);
    }
    Ok(RequestOutcome {
        request_id: request.id.clone(),
        efficacy,
        efficacy_argmax,
        generalization,
        flagged_paraphrases: flagged,
        specificity_passed,
        specificity_total: request.neighborhood.len(),
    })
}

/// All metrics over `requests`, evaluated in parallel against one store.
pub fn evaluate(model: &LanguageModel, store: &EditingStore, requests: &[EditRequest]) -> Result<EditMetrics> {
    let per_request = requests
        .par_iter()
        .map(|r| evaluate_request(model, store, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(per_request))
}

pub fn aggregate(per_request: Vec<RequestOutcome>) -> EditMetrics {
    let n = per_request.len();
    let frac = |k: usize, d: usize| if d == 0 { 0.0 } else { k as f64 / d as f64 };
    let efficacy = frac(per_request.iter().filter(|r| r.efficacy).count(), n);
    let efficacy_argmax = frac(per_request.iter().filter(|r| r.efficacy_argmax).count(), n);
    let gens: Vec<f64> = per_request.iter().filter_map(|r| r.generalization).collect();
    let generalization = if gens.is_empty() {
        0.0
    } else {
        gens.iter().sum::<f64>() / gens.len() as f64
    };
    let specificity = frac(
        per_request.iter().map(|r| r.specificity_passed).sum(),
        per_request.iter().map(|r| r.specificity_total).sum(),
    );
    EditMetrics {
        requests: n,
        efficacy,
        efficacy_argmax,
        generalization,
        specificity,
        score: harmonic_score(efficacy, generalization, specificity),
        per_request,
    }
}

pub fn efficacy(model: &LanguageModel, store: &EditingStore, requests: &[EditRequest]) -> Result<f64> {
    Ok(evaluate(model, store, requests)?.efficacy)
}

pub fn generalization(model: &LanguageModel, store: &EditingStore, requests: &[EditRequest]) -> Result<f64> {
    Ok(evaluate(model, store, requests)?.generalization)
}

pub fn specificity(model: &LanguageModel, store: &EditingStore, requests: &[EditRequest]) -> Result<f64> {
    Ok(evaluate(model, store, requests)?.specificity)
}
