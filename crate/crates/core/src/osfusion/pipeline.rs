// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::store::{make_key, EditingEmbedding, EditingStore, Provenance};
use crate::toylm::{LanguageModel, TokenId};

use super::{attribute, context_prefixes, fuse, optimize_delta_with_prefixes, select_keds, AttributionReport, EditRequest, FusionConfig, TokenizedRequest};

/// Per-request record of what fusion did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub request_id: String,
    pub subject: String,
    pub key: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub initial_nll: f64,
    pub final_nll: f64,
    pub best_step: usize,
    pub num_keds: usize,
    pub max_score: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestFailure {
    pub request_id: String,
    pub error: String,
}

/// Intermediate products of fusion for one request. Refusing with another
/// `gamma` or `t` needs no further optimization or attribution.
#[derive(Clone, Debug)]
pub struct FusionParts {
    pub tokenized: TokenizedRequest,
    /// Optimized delta before suppression.
    pub delta: Tensor,
    pub subject_embeddings: Tensor,
    pub attribution: AttributionReport,
}

impl FusionParts {
    pub fn fuse_with(&self, gamma: f64, t: f64) -> Result<Tensor> {
        let keds = select_keds(&self.attribution.scores, t);
        fuse(&self.delta, &self.subject_embeddings, &keds, gamma)
    }
}

#[derive(Clone, Debug)]
pub struct FusedEdit {
    pub editing_embedding: Tensor,
    pub summary: FusionSummary,
    pub parts: FusionParts,
}

/// Optimize, attribute against the original object on the unedited model,
/// select KEDs and suppress them.
pub fn fuse_request(
    model: &LanguageModel,
    request: &EditRequest,
    prefixes: &[Vec<TokenId>],
    config: &FusionConfig,
) -> Result<FusedEdit> {
    let tokenized = TokenizedRequest::new(request, &model.tokenizer)?;
    let outcome = optimize_delta_with_prefixes(model, &tokenized, prefixes, config)?;
    let attribution = attribute(
        model,
        &tokenized.prompt,
        tokenized.subject_span(),
        &tokenized.original_object,
        config.riemann_n,
        config.t_threshold,
    )?;
    let (s, e) = tokenized.subject_span();
    let subject_embeddings = model.embed(&tokenized.prompt[s..e])?;
    let editing_embedding = fuse(&outcome.delta, &subject_embeddings, &attribution.keds, config.gamma)?;
    let summary = FusionSummary {
        request_id: request.id.clone(),
        subject: request.subject.clone(),
        key: make_key(&tokenized.subject)?.to_string(),
        initial_loss: outcome.initial_loss,
        final_loss: outcome.best_loss,
        initial_nll: outcome.initial_nll,
        final_nll: outcome.best_nll,
        best_step: outcome.best_step,
        num_keds: attribution.keds.len(),
        max_score: attribution.max_score,
    };
    Ok(FusedEdit {
        editing_embedding,
        summary,
        parts: FusionParts {
            tokenized,
            delta: outcome.delta,
            subject_embeddings,
            attribution,
        },
    })
}

#[derive(Clone, Debug, Default)]
pub struct EditOutcome {
    pub store: EditingStore,
    pub summaries: Vec<FusionSummary>,
    pub failures: Vec<RequestFailure>,
}

/// Fuses every request (in parallel) and inserts the results in request
/// order. Failing requests are reported and skipped.
pub fn edit(model: &LanguageModel, requests: &[EditRequest], config: &FusionConfig) -> Result<EditOutcome> {
    let (fused, failures) = fuse_all(model, requests, config)?;
    let mut out = EditOutcome {
        store: EditingStore::for_vocab(&model.tokenizer),
        failures,
        ..EditOutcome::default()
    };
    for (request, f) in fused {
        insert_fused(&mut out.store, request, &f, config)?;
        out.summaries.push(f.summary);
    }
    Ok(out)
}

/// Runs [`fuse_request`] over `requests` with one shared set of prefixes.
pub fn fuse_all<'r>(
    model: &LanguageModel,
    requests: &'r [EditRequest],
    config: &FusionConfig,
) -> Result<(Vec<(&'r EditRequest, FusedEdit)>, Vec<RequestFailure>)> {
    config.validate()?;
    if requests.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let prefixes = context_prefixes(model, config)?;
    let results: Vec<_> = requests
        .par_iter()
        .map(|r| fuse_request(model, r, &prefixes, config))
        .collect();
    let mut fused = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in requests.iter().zip(results) {
        match res {
            Ok(f) => fused.push((r, f)),
            Err(e) => failures.push(RequestFailure {
                request_id: r.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok((fused, failures))
}

fn insert_fused(
    store: &mut EditingStore,
    request: &EditRequest,
    fused: &FusedEdit,
    config: &FusionConfig,
) -> Result<()> {
    let key = make_key(&fused.parts.tokenized.subject)?;
    let provenance = Provenance {
        request_id: request.id.clone(),
        request_seq: 0,
        config: config.clone(),
    };
    let embedding = EditingEmbedding::new(key, &fused.editing_embedding, provenance)?;
    store.upsert(embedding, request.clone());
    Ok(())
}
