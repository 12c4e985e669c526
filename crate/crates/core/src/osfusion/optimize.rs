// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::toylm::{LanguageModel, TokenId};

use super::{FusionConfig, TokenizedRequest};

/// One teacher-forced context: `<bos> prefix prompt new_object[..-1]`.
struct Context {
    embeddings: Tensor,
    subject_start: usize,
    /// Row whose logits predict the first new-object token.
    first_target_row: usize,
}

/// The editing loss as a function of the subject delta `e: [|S|, h]`:
///
/// `alpha * KL(P(. | X) || P(. | X + e))` at the last prompt position, plus
/// `beta` times the new-object NLL averaged over the unprefixed prompt and
/// every sampled prefix.
pub struct EditObjective<'m> {
    model: &'m LanguageModel,
    alpha: f64,
    beta: f64,
    prompt: Tensor,
    subject_start: usize,
    subject_len: usize,
    reference_logits: Tensor,
    contexts: Vec<Context>,
    targets: Vec<usize>,
}

/// Loss value, its NLL component, and optionally the gradient.
#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub nll: f64,
    pub grad: Option<Tensor>,
}

impl<'m> EditObjective<'m> {
    pub fn new(
        model: &'m LanguageModel,
        request: &TokenizedRequest,
        prefixes: &[Vec<TokenId>],
        config: &FusionConfig,
    ) -> Result<Self> {
        let prompt = model.embed(&request.prompt)?;
        let reference_logits = {
            let last = request.prompt.len() - 1;
            model.forward_embeddings(prompt.clone())?.slice_rows(last, last + 1)?
        };
        let body = &request.prompt[1..];
        let object = &request.new_object;
        let mut contexts = Vec::with_capacity(prefixes.len() + 1);
        for prefix in std::iter::once(&[][..]).chain(prefixes.iter().map(Vec::as_slice)) {
            let mut ids = Vec::with_capacity(1 + prefix.len() + body.len() + object.len());
            ids.push(request.prompt[0]);
            ids.extend_from_slice(prefix);
            ids.extend_from_slice(body);
            let first_target_row = ids.len() - 1;
            ids.extend_from_slice(&object[..object.len() - 1]);
            contexts.push(Context {
                embeddings: model.embed(&ids)?,
                subject_start: request.subject_start + prefix.len(),
                first_target_row,
            });
        }
        Ok(Self {
            model,
            alpha: config.alpha,
            beta: config.beta,
            prompt,
            subject_start: request.subject_start,
            subject_len: request.subject.len(),
            reference_logits,
            contexts,
            targets: object.iter().map(|&t| t as usize).collect(),
        })
    }

    /// Original subject embeddings `x^S`.
    pub fn subject_embeddings(&self) -> Tensor {
        self.prompt
            .slice_rows(self.subject_start, self.subject_start + self.subject_len)
            .expect("subject span lies inside the prompt")
    }

    pub fn delta_shape(&self) -> [usize; 2] {
        [self.subject_len, self.model.d_model()]
    }

    pub fn evaluate(&self, delta: &Tensor) -> Result<ObjectiveValue> {
        self.run(delta, false)
    }

    pub fn evaluate_with_grad(&self, delta: &Tensor) -> Result<ObjectiveValue> {
        self.run(delta, true)
    }

    fn run(&self, delta: &Tensor, with_grad: bool) -> Result<ObjectiveValue> {
        if delta.shape() != self.delta_shape() {
            return Err(Error::shape(
                "edit objective",
                format!("delta {:?} vs expected {:?}", delta.shape(), self.delta_shape()),
            ));
        }
        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape, false);
        let e = if with_grad {
            tape.leaf(delta.clone())
        } else {
            tape.constant(delta.clone())
        };

        let mut nll_terms = Vec::with_capacity(self.contexts.len());
        for ctx in &self.contexts {
            let x = tape.constant(ctx.embeddings.clone());
            let x = tape.add_rows_at(x, e, ctx.subject_start)?;
            let logits = self.model.logits_on_tape(&mut tape, &p, x, ctx.first_target_row)?;
            let lsm = tape.log_softmax(logits, 1)?;
            nll_terms.push(tape.nll_loss(lsm, &self.targets)?);
        }
        let mut nll = nll_terms[0];
        for &t in &nll_terms[1..] {
            nll = tape.add(nll, t)?;
        }
        let nll = tape.scale(nll, 1.0 / self.contexts.len() as f64);
        let mut loss = tape.scale(nll, self.beta);
        if self.alpha != 0.0 {
            let x = tape.constant(self.prompt.clone());
            let x = tape.add_rows_at(x, e, self.subject_start)?;
            let last = self.prompt.shape()[0] - 1;
            let q = self.model.logits_on_tape(&mut tape, &p, x, last)?;
            let r = tape.constant(self.reference_logits.clone());
            let kl = tape.kl_divergence(r, q)?;
            let kl = tape.scale(kl, self.alpha);
            loss = tape.add(loss, kl)?;
        }

        let grad = if with_grad {
            let mut g = tape.backward(loss)?;
            Some(g.take(e).unwrap_or_else(|| Tensor::zeros(&self.delta_shape())))
        } else {
            None
        };
        Ok(ObjectiveValue {
            loss: tape.value(loss).item()?,
            nll: tape.value(nll).item()?,
            grad,
        })
    }
}

/// Result of [`optimize_delta`]: the best delta seen, by total loss.
#[derive(Clone, Debug)]
pub struct DeltaOutcome {
    pub delta: Tensor,
    pub initial_loss: f64,
    pub initial_nll: f64,
    pub best_loss: f64,
    pub best_nll: f64,
    /// Step at which `delta` was reached (0 is the zero initialization).
    pub best_step: usize,
}

/// The `prefix_count` sampled context prefixes used by the editing loss.
pub fn context_prefixes(model: &LanguageModel, config: &FusionConfig) -> Result<Vec<Vec<TokenId>>> {
    model.generate_prefixes(config.prefix_count, config.prefix_length, config.seed)
}

pub fn optimize_delta(model: &LanguageModel, request: &TokenizedRequest, config: &FusionConfig) -> Result<DeltaOutcome> {
    let prefixes = context_prefixes(model, config)?;
    optimize_delta_with_prefixes(model, request, &prefixes, config)
}

/// Adam on the delta starting from zero, with each row clamped to
/// `clamp_factor * ||x^S_i||` after every step.
pub fn optimize_delta_with_prefixes(
    model: &LanguageModel,
    request: &TokenizedRequest,
    prefixes: &[Vec<TokenId>],
    config: &FusionConfig,
) -> Result<DeltaOutcome> {
    config.validate()?;
    let objective = EditObjective::new(model, request, prefixes, config)?;
    let limits: Vec<f64> = {
        let x = objective.subject_embeddings();
        (0..x.shape()[0]).map(|i| config.clamp_factor * l2(x.row(i))).collect()
    };
    let mut delta = Tensor::zeros(&objective.delta_shape());
    let mut adam = Adam::new(config.learning_rate, config.weight_decay, &[delta.numel()]);
    let mut best: Option<DeltaOutcome> = None;

    for step in 0..=config.opt_steps {
        let last = step == config.opt_steps;
        let value = if last {
            objective.evaluate(&delta)?
        } else {
            objective.evaluate_with_grad(&delta)?
        };
        if !value.loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let outcome = best.get_or_insert_with(|| DeltaOutcome {
            delta: delta.clone(),
            initial_loss: value.loss,
            initial_nll: value.nll,
            best_loss: value.loss,
            best_nll: value.nll,
            best_step: 0,
        });
        if value.loss < outcome.best_loss {
            outcome.delta = delta.clone();
            outcome.best_loss = value.loss;
            outcome.best_nll = value.nll;
            outcome.best_step = step;
        }
        if last {
            break;
        }
        let grad = value.grad.expect("requested gradient");
        if !grad.all_finite() {
            return Err(Error::Divergence { step });
        }
        adam.step(&mut [delta.data_mut()], &[grad.data()]);
        clamp_rows(&mut delta, &limits);
    }
    Ok(best.expect("at least one evaluation"))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales row `i` onto the ball of radius `limits[i]` when it lies outside.
pub(crate) fn clamp_rows(delta: &mut Tensor, limits: &[f64]) {
    for (i, &limit) in limits.iter().enumerate() {
        let row = delta.row_mut(i);
        let norm = l2(row);
        if norm > limit {
            let s = if norm > 0.0 { limit / norm } else { 0.0 };
            row.iter_mut().for_each(|v| *v *= s);
        }
    }
}
