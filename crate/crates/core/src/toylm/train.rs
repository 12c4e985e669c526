// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{LanguageModel, ModelConfig};
use super::tokenizer::{TokenId, Tokenizer};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Training sequences pack between 1 and this many sentences.
    pub max_sentences_per_sequence: usize,
    /// Stop once greedy recall over the probes reaches this fraction
    /// (checked every `recall_check_every` epochs).
    pub stop_at_recall: Option<f64>,
    pub recall_check_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 5e-3,
            batch_size: 16,
            max_sentences_per_sequence: 3,
            stop_at_recall: Some(1.0),
            recall_check_every: 1,
            seed: 0,
        }
    }
}

/// Sentences to memorize plus `(prompt, object)` probes used to measure recall.
#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub sentences: Vec<String>,
    pub probes: Vec<(String, String)>,
}

/// Per-run training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub recall: Option<f64>,
    pub num_parameters: usize,
}

/// Fraction of probes whose greedy continuation reproduces the object.
pub fn fact_recall(model: &LanguageModel, probes: &[(String, String)]) -> Result<f64> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let hits = probes
        .par_iter()
        .map(|(prompt, object)| {
            let mut ids = vec![Tokenizer::BOS];
            ids.extend(model.tokenizer.encode(prompt)?);
            let target = model.tokenizer.encode(object)?;
            Ok(model.greedy_continuation(&ids, target.len())? == target)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / probes.len() as f64)
}

fn pack_epoch(sentences: &[Vec<TokenId>], cfg: &TrainConfig, max_len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<TokenId>> {
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(rng);
    let mut sequences = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let want = rng.gen_range(1..=cfg.max_sentences_per_sequence.max(1));
        let mut seq = vec![Tokenizer::BOS];
        let mut taken = 0;
        while taken < want && i < order.len() {
            let s = &sentences[order[i]];
            if taken > 0 && seq.len() + s.len() > max_len {
                break;
            }
            seq.extend_from_slice(s);
            seq.truncate(max_len);
            taken += 1;
            i += 1;
        }
        sequences.push(seq);
    }
    sequences
}

/// Summed next-token loss and parameter gradients for one sequence.
fn sequence_gradients(model: &LanguageModel, seq: &[TokenId]) -> Result<(f64, usize, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let inputs: Vec<usize> = seq[..seq.len() - 1].iter().map(|&t| t as usize).collect();
    let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
    let x = tape.embedding_lookup(p.token_embedding, &inputs)?;
    let logits = model.logits_on_tape(&mut tape, &p, x, 0)?;
    let lp = tape.log_softmax(logits, 1)?;
    let mean = tape.nll_loss(lp, &targets)?;
    let total = tape.scale(mean, targets.len() as f64);
    let loss = tape.value(total).item()?;
    let mut grads = tape.backward(total)?;
    let g = p
        .iter()
        .map(|v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(tape.shape(*v))))
        .collect();
    Ok((loss, targets.len(), g))
}

/// Trains a fresh model on `data` with Adam. Deterministic given
/// `train.seed`; parameters are rounded to `f32` at the end so that the
/// checkpoint round trip is lossless.
pub fn pretrain(data: &TrainingSet, model_config: &ModelConfig, train: &TrainConfig) -> Result<(LanguageModel, TrainReport)> {
    if data.sentences.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if train.batch_size == 0 || train.epochs == 0 {
        return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
    }
    let tokenizer = Tokenizer::from_texts(data.sentences.iter().map(String::as_str));
    let mut model = LanguageModel::init(model_config.clone(), tokenizer, train.seed)?;
    let sentences = data
        .sentences
        .iter()
        .map(|s| model.tokenizer.encode(s))
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = model.params.iter().map(Tensor::numel).collect();
    let mut adam = Adam::new(train.learning_rate, 0.0, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x005e_ed0f_da7a);
    let max_len = model.config.max_seq_len + 1;

    let mut report = TrainReport {
        epochs_run: 0,
        final_loss: f64::NAN,
        recall: None,
        num_parameters: model.params.num_parameters(),
    };
    for epoch in 0..train.epochs {
        let sequences = pack_epoch(&sentences, train, max_len, &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0;
        for batch in sequences.chunks(train.batch_size) {
            let results = batch
                .par_iter()
                .filter(|s| s.len() >= 2)
                .map(|s| sequence_gradients(&model, s))
                .collect::<Result<Vec<_>>>()?;
            let tokens: usize = results.iter().map(|r| r.1).sum();
            if tokens == 0 {
                continue;
            }
            let mut sum: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for (loss, _, grads) in &results {
                epoch_loss += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
            epoch_tokens += tokens;
            if !epoch_loss.is_finite() {
                return Err(Error::Divergence {
                    step: adam.steps_taken() as usize,
                });
            }
            let scale = 1.0 / tokens as f64;
            sum.iter_mut().flatten().for_each(|v| *v *= scale);
            let grads: Vec<&[f64]> = sum.iter().map(Vec::as_slice).collect();
            let mut params: Vec<&mut [f64]> = model_params_mut(&mut model);
            adam.step(&mut params, &grads);
        }
        report.epochs_run = epoch + 1;
        report.final_loss = epoch_loss / epoch_tokens.max(1) as f64;

        let check = train.recall_check_every.max(1);
        if let Some(target) = train.stop_at_recall {
            if !data.probes.is_empty() && (epoch + 1) % check == 0 {
                let recall = fact_recall(&model, &data.probes)?;
                report.recall = Some(recall);
                if recall >= target {
                    break;
                }
            }
        }
    }
    for t in model_tensors_mut(&mut model) {
        t.round_to_f32();
    }
    if !data.probes.is_empty() {
        report.recall = Some(fact_recall(&model, &data.probes)?);
    }
    Ok((model, report))
}

fn model_tensors_mut(model: &mut LanguageModel) -> Vec<&mut Tensor> {
    let p = &mut model.params;
    let mut out: Vec<&mut Tensor> = vec![&mut p.token_embedding, &mut p.position_embedding];
    for l in &mut p.layers {
        out.extend([
            &mut l.ln1_gain,
            &mut l.ln1_bias,
            &mut l.w_q,
            &mut l.b_q,
            &mut l.w_k,
            &mut l.b_k,
            &mut l.w_v,
            &mut l.b_v,
            &mut l.w_o,
            &mut l.b_o,
            &mut l.ln2_gain,
            &mut l.ln2_bias,
            &mut l.w_up,
            &mut l.b_up,
            &mut l.w_down,
            &mut l.b_down,
        ]);
    }
    out.extend([&mut p.ln_f_gain, &mut p.ln_f_bias, &mut p.w_out, &mut p.b_out]);
    out
}

fn model_params_mut(model: &mut LanguageModel) -> Vec<&mut [f64]> {
    model_tensors_mut(model).into_iter().map(Tensor::data_mut).collect()
}
