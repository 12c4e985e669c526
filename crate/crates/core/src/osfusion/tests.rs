// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{finite_difference, relative_error, Tensor};
use crate::error::Error;
use crate::toylm::{LanguageModel, ModelConfig, Tokenizer};

fn tiny_model(seed: u64) -> LanguageModel {
    let tok = Tokenizer::from_texts(["zor vak lives in paris rome oslo the city of mel"]);
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        max_seq_len: 32,
        ..ModelConfig::default()
    };
    LanguageModel::init(cfg, tok, seed).unwrap()
}

fn request() -> EditRequest {
    EditRequest {
        id: "r0".into(),
        subject: "zor vak".into(),
        prompt: "the city of zor vak lives in".into(),
        original_object: "paris".into(),
        new_object: "rome oslo".into(),
        paraphrases: vec![],
        neighborhood: vec![],
    }
}

fn small_config() -> FusionConfig {
    FusionConfig {
        prefix_count: 3,
        prefix_length: 2,
        opt_steps: 10,
        riemann_n: 5,
        ..FusionConfig::default()
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let m = tiny_model(1);
    let tr = TokenizedRequest::new(&request(), &m.tokenizer).unwrap();
    let prefixes = m.generate_prefixes(2, 3, 5).unwrap();
    let obj = EditObjective::new(&m, &tr, &prefixes, &small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let delta = Tensor::from_fn(&obj.delta_shape(), |_| rng.gen_range(-0.05..0.05));
    let grad = obj.evaluate_with_grad(&delta).unwrap().grad.unwrap();
    let coords: Vec<usize> = (0..delta.numel()).collect();
    let fd = finite_difference(&delta, &coords, 1e-5, |d| obj.evaluate(d).unwrap().loss);
    for (&i, n) in coords.iter().zip(fd) {
        let e = relative_error(grad.data()[i], n, 1e-6);
        assert!(e < 1e-4, "coord {i}: {} vs {n}", grad.data()[i]);
    }
}

#[test]
fn zero_delta_has_zero_kl() {
    let m = tiny_model(2);
    let tr = TokenizedRequest::new(&request(), &m.tokenizer).unwrap();
    let c = FusionConfig {
        beta: 0.0,
        ..small_config()
    };
    let obj = EditObjective::new(&m, &tr, &[], &c).unwrap();
    let v = obj.evaluate(&Tensor::zeros(&obj.delta_shape())).unwrap();
    assert!(v.loss.abs() < 1e-12, "{}", v.loss);
}

#[test]
fn unprefixed_nll_matches_sequence_logprob() {
    let m = tiny_model(3);
    let tr = TokenizedRequest::new(&request(), &m.tokenizer).unwrap();
    let obj = EditObjective::new(&m, &tr, &[], &small_config()).unwrap();
    let v = obj.evaluate(&Tensor::zeros(&obj.delta_shape())).unwrap();
    let lp = m.sequence_logprob(&tr.prompt, &tr.new_object, None).unwrap();
    assert!((v.nll * tr.new_object.len() as f64 + lp).abs() < 1e-10);
}

#[test]
fn optimization_keeps_best_and_respects_clamp() {
    let m = tiny_model(4);
    let tr = TokenizedRequest::new(&request(), &m.tokenizer).unwrap();
    for clamp_factor in [0.05, 1.0] {
        let c = FusionConfig {
            alpha: 0.0,
            clamp_factor,
            ..small_config()
        };
        let out = optimize_delta(&m, &tr, &c).unwrap();
        assert!(out.best_nll <= out.initial_nll);
        assert!(out.best_loss <= out.initial_loss);
        let (s, e) = tr.subject_span();
        let x = m.embed(&tr.prompt[s..e]).unwrap();
        for i in 0..tr.subject.len() {
            let n = out.delta.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let cap = clamp_factor * x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n <= cap + 1e-6, "row {i}: {n} > {cap}");
        }
    }
}

#[test]
fn optimization_raises_new_object_probability() {
    let m = tiny_model(5);
    let tr = TokenizedRequest::new(&request(), &m.tokenizer).unwrap();
    let c = FusionConfig {
        opt_steps: 25,
        ..small_config()
    };
    let out = optimize_delta(&m, &tr, &c).unwrap();
    let before = m.sequence_logprob(&tr.prompt, &tr.new_object, None).unwrap();
    let patch = crate::toylm::SpanPatch {
        start: tr.subject_start,
        deltas: out.delta.clone(),
    };
    let after = m.sequence_logprob(&tr.prompt, &tr.new_object, Some(&patch)).unwrap();
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn subject_not_in_prompt_is_an_error() {
    let m = tiny_model(6);
    let mut r = request();
    r.prompt = "the city of mel lives in".into();
    assert!(matches!(TokenizedRequest::new(&r, &m.tokenizer), Err(Error::SubjectNotFound { .. })));
}

#[test]
fn zero_embedding_dimensions_get_zero_attribution() {
    let mut m = tiny_model(7);
    let tr = TokenizedRequest::new(&request(), &m.tokenizer).unwrap();
    let subj = tr.subject[1] as usize;
    m.params.token_embedding.row_mut(subj)[3] = 0.0;
    m.params.token_embedding.row_mut(subj)[6] = 0.0;
    let r = attribute(&m, &tr.prompt, tr.subject_span(), &tr.original_object, 20, 0.35).unwrap();
    // Signed zero is allowed: x = 0 times a negative gradient sum gives -0.0.
    assert_eq!(r.scores.row(1)[3], 0.0);
    assert_eq!(r.scores.row(1)[6], 0.0);
    assert!(r.scores.all_finite());
}

#[test]
fn attribution_approaches_completeness() {
    let m = tiny_model(8);
    let tr = TokenizedRequest::new(&request(), &m.tokenizer).unwrap();
    let (s, _) = tr.subject_span();
    let endpoint = |zero: bool| {
        let mut x = m.embed(&tr.prompt).unwrap();
        if zero {
            x.row_mut(s).iter_mut().for_each(|v| *v = 0.0);
        }
        m.continuation_logprob(x, &tr.original_object).unwrap().exp()
    };
    let target = endpoint(false) - endpoint(true);
    let gap = |n| {
        let sc = attribution_scores(&m, &tr.prompt, (s, s + 1), &tr.original_object, n).unwrap();
        (sc.data().iter().sum::<f64>() - target).abs()
    };
    assert!(gap(200) < gap(20));
}

#[test]
fn attribution_errors() {
    let m = tiny_model(9);
    let tr = TokenizedRequest::new(&request(), &m.tokenizer).unwrap();
    assert!(attribute(&m, &tr.prompt, tr.subject_span(), &[], 20, 0.35).is_err());
    assert!(attribute(&m, &tr.prompt, tr.subject_span(), &tr.original_object, 0, 0.35).is_err());
}

#[test]
fn ked_threshold_examples() {
    let s = Tensor::matrix(1, 3, vec![0.9, 0.4, 0.2]).unwrap();
    assert_eq!(select_keds(&s, 0.35), vec![(0, 0), (0, 1)]);
    assert_eq!(select_keds(&s, 1.0), vec![(0, 0)]);
    let tied = Tensor::matrix(2, 2, vec![0.5, -0.1, 0.5, 0.0]).unwrap();
    assert_eq!(select_keds(&tied, 1.0), vec![(0, 0), (1, 0)]);
    assert_eq!(select_keds(&tied, 0.0), vec![(0, 0), (1, 0)]);
    let nonpositive = Tensor::matrix(1, 3, vec![0.0, -1.0, -0.5]).unwrap();
    assert!(select_keds(&nonpositive, 0.0).is_empty());
    assert!(select_keds(&nonpositive, 1.0).is_empty());
}

#[test]
fn fuse_examples() {
    let e = Tensor::matrix(2, 2, vec![1.0, 0.3, -0.7, 0.1]).unwrap();
    let x = Tensor::matrix(2, 2, vec![2.0, 5.0, 1.5, -3.0]).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&fuse(&e, &x, &[(0, 0), (1, 1)], 0.0).unwrap()), bits(&e));
    assert_eq!(bits(&fuse(&e, &x, &[], 0.5).unwrap()), bits(&e));
    let out = fuse(&e, &x, &[(0, 0)], 0.5).unwrap();
    assert_eq!(out.data(), &[0.0, 0.3, -0.7, 0.1]);
    assert!(fuse(&e, &x, &[(2, 0)], 0.5).is_err());
    assert!(fuse(&e, &Tensor::zeros(&[1, 2]), &[], 0.5).is_err());
}

proptest! {
    #[test]
    fn keds_shrink_as_t_grows(scores in prop::collection::vec(-1.0f64..1.0, 1..24),
                              t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let s = Tensor::matrix(1, scores.len(), scores).unwrap();
        let wide = select_keds(&s, lo);
        let narrow = select_keds(&s, hi);
        prop_assert!(narrow.iter().all(|k| wide.contains(k)));
    }

    #[test]
    fn fuse_changes_only_ked_slots(e in prop::collection::vec(-2.0f64..2.0, 6),
                                   x in prop::collection::vec(-2.0f64..2.0, 6),
                                   mask in prop::collection::vec(any::<bool>(), 6),
                                   gamma in 0.0f64..2.0) {
        let et = Tensor::matrix(2, 3, e).unwrap();
        let xt = Tensor::matrix(2, 3, x).unwrap();
        let keds: Vec<_> = (0..6).filter(|&i| mask[i]).map(|i| (i / 3, i % 3)).collect();
        let out = fuse(&et, &xt, &keds, gamma).unwrap();
        for i in 0..6 {
            let expect = if mask[i] { et.data()[i] - gamma * xt.data()[i] } else { et.data()[i] };
            prop_assert_eq!(out.data()[i].to_bits(), expect.to_bits());
        }
    }
}

#[test]
fn edit_is_deterministic_and_gamma_only_touches_keds() {
    let m = tiny_model(10);
    assert!(edit(&m, &[], &small_config()).unwrap().store.is_empty());

    let mut bad = request();
    bad.id = "bad".into();
    bad.subject = "mel".into();
    let requests = [request(), bad];
    let a = edit(&m, &requests, &small_config()).unwrap();
    let b = edit(&m, &requests, &small_config()).unwrap();
    assert_eq!(a.store.encode().unwrap(), b.store.encode().unwrap());
    assert_eq!(a.store.len(), 1);
    assert_eq!(a.failures.len(), 1);
    assert_eq!(a.failures[0].request_id, "bad");

    let off = edit(&m, &requests[..1], &FusionConfig { gamma: 0.0, ..small_config() }).unwrap();
    let prefixes = context_prefixes(&m, &small_config()).unwrap();
    let fused = fuse_request(&m, &requests[0], &prefixes, &small_config()).unwrap();
    let on_e = a.store.entries().next().unwrap().raw_deltas().to_vec();
    let off_e = off.store.entries().next().unwrap().raw_deltas().to_vec();
    let h = m.d_model();
    for i in 0..on_e.len() {
        if !fused.parts.attribution.keds.contains(&(i / h, i % h)) {
            assert_eq!(on_e[i].to_bits(), off_e[i].to_bits(), "slot {i}");
        }
    }
    assert_eq!(
        fused.parts.fuse_with(0.0, 0.35).unwrap(),
        fused.parts.delta,
    );
}
