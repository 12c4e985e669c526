// SPDX-License-Identifier: MIT OR Apache-2.0

use swea_core::eval::{
    aggregate, edited_logprob, evaluate, evaluate_request, generate_corpus, harmonic_score, run_batch, run_sequential,
    run_sequential_batch, sweep, FactCorpus, Schedule, SweepAxis,
};
use swea_core::osfusion::{edit, EditRequest, FusionConfig};
use swea_core::store::EditingStore;
use swea_core::toylm::{LanguageModel, ModelConfig, Tokenizer};

fn setup() -> (FactCorpus, LanguageModel, Vec<EditRequest>) {
    let corpus = generate_corpus(24, 4).unwrap();
    let set = corpus.training_set();
    let tok = Tokenizer::from_texts(set.sentences.iter().map(String::as_str));
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        ..ModelConfig::default()
    };
    let model = LanguageModel::init(config, tok, 9).unwrap();
    let requests = corpus.generate_requests(6, 5).unwrap();
    (corpus, model, requests)
}

fn fast() -> FusionConfig {
    FusionConfig {
        opt_steps: 3,
        prefix_count: 2,
        prefix_length: 3,
        riemann_n: 3,
        ..FusionConfig::default()
    }
}

#[test]
fn harmonic_score_examples() {
    // 3 / (1 + 1 + 2)
    assert_eq!(harmonic_score(1.0, 1.0, 0.5), 0.75);
    assert!((harmonic_score(0.9, 0.9, 0.9) - 0.9).abs() < 1e-15);
    assert_eq!(harmonic_score(1.0, 0.0, 1.0), 0.0);
}

#[test]
fn schedule_parsing() {
    assert_eq!("10x2".parse::<Schedule>().unwrap().stages, vec![2; 10]);
    assert_eq!("5,5,10".parse::<Schedule>().unwrap().stages, vec![5, 5, 10]);
    assert_eq!("4x5".parse::<Schedule>().unwrap().to_string(), "4x5");
    assert_eq!("3,1".parse::<Schedule>().unwrap().to_string(), "3,1");
    for bad in ["", "x2", "ten", "2x", "1,,2"] {
        assert!(bad.parse::<Schedule>().is_err(), "{bad:?}");
    }
}

#[test]
fn schedules_must_partition_the_requests() {
    let (_, model, requests) = setup();
    for s in ["2x2", "3x3", "6,0"] {
        let r = run_sequential_batch(&model, &requests, &s.parse().unwrap(), &fast());
        assert!(r.is_err(), "{s}");
    }
}

#[test]
fn empty_store_matches_the_base_model() {
    let (_, model, requests) = setup();
    let store = EditingStore::for_vocab(&model.tokenizer);
    let m = evaluate(&model, &store, &requests).unwrap();
    // Oracle: the same comparisons through the unpatched forward pass.
    let tok = &model.tokenizer;
    let lp = |prompt: &str, object: &str| {
        let ids: Vec<_> = std::iter::once(Tokenizer::BOS).chain(tok.encode(prompt).unwrap()).collect();
        model.sequence_logprob(&ids, &tok.encode(object).unwrap(), None).unwrap()
    };
    for (r, out) in requests.iter().zip(&m.per_request) {
        assert_eq!(out.efficacy, lp(&r.prompt, &r.new_object) > lp(&r.prompt, &r.original_object));
        let passed = r
            .neighborhood
            .iter()
            .filter(|p| lp(&p.prompt, &p.object) > lp(&p.prompt, &r.new_object))
            .count();
        assert_eq!(out.specificity_passed, passed);
    }
}

#[test]
fn prompts_without_an_edited_subject_are_bitwise_unaffected() {
    let (corpus, model, requests) = setup();
    let store = edit(&model, &requests[..2], &fast()).unwrap().store;
    assert_eq!(store.len(), 2);
    let empty = EditingStore::new();
    let edited: Vec<&str> = requests[..2].iter().map(|r| r.subject.as_str()).collect();
    let mut checked = 0;
    for f in corpus.facts.iter().filter(|f| !edited.contains(&f.subject.as_str())) {
        let prompt = &f.prompts[0];
        if edited.iter().any(|s| prompt.contains(s)) {
            continue;
        }
        let a = edited_logprob(&model, &store, prompt, &f.object).unwrap();
        let b = edited_logprob(&model, &empty, prompt, &f.object).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "{prompt}");
        checked += 1;
    }
    assert!(checked > 10);
}

#[test]
fn paraphrase_rules() {
    let (_, model, requests) = setup();
    let store = edit(&model, &requests[..1], &fast()).unwrap().store;
    let mut r = requests[0].clone();

    r.paraphrases = vec![r.prompt.clone()];
    let out = evaluate_request(&model, &store, &r).unwrap();
    assert_eq!(out.generalization, Some(if out.efficacy { 1.0 } else { 0.0 }));

    r.paraphrases = vec!["the city is".into()];
    let out = evaluate_request(&model, &store, &r).unwrap();
    assert_eq!(out.flagged_paraphrases, vec![0]);
    assert_eq!(out.generalization, Some(0.0));

    r.paraphrases.clear();
    let out = evaluate_request(&model, &store, &r).unwrap();
    assert_eq!(out.generalization, None);
    let mut with = evaluate_request(&model, &store, &requests[0]).unwrap();
    with.generalization = Some(0.5);
    let m = aggregate(vec![out, with]);
    assert_eq!(m.generalization, 0.5, "requests without paraphrases leave the denominator");
}

#[test]
fn single_stage_equals_batch() {
    let (_, model, requests) = setup();
    let batch = run_batch(&model, &requests, &fast()).unwrap();
    let staged = run_sequential_batch(&model, &requests, &Schedule::single(requests.len()), &fast()).unwrap();
    assert_eq!(batch.stages.len(), 1);
    assert_eq!(batch.stages[0].metrics, staged.stages[0].metrics);
    assert_eq!(batch.store.encode().unwrap(), staged.store.encode().unwrap());
}

#[test]
fn stages_report_everything_edited_so_far() {
    let (_, model, requests) = setup();
    let r = run_sequential_batch(&model, &requests, &"1,2,3".parse().unwrap(), &fast()).unwrap();
    let edited: Vec<usize> = r.stages.iter().map(|s| s.edited).collect();
    assert_eq!(edited, vec![1, 3, 6]);
    let sizes: Vec<usize> = r.stages.iter().map(|s| s.metrics.requests).collect();
    assert_eq!(sizes, vec![1, 3, 6]);
    let csv = r.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn disjoint_subjects_give_the_same_store_under_any_schedule() {
    let (_, model, requests) = setup();
    let one_by_one = run_sequential(&model, &requests, &fast()).unwrap();
    let halves = run_sequential_batch(&model, &requests, &"2x3".parse().unwrap(), &fast()).unwrap();
    assert_eq!(one_by_one.stages.len(), requests.len());
    let entries = |s: &EditingStore| s.entries().map(|e| (e.key().clone(), e.raw_deltas().to_vec())).collect::<Vec<_>>();
    assert_eq!(entries(&one_by_one.store), entries(&halves.store));
    assert_eq!(one_by_one.final_metrics(), halves.final_metrics());
}

#[test]
fn sweep_has_one_row_per_value() {
    let (_, model, requests) = setup();
    let values = [0.0, 0.25, 1.0];
    let t = sweep(&model, &requests[..3], SweepAxis::Gamma, &values, &fast()).unwrap();
    assert_eq!(t.rows.len(), 3);
    assert_eq!(t.to_csv().unwrap().lines().count(), 1 + values.len());
    let rows: Vec<f64> = t.rows.iter().map(|r| r.value).collect();
    assert_eq!(rows, values);
    assert!(sweep(&model, &requests, SweepAxis::T, &[], &fast()).is_err());

    // gamma = 0 in a sweep is the plain batch edit at gamma = 0.
    let direct = edit(&model, &requests[..3], &FusionConfig { gamma: 0.0, ..fast() }).unwrap();
    let m = evaluate(&model, &direct.store, &requests[..3]).unwrap();
    assert_eq!(t.rows[0].metrics, m);
}
