// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::Command as Process;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use swea_core::eval::{
    evaluate, generate_corpus, run_sequential, run_sequential_batch, sweep as run_sweep, FactCorpus,
    RunReport, Schedule, StageReport, SweepAxis,
};
use swea_core::io::{sha256_file, write_atomic};
use swea_core::osfusion::{attribute as run_attribution, edit as run_edit, find_span, read_requests_jsonl, requests_to_jsonl, with_bos, EditOutcome, EditRequest};
use swea_core::store::EditingStore;
use swea_core::toylm::{load_model, pretrain, save_model, LanguageModel};

use crate::args::{AttributeArgs, Axis, CorpusArgs, EditArgs, EvalArgs, Mode, ReplayArgs, SweepArgs, TrainArgs};
use crate::config::{resolve_fusion, ConfigFile};
use crate::manifest::{sidecar, with_suffix, RunManifest};

pub const CHECKPOINT_FILE: &str = "model.toylm";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Bad invocation that clap cannot detect on its own (exit status 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

struct ModelFiles {
    checkpoint: PathBuf,
    vocab: PathBuf,
}

impl ModelFiles {
    fn in_dir(dir: &Path) -> Self {
        Self {
            checkpoint: dir.join(CHECKPOINT_FILE),
            vocab: dir.join(VOCAB_FILE),
        }
    }

    fn load(&self, manifest: &mut RunManifest) -> Result<LanguageModel> {
        require_file(&self.checkpoint, "model checkpoint")?;
        require_file(&self.vocab, "vocabulary")?;
        manifest.input(&self.checkpoint)?;
        manifest.input(&self.vocab)?;
        load_model(&self.checkpoint, &self.vocab).with_context(|| format!("loading {}", self.checkpoint.display()))
    }
}

fn load_requests(path: &Path, manifest: &mut RunManifest) -> Result<Vec<EditRequest>> {
    require_file(path, "request file")?;
    manifest.input(path)?;
    let ingested = read_requests_jsonl(path)?;
    for (line, reason) in &ingested.rejected {
        eprintln!("warning: {}:{line}: request skipped: {reason}", path.display());
    }
    Ok(ingested.requests)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn corpus(args: &CorpusArgs) -> Result<()> {
    let mut manifest = RunManifest::new("corpus", "--out", true)?;
    let corpus = generate_corpus(args.facts, args.seed)?;
    let request_seed = args.seed.wrapping_add(1);
    let requests = corpus.generate_requests(args.requests, request_seed)?;
    if requests.len() < args.requests {
        eprintln!("warning: edit pool holds only {} facts", requests.len());
    }
    create_dir(&args.out)?;
    let corpus_path = args.out.join("corpus.jsonl");
    let requests_path = args.out.join("requests.jsonl");
    write_atomic(&corpus_path, corpus.to_jsonl()?.as_bytes())?;
    write_atomic(&requests_path, requests_to_jsonl(&requests)?.as_bytes())?;
    manifest.config = json!({ "facts": args.facts, "requests": args.requests });
    manifest.seeds = json!({ "corpus": args.seed, "requests": request_seed });
    manifest.output(&corpus_path)?;
    manifest.output(&requests_path)?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    println!(
        "{} facts ({:.0}% multi-token subjects), {} requests -> {}",
        corpus.len(),
        100.0 * corpus.multi_token_fraction(),
        requests.len(),
        args.out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut manifest = RunManifest::new("train", "--out", true)?;
    require_file(&args.corpus, "corpus")?;
    let mut config = ConfigFile::load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    manifest.input(&args.corpus)?;
    if let Some(c) = &args.config {
        manifest.input(c)?;
    }
    let corpus = FactCorpus::load(&args.corpus)?;
    let (model, report) = pretrain(&corpus.training_set(), &config.model, &config.train)?;
    create_dir(&args.out)?;
    let files = ModelFiles::in_dir(&args.out);
    save_model(&model, &files.checkpoint, &files.vocab)?;
    manifest.config = json!({ "model": model.config, "train": config.train });
    manifest.seeds = json!({ "train": config.train.seed });
    manifest.output(&files.checkpoint)?;
    manifest.output(&files.vocab)?;
    manifest.write(&args.out.join(MANIFEST_FILE))?;
    let recall = report.recall.map_or("n/a".to_owned(), |r| format!("{:.1}%", 100.0 * r));
    println!(
        "trained {} parameters for {} epochs, loss {:.4}, recall {recall} -> {}",
        report.num_parameters,
        report.epochs_run,
        report.final_loss,
        args.out.display()
    );
    Ok(())
}

pub fn edit(args: &EditArgs) -> Result<()> {
    let mut manifest = RunManifest::new("edit", "--store-out", false)?;
    let fusion = resolve_fusion(&args.fusion)?;
    let model = ModelFiles::in_dir(&args.model).load(&mut manifest)?;
    let requests = load_requests(&args.requests, &mut manifest)?;
    create_parent(&args.store_out)?;

    let outcome = if requests.is_empty() {
        eprintln!("warning: {} holds no requests, writing an empty store", args.requests.display());
        EditOutcome {
            store: EditingStore::for_vocab(&model.tokenizer),
            ..EditOutcome::default()
        }
    } else {
        run_edit(&model, &requests, &fusion)?
    };
    let store = &outcome.store;
    store.save(&args.store_out)?;
    manifest.config = json!({ "fusion": fusion });
    manifest.seeds = json!({ "fusion": fusion.seed });
    manifest.output(&args.store_out)?;
    manifest.write(&sidecar(&args.store_out))?;

    for s in &outcome.summaries {
        println!(
            "{:<12} {:<24} loss {:.4} -> {:.4}  nll {:.4} -> {:.4}  keds {}",
            s.request_id, s.subject, s.initial_loss, s.final_loss, s.initial_nll, s.final_nll, s.num_keds
        );
    }
    for f in &outcome.failures {
        eprintln!("failed: {}: {}", f.request_id, f.error);
    }
    println!(
        "{} edited, {} failed, {} keys -> {}",
        outcome.summaries.len(),
        outcome.failures.len(),
        store.len(),
        args.store_out.display()
    );
    if !requests.is_empty() && outcome.summaries.is_empty() {
        bail!("every request failed");
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut manifest = RunManifest::new("eval", "--report-out", false)?;
    if args.store.is_some() && args.mode != Mode::Batch {
        return Err(usage("--store only applies to --mode batch"));
    }
    let schedule = match (&args.schedule, args.mode) {
        (Some(s), Mode::SequentialBatch) => Some(s.parse::<Schedule>().map_err(|e| usage(e.to_string()))?),
        (None, Mode::SequentialBatch) => return Err(usage("--mode sequential-batch needs --schedule")),
        (Some(_), _) => return Err(usage("--schedule only applies to --mode sequential-batch")),
        (None, _) => None,
    };
    let model = ModelFiles::in_dir(&args.model).load(&mut manifest)?;
    let requests = load_requests(&args.requests, &mut manifest)?;
    if requests.is_empty() {
        bail!("{} holds no requests", args.requests.display());
    }

    let report = match args.mode {
        Mode::Batch => {
            let store = match &args.store {
                Some(path) => {
                    require_file(path, "store")?;
                    manifest.input(path)?;
                    let store = EditingStore::load(path)?;
                    let expected = model.tokenizer.vocab_hash();
                    if store.vocab_hash().is_some_and(|h| h != expected) {
                        bail!("store {} was built for a different vocabulary", path.display());
                    }
                    store
                }
                None => EditingStore::for_vocab(&model.tokenizer),
            };
            let metrics = evaluate(&model, &store, &requests)?;
            RunReport {
                schedule: Schedule::single(requests.len()),
                stages: vec![StageReport {
                    stage: 0,
                    edited: requests.len(),
                    metrics,
                    failures: Vec::new(),
                }],
                store,
            }
        }
        Mode::Sequential | Mode::SequentialBatch => {
            let fusion = resolve_fusion(&args.fusion)?;
            manifest.config = json!({ "fusion": fusion });
            manifest.seeds = json!({ "fusion": fusion.seed });
            match &schedule {
                Some(s) => run_sequential_batch(&model, &requests, s, &fusion)?,
                None => run_sequential(&model, &requests, &fusion)?,
            }
        }
    };

    let json_path = with_suffix(&args.report_out, "json");
    let csv_path = with_suffix(&args.report_out, "csv");
    create_parent(&json_path)?;
    write_atomic(&json_path, report.to_json()?.as_bytes())?;
    write_atomic(&csv_path, report.to_csv()?.as_bytes())?;
    manifest.output(&json_path)?;
    manifest.output(&csv_path)?;
    manifest.write(&sidecar(&args.report_out))?;

    print!("{}", report.to_text());
    for stage in &report.stages {
        for f in &stage.failures {
            eprintln!("stage {}: failed: {}: {}", stage.stage, f.request_id, f.error);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AttributionJson<'a> {
    prompt: &'a str,
    subject: &'a str,
    object: &'a str,
    n: usize,
    t: f64,
    max_score: f64,
    keds: &'a [(usize, usize)],
    /// `[subject row][dimension]`.
    scores: Vec<&'a [f64]>,
}

pub fn attribute(args: &AttributeArgs) -> Result<()> {
    let mut manifest = RunManifest::new("attribute", "--out", false)?;
    let model = ModelFiles::in_dir(&args.model).load(&mut manifest)?;
    let tok = &model.tokenizer;
    let prompt_text = args.prompt.replace("{subject}", &args.subject);
    let prompt = with_bos(tok.encode(&prompt_text)?);
    let subject = tok.encode(&args.subject)?;
    let object = tok.encode(&args.object)?;
    let start = find_span(&prompt, &subject)
        .ok_or_else(|| usage(format!("subject {:?} does not occur in {:?}", args.subject, prompt_text)))?;
    let report = run_attribution(&model, &prompt, (start, start + subject.len()), &object, args.n, args.t)?;

    println!("{:>4} {:>4} {:>12}", "row", "dim", "score");
    for (row, dim, score) in report.top_k(args.top_k) {
        println!("{row:>4} {dim:>4} {score:>12.6}");
    }
    println!("max score {:.6}, {} KEDs at t = {}", report.max_score, report.keds.len(), args.t);

    if let Some(out) = &args.out {
        let h = report.scores.shape()[1];
        let json = AttributionJson {
            prompt: &prompt_text,
            subject: &args.subject,
            object: &args.object,
            n: args.n,
            t: args.t,
            max_score: report.max_score,
            keds: &report.keds,
            scores: report.scores.data().chunks(h).collect(),
        };
        create_parent(out)?;
        write_atomic(out, serde_json::to_string_pretty(&json)?.as_bytes())?;
        manifest.config = json!({ "n": args.n, "t": args.t, "top_k": args.top_k });
        manifest.output(out)?;
        manifest.write(&sidecar(out))?;
    }
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let mut manifest = RunManifest::new("sweep", "--out", false)?;
    let fusion = resolve_fusion(&args.fusion)?;
    let model = ModelFiles::in_dir(&args.model).load(&mut manifest)?;
    let requests = load_requests(&args.requests, &mut manifest)?;
    if requests.is_empty() {
        bail!("{} holds no requests", args.requests.display());
    }
    let axis = match args.axis {
        Axis::Gamma => SweepAxis::Gamma,
        Axis::T => SweepAxis::T,
    };
    let table = run_sweep(&model, &requests, axis, &args.values, &fusion)?;

    let csv_path = with_suffix(&args.out, "csv");
    let json_path = with_suffix(&args.out, "json");
    create_parent(&csv_path)?;
    write_atomic(&csv_path, table.to_csv()?.as_bytes())?;
    write_atomic(&json_path, table.to_json()?.as_bytes())?;
    manifest.config = json!({ "fusion": fusion, "axis": axis, "values": args.values });
    manifest.seeds = json!({ "fusion": fusion.seed });
    manifest.output(&csv_path)?;
    manifest.output(&json_path)?;
    manifest.write(&sidecar(&args.out))?;

    print!("{}", table.to_text());
    for f in &table.failures {
        eprintln!("failed: {}: {}", f.request_id, f.error);
    }
    Ok(())
}

/// Re-runs the command recorded in a manifest with its outputs redirected
/// into `out_dir`, then compares output hashes. Returns whether every output
/// matched.
pub fn replay(args: &ReplayArgs) -> Result<bool> {
    require_file(&args.manifest, "manifest")?;
    let manifest = RunManifest::load(&args.manifest)?;
    for input in &manifest.inputs {
        let path = manifest.cwd.join(&input.path);
        let actual = sha256_file(&path).with_context(|| format!("hashing input {}", path.display()))?;
        if actual != input.sha256 {
            bail!("input {} changed since the recorded run", path.display());
        }
    }
    create_dir(&args.out_dir)?;
    let out_dir = std::fs::canonicalize(&args.out_dir)?;
    let argv = manifest.redirected_argv(&out_dir)?;
    let exe = std::env::current_exe().context("locating the swea executable")?;
    let status = Process::new(exe)
        .args(&argv)
        .current_dir(&manifest.cwd)
        .status()
        .context("spawning the replayed command")?;
    if !status.success() {
        bail!("replayed command exited with {status}");
    }

    let mut all_match = true;
    for output in &manifest.outputs {
        let name = output
            .path
            .file_name()
            .with_context(|| format!("output {} has no file name", output.path.display()))?;
        let replayed = out_dir.join(name);
        let actual = sha256_file(&replayed)?;
        let same = actual == output.sha256;
        all_match &= same;
        println!("{} {}", if same { "identical" } else { "DIFFERS  " }, replayed.display());
    }
    Ok(all_match)
}
