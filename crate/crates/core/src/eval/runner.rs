// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::osfusion::{fuse_all, EditRequest, FusionConfig, RequestFailure};
use crate::store::{make_key, recompute_for_sequential, EditingEmbedding, EditingStore, Provenance};
use crate::toylm::LanguageModel;

use super::metrics::{evaluate, EditMetrics};

/// Stage sizes of a sequential-batch run. Parses `"10x2"` (10 stages of 2)
/// or a comma list of sizes such as `"5,5,10"`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub stages: Vec<usize>,
}

impl Schedule {
    pub fn single(n: usize) -> Self {
        Self { stages: vec![n] }
    }

    pub fn uniform(stages: usize, size: usize) -> Self {
        Self {
            stages: vec![size; stages],
        }
    }

    pub fn total(&self) -> usize {
        self.stages.iter().sum()
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.stages.contains(&0) {
            return Err(Error::InvalidConfig("schedule stages must be non-empty".into()));
        }
        if self.total() != n {
            return Err(Error::InvalidConfig(format!(
                "schedule covers {} requests but {n} were given",
                self.total()
            )));
        }
        Ok(())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("bad schedule {s:?}, expected e.g. \"10x2\""));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        if let Some((a, b)) = s.split_once('x') {
            return Ok(Self::uniform(num(a)?, num(b)?));
        }
        let stages = s.split(',').map(num).collect::<Result<Vec<_>>>()?;
        Ok(Self { stages })
    }
}

impl std::fmt::Display for Schedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.stages.as_slice() {
            [first, rest @ ..] if rest.iter().all(|s| s == first) => write!(f, "{}x{}", self.stages.len(), first),
            s => write!(f, "{}", s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    /// Requests edited so far, including this stage.
    pub edited: usize,
    pub metrics: EditMetrics,
    pub failures: Vec<RequestFailure>,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub schedule: Schedule,
    pub stages: Vec<StageReport>,
    pub store: EditingStore,
}

impl RunReport {
    pub fn final_metrics(&self) -> Option<&EditMetrics> {
        self.stages.last().map(|s| &s.metrics)
    }
}

pub fn run_batch(model: &LanguageModel, requests: &[EditRequest], config: &FusionConfig) -> Result<RunReport> {
    run_sequential_batch(model, requests, &Schedule::single(requests.len()), config)
}

pub fn run_sequential(model: &LanguageModel, requests: &[EditRequest], config: &FusionConfig) -> Result<RunReport> {
    run_sequential_batch(model, requests, &Schedule::uniform(requests.len(), 1), config)
}

/// Edits `requests` stage by stage into one store, evaluating all requests
/// edited so far after each stage.
pub fn run_sequential_batch(
    model: &LanguageModel,
    requests: &[EditRequest],
    schedule: &Schedule,
    config: &FusionConfig,
) -> Result<RunReport> {
    config.validate()?;
    if requests.is_empty() {
        return Err(Error::Empty("requests"));
    }
    schedule.check(requests.len())?;
    let mut store = EditingStore::for_vocab(&model.tokenizer);
    let mut stages = Vec::with_capacity(schedule.stages.len());
    let mut edited = 0;
    for (stage, &size) in schedule.stages.iter().enumerate() {
        for r in &requests[edited..edited + size] {
            store.log_request(r.clone());
        }
        edited += size;
        let report = recompute_for_sequential(&mut store, model, config)?;
        let metrics = evaluate(model, &store, &requests[..edited])?;
        stages.push(StageReport {
            stage,
            edited,
            metrics,
            failures: report.failures,
        });
    }
    Ok(RunReport {
        schedule: schedule.clone(),
        stages,
        store,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Gamma,
    T,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(Self::Gamma),
            "t" => Ok(Self::T),
            _ => Err(Error::InvalidConfig(format!("unknown sweep axis {s:?}, expected gamma or t"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gamma => "gamma",
            Self::T => "t",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: EditMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<RequestFailure>,
}

/// One batch edit per value of `axis`, with everything else from `config`.
/// Optimization and attribution do not depend on either axis and run once.
pub fn sweep(
    model: &LanguageModel,
    requests: &[EditRequest],
    axis: SweepAxis,
    values: &[f64],
    config: &FusionConfig,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Empty("sweep values"));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let c = match axis {
                SweepAxis::Gamma => FusionConfig { gamma: v, ..config.clone() },
                SweepAxis::T => FusionConfig { t_threshold: v, ..config.clone() },
            };
            c.validate().map(|_| c)
        })
        .collect::<Result<Vec<_>>>()?;
    let (fused, failures) = fuse_all(model, requests, config)?;
    let mut rows = Vec::with_capacity(values.len());
    for (c, &value) in configs.iter().zip(values) {
        let mut store = EditingStore::for_vocab(&model.tokenizer);
        for (request, f) in &fused {
            let e = f.parts.fuse_with(c.gamma, c.t_threshold)?;
            let key = make_key(&f.parts.tokenized.subject)?;
            let provenance = Provenance {
                request_id: request.id.clone(),
                request_seq: 0,
                config: c.clone(),
            };
            store.upsert(EditingEmbedding::new(key, &e, provenance)?, (*request).clone());
        }
        let metrics = evaluate(model, &store, requests)?;
        rows.push(SweepRow { value, metrics });
    }
    Ok(SweepTable { axis, rows, failures })
}

const METRIC_HEADER: [&str; 5] = ["efficacy", "efficacy_argmax", "generalization", "specificity", "score"];

fn metric_fields(m: &EditMetrics) -> [String; 5] {
    [m.efficacy, m.efficacy_argmax, m.generalization, m.specificity, m.score].map(|v| format!("{v:.6}"))
}

fn text_table(first: [&str; 2], rows: impl Iterator<Item = ([String; 2], [String; 5])>) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
        first[0], first[1], "eff", "eff_argmx", "gen", "spec", "score"
    );
    for (a, m) in rows {
        let pct = |s: &str| format!("{:.1}", s.parse::<f64>().unwrap_or(f64::NAN) * 100.0);
        let _ = writeln!(
            out,
            "{:>8} {:>8} {:>9} {:>9} {:>9} {:>9} {:>9}",
            a[0],
            a[1],
            pct(&m[0]),
            pct(&m[1]),
            pct(&m[2]),
            pct(&m[3]),
            pct(&m[4])
        );
    }
    out
}

fn csv_table(first: [&str; 2], rows: impl Iterator<Item = ([String; 2], [String; 5])>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::format("csv", e.to_string());
    w.write_record(first.iter().chain(METRIC_HEADER.iter())).map_err(csv_err)?;
    for (a, m) in rows {
        w.write_record(a.iter().chain(m.iter())).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

impl RunReport {
    fn table_rows(&self) -> impl Iterator<Item = ([String; 2], [String; 5])> + '_ {
        self.stages
            .iter()
            .map(|s| ([s.stage.to_string(), s.edited.to_string()], metric_fields(&s.metrics)))
    }

    /// Metrics per stage, in percent.
    pub fn to_text(&self) -> String {
        text_table(["stage", "edited"], self.table_rows())
    }

    pub fn to_csv(&self) -> Result<String> {
        csv_table(["stage", "edited"], self.table_rows())
    }

    /// Stage reports plus the schedule, without the store.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Json<'a> {
            schedule: String,
            stages: &'a [StageReport],
        }
        Ok(serde_json::to_string_pretty(&Json {
            schedule: self.schedule.to_string(),
            stages: &self.stages,
        })?)
    }
}

impl SweepTable {
    fn table_rows(&self) -> impl Iterator<Item = ([String; 2], [String; 5])> + '_ {
        self.rows
            .iter()
            .map(|r| ([self.axis.to_string(), r.value.to_string()], metric_fields(&r.metrics)))
    }

    pub fn to_text(&self) -> String {
        text_table(["axis", "value"], self.table_rows())
    }

    pub fn to_csv(&self) -> Result<String> {
        csv_table(["axis", "value"], self.table_rows())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
