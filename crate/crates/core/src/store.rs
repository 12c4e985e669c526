// SPDX-License-Identifier: MIT OR Apache-2.0

//! The editing-embeddings collection: per-subject delta matrices keyed by the
//! subject's token ids joined with `_`, plus the log of every request applied.
//!
//! # File format (`SWEA1`)
//!
//! ```text
//! magic      5 bytes "SWEA1"
//! count      u32 LE
//! count x {  key_len u32 LE | key UTF-8 | rows u32 LE | cols u32 LE | rows*cols f32 LE (row-major) }
//! meta_len   u32 LE
//! meta       UTF-8 JSON {"vocab_hash", "request_log", "provenance"}
//! ```
//!
//! Entries are written in key order, so files do not depend on insertion
//! order.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::osfusion::{context_prefixes, fuse_request, EditRequest, FusionConfig, FusionSummary, RequestFailure};
use crate::toylm::{LanguageModel, TokenId, Tokenizer};

pub const STORE_MAGIC: &[u8; 5] = b"SWEA1";

/// Canonical key of a subject: decimal token ids joined by `_`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EditKey {
    key: String,
    token_ids: Vec<TokenId>,
}

impl EditKey {
    pub fn as_str(&self) -> &str {
        &self.key
    }

    pub fn token_ids(&self) -> &[TokenId] {
        &self.token_ids
    }

    /// Number of subject tokens.
    pub fn token_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Parses a canonical key string.
    pub fn parse(key: &str) -> Result<Self> {
        let ids = key
            .split('_')
            .map(|part| {
                let canonical = !part.is_empty()
                    && part.bytes().all(|b| b.is_ascii_digit())
                    && (part == "0" || !part.starts_with('0'));
                if !canonical {
                    return Err(Error::format("edit key", format!("{key:?}")));
                }
                part.parse::<TokenId>()
                    .map_err(|_| Error::format("edit key", format!("{key:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        make_key(&ids)
    }
}

impl std::fmt::Display for EditKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.key)
    }
}

pub fn make_key(token_ids: &[TokenId]) -> Result<EditKey> {
    if token_ids.is_empty() {
        return Err(Error::Empty("edit key token ids"));
    }
    let key = token_ids
        .iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join("_");
    Ok(EditKey {
        key,
        token_ids: token_ids.to_vec(),
    })
}

/// Where an entry came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub request_id: String,
    /// Position of the originating request in the store's request log.
    pub request_seq: u64,
    pub config: FusionConfig,
}

/// One subject's delta rows, stored at `f32` precision.
#[derive(Clone, Debug, PartialEq)]
pub struct EditingEmbedding {
    key: EditKey,
    cols: usize,
    deltas: Vec<f32>,
    pub provenance: Provenance,
}

impl EditingEmbedding {
    /// `deltas` must be `[key.token_len(), h]` and finite after rounding to `f32`.
    pub fn new(key: EditKey, deltas: &Tensor, provenance: Provenance) -> Result<Self> {
        let (rows, cols) = deltas.dims2()?;
        let values: Vec<f32> = deltas.data().iter().map(|&v| v as f32).collect();
        Self::from_raw(key, rows, cols, values, provenance)
    }

    fn from_raw(key: EditKey, rows: usize, cols: usize, deltas: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if rows != key.token_len() {
            return Err(Error::shape(
                "editing embedding",
                format!("{rows} delta rows for key {key} with {} tokens", key.token_len()),
            ));
        }
        if cols == 0 || deltas.len() != rows * cols {
            return Err(Error::shape("editing embedding", format!("{rows}x{cols} with {} values", deltas.len())));
        }
        if deltas.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("deltas for key {key}")));
        }
        Ok(Self {
            key,
            cols,
            deltas,
            provenance,
        })
    }

    pub fn key(&self) -> &EditKey {
        &self.key
    }

    pub fn rows(&self) -> usize {
        self.key.token_len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn raw_deltas(&self) -> &[f32] {
        &self.deltas
    }

    pub fn deltas(&self) -> Tensor {
        Tensor::new(
            vec![self.rows(), self.cols],
            self.deltas.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated shape")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedRequest {
    pub seq: u64,
    pub request: EditRequest,
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    vocab_hash: Option<String>,
    request_log: Vec<LoggedRequest>,
    provenance: BTreeMap<String, Provenance>,
}

/// Keyed collection of editing embeddings. Later edits of the same subject
/// overwrite earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EditingStore {
    entries: BTreeMap<String, EditingEmbedding>,
    request_log: Vec<LoggedRequest>,
    vocab_hash: Option<String>,
    max_key_tokens: usize,
}

impl EditingStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty store bound to a model vocabulary.
    pub fn for_vocab(tokenizer: &Tokenizer) -> Self {
        Self {
            vocab_hash: Some(tokenizer.vocab_hash()),
            ..Self::default()
        }
    }

    pub fn vocab_hash(&self) -> Option<&str> {
        self.vocab_hash.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&EditingEmbedding> {
        self.entries.get(key)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Entries in key order.
    pub fn entries(&self) -> impl Iterator<Item = &EditingEmbedding> {
        self.entries.values()
    }

    pub fn request_log(&self) -> &[LoggedRequest] {
        &self.request_log
    }

    /// Longest key, in tokens.
    pub fn max_key_tokens(&self) -> usize {
        self.max_key_tokens
    }

    /// Appends `request` to the log without computing anything; returns its
    /// sequence number.
    pub fn log_request(&mut self, request: EditRequest) -> u64 {
        let seq = self.request_log.last().map_or(0, |r| r.seq + 1);
        self.request_log.push(LoggedRequest { seq, request });
        seq
    }

    /// Inserts `embedding` (replacing any entry with the same key) and logs
    /// the request that produced it.
    pub fn upsert(&mut self, mut embedding: EditingEmbedding, request: EditRequest) {
        embedding.provenance.request_id = request.id.clone();
        embedding.provenance.request_seq = self.log_request(request);
        self.insert_entry(embedding);
    }

    fn insert_entry(&mut self, embedding: EditingEmbedding) {
        self.max_key_tokens = self.max_key_tokens.max(embedding.rows());
        self.entries.insert(embedding.key.key.clone(), embedding);
    }

    /// Latest logged request per subject key whose entry is missing or was
    /// produced by an older request. Requests whose subject cannot be
    /// tokenized are returned as failures.
    pub fn stale_requests(&self, tokenizer: &Tokenizer) -> (Vec<(EditKey, LoggedRequest)>, Vec<RequestFailure>) {
        let mut latest: BTreeMap<String, (EditKey, &LoggedRequest)> = BTreeMap::new();
        let mut failures = Vec::new();
        for logged in &self.request_log {
            match tokenizer.encode(&logged.request.subject).and_then(|ids| make_key(&ids)) {
                Ok(key) => {
                    latest.insert(key.key.clone(), (key, logged));
                }
                Err(e) => failures.push(RequestFailure {
                    request_id: logged.request.id.clone(),
                    error: e.to_string(),
                }),
            }
        }
        let mut stale: Vec<_> = latest
            .into_values()
            .filter(|(key, logged)| {
                self.entries
                    .get(&key.key)
                    .is_none_or(|e| e.provenance.request_seq != logged.seq)
            })
            .map(|(k, l)| (k, l.clone()))
            .collect();
        stale.sort_by_key(|(_, l)| l.seq);
        (stale, failures)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&u32_len(self.entries.len())?.to_le_bytes());
        for e in self.entries.values() {
            let key = e.key.key.as_bytes();
            out.extend_from_slice(&u32_len(key.len())?.to_le_bytes());
            out.extend_from_slice(key);
            out.extend_from_slice(&u32_len(e.rows())?.to_le_bytes());
            out.extend_from_slice(&u32_len(e.cols)?.to_le_bytes());
            for v in &e.deltas {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = StoreMeta {
            vocab_hash: self.vocab_hash.clone(),
            request_log: self.request_log.clone(),
            provenance: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), e.provenance.clone()))
                .collect(),
        };
        let json = serde_json::to_vec(&meta)?;
        out.extend_from_slice(&u32_len(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(5)? != STORE_MAGIC {
            return Err(Error::format("store", "bad magic"));
        }
        let count = r.u32()? as usize;
        let mut raw = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let key_len = r.u32()? as usize;
            let key = std::str::from_utf8(r.take(key_len)?)
                .map_err(|_| Error::format("store", "key is not UTF-8"))?;
            let key = EditKey::parse(key)?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format("store", "entry size overflow"))?;
            let deltas = r
                .take(n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect::<Vec<_>>();
            raw.push((key, rows, cols, deltas));
        }
        let meta_len = r.u32()? as usize;
        let meta: StoreMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::format("store", format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::format("store", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut store = Self {
            vocab_hash: meta.vocab_hash,
            request_log: meta.request_log,
            ..Self::default()
        };
        let mut provenance = meta.provenance;
        for (key, rows, cols, deltas) in raw {
            let prov = provenance
                .remove(key.as_str())
                .ok_or_else(|| Error::format("store", format!("no provenance for key {key}")))?;
            let e = EditingEmbedding::from_raw(key, rows, cols, deltas, prov)
                .map_err(|e| Error::format("store", e.to_string()))?;
            if store.entries.contains_key(e.key.as_str()) {
                return Err(Error::format("store", format!("duplicate key {}", e.key)));
            }
            store.insert_entry(e);
        }
        if !provenance.is_empty() {
            return Err(Error::format("store", "provenance for unknown keys"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format("store", format!("length {n} exceeds u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("store", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// What [`recompute_for_sequential`] did.
#[derive(Clone, Debug, Default)]
pub struct RecomputeReport {
    pub summaries: Vec<FusionSummary>,
    pub failures: Vec<RequestFailure>,
}

/// Regenerates the entry of every subject whose latest logged request has not
/// been fused yet. Fusion always runs against `model` as given (the pristine
/// pretrained model); entries of other subjects are left untouched.
pub fn recompute_for_sequential(
    store: &mut EditingStore,
    model: &LanguageModel,
    config: &FusionConfig,
) -> Result<RecomputeReport> {
    config.validate()?;
    if store.request_log.is_empty() {
        return Err(Error::Empty("request log"));
    }
    let (stale, mut failures) = store.stale_requests(&model.tokenizer);
    let mut report = RecomputeReport::default();
    if stale.is_empty() {
        report.failures = failures;
        return Ok(report);
    }
    let prefixes = context_prefixes(model, config)?;
    let results: Vec<_> = stale
        .par_iter()
        .map(|(_, logged)| fuse_request(model, &logged.request, &prefixes, config))
        .collect();
    for ((key, logged), result) in stale.into_iter().zip(results) {
        let fused = result.and_then(|f| {
            let prov = Provenance {
                request_id: logged.request.id.clone(),
                request_seq: logged.seq,
                config: config.clone(),
            };
            let emb = EditingEmbedding::new(key, &f.editing_embedding, prov)?;
            Ok((emb, f.summary))
        });
        match fused {
            Ok((emb, summary)) => {
                store.insert_entry(emb);
                report.summaries.push(summary);
            }
            Err(e) => failures.push(RequestFailure {
                request_id: logged.request.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    report.failures = failures;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prov() -> Provenance {
        Provenance {
            request_id: "r".into(),
            request_seq: 0,
            config: FusionConfig::default(),
        }
    }

    fn request(id: &str, subject: &str) -> EditRequest {
        EditRequest {
            id: id.into(),
            subject: subject.into(),
            prompt: format!("{subject} lives in"),
            original_object: "a".into(),
            new_object: "b".into(),
            paraphrases: vec![],
            neighborhood: vec![],
        }
    }

    fn emb(ids: &[TokenId], fill: f64) -> EditingEmbedding {
        let key = make_key(ids).unwrap();
        EditingEmbedding::new(key, &Tensor::full(&[ids.len(), 4], fill), prov()).unwrap()
    }

    #[test]
    fn key_examples() {
        assert_eq!(make_key(&[2986, 6033]).unwrap().as_str(), "2986_6033");
        assert_eq!(make_key(&[5]).unwrap().as_str(), "5");
        assert_eq!(make_key(&[1, 22, 333]).unwrap().as_str(), "1_22_333");
        assert!(make_key(&[]).is_err());
        assert_eq!(EditKey::parse("1_22_333").unwrap().token_ids(), &[1, 22, 333]);
        for bad in ["", "_1", "1_", "1__2", "01", "a", "1_-2"] {
            assert!(EditKey::parse(bad).is_err(), "{bad:?}");
        }
    }

    proptest! {
        #[test]
        fn keys_are_injective(a in prop::collection::vec(0u32..100_000, 1..6),
                              b in prop::collection::vec(0u32..100_000, 1..6)) {
            let (ka, kb) = (make_key(&a).unwrap(), make_key(&b).unwrap());
            prop_assert_eq!(ka.as_str() == kb.as_str(), a == b);
            prop_assert_eq!(EditKey::parse(ka.as_str()).unwrap(), ka);
        }

        #[test]
        fn store_file_round_trips(entries in prop::collection::vec(
            (prop::collection::vec(0u32..5000, 1..4), prop::collection::vec(-10.0f64..10.0, 12)), 0..12)) {
            let mut s = EditingStore::new();
            for (i, (ids, vals)) in entries.iter().enumerate() {
                let rows = ids.len();
                let t = Tensor::new(vec![rows, 12 / 4 * 4 / 4], vals[..rows * 3].to_vec()).unwrap();
                let e = EditingEmbedding::new(make_key(ids).unwrap(), &t, prov()).unwrap();
                s.upsert(e, request(&i.to_string(), "x"));
            }
            let bytes = s.encode().unwrap();
            let back = EditingStore::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode().unwrap(), bytes);
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn rows_must_match_key_tokens() {
        let key = make_key(&[1, 2]).unwrap();
        assert!(EditingEmbedding::new(key.clone(), &Tensor::zeros(&[3, 4]), prov()).is_err());
        let nan = Tensor::full(&[2, 4], f64::NAN);
        assert!(matches!(EditingEmbedding::new(key.clone(), &nan, prov()), Err(Error::NonFinite(_))));
        let huge = Tensor::full(&[2, 4], 1e300);
        assert!(EditingEmbedding::new(key, &huge, prov()).is_err());
    }

    #[test]
    fn upsert_lookup_and_overwrite() {
        let mut s = EditingStore::new();
        let first = emb(&[7, 8], 0.25);
        s.upsert(first.clone(), request("a", "x"));
        assert_eq!(s.get("7_8").unwrap().raw_deltas(), first.raw_deltas());
        s.upsert(emb(&[7, 8], -1.5), request("b", "x"));
        assert_eq!(s.len(), 1);
        assert_eq!(s.get("7_8").unwrap().raw_deltas()[0], -1.5);
        assert_eq!(s.get("7_8").unwrap().provenance.request_id, "b");
        assert_eq!(s.request_log().len(), 2);
    }

    #[test]
    fn thousand_distinct_keys() {
        let mut s = EditingStore::new();
        for i in 0..1000u32 {
            s.upsert(emb(&[i, i + 1], 0.0), request(&i.to_string(), "x"));
        }
        assert_eq!(s.len(), 1000);
    }

    #[test]
    fn insertion_order_does_not_change_contents() {
        let mut a = EditingStore::new();
        let mut b = EditingStore::new();
        a.insert_entry(emb(&[1], 1.0));
        a.insert_entry(emb(&[2, 3], 2.0));
        b.insert_entry(emb(&[2, 3], 2.0));
        b.insert_entry(emb(&[1], 1.0));
        assert_eq!(a.encode().unwrap(), b.encode().unwrap());
    }

    #[test]
    fn empty_and_hundred_entry_round_trips() {
        let empty = EditingStore::new();
        assert_eq!(EditingStore::decode(&empty.encode().unwrap()).unwrap(), empty);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = EditingStore::new();
        for i in 0..100u32 {
            let len = rng.gen_range(1..4);
            let ids: Vec<TokenId> = (0..len).map(|j| i * 10 + j).collect();
            let t = Tensor::from_fn(&[len as usize, 16], |_| rng.gen_range(-3.0..3.0));
            let e = EditingEmbedding::new(make_key(&ids).unwrap(), &t, prov()).unwrap();
            s.upsert(e, request(&format!("r{i}"), "x"));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.swea");
        s.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = EditingStore::load(&path).unwrap();
        assert_eq!(back, s);
        let again = dir.path().join("again.swea");
        back.save(&again).unwrap();
        assert_eq!(std::fs::read(&again).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_fail_cleanly() {
        let mut s = EditingStore::new();
        s.upsert(emb(&[4, 5], 0.5), request("a", "x"));
        let bytes = s.encode().unwrap();

        let mut bad = bytes.clone();
        bad[..5].copy_from_slice(b"SWEA2");
        assert!(matches!(EditingStore::decode(&bad), Err(Error::Format { .. })));
        for cut in [0, 3, 9, 20, bytes.len() - 1] {
            assert!(EditingStore::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(EditingStore::decode(&trailing).is_err());
    }

    #[test]
    fn stale_requests_track_the_latest_per_subject() {
        let tok = Tokenizer::from_texts(["ann lee lives in a b", "bob lives in"]);
        let mut s = EditingStore::for_vocab(&tok);
        s.log_request(request("1", "ann lee"));
        s.log_request(request("2", "bob"));
        s.log_request(request("3", "ann lee"));
        s.log_request(request("4", "zed"));
        let (stale, failures) = s.stale_requests(&tok);
        let ids: Vec<_> = stale.iter().map(|(_, l)| l.request.id.as_str()).collect();
        assert_eq!(ids, ["2", "3"]);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].request_id, "4");
    }
}
