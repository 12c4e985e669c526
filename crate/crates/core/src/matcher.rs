// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-level longest matching of stored subject keys and additive patching
//! of the matched span's input embeddings.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::store::{EditKey, EditingStore};
use crate::toylm::{apply_span_patch, SpanPatch, TokenId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    pub key: EditKey,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

/// The contiguous span of `ids` whose key is stored and has the longest key
/// string (in bytes). Ties go to the earliest start.
pub fn find_longest_match(ids: &[TokenId], store: &EditingStore) -> Option<MatchResult> {
    if store.is_empty() {
        return None;
    }
    let max_tokens = store.max_key_tokens();
    let mut best: Option<(usize, usize, usize)> = None;
    let mut cur = String::new();
    for k in 0..ids.len() {
        cur.clear();
        for j in k..ids.len().min(k + max_tokens) {
            if j > k {
                cur.push('_');
            }
            cur.push_str(&ids[j].to_string());
            if store.contains_key(&cur) && best.is_none_or(|(_, _, len)| cur.len() > len) {
                best = Some((k, j + 1, cur.len()));
            }
        }
    }
    best.map(|(start, end, _)| MatchResult {
        key: store
            .get(&join(&ids[start..end]))
            .expect("matched key is stored")
            .key()
            .clone(),
        start,
        end,
    })
}

fn join(ids: &[TokenId]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("_")
}

/// Adds the stored delta of each row's longest match to that row's
/// embeddings `[len, h]`. Rows of one token or fewer are left alone.
pub fn apply_patches(
    batch_ids: &[Vec<TokenId>],
    embeddings: &mut [Tensor],
    store: &EditingStore,
) -> Result<Vec<Option<MatchResult>>> {
    if batch_ids.len() != embeddings.len() {
        return Err(Error::shape(
            "apply_patches",
            format!("{} id rows vs {} embedding rows", batch_ids.len(), embeddings.len()),
        ));
    }
    let mut out = Vec::with_capacity(batch_ids.len());
    for (ids, x) in batch_ids.iter().zip(embeddings.iter_mut()) {
        let m = patch_row(ids, x, store)?;
        out.push(m);
    }
    Ok(out)
}

/// [`apply_patches`] for a single row.
pub fn patch_row(ids: &[TokenId], x: &mut Tensor, store: &EditingStore) -> Result<Option<MatchResult>> {
    if ids.len() <= 1 {
        return Ok(None);
    }
    let Some(m) = find_longest_match(ids, store) else {
        return Ok(None);
    };
    let entry = store.get(m.key.as_str()).expect("matched key is stored");
    if entry.rows() != m.end - m.start {
        return Err(Error::format(
            "store",
            format!("key {} has {} delta rows for a {}-token span", m.key, entry.rows(), m.end - m.start),
        ));
    }
    apply_span_patch(
        x,
        &SpanPatch {
            start: m.start,
            deltas: entry.deltas(),
        },
    )?;
    Ok(Some(m))
}

/// The patch the stored edits apply to `ids`, if any.
pub fn patch_for(ids: &[TokenId], store: &EditingStore) -> Option<SpanPatch> {
    if ids.len() <= 1 {
        return None;
    }
    let m = find_longest_match(ids, store)?;
    let entry = store.get(m.key.as_str())?;
    Some(SpanPatch {
        start: m.start,
        deltas: entry.deltas(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::osfusion::FusionConfig;
    use crate::store::{make_key, EditingEmbedding, Provenance};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(keys: &[Vec<TokenId>], h: usize) -> EditingStore {
        let mut s = EditingStore::new();
        for (i, ids) in keys.iter().enumerate() {
            let key = make_key(ids).unwrap();
            let t = Tensor::from_fn(&[ids.len(), h], |j| (i * 100 + j) as f64 * 0.25 + 1.0);
            let prov = Provenance {
                request_id: String::new(),
                request_seq: 0,
                config: FusionConfig::default(),
            };
            let e = EditingEmbedding::new(key, &t, prov).unwrap();
            s.upsert(e, Default::default());
        }
        s
    }

    /// Every contiguous span, no length bound, same measure and tie rule.
    fn brute_force(ids: &[TokenId], store: &EditingStore) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize, usize)> = None;
        for start in 0..ids.len() {
            for end in start + 1..=ids.len() {
                let key = join(&ids[start..end]);
                if !store.contains_key(&key) {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, be, bl)) => key.len() > bl || (key.len() == bl && (start, end) < (bs, be)),
                };
                if better {
                    best = Some((start, end, key.len()));
                }
            }
        }
        best.map(|(s, e, _)| (s, e))
    }

    #[test]
    fn spec_examples() {
        let s = store_with(&[vec![5], vec![5, 7]], 2);
        let m = find_longest_match(&[5, 7, 9], &s).unwrap();
        assert_eq!((m.key.as_str(), m.start, m.end), ("5_7", 0, 2));

        assert!(find_longest_match(&[1, 2, 3], &EditingStore::new()).is_none());

        let s = store_with(&[vec![2986, 6033]], 2);
        let m = find_longest_match(&[1, 2986, 6033, 4], &s).unwrap();
        assert_eq!((m.start, m.end), (1, 3));
    }

    #[test]
    fn string_length_beats_token_count() {
        // "1000" (4 bytes, one token) outranks "1_2" (3 bytes, two tokens).
        let s = store_with(&[vec![1, 2], vec![1000]], 2);
        let m = find_longest_match(&[1, 2, 1000], &s).unwrap();
        assert_eq!(m.key.as_str(), "1000");
        // Equal lengths: earliest start wins.
        let s = store_with(&[vec![12], vec![34]], 2);
        assert_eq!(find_longest_match(&[34, 12], &s).unwrap().start, 0);
    }

    #[test]
    fn fuzz_against_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..10_000 {
            let (s, ids) = random_case(&mut rng);
            let got = find_longest_match(&ids, &s).map(|m| (m.start, m.end));
            assert_eq!(got, brute_force(&ids, &s), "case {case}: ids {ids:?}");
        }
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (EditingStore, Vec<TokenId>) {
        // Small alphabets with mixed digit counts make overlaps and ties common.
        let alphabet: [TokenId; 8] = [1, 2, 3, 12, 21, 123, 7, 1000];
        let pick = |rng: &mut ChaCha8Rng| alphabet[rng.gen_range(0..alphabet.len())];
        let n_keys = rng.gen_range(0..6);
        let keys: Vec<Vec<TokenId>> = (0..n_keys)
            .map(|_| (0..rng.gen_range(1..4)).map(|_| pick(rng)).collect())
            .collect();
        let len = rng.gen_range(0..10);
        let ids = (0..len).map(|_| pick(rng)).collect();
        (store_with(&keys, 1), ids)
    }

    #[test]
    fn patches_only_the_matched_span() {
        let s = store_with(&[vec![4, 5]], 3);
        let ids = vec![vec![1, 4, 5, 6], vec![1, 6, 7], vec![4]];
        let base: Vec<Tensor> = ids.iter().map(|r| Tensor::full(&[r.len(), 3], 0.5)).collect();
        let mut x = base.clone();
        let matches = apply_patches(&ids, &mut x, &s).unwrap();
        assert!(matches[0].is_some() && matches[1].is_none() && matches[2].is_none());
        let delta = s.get("4_5").unwrap().deltas();
        for r in 0..4 {
            for d in 0..3 {
                let expect = if (1..3).contains(&r) {
                    0.5 + delta.row(r - 1)[d]
                } else {
                    0.5
                };
                assert_eq!(x[0].row(r)[d], expect);
            }
        }
        assert_eq!(x[1], base[1]);
        assert_eq!(x[2], base[2]);
    }

    #[test]
    fn single_token_rows_are_skipped() {
        let s = store_with(&[vec![4]], 2);
        let mut x = vec![Tensor::zeros(&[1, 2])];
        assert_eq!(apply_patches(&[vec![4]], &mut x, &s).unwrap(), vec![None]);
        assert_eq!(x[0], Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let s = store_with(&[vec![4, 5]], 3);
        let mut x = vec![Tensor::zeros(&[3, 2])];
        assert!(apply_patches(&[vec![1, 4, 5]], &mut x, &s).is_err());
        assert!(apply_patches(&[vec![1, 4, 5], vec![1]], &mut x, &s).is_err());
    }

    proptest! {
        #[test]
        fn matching_is_deterministic_and_valid(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (s, ids) = random_case(&mut rng);
            let a = find_longest_match(&ids, &s);
            prop_assert_eq!(&a, &find_longest_match(&ids, &s));
            if let Some(m) = a {
                prop_assert_eq!(m.end - m.start, m.key.token_len());
                prop_assert_eq!(&ids[m.start..m.end], m.key.token_ids());
            }
        }
    }
}
