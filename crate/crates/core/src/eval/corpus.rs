// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic counterfactual corpus: invented subjects, five relations with
//! three prompt templates each, and disjoint subject pools for edits and
//! neighborhood probes.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::osfusion::{EditRequest, NeighborhoodProbe};
use crate::toylm::TrainingSet;

struct Relation {
    name: &'static str,
    templates: [&'static str; 3],
    objects: &'static [&'static str],
}

const RELATIONS: &[Relation] = &[
    Relation {
        name: "birthplace",
        templates: ["{} was born in", "the birthplace of {} is", "{} is a native of"],
        objects: &[
            "paris", "london", "berlin", "tokyo", "rome", "madrid", "cairo", "lima", "oslo",
            "vienna", "dublin", "athens", "new york", "hong kong", "buenos aires",
        ],
    },
    Relation {
        name: "profession",
        templates: ["{} works as a", "the profession of {} is", "by trade {} is a"],
        objects: &[
            "doctor", "lawyer", "farmer", "pilot", "teacher", "baker", "painter", "sailor",
            "nurse", "chemist", "architect", "plumber",
        ],
    },
    Relation {
        name: "language",
        templates: ["{} speaks", "the mother tongue of {} is", "{} grew up speaking"],
        objects: &[
            "french", "german", "spanish", "italian", "dutch", "greek", "russian", "arabic",
            "hindi", "swahili", "polish", "turkish",
        ],
    },
    Relation {
        name: "instrument",
        templates: ["{} plays the", "the instrument of {} is the", "on stage {} plays the"],
        objects: &[
            "piano", "violin", "guitar", "flute", "drums", "cello", "harp", "trumpet", "oboe",
            "banjo",
        ],
    },
    Relation {
        name: "sport",
        templates: ["{} competes in", "the sport of {} is", "every weekend {} plays"],
        objects: &[
            "tennis", "rugby", "hockey", "cricket", "golf", "chess", "boxing", "rowing",
            "table tennis", "water polo",
        ],
    },
];

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kl",
    "tr", "sh", "th",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "x", "k", "l", "m"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Edit,
    Neighborhood,
}

/// One `(subject, relation, object)` fact with all its prompt renderings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub relation: String,
    pub object: String,
    /// Template renderings with the subject filled in, without the object.
    pub prompts: Vec<String>,
    pub pool: Pool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactCorpus {
    pub facts: Vec<Fact>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusOptions {
    /// Fraction of subjects made of two words.
    pub multi_token_fraction: f64,
    /// Fraction of facts placed in the edit pool.
    pub edit_fraction: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            multi_token_fraction: 0.4,
            edit_fraction: 0.5,
        }
    }
}

fn syllable(rng: &mut impl Rng) -> String {
    format!(
        "{}{}{}",
        ONSETS.choose(rng).expect("non-empty"),
        VOWELS.choose(rng).expect("non-empty"),
        CODAS.choose(rng).expect("non-empty")
    )
}

fn reserved_words() -> BTreeSet<String> {
    RELATIONS
        .iter()
        .flat_map(|r| r.templates.iter().copied().chain(r.objects.iter().copied()))
        .flat_map(str::split_whitespace)
        .chain(["{}", "."])
        .map(str::to_owned)
        .collect()
}

/// Draws a fresh word of `syllables` syllables not yet in `used`.
fn fresh_word(rng: &mut impl Rng, syllables: usize, used: &mut BTreeSet<String>) -> String {
    loop {
        let w: String = (0..syllables).map(|_| syllable(rng)).collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

/// Deterministic corpus of `n_facts` facts about unique subjects.
pub fn generate_corpus(n_facts: usize, seed: u64) -> Result<FactCorpus> {
    generate_corpus_with(n_facts, seed, CorpusOptions::default())
}

pub fn generate_corpus_with(n_facts: usize, seed: u64, options: CorpusOptions) -> Result<FactCorpus> {
    if n_facts == 0 {
        return Err(Error::Empty("corpus size"));
    }
    if !(0.0..=1.0).contains(&options.multi_token_fraction) || !(0.0..=1.0).contains(&options.edit_fraction) {
        return Err(Error::InvalidConfig("corpus fractions must lie in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = reserved_words();

    let n_multi = (n_facts as f64 * options.multi_token_fraction).ceil() as usize;
    let n_single = n_facts - n_multi.min(n_facts);
    // Name-part pools sized so that enough distinct pairs exist.
    let part_pool = ((n_multi as f64).sqrt().ceil() as usize + 2).max(2);
    let firsts: Vec<String> = (0..part_pool).map(|_| fresh_word(&mut rng, 2, &mut used)).collect();
    let lasts: Vec<String> = (0..part_pool).map(|_| fresh_word(&mut rng, 2, &mut used)).collect();

    let mut subjects: Vec<String> = (0..n_single).map(|_| fresh_word(&mut rng, 3, &mut used)).collect();
    let mut pairs = BTreeSet::new();
    while pairs.len() < n_multi.min(n_facts) {
        let f = rng.gen_range(0..firsts.len());
        let l = rng.gen_range(0..lasts.len());
        pairs.insert((f, l));
    }
    let mut pairs: Vec<_> = pairs.into_iter().collect();
    pairs.shuffle(&mut rng);
    subjects.extend(pairs.into_iter().map(|(f, l)| format!("{} {}", firsts[f], lasts[l])));
    subjects.shuffle(&mut rng);

    let n_edit = (n_facts as f64 * options.edit_fraction).round() as usize;
    let facts = subjects
        .into_iter()
        .enumerate()
        .map(|(i, subject)| {
            let rel = &RELATIONS[i % RELATIONS.len()];
            let object = rel.objects.choose(&mut rng).expect("non-empty").to_string();
            let prompts = rel.templates.iter().map(|t| t.replace("{}", &subject)).collect();
            Fact {
                subject,
                relation: rel.name.to_owned(),
                object,
                prompts,
                pool: if i < n_edit { Pool::Edit } else { Pool::Neighborhood },
            }
        })
        .collect();
    Ok(FactCorpus { facts })
}

impl FactCorpus {
    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Training sentences `"<prompt> <object> ."` for every rendering, plus
    /// recall probes.
    pub fn training_set(&self) -> TrainingSet {
        let mut set = TrainingSet::default();
        for f in &self.facts {
            for p in &f.prompts {
                set.sentences.push(format!("{p} {} .", f.object));
                set.probes.push((p.clone(), f.object.clone()));
            }
        }
        set
    }

    pub fn multi_token_fraction(&self) -> f64 {
        let multi = self
            .facts
            .iter()
            .filter(|f| f.subject.split_whitespace().count() >= 2)
            .count();
        multi as f64 / self.facts.len().max(1) as f64
    }

    /// Objects of `relation` that occur in the corpus (so they are in the
    /// vocabulary of a model trained on it), in first-seen order.
    fn objects_of(&self, relation: &str) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for f in self.facts.iter().filter(|f| f.relation == relation) {
            if !out.contains(&f.object.as_str()) {
                out.push(&f.object);
            }
        }
        out
    }

    /// Up to `n` counterfactual requests drawn from the edit pool. Each gets
    /// one prompt rendering, the other renderings as paraphrases, and two
    /// neighborhood probes about same-relation subjects from the other pool.
    pub fn generate_requests(&self, n: usize, seed: u64) -> Result<Vec<EditRequest>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edit: Vec<&Fact> = self.facts.iter().filter(|f| f.pool == Pool::Edit).collect();
        edit.shuffle(&mut rng);
        let mut out = Vec::with_capacity(n.min(edit.len()));
        for (i, fact) in edit.into_iter().take(n).enumerate() {
            let candidates: Vec<&str> = self
                .objects_of(&fact.relation)
                .into_iter()
                .filter(|o| *o != fact.object.as_str())
                .collect();
            let new_object = candidates
                .choose(&mut rng)
                .ok_or_else(|| Error::InvalidConfig(format!("relation {} has one object", fact.relation)))?
                .to_string();
            let k = rng.gen_range(0..fact.prompts.len());
            let paraphrases = (0..fact.prompts.len())
                .filter(|&j| j != k)
                .map(|j| fact.prompts[j].clone())
                .collect();
            let mut neighbors: Vec<&Fact> = self
                .facts
                .iter()
                .filter(|f| f.pool == Pool::Neighborhood && f.relation == fact.relation && f.object != new_object)
                .collect();
            neighbors.shuffle(&mut rng);
            let neighborhood = neighbors
                .into_iter()
                .take(2)
                .map(|f| NeighborhoodProbe {
                    prompt: f.prompts[rng.gen_range(0..f.prompts.len())].clone(),
                    object: f.object.clone(),
                })
                .collect();
            out.push(EditRequest {
                id: format!("case-{i}"),
                subject: fact.subject.clone(),
                prompt: fact.prompts[k].clone(),
                original_object: fact.object.clone(),
                new_object,
                paraphrases,
                neighborhood,
            });
        }
        Ok(out)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for f in &self.facts {
            out.push_str(&serde_json::to_string(f)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let facts = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::format("corpus jsonl", format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<Fact>>>()?;
        if facts.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        Ok(Self { facts })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::Tokenizer;

    #[test]
    fn deterministic_unique_and_multi_token() {
        let a = generate_corpus(200, 3).unwrap();
        assert_eq!(a, generate_corpus(200, 3).unwrap());
        assert_ne!(a, generate_corpus(200, 4).unwrap());
        let subjects: BTreeSet<_> = a.facts.iter().map(|f| &f.subject).collect();
        assert_eq!(subjects.len(), 200);
        assert!(a.multi_token_fraction() >= 0.3, "{}", a.multi_token_fraction());
        assert!(a.facts.iter().all(|f| f.prompts.len() >= 3));
    }

    #[test]
    fn subject_words_never_collide_with_templates() {
        let c = generate_corpus(200, 0).unwrap();
        let reserved = reserved_words();
        for f in &c.facts {
            for w in f.subject.split_whitespace() {
                assert!(!reserved.contains(w), "{w}");
            }
        }
        // Single-word subjects never reappear inside two-word subjects.
        let singles: BTreeSet<&str> = c
            .facts
            .iter()
            .filter(|f| !f.subject.contains(' '))
            .map(|f| f.subject.as_str())
            .collect();
        for f in c.facts.iter().filter(|f| f.subject.contains(' ')) {
            assert!(f.subject.split(' ').all(|w| !singles.contains(w)));
        }
    }

    #[test]
    fn requests_have_probes_from_the_other_pool() {
        let c = generate_corpus(200, 1).unwrap();
        let reqs = c.generate_requests(50, 2).unwrap();
        assert_eq!(reqs.len(), 50);
        let edit_subjects: BTreeSet<_> = c
            .facts
            .iter()
            .filter(|f| f.pool == Pool::Edit)
            .map(|f| f.subject.clone())
            .collect();
        for r in &reqs {
            assert!(edit_subjects.contains(&r.subject));
            assert_ne!(r.new_object, r.original_object);
            assert_eq!(r.paraphrases.len(), 2);
            assert!(r.paraphrases.iter().all(|p| p.contains(&r.subject)));
            assert_eq!(r.neighborhood.len(), 2);
            for n in &r.neighborhood {
                assert!(edit_subjects.iter().all(|s| !n.prompt.contains(s.as_str())));
                assert_ne!(n.object, r.new_object);
            }
        }
    }

    #[test]
    fn requests_stay_inside_the_training_vocabulary() {
        let c = generate_corpus(200, 0).unwrap();
        let tok = Tokenizer::from_texts(c.training_set().sentences.iter().map(String::as_str));
        for r in c.generate_requests(100, 1).unwrap() {
            for text in [&r.prompt, &r.new_object, &r.original_object]
                .into_iter()
                .chain(&r.paraphrases)
                .chain(r.neighborhood.iter().flat_map(|n| [&n.prompt, &n.object]))
            {
                tok.encode(text).unwrap();
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let c = generate_corpus(20, 5).unwrap();
        assert_eq!(FactCorpus::from_jsonl(&c.to_jsonl().unwrap()).unwrap(), c);
        assert!(generate_corpus(0, 1).is_err());
    }
}
