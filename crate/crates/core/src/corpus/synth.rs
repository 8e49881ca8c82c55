use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_words, standard_templates, Corpus, CorpusError, FactTriple, Result, OBJ, SUBJ};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub relations: usize,
    pub facts_per_relation: usize,
    pub seed: u64,
    /// Size of the pseudo-word pool subjects are built from.
    pub subject_words: usize,
    /// Size of the pseudo-word pool objects are built from.
    pub object_words: usize,
    pub max_subject_words: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            relations: 27,
            facts_per_relation: 6,
            seed: 7,
            subject_words: 40,
            object_words: 32,
            max_subject_words: 3,
        }
    }
}

impl CorpusSpec {
    pub fn new(relations: usize, facts_per_relation: usize, seed: u64) -> Self {
        Self {
            relations,
            facts_per_relation,
            seed,
            ..Self::default()
        }
    }

    /// Objects are two words long in every fourth relation, one word otherwise.
    pub fn object_len(relation_index: usize) -> usize {
        if relation_index % 4 == 3 {
            2
        } else {
            1
        }
    }
}

const ONSETS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..2)
            .flat_map(|_| {
                [
                    ONSETS[rng.random_range(0..ONSETS.len())] as char,
                    VOWELS[rng.random_range(0..VOWELS.len())] as char,
                ]
            })
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn phrase(rng: &mut ChaCha8Rng, pool: &[String], len: usize) -> String {
    index::sample(rng, pool.len(), len)
        .iter()
        .map(|i| pool[i].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Pseudo-word facts over the standard templates. Subjects are unique across
/// the whole corpus; objects are unique within a relation and share one
/// token length per relation.
pub fn generate_synthetic_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let all = standard_templates();
    if spec.relations == 0 || spec.relations > all.len() {
        return Err(CorpusError::Sampling(format!(
            "relation count {} outside 1..={}",
            spec.relations,
            all.len()
        )));
    }
    if spec.facts_per_relation < 2 {
        return Err(CorpusError::Sampling(
            "at least 2 facts per relation are needed for a counterfactual pool".into(),
        ));
    }
    if spec.object_words < spec.facts_per_relation || spec.max_subject_words == 0 {
        return Err(CorpusError::Sampling(format!(
            "object pool of {} words cannot give {} distinct objects",
            spec.object_words, spec.facts_per_relation
        )));
    }
    let max_subj = spec.max_subject_words.min(spec.subject_words);
    let capacity: usize = (1..=max_subj).map(|k| spec.subject_words.pow(k as u32)).sum();
    if capacity < spec.relations * spec.facts_per_relation * 2 {
        return Err(CorpusError::Sampling(format!(
            "subject pool of {} words is too small",
            spec.subject_words
        )));
    }
    let templates: Vec<_> = all.into_iter().take(spec.relations).collect();
    let mut taken: BTreeSet<String> = templates
        .iter()
        .flat_map(|t| {
            let q = t.query_template.replace(SUBJ, " ");
            let c = t.context_template.replace(SUBJ, " ").replace(OBJ, " ");
            split_words(&q).into_iter().chain(split_words(&c))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let subject_pool = pseudo_words(&mut rng, spec.subject_words, &mut taken);
    let object_pool = pseudo_words(&mut rng, spec.object_words, &mut taken);

    let mut subjects = BTreeSet::new();
    let mut facts = Vec::new();
    for (ri, t) in templates.iter().enumerate() {
        let olen = CorpusSpec::object_len(ri).min(spec.object_words);
        let mut objects = BTreeSet::new();
        while objects.len() < spec.facts_per_relation {
            objects.insert(phrase(&mut rng, &object_pool, olen));
        }
        // Shuffle away the sorted order of the set.
        let mut objects: Vec<String> = objects.into_iter().collect();
        let order = index::sample(&mut rng, objects.len(), objects.len()).into_vec();
        objects = order.into_iter().map(|i| objects[i].clone()).collect();
        for object in objects {
            let subject = loop {
                let len = rng.random_range(1..=max_subj);
                let s = phrase(&mut rng, &subject_pool, len);
                if subjects.insert(s.clone()) {
                    break s;
                }
            };
            facts.push(FactTriple::new(&subject, &t.relation, &object));
        }
    }
    Corpus::new(facts, templates)
}
