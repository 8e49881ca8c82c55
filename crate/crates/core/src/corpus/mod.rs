//! Facts, templates, tokenization with span tracking and data filters.

mod filter;
mod io;
mod prompt;
mod synth;
mod templates;
mod vocab;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use filter::{
    admissible_document, answer_is_correct, classify_behavior, count_occurrences,
    filter_parametric_knowledge, sample_counterfactual, Behavior, Classification,
};
pub use io::{read_facts, read_templates, write_facts, write_templates};
pub use prompt::{
    divide_rendering, divide_tokens, render_prompt, ContextKind, PromptInstance, Rendering,
    TokenDivision,
};
pub use synth::{generate_synthetic_corpus, CorpusSpec};
pub use templates::{standard_templates, RelationTemplate, OBJ, SUBJ};
pub use vocab::{split_words, Vocab};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid fact: {0}")]
    Fact(String),
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("instance error: {0}")]
    Instance(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

impl FactTriple {
    pub fn new(subject: &str, relation: &str, object: &str) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
            aliases: Vec::new(),
        }
    }

    /// Gold strings accepted for this fact: the object and its aliases.
    pub fn golds(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.object.as_str()).chain(self.aliases.iter().map(String::as_str))
    }
}

/// A fact table together with its relation templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub facts: Vec<FactTriple>,
    pub templates: Vec<RelationTemplate>,
}

impl Corpus {
    pub fn new(facts: Vec<FactTriple>, templates: Vec<RelationTemplate>) -> Result<Self> {
        let c = Self { facts, templates };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.templates {
            t.validate()?;
        }
        for f in &self.facts {
            if split_words(&f.subject) == split_words(&f.object) {
                return Err(CorpusError::Fact(format!(
                    "subject equals object in {:?}",
                    f.subject
                )));
            }
            if split_words(&f.subject).is_empty() || split_words(&f.object).is_empty() {
                return Err(CorpusError::Fact(format!(
                    "empty subject or object in relation {}",
                    f.relation
                )));
            }
            if self.template(&f.relation).is_none() {
                return Err(CorpusError::Fact(format!(
                    "relation {:?} has no template",
                    f.relation
                )));
            }
        }
        Ok(())
    }

    pub fn template(&self, relation: &str) -> Option<&RelationTemplate> {
        self.templates.iter().find(|t| t.relation == relation)
    }

    pub fn relations(&self) -> Vec<&str> {
        self.templates.iter().map(|t| t.relation.as_str()).collect()
    }

    /// Distinct objects of one relation, in first-seen order.
    pub fn object_pool(&self, relation: &str) -> Vec<String> {
        let mut pool: Vec<String> = Vec::new();
        for f in self.facts.iter().filter(|f| f.relation == relation) {
            if !pool.contains(&f.object) {
                pool.push(f.object.clone());
            }
        }
        pool
    }

    /// Closed vocabulary over every template and fact string.
    pub fn vocab(&self) -> Vocab {
        let strip = |s: &str| s.replace(SUBJ, " ").replace(OBJ, " ");
        let mut words: Vec<String> = Vec::new();
        for t in &self.templates {
            words.push(strip(&t.query_template));
            words.push(strip(&t.context_template));
        }
        for f in &self.facts {
            words.push(f.subject.clone());
            words.push(f.object.clone());
            words.extend(f.aliases.iter().cloned());
        }
        Vocab::from_words(words)
    }

    /// One prompt instance per fact, with a counterfactual object drawn
    /// from the same relation. Only pool members whose token length equals
    /// the true object's are eligible, so X←0 and X←1 stay position-aligned.
    pub fn instances(&self, vocab: &Vocab, seed: u64) -> Result<Vec<PromptInstance>> {
        self.facts
            .iter()
            .enumerate()
            .map(|(id, fact)| {
                let tpl = self.template(&fact.relation).ok_or_else(|| {
                    CorpusError::Fact(format!("relation {:?} has no template", fact.relation))
                })?;
                let pool = self.aligned_pool(vocab, fact);
                let cf = sample_counterfactual(
                    &fact.relation,
                    &fact.object,
                    &pool,
                    instance_seed(seed, id as u64),
                )?;
                let mut inst = render_prompt(vocab, fact, tpl, &cf)?;
                inst.id = id;
                Ok(inst)
            })
            .collect()
    }

    /// Objects of the fact's relation with the same token length as its object.
    pub fn aligned_pool(&self, vocab: &Vocab, fact: &FactTriple) -> Vec<String> {
        let n = vocab.tokenize(&fact.object).len();
        self.object_pool(&fact.relation)
            .into_iter()
            .filter(|o| vocab.tokenize(o).len() == n)
            .collect()
    }
}

/// Per-instance seed derived from a base seed (splitmix64 finalizer).
pub fn instance_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed ^ id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweden() -> Corpus {
        Corpus::new(
            vec![
                FactTriple::new("Sweden", "capital", "Stockholm"),
                FactTriple::new("Italy", "capital", "Milan"),
            ],
            standard_templates(),
        )
        .unwrap()
    }

    #[test]
    fn validate_rejects_bad_facts() {
        let t = standard_templates();
        assert!(matches!(
            Corpus::new(vec![FactTriple::new("a", "capital", "A")], t.clone()),
            Err(CorpusError::Fact(_))
        ));
        assert!(matches!(
            Corpus::new(vec![FactTriple::new("a", "nope", "b")], t),
            Err(CorpusError::Fact(_))
        ));
    }

    #[test]
    fn instances_pick_the_other_object() {
        let c = sweden();
        let v = c.vocab();
        let inst = c.instances(&v, 3).unwrap();
        assert_eq!(v.decode(&inst[0].cf_answer), "milan");
        assert_eq!(v.decode(&inst[1].cf_answer), "stockholm");
        assert_eq!(inst[1].id, 1);
    }
}
