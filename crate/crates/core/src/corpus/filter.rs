use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{split_words, ContextKind, CorpusError, PromptInstance, Result, Vocab};
use crate::model::Seq2Seq;

/// Extra decode steps allowed beyond the gold answer length.
const DECODE_SLACK: usize = 4;

fn distinct_others<'a>(true_object: &str, pool: &'a [String]) -> Vec<&'a String> {
    let truth = split_words(true_object);
    let mut out: Vec<&String> = Vec::new();
    for p in pool {
        let w = split_words(p);
        if w != truth && !w.is_empty() && !out.iter().any(|q| split_words(q) == w) {
            out.push(p);
        }
    }
    out
}

/// Uniform draw from `pool` minus the true object. Seed-deterministic.
pub fn sample_counterfactual(
    relation: &str,
    true_object: &str,
    pool: &[String],
    seed: u64,
) -> Result<String> {
    let others = distinct_others(true_object, pool);
    if others.is_empty() {
        return Err(CorpusError::Sampling(format!(
            "relation {relation:?}: no counterfactual for {true_object:?} in a pool of {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(others[rng.random_range(0..others.len())].clone())
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// Word-level containment either way after normalization. An empty side is
/// never correct.
pub fn answer_is_correct(decoded: &str, gold: &str) -> bool {
    let d = split_words(decoded);
    let g = split_words(gold);
    if d.is_empty() || g.is_empty() {
        return false;
    }
    contains_run(&g, &d) || contains_run(&d, &g)
}

fn decodes_gold(
    model: &Seq2Seq,
    vocab: &Vocab,
    input: &[usize],
    golds: &[String],
    steps: usize,
) -> Result<bool> {
    let out = model.greedy_decode(input, steps)?;
    let text = vocab.decode(&out);
    Ok(golds.iter().any(|g| answer_is_correct(&text, g)))
}

/// Keeps instances answered correctly both with the X←0 context and with
/// no context at all.
pub fn filter_parametric_knowledge(
    model: &Seq2Seq,
    vocab: &Vocab,
    instances: &[PromptInstance],
) -> Result<Vec<PromptInstance>> {
    let mut kept = Vec::new();
    for inst in instances {
        let steps = inst.answer.len() + DECODE_SLACK;
        if decodes_gold(model, vocab, &inst.input(Some(ContextKind::Original)), &inst.golds, steps)?
            && decodes_gold(model, vocab, &inst.input(None), &inst.golds, steps)?
        {
            kept.push(inst.clone());
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Parametric,
    Nonparametric,
}

impl Behavior {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Parametric => "parametric",
            Self::Nonparametric => "nonparametric",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub behavior: Behavior,
    pub probes: usize,
    /// Probes that still decoded the true answer.
    pub held: usize,
    /// Zero probes: parametric only by vacuity.
    pub degenerate: bool,
}

/// Parametric iff the true answer survives all `n` distinct counterfactual
/// contexts drawn from `pool`.
pub fn classify_behavior(
    model: &Seq2Seq,
    vocab: &Vocab,
    instance: &PromptInstance,
    pool: &[String],
    n: usize,
    seed: u64,
) -> Result<Classification> {
    let truth = vocab.decode(&instance.answer);
    let others = distinct_others(&truth, pool);
    if others.len() < n {
        return Err(CorpusError::Sampling(format!(
            "relation {:?}: {n} probes requested but only {} counterfactuals available",
            instance.relation,
            others.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, others.len(), n);
    let steps = instance.answer.len() + DECODE_SLACK;
    let mut held = 0;
    for i in picks.iter() {
        let input = instance.input_with(&vocab.tokenize(others[i]));
        if decodes_gold(model, vocab, &input, &instance.golds, steps)? {
            held += 1;
        }
    }
    let behavior = if held == n {
        Behavior::Parametric
    } else {
        Behavior::Nonparametric
    };
    Ok(Classification {
        behavior,
        probes: n,
        held,
        degenerate: n == 0,
    })
}

/// Number of (possibly overlapping) occurrences of `needle` in `hay`.
pub fn count_occurrences(hay: &[usize], needle: &[usize]) -> usize {
    if needle.is_empty() {
        return 0;
    }
    hay.windows(needle.len()).filter(|w| *w == needle).count()
}

/// Exactly one subject and one object mention in the document, the object
/// absent from the question and the subject present in it.
pub fn admissible_document(doc: &[usize], question: &[usize], subject: &[usize], object: &[usize]) -> bool {
    count_occurrences(doc, subject) == 1
        && count_occurrences(doc, object) == 1
        && count_occurrences(question, object) == 0
        && count_occurrences(question, subject) > 0
}
