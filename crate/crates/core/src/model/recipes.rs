//! Training recipes for the two reference behaviors: a copier that answers
//! from context and a memorizer that answers from its weights.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{exact_match, train_with, ModelConfig, ModelError, OptimizerConfig, Result, Seq2Seq};
use super::{TrainExample, TrainReport, TrainSpec};
use crate::corpus::{instance_seed, ContextKind, Corpus, PromptInstance, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecipeSpec {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub eval_every: usize,
    /// Accuracy the construction must reach on its probe set.
    pub target_accuracy: f64,
    /// Fraction of facts never shown with a context during copier training.
    pub holdout_fraction: f64,
    /// Context examples per fact per epoch.
    pub context_copies: usize,
    /// Counterfactual probes per held-out fact.
    pub probes_per_fact: usize,
    pub seed: u64,
    /// Epochs already trained; shifts the per-epoch data stream on resume.
    /// Set by the pipeline, not read from config files.
    #[serde(skip)]
    pub epoch_offset: usize,
}

impl Default for RecipeSpec {
    fn default() -> Self {
        Self {
            epochs: 300,
            optimizer: OptimizerConfig::default(),
            eval_every: 5,
            target_accuracy: 0.95,
            holdout_fraction: 0.2,
            context_copies: 2,
            probes_per_fact: 3,
            seed: 11,
            epoch_offset: 0,
        }
    }
}

/// A trained model with the probes it was judged on.
#[derive(Debug, Clone)]
pub struct Constructed {
    pub model: Seq2Seq,
    pub report: TrainReport,
    pub probes: Vec<TrainExample>,
    pub probe_accuracy: f64,
    /// Whether `probe_accuracy` reached the target.
    pub reached: bool,
    /// Instance ids excluded from context training (copier only).
    pub held_out: Vec<usize>,
}

/// Token ids occurring inside any object. Context objects during training
/// are random sequences over this alphabet.
fn object_alphabet(instances: &[PromptInstance]) -> Vec<usize> {
    let set: BTreeSet<usize> = instances.iter().flat_map(|i| i.answer.iter().copied()).collect();
    set.into_iter().collect()
}

fn random_object(rng: &mut ChaCha8Rng, alphabet: &[usize], len: usize) -> Vec<usize> {
    index::sample(rng, alphabet.len(), len.min(alphabet.len()))
        .iter()
        .map(|i| alphabet[i])
        .collect()
}

fn recall_example(inst: &PromptInstance) -> TrainExample {
    TrainExample {
        input: inst.input(None),
        target: inst.answer.clone(),
    }
}

fn held_out_ids(n: usize, fraction: f64, seed: u64) -> BTreeSet<usize> {
    let k = ((n as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, n, k.min(n)).into_iter().collect()
}

/// Copy probes for the given instances: each context carries a pool object
/// other than the truth, and the target is that object.
pub fn copy_probes(
    corpus: &Corpus,
    vocab: &Vocab,
    instances: &[&PromptInstance],
    per_fact: usize,
    seed: u64,
) -> Vec<TrainExample> {
    let mut out = Vec::new();
    for inst in instances {
        let fact = &corpus.facts[inst.id];
        let others: Vec<Vec<usize>> = corpus
            .aligned_pool(vocab, fact)
            .iter()
            .map(|o| vocab.tokenize(o))
            .filter(|t| *t != inst.answer)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(seed, inst.id as u64));
        for i in index::sample(&mut rng, others.len(), per_fact.min(others.len())) {
            out.push(TrainExample {
                input: inst.input_with(&others[i]),
                target: others[i].clone(),
            });
        }
    }
    out
}

fn train_spec(spec: &RecipeSpec, stop: f64) -> TrainSpec {
    TrainSpec {
        epochs: spec.epochs,
        optimizer: spec.optimizer.clone(),
        seed: spec.seed.wrapping_add(spec.epoch_offset as u64),
        eval_every: spec.eval_every,
        stop_at_accuracy: Some(stop),
    }
}

fn finish(
    model: Seq2Seq,
    report: TrainReport,
    probes: Vec<TrainExample>,
    held_out: Vec<usize>,
    target: f64,
) -> Result<Constructed> {
    let acc = exact_match(&model, &probes)?;
    Ok(Constructed {
        model,
        report,
        probes,
        probe_accuracy: acc,
        reached: acc >= target,
        held_out,
    })
}

fn require(c: Constructed, target: f64, what: &str) -> Result<Constructed> {
    if c.reached {
        return Ok(c);
    }
    Err(ModelError::Construction(format!(
        "{what} reached {:.1}% after {} epochs, target {:.1}%",
        c.probe_accuracy * 100.0,
        c.report.epochs_run,
        target * 100.0
    )))
}

/// Trains a model that answers with whatever object its context carries.
///
/// Every fact is also taught without context so the question alone recalls
/// the true object; context examples carry a random object sequence and
/// reward copying it. A held-out share of facts is never seen with a context
/// and provides the copy probes.
pub fn make_copier_model(
    config: ModelConfig,
    corpus: &Corpus,
    vocab: &Vocab,
    spec: &RecipeSpec,
) -> Result<Constructed> {
    let c = train_copier(Seq2Seq::new(config)?, corpus, vocab, spec)?;
    require(c, spec.target_accuracy, "copier")
}

/// Copier recipe applied to an existing model; never fails on accuracy.
pub fn train_copier(
    mut model: Seq2Seq,
    corpus: &Corpus,
    vocab: &Vocab,
    spec: &RecipeSpec,
) -> Result<Constructed> {
    let instances = corpus
        .instances(vocab, spec.seed)
        .map_err(|e| ModelError::Construction(e.to_string()))?;
    let held = held_out_ids(instances.len(), spec.holdout_fraction, spec.seed ^ 0x5eed);
    let alphabet = object_alphabet(&instances);
    let trained: Vec<&PromptInstance> = instances.iter().filter(|i| !held.contains(&i.id)).collect();
    let probe_insts: Vec<&PromptInstance> = instances.iter().filter(|i| held.contains(&i.id)).collect();
    let mut probes = copy_probes(corpus, vocab, &probe_insts, spec.probes_per_fact, spec.seed);
    if probes.is_empty() {
        probes = copy_probes(corpus, vocab, &trained, spec.probes_per_fact, spec.seed);
    }
    let mut monitor = probes.clone();
    monitor.extend(instances.iter().map(recall_example));
    let source = |epoch: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(spec.seed, 1_000_000 + (spec.epoch_offset + epoch) as u64));
        let mut data: Vec<TrainExample> = instances.iter().map(recall_example).collect();
        for inst in &trained {
            data.push(TrainExample {
                input: inst.input(Some(ContextKind::Original)),
                target: inst.answer.clone(),
            });
            for _ in 0..spec.context_copies {
                let obj = random_object(&mut rng, &alphabet, inst.answer.len());
                data.push(TrainExample {
                    input: inst.input_with(&obj),
                    target: obj,
                });
            }
        }
        data
    };
    let stop = (spec.target_accuracy + 0.02).min(1.0);
    let report = train_with(&mut model, source, &monitor, &train_spec(spec, stop))?;
    finish(model, report, probes, held.into_iter().collect(), spec.target_accuracy)
}

/// Trains a model that answers every fact from its weights, ignoring any
/// context it is given.
pub fn make_memorizer_model(
    config: ModelConfig,
    corpus: &Corpus,
    vocab: &Vocab,
    spec: &RecipeSpec,
) -> Result<Constructed> {
    let c = train_memorizer(Seq2Seq::new(config)?, corpus, vocab, spec)?;
    require(c, spec.target_accuracy, "memorizer")
}

/// Memorizer recipe applied to an existing model; never fails on accuracy.
pub fn train_memorizer(
    mut model: Seq2Seq,
    corpus: &Corpus,
    vocab: &Vocab,
    spec: &RecipeSpec,
) -> Result<Constructed> {
    let instances = corpus
        .instances(vocab, spec.seed)
        .map_err(|e| ModelError::Construction(e.to_string()))?;
    let alphabet = object_alphabet(&instances);
    let probes: Vec<TrainExample> = instances.iter().map(recall_example).collect();
    let source = |epoch: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(spec.seed, 2_000_000 + (spec.epoch_offset + epoch) as u64));
        let mut data = probes.clone();
        for inst in &instances {
            data.push(TrainExample {
                input: inst.input(Some(ContextKind::Original)),
                target: inst.answer.clone(),
            });
            for _ in 0..spec.context_copies {
                let obj = random_object(&mut rng, &alphabet, inst.answer.len());
                data.push(TrainExample {
                    input: inst.input_with(&obj),
                    target: inst.answer.clone(),
                });
            }
        }
        data
    };
    let stop = (spec.target_accuracy + 0.02).min(1.0);
    let report = train_with(&mut model, source, &probes, &train_spec(spec, stop))?;
    finish(model, report, probes, Vec::new(), spec.target_accuracy)
}
