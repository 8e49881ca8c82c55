use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::config::{PseBase, Variant};
use super::tables::{read_loss_curve, write_behavior, write_effects, write_grid, write_loss_curve};
use super::{ensure_parent, PipelineConfig, PipelineError, Result, RunManifest};
use crate::corpus::{
    classify_behavior, divide_tokens, filter_parametric_knowledge, generate_synthetic_corpus,
    instance_seed, read_facts, read_templates, write_facts, write_templates, Behavior, Classification,
    Corpus, PromptInstance, TokenDivision, Vocab,
};
use crate::mediation::{
    aggregate_grid, estimate_noise_sigma, summarize, total_effect_for, trace, Condition, EffectSample,
    NoiseSpec, NoiseTarget, Setup, StatsSummary, TraceOptions,
};
use crate::model::{load_checkpoint, save_checkpoint, train_copier, train_memorizer, Seq2Seq, SiteKind};
use crate::parallel::Executor;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| PipelineError::io(path, e))
}

fn require_file(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Validation(format!(
            "{} not found; {hint}",
            path.display()
        )))
    }
}

/// Writes the synthetic facts and templates.
pub fn cmd_build_corpus(config: &PipelineConfig) -> Result<RunManifest> {
    config.validate()?;
    let t0 = Instant::now();
    let mut m = RunManifest::new("build-corpus", config);
    let corpus = generate_synthetic_corpus(&config.corpus)?;
    let facts = config.facts_path();
    let templates = config.templates_path();
    ensure_parent(&facts)?;
    ensure_parent(&templates)?;
    write_facts(&facts, &corpus.facts)?;
    write_templates(&templates, &corpus.templates)?;
    m.add_output(config, &facts)?;
    m.add_output(config, &templates)?;
    m.time("build-corpus", t0);
    m.write(&RunManifest::path_for(config, "build-corpus"))?;
    Ok(m)
}

/// Loads and validates the corpus files named by the config.
pub fn load_corpus(config: &PipelineConfig) -> Result<(Corpus, Vocab)> {
    let facts = config.facts_path();
    let templates = config.templates_path();
    require_file(&facts, "run build-corpus first")?;
    require_file(&templates, "run build-corpus first")?;
    let corpus = Corpus::new(read_facts(&facts)?, read_templates(&templates)?)?;
    let vocab = corpus.vocab();
    Ok((corpus, vocab))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub epochs_run: usize,
    pub total_epochs: usize,
    pub final_loss: Option<f64>,
    pub probe_accuracy: f64,
    pub target_accuracy: f64,
    pub reached: bool,
    pub untrained: bool,
    pub resumed: bool,
    pub held_out_facts: usize,
    pub probes: usize,
    /// Wall time; kept out of the report file so its digest is reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

/// Trains one variant and writes its checkpoint, loss curve and report.
/// A missed accuracy target still leaves every artifact on disk.
pub fn cmd_train(config: &PipelineConfig, variant: Variant, resume: bool) -> Result<TrainSummary> {
    config.validate()?;
    let t0 = Instant::now();
    let mut m = RunManifest::new(&format!("train-{variant}"), config);
    let (corpus, vocab) = load_corpus(config)?;
    m.add_input(config, &config.facts_path())?;
    m.add_input(config, &config.templates_path())?;
    let ckpt = config.checkpoint_path(variant);
    let out = config.output_dir().join("train");
    let loss_path = out.join(format!("{variant}_loss.csv"));

    let model_config = config.model.to_config(vocab.len());
    let (model, prior) = if resume && ckpt.is_file() {
        m.add_input(config, &ckpt)?;
        let model = load_checkpoint(&ckpt)?;
        if model.config() != &model_config {
            return Err(PipelineError::Validation(format!(
                "{} was trained with a different model config",
                ckpt.display()
            )));
        }
        let prior = if loss_path.is_file() {
            read_loss_curve(&loss_path)?
        } else {
            Vec::new()
        };
        (model, prior)
    } else {
        (Seq2Seq::new(model_config)?, Vec::new())
    };
    let resumed = resume && !prior.is_empty();
    let mut spec = config.train.clone();
    spec.epoch_offset = prior.last().map_or(0, |r| r.epoch);
    let built = match variant {
        Variant::Copier => train_copier(model, &corpus, &vocab, &spec)?,
        Variant::Memorizer => train_memorizer(model, &corpus, &vocab, &spec)?,
    };
    ensure_parent(&ckpt)?;
    save_checkpoint(&built.model, &ckpt)?;
    let rows = write_loss_curve(&loss_path, &prior, &built.report)?;
    let summary = TrainSummary {
        variant,
        epochs_run: built.report.epochs_run,
        total_epochs: rows.last().map_or(0, |r| r.epoch),
        final_loss: rows.last().map(|r| r.loss),
        probe_accuracy: built.probe_accuracy,
        target_accuracy: spec.target_accuracy,
        reached: built.reached,
        untrained: built.report.untrained && prior.is_empty(),
        resumed,
        held_out_facts: built.held_out.len(),
        probes: built.probes.len(),
        seconds: t0.elapsed().as_secs_f64(),
    };
    let report_path = out.join(format!("{variant}_report.json"));
    write_json(&report_path, &summary)?;
    for p in [&ckpt, &loss_path, &report_path] {
        m.add_output(config, p)?;
    }
    m.time("train", t0);
    m.write(&RunManifest::path_for(config, &format!("train-{variant}")))?;
    if !summary.reached && !summary.untrained {
        return Err(PipelineError::TargetMissed(format!(
            "{variant} probe accuracy {:.1}% is below the {:.1}% target after {} epochs",
            summary.probe_accuracy * 100.0,
            summary.target_accuracy * 100.0,
            summary.total_epochs
        )));
    }
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsRecord {
    pub comparison: String,
    pub models: Vec<String>,
    pub summary: Option<StatsSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub cohorts: BTreeMap<String, usize>,
    pub parametric: BTreeMap<String, usize>,
    pub degenerate_classifications: usize,
    pub noise_sigma: BTreeMap<String, f64>,
    pub stats: BTreeMap<String, Vec<StatsRecord>>,
}

fn stats_record(comparison: &str, models: Vec<String>, la: &str, a: &[f64], lb: &str, b: &[f64], test: crate::mediation::TTest) -> StatsRecord {
    match summarize(la, a, lb, b, test) {
        Ok(s) => StatsRecord {
            comparison: comparison.into(),
            models,
            summary: Some(s),
            error: None,
        },
        Err(e) => StatsRecord {
            comparison: comparison.into(),
            models,
            summary: None,
            error: Some(e.to_string()),
        },
    }
}

fn kinds_for(config: &PipelineConfig, c: Condition) -> Vec<SiteKind> {
    match c {
        Condition::PseMlp => vec![SiteKind::MlpOut],
        Condition::PseAttn => vec![SiteKind::AttnOut],
        _ => config.experiment.kinds.clone(),
    }
}

fn noise(config: &PipelineConfig, sigma: f64, target: NoiseTarget) -> NoiseSpec {
    NoiseSpec {
        sigma,
        seed: config.experiment.noise_seed,
        target,
    }
}

fn setup_for(config: &PipelineConfig, c: Condition, sigma: f64) -> Setup {
    let pse = |b: PseBase| match b {
        PseBase::Exp1 => Setup::Exp1,
        PseBase::Exp2Subject => Setup::Exp2(noise(config, sigma, NoiseTarget::Subject)),
        PseBase::Exp2Relation => Setup::Exp2(noise(config, sigma, NoiseTarget::Relation)),
    };
    match c {
        Condition::Exp1 => Setup::Exp1,
        Condition::Exp2Subject => Setup::Exp2(noise(config, sigma, NoiseTarget::Subject)),
        Condition::Exp2Relation => Setup::Exp2(noise(config, sigma, NoiseTarget::Relation)),
        Condition::PseMlp | Condition::PseAttn => pse(config.experiment.pse_base),
    }
}

fn frozen_for(c: Condition) -> Vec<SiteKind> {
    match c {
        Condition::PseMlp => vec![SiteKind::AttnOut],
        Condition::PseAttn => vec![SiteKind::MlpOut],
        _ => Vec::new(),
    }
}

struct Cohort {
    variant: Variant,
    model: Seq2Seq,
    instances: Vec<PromptInstance>,
    divisions: BTreeMap<usize, Vec<TokenDivision>>,
    behavior: Vec<Classification>,
    sigma: f64,
}

/// Runs the configured experiments (or only `only`) for every configured
/// model and writes effects, grids, behavior labels and statistics.
pub fn cmd_run(config: &PipelineConfig, only: Option<Condition>, workers: Option<usize>) -> Result<RunSummary> {
    config.validate()?;
    let t0 = Instant::now();
    let mut m = RunManifest::new("run", config);
    let (corpus, vocab) = load_corpus(config)?;
    m.add_input(config, &config.facts_path())?;
    m.add_input(config, &config.templates_path())?;
    let exp = &config.experiment;
    let exec = Executor::new(workers.unwrap_or(exp.workers));
    let inner = Executor::sequential();
    let conditions: Vec<Condition> = match only {
        Some(c) => vec![c],
        None => exp.conditions.clone(),
    };
    let all = corpus.instances(&vocab, exp.instance_seed)?;
    let out = config.output_dir().join("run");

    let mut cohorts = Vec::new();
    for &variant in &exp.models {
        let ckpt = config.checkpoint_path(variant);
        require_file(&ckpt, &format!("run train --variant {variant} first"))?;
        m.add_input(config, &ckpt)?;
        let model = load_checkpoint(&ckpt)?;
        if model.config().vocab_size != vocab.len() {
            return Err(PipelineError::Validation(format!(
                "{} has vocabulary {} but the corpus has {}",
                ckpt.display(),
                model.config().vocab_size,
                vocab.len()
            )));
        }
        let t = Instant::now();
        let kept: Vec<Vec<PromptInstance>> = exec.try_map(&all, |i| {
            filter_parametric_knowledge(&model, &vocab, std::slice::from_ref(i))
        })?;
        let mut instances: Vec<PromptInstance> = kept.into_iter().flatten().collect();
        instances.truncate(exp.max_instances);
        if instances.is_empty() {
            return Err(PipelineError::EmptyCohort {
                model: variant.to_string(),
                filter: "parametric-knowledge filter (correct answer with and without context)".into(),
            });
        }
        let behavior = exec.try_map(&instances, |i| {
            let pool = corpus.object_pool(&i.relation);
            classify_behavior(&model, &vocab, i, &pool, exp.probes, instance_seed(exp.probe_seed, i.id as u64))
        })?;
        let divisions = instances
            .iter()
            .map(|i| Ok((i.id, divide_tokens(i)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let sigma = estimate_noise_sigma(&model, &instances, exp.noise_multiplier)?;
        m.time(&format!("{variant}/cohort"), t);
        let rows: Vec<(usize, &str, Classification)> = instances
            .iter()
            .zip(&behavior)
            .map(|(i, c)| (i.id, i.relation.as_str(), *c))
            .collect();
        let bpath = out.join(variant.as_str()).join("behavior.csv");
        write_behavior(&bpath, &rows)?;
        m.add_output(config, &bpath)?;
        cohorts.push(Cohort {
            variant,
            model,
            instances,
            divisions,
            behavior,
            sigma,
        });
    }

    let mut stats: BTreeMap<String, Vec<StatsRecord>> = BTreeMap::new();
    let mut exp1_te: Vec<(Behavior, f64)> = Vec::new();
    for c in &cohorts {
        let mut blocks: Vec<(EffectSample, Vec<TokenDivision>)> = Vec::new();
        for &cond in &conditions {
            let setup = setup_for(config, cond, c.sigma);
            let frozen = frozen_for(cond);
            for kind in kinds_for(config, cond) {
                let t = Instant::now();
                let opts = TraceOptions {
                    window: Some(exp.window(kind)),
                };
                let samples = exec.try_map(&c.instances, |i| {
                    trace(&c.model, i, &setup, kind, &frozen, &opts, &inner)
                })?;
                let grid = aggregate_grid(&samples, &c.divisions, kind, exp.aggregation)?;
                let gpath = out
                    .join(c.variant.as_str())
                    .join("grids")
                    .join(format!("{cond}_{kind}.csv"));
                write_grid(&gpath, c.variant.as_str(), &grid, exp.aggregation)?;
                m.add_output(config, &gpath)?;
                m.time(&format!("{}/{cond}/{kind}", c.variant), t);
                if cond == Condition::Exp1 && kind == kinds_for(config, cond)[0] {
                    exp1_te.extend(c.behavior.iter().map(|b| b.behavior).zip(samples.iter().map(|s| s.te)));
                }
                for s in samples {
                    let d = c.divisions[&s.instance_id].clone();
                    blocks.push((s, d));
                }
            }
        }
        if conditions
            .iter()
            .any(|c| matches!(c, Condition::Exp2Subject | Condition::Exp2Relation))
        {
            let te = |target| {
                exec.try_map(&c.instances, |i| {
                    total_effect_for(&c.model, i, &Setup::Exp2(noise(config, c.sigma, target))).map(|r| r.2)
                })
            };
            let subj = te(NoiseTarget::Subject)?;
            let rel = te(NoiseTarget::Relation)?;
            stats.entry("exp2".into()).or_default().push(stats_record(
                "subject-te vs relation-te",
                vec![c.variant.to_string()],
                "subject",
                &subj,
                "relation",
                &rel,
                exp.t_test,
            ));
        }
        let epath = out.join(c.variant.as_str()).join("effects.csv");
        let refs: Vec<(&EffectSample, &[TokenDivision])> =
            blocks.iter().map(|(s, d)| (s, d.as_slice())).collect();
        write_effects(&epath, &refs)?;
        m.add_output(config, &epath)?;
    }
    if conditions.contains(&Condition::Exp1) {
        let pick = |b: Behavior| -> Vec<f64> { exp1_te.iter().filter(|(x, _)| *x == b).map(|(_, t)| *t).collect() };
        stats.entry("exp1".into()).or_default().push(stats_record(
            "te by behavior",
            cohorts.iter().map(|c| c.variant.to_string()).collect(),
            "parametric",
            &pick(Behavior::Parametric),
            "nonparametric",
            &pick(Behavior::Nonparametric),
            exp.t_test,
        ));
    }
    let summary = RunSummary {
        cohorts: cohorts.iter().map(|c| (c.variant.to_string(), c.instances.len())).collect(),
        parametric: cohorts
            .iter()
            .map(|c| {
                let n = c.behavior.iter().filter(|b| b.behavior == Behavior::Parametric).count();
                (c.variant.to_string(), n)
            })
            .collect(),
        degenerate_classifications: cohorts
            .iter()
            .flat_map(|c| &c.behavior)
            .filter(|b| b.degenerate)
            .count(),
        noise_sigma: cohorts.iter().map(|c| (c.variant.to_string(), c.sigma)).collect(),
        stats,
    };
    let spath = out.join("stats.json");
    write_json(&spath, &summary)?;
    m.add_output(config, &spath)?;
    m.time("run", t0);
    m.write(&RunManifest::path_for(config, "run"))?;
    Ok(summary)
}
