use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{
    default_window, indirect_effect, layer_window, outcome_y, total_effect, Condition,
    MediationError, OutcomeSpec, Result,
};
use crate::corpus::{instance_seed, ContextKind, PromptInstance};
use crate::model::{ActivationRecord, Intervention, Provenance, RecordId, Seq2Seq, Site, SiteKind, Stream};
use crate::parallel::Executor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTarget {
    Subject,
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
    pub target: NoiseTarget,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return Err(MediationError::Argument(format!(
                "noise sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Which pair of runs plays clean (X←1) and corrupted (X←0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setup {
    /// Clean: counterfactual context. Corrupted: original context.
    Exp1,
    /// Both runs use the counterfactual context; the corrupted run adds
    /// embedding noise over the target span.
    Exp2(NoiseSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TraceOptions {
    /// Restoration window in layers; `None` picks the per-kind default.
    pub window: Option<usize>,
}

/// TE and per-site effects for one instance, condition and module kind.
/// Sites are keyed by their window center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSample {
    pub instance_id: usize,
    pub relation: String,
    pub condition: Condition,
    pub kind: SiteKind,
    pub y0: f64,
    pub y1: f64,
    pub te: f64,
    pub ie: BTreeMap<Site, f64>,
}

/// Encoder-input token ranges covered by the noise target in the
/// counterfactual rendering.
pub fn noise_span(instance: &PromptInstance, target: NoiseTarget) -> Vec<Range<usize>> {
    let r = instance.rendering(ContextKind::Counterfactual);
    let q = instance.question.len();
    let shift = |s: &Range<usize>| s.start + q..s.end + q;
    match target {
        NoiseTarget::Subject => vec![shift(&r.subject_span)],
        NoiseTarget::Relation => r.relation_spans.iter().map(shift).collect(),
    }
}

fn kind_sites(model: &Seq2Seq, kind: SiteKind, tokens: Range<usize>) -> Vec<Site> {
    if kind.is_layered() {
        (0..model.n_layers(Stream::Encoder))
            .map(|l| Site::encoder(kind, l, tokens.clone()))
            .collect()
    } else {
        vec![Site::embedding(Stream::Encoder, tokens)]
    }
}

struct Prepared<'a> {
    clean_input: Vec<usize>,
    corrupt_input: Vec<usize>,
    noise: Vec<Intervention>,
    answers: [&'a [usize]; 2],
}

fn prepare<'a>(instance: &'a PromptInstance, setup: &Setup) -> Result<Prepared<'a>> {
    OutcomeSpec::new(instance.answer.clone(), instance.cf_answer.clone())?;
    if !instance.is_aligned() {
        return Err(MediationError::Instance(format!(
            "instance {}: true and counterfactual objects differ in length",
            instance.id
        )));
    }
    let answers = [instance.answer.as_slice(), instance.cf_answer.as_slice()];
    let cf = instance.input(Some(ContextKind::Counterfactual));
    Ok(match setup {
        Setup::Exp1 => Prepared {
            clean_input: cf,
            corrupt_input: instance.input(Some(ContextKind::Original)),
            noise: Vec::new(),
            answers,
        },
        Setup::Exp2(n) => {
            n.validate()?;
            let spans = noise_span(instance, n.target);
            if spans.iter().all(|s| s.is_empty()) {
                return Err(MediationError::Instance(format!(
                    "instance {}: empty {:?} span",
                    instance.id, n.target
                )));
            }
            let seed = instance_seed(n.seed, instance.id as u64);
            let noise = spans
                .into_iter()
                .filter(|s| !s.is_empty())
                .map(|s| Intervention::noise(Site::embedding(Stream::Encoder, s), n.sigma, seed))
                .collect();
            Prepared {
                clean_input: cf.clone(),
                corrupt_input: cf,
                noise,
                answers,
            }
        }
    })
}

fn y_of(lp: &[f64]) -> f64 {
    outcome_y(lp[1], lp[0])
}

/// `(y0, y1, TE)` of a setup without any restoration sweep.
pub fn total_effect_for(model: &Seq2Seq, instance: &PromptInstance, setup: &Setup) -> Result<(f64, f64, f64)> {
    let p = prepare(instance, setup)?;
    let y1 = y_of(&model.answer_logprobs(&p.clean_input, &p.answers, &[], &[])?);
    let y0 = y_of(&model.answer_logprobs(&p.corrupt_input, &p.answers, &p.noise, &[])?);
    Ok((y0, y1, total_effect(y1, y0)))
}

/// `(TE, IE)` when every site in `restore` is patched together from the
/// clean run into the corrupted run.
pub fn joint_effect(
    model: &Seq2Seq,
    instance: &PromptInstance,
    setup: &Setup,
    restore: &[Site],
) -> Result<(f64, f64)> {
    let p = prepare(instance, setup)?;
    let (lp1, clean) = model.answer_logprobs_capture(
        &p.clean_input,
        &p.answers,
        &[],
        &[],
        restore,
        Provenance::Counterfactual,
    )?;
    let y1 = y_of(&lp1);
    let y0 = y_of(&model.answer_logprobs(&p.corrupt_input, &p.answers, &p.noise, &[])?);
    let mut ivs = p.noise.clone();
    ivs.extend(restore.iter().map(|s| Intervention::patch(s.clone(), RecordId(0))));
    let y = y_of(&model.answer_logprobs(&p.corrupt_input, &p.answers, &ivs, &[clean])?);
    Ok((total_effect(y1, y0), indirect_effect(y, y0)))
}

/// Corrupted-run values of every encoder site of `kinds`, captured before
/// any restoration.
pub fn capture_zero_states(
    model: &Seq2Seq,
    instance: &PromptInstance,
    setup: &Setup,
    kinds: &[SiteKind],
) -> Result<ActivationRecord> {
    let p = prepare(instance, setup)?;
    let n = p.corrupt_input.len();
    let capture: Vec<Site> = kinds.iter().flat_map(|&k| kind_sites(model, k, 0..n)).collect();
    let (_, rec) = model.answer_logprobs_capture(
        &p.corrupt_input,
        &p.answers,
        &p.noise,
        &[],
        &capture,
        Provenance::Corrupted,
    )?;
    Ok(rec)
}

fn condition_for(setup: &Setup, restore: SiteKind, frozen: &[SiteKind]) -> Result<Condition> {
    if frozen.is_empty() {
        return Ok(match setup {
            Setup::Exp1 => Condition::Exp1,
            Setup::Exp2(n) => match n.target {
                NoiseTarget::Subject => Condition::Exp2Subject,
                NoiseTarget::Relation => Condition::Exp2Relation,
            },
        });
    }
    match restore {
        SiteKind::MlpOut => Ok(Condition::PseMlp),
        SiteKind::AttnOut => Ok(Condition::PseAttn),
        k => Err(MediationError::Argument(format!(
            "path-specific tracing restores mlp or attn, not {k}"
        ))),
    }
}

/// Restoration sweep over every (layer, token) site of `kind`, freezing all
/// sites of the `frozen` kinds to `zero_states`.
#[allow(clippy::too_many_arguments)]
fn sweep(
    model: &Seq2Seq,
    instance: &PromptInstance,
    setup: &Setup,
    kind: SiteKind,
    frozen: &[SiteKind],
    zero_states: Option<&ActivationRecord>,
    opts: &TraceOptions,
    exec: &Executor,
) -> Result<EffectSample> {
    let condition = condition_for(setup, kind, frozen)?;
    let p = prepare(instance, setup)?;
    let n = p.corrupt_input.len();
    let (lp1, clean) = model.answer_logprobs_capture(
        &p.clean_input,
        &p.answers,
        &[],
        &[],
        &kind_sites(model, kind, 0..n),
        Provenance::Counterfactual,
    )?;
    let y1 = y_of(&lp1);
    let y0 = y_of(&model.answer_logprobs(&p.corrupt_input, &p.answers, &p.noise, &[])?);

    let mut records = vec![clean];
    let mut base = p.noise.clone();
    if !frozen.is_empty() {
        let states = zero_states.ok_or_else(|| {
            MediationError::Model(crate::model::ModelError::State(
                "path-specific tracing needs a zero-state recording".into(),
            ))
        })?;
        records.push(states.clone());
        for &fk in frozen {
            for s in kind_sites(model, fk, 0..n) {
                base.push(Intervention::freeze(s, RecordId(1)));
            }
        }
    }

    let layers = model.n_layers(Stream::Encoder);
    let width = opts.window.unwrap_or_else(|| default_window(kind));
    let centers: Vec<usize> = if kind.is_layered() { (0..layers).collect() } else { vec![0] };
    let items: Vec<(usize, usize)> = centers
        .iter()
        .flat_map(|&c| (0..n).map(move |t| (c, t)))
        .collect();
    let effects = exec.try_map(&items, |&(center, tok)| -> Result<(Site, f64)> {
        let mut ivs = base.clone();
        let key = if kind.is_layered() {
            for l in layer_window(center, width, layers) {
                ivs.push(Intervention::patch(Site::encoder(kind, l, tok..tok + 1), RecordId(0)));
            }
            Site::encoder(kind, center, tok..tok + 1)
        } else {
            let s = Site::embedding(Stream::Encoder, tok..tok + 1);
            ivs.push(Intervention::patch(s.clone(), RecordId(0)));
            s
        };
        let lp = model.answer_logprobs(&p.corrupt_input, &p.answers, &ivs, &records)?;
        Ok((key, indirect_effect(y_of(&lp), y0)))
    })?;
    let sample = EffectSample {
        instance_id: instance.id,
        relation: instance.relation.clone(),
        condition,
        kind,
        y0,
        y1,
        te: total_effect(y1, y0),
        ie: effects.into_iter().collect(),
    };
    if !sample.te.is_finite() || sample.ie.values().any(|v| !v.is_finite()) {
        return Err(MediationError::Model(crate::model::ModelError::Tensor(
            crate::tensor::TensorError::NonFinite { op: "trace" },
        )));
    }
    Ok(sample)
}

/// General restoration sweep; with an empty `frozen` set this is the plain
/// indirect-effect trace of the setup.
pub fn trace(
    model: &Seq2Seq,
    instance: &PromptInstance,
    setup: &Setup,
    kind: SiteKind,
    frozen: &[SiteKind],
    opts: &TraceOptions,
    exec: &Executor,
) -> Result<EffectSample> {
    if frozen.is_empty() {
        return sweep(model, instance, setup, kind, frozen, None, opts, exec);
    }
    let states = capture_zero_states(model, instance, setup, frozen)?;
    sweep(model, instance, setup, kind, frozen, Some(&states), opts, exec)
}

/// Counterfactual-context restoration into the original-context run.
pub fn exp1_trace(
    model: &Seq2Seq,
    instance: &PromptInstance,
    kind: SiteKind,
    opts: &TraceOptions,
    exec: &Executor,
) -> Result<EffectSample> {
    trace(model, instance, &Setup::Exp1, kind, &[], opts, exec)
}

/// Clean restoration into a run whose subject or relation embeddings are
/// noised.
pub fn exp2_trace(
    model: &Seq2Seq,
    instance: &PromptInstance,
    noise: &NoiseSpec,
    kind: SiteKind,
    opts: &TraceOptions,
    exec: &Executor,
) -> Result<EffectSample> {
    trace(model, instance, &Setup::Exp2(*noise), kind, &[], opts, exec)
}

fn other_kind(restore: SiteKind) -> Result<SiteKind> {
    match restore {
        SiteKind::MlpOut => Ok(SiteKind::AttnOut),
        SiteKind::AttnOut => Ok(SiteKind::MlpOut),
        k => Err(MediationError::Argument(format!(
            "path-specific tracing restores mlp or attn, not {k}"
        ))),
    }
}

/// Path-specific sweep: restore `restore` sites while every site of the
/// other module kind stays at its zero state.
pub fn pse_trace(
    model: &Seq2Seq,
    instance: &PromptInstance,
    setup: &Setup,
    restore: SiteKind,
    opts: &TraceOptions,
    exec: &Executor,
) -> Result<EffectSample> {
    let frozen = other_kind(restore)?;
    trace(model, instance, setup, restore, &[frozen], opts, exec)
}

/// [`pse_trace`] against an explicit zero-state recording, which must come
/// from a corrupted run.
#[allow(clippy::too_many_arguments)]
pub fn pse_trace_with_states(
    model: &Seq2Seq,
    instance: &PromptInstance,
    setup: &Setup,
    restore: SiteKind,
    frozen: &[SiteKind],
    zero_states: Option<&ActivationRecord>,
    opts: &TraceOptions,
    exec: &Executor,
) -> Result<EffectSample> {
    sweep(model, instance, setup, restore, frozen, zero_states, opts, exec)
}

/// `multiplier ×` the standard deviation of the token-embedding coordinates
/// of every encoder-input token occurrence across `instances`.
pub fn estimate_noise_sigma(model: &Seq2Seq, instances: &[PromptInstance], multiplier: f64) -> Result<f64> {
    if !(multiplier.is_finite() && multiplier >= 0.0) {
        return Err(MediationError::Argument(format!(
            "noise multiplier must be non-negative, got {multiplier}"
        )));
    }
    let emb = model.token_embeddings();
    let tokens: Vec<usize> = instances
        .iter()
        .flat_map(|i| i.input(Some(ContextKind::Original)))
        .chain(instances.iter().flat_map(|i| i.cf_answer.clone()))
        .collect();
    if tokens.is_empty() {
        return Err(MediationError::Argument("no instances to estimate noise from".into()));
    }
    let d = emb.cols();
    let mut data = Vec::with_capacity(tokens.len() * d);
    for t in tokens {
        data.extend_from_slice(emb.row(t));
    }
    let t = Tensor::new(&[data.len()], data).map_err(crate::model::ModelError::from)?;
    Ok(multiplier * t.std())
}
