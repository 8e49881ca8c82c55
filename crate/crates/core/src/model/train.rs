use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward, ModelError, Result, Seq2Seq};
use crate::tensor::{Graph, Tensor};

/// One supervised pair: encoder input and the answer the decoder should emit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Global gradient-norm clip; `None` or a non-positive value disables
    /// clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            batch_size: 16,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Evaluate probe exact-match every this many epochs (and on the last).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop once probe exact-match reaches this rate.
    #[serde(default)]
    pub stop_at_accuracy: Option<f64>,
}

fn default_eval_every() -> usize {
    5
}

impl TrainSpec {
    pub fn new(epochs: usize, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self {
            epochs,
            optimizer,
            seed,
            eval_every: default_eval_every(),
            stop_at_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Probe exact-match per epoch, where evaluated.
    pub exact_match: Vec<Option<f64>>,
    pub final_exact_match: f64,
    pub epochs_run: usize,
    pub untrained: bool,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, model: &Seq2Seq) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, model: &mut Seq2Seq, grads: &mut [Tensor]) {
        self.step += 1;
        if let Some(clip) = self.cfg.grad_clip.filter(|c| *c > 0.0) {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let s = clip / norm;
                for g in grads.iter_mut() {
                    g.data_mut().iter_mut().for_each(|x| *x *= s);
                }
            }
        }
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let w = Arc::make_mut(&mut p.value).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, &g) in grads[i].data().iter().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * g;
                v[k] = b2 * v[k] + (1.0 - b2) * g * g;
                let upd = self.cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.cfg.eps);
                w[k] -= upd;
            }
        }
    }
}

/// Fraction of probes whose greedy decode equals the target exactly.
pub fn exact_match(model: &Seq2Seq, probes: &[TrainExample]) -> Result<f64> {
    if probes.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for p in probes {
        if model.greedy_decode(&p.input, p.target.len() + 1)? == p.target {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

fn validate_examples(model: &Seq2Seq, data: &[TrainExample]) -> Result<()> {
    let c = model.config();
    for ex in data {
        if ex.input.is_empty() || ex.target.is_empty() {
            return Err(ModelError::Length("empty training input or target".into()));
        }
        if ex.input.len() > c.max_len || ex.target.len() + 1 > c.max_len {
            return Err(ModelError::Length(format!(
                "training example exceeds max_len {}",
                c.max_len
            )));
        }
        if ex.input.iter().chain(&ex.target).any(|&t| t >= c.vocab_size) {
            return Err(ModelError::Length("token outside vocabulary".into()));
        }
    }
    Ok(())
}

/// Mean teacher-forced loss over `batch` and its gradient for every
/// parameter, in parameter order. Gradients are omitted (empty) when the
/// loss is not finite.
pub fn loss_and_gradients(model: &Seq2Seq, batch: &[&TrainExample]) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(ModelError::Length("empty batch".into()));
    }
    let mut g = Graph::new();
    let pv = model.layout.bind(&mut g, &model.params, true);
    let mut total = None;
    for ex in batch {
        let l = forward::example_loss(&model.config, &model.layout, &mut g, &pv, &ex.input, &ex.target)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let total = total.expect("non-empty batch");
    let loss = g.scale(total, 1.0 / batch.len() as f64)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let grads = pv
        .iter()
        .zip(model.params())
        .map(|(&v, p)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();
    Ok((value, grads))
}

/// Mean teacher-forced loss over `batch` without building gradients.
pub fn batch_loss(model: &Seq2Seq, batch: &[&TrainExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(ModelError::Length("empty batch".into()));
    }
    let mut total = 0.0;
    for ex in batch {
        let mut g = Graph::new();
        let pv = model.layout.bind(&mut g, &model.params, false);
        let l = forward::example_loss(&model.config, &model.layout, &mut g, &pv, &ex.input, &ex.target)?;
        total += g.value(l).item()?;
    }
    Ok(total / batch.len() as f64)
}

fn batch_step(model: &mut Seq2Seq, opt: &mut Adam, batch: &[&TrainExample]) -> Result<f64> {
    let (value, mut grads) = loss_and_gradients(model, batch)?;
    if value.is_finite() {
        opt.step(model, &mut grads);
    }
    Ok(value)
}

/// Trains on examples produced per epoch by `source`, with probe
/// exact-match evaluated on `probes`. Fully determined by the spec's seed.
pub fn train_with(
    model: &mut Seq2Seq,
    mut source: impl FnMut(usize) -> Vec<TrainExample>,
    probes: &[TrainExample],
    spec: &TrainSpec,
) -> Result<TrainReport> {
    validate_examples(model, probes)?;
    let mut opt = Adam::new(spec.optimizer.clone(), model);
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        exact_match: Vec::new(),
        final_exact_match: 0.0,
        epochs_run: 0,
        untrained: spec.epochs == 0,
    };
    let bs = spec.optimizer.batch_size.max(1);
    for epoch in 0..spec.epochs {
        let data = source(epoch);
        if data.is_empty() {
            return Err(ModelError::Training {
                epoch,
                msg: "empty dataset".into(),
            });
        }
        validate_examples(model, &data)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(epoch as u64 * 7919));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(bs) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &data[i]).collect();
            let l = batch_step(model, &mut opt, &batch)?;
            if !l.is_finite() {
                return Err(ModelError::Training {
                    epoch,
                    msg: format!("loss became {l}"),
                });
            }
            sum += l;
            batches += 1;
        }
        report.epoch_loss.push(sum / batches as f64);
        report.epochs_run = epoch + 1;
        let last = epoch + 1 == spec.epochs;
        let em = if last || (epoch + 1) % spec.eval_every.max(1) == 0 {
            Some(exact_match(model, probes)?)
        } else {
            None
        };
        report.exact_match.push(em);
        if let Some(acc) = em {
            report.final_exact_match = acc;
            if spec.stop_at_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    if spec.epochs == 0 {
        report.final_exact_match = exact_match(model, probes)?;
    }
    Ok(report)
}

/// Trains on a fixed dataset; the probe set is the dataset itself.
pub fn train(model: &mut Seq2Seq, data: &[TrainExample], spec: &TrainSpec) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(ModelError::Training {
            epoch: 0,
            msg: "empty dataset".into(),
        });
    }
    let owned = data.to_vec();
    train_with(model, |_| owned.clone(), data, spec)
}
