//! Small encoder-decoder transformer with capturable and patchable sites.

mod checkpoint;
mod config;
mod forward;
mod recipes;
mod site;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::ModelConfig;
pub use recipes::{
    copy_probes, make_copier_model, make_memorizer_model, train_copier, train_memorizer, Constructed,
    RecipeSpec,
};
pub use site::{
    Action, ActivationRecord, Intervention, Provenance, RecordId, Site, SiteKind, Stream,
};
pub use train::{
    batch_loss, exact_match, loss_and_gradients, train, train_with, Adam, OptimizerConfig, TrainExample,
    TrainReport, TrainSpec,
};

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError};
use forward::Layout;
use site::Hooks;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("site error: {0}")]
    Site(String),
    #[error("intervention error at {site}: {msg}")]
    Intervention { site: String, msg: String },
    #[error("conflicting interventions at {0}")]
    Conflict(String),
    #[error("state error: {0}")]
    State(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },
    #[error("model construction failed: {0}")]
    Construction(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// The encoder-decoder model. Parameters are immutable during analysis and
/// shared cheaply between concurrent forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

impl Seq2Seq {
    /// Freshly initialised model, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = specs
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    forward::Init::Zeros => vec![0.0; n],
                    forward::Init::Ones => vec![1.0; n],
                    forward::Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                Ok(Param {
                    name: spec.name,
                    value: Arc::new(Tensor::new(&spec.shape, data)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Builds a model from explicit parameters, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = Layout::build(&config);
        if specs.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (s, p) in specs.iter().zip(&params) {
            if s.name != p.name || s.shape != p.value.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, got {} {:?}",
                    s.name,
                    s.shape,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// The shared token embedding table `[vocab × d_model]`.
    pub fn token_embeddings(&self) -> &Tensor {
        &self.params[self.layout.tok_emb].value
    }

    pub fn n_layers(&self, stream: Stream) -> usize {
        match stream {
            Stream::Encoder => self.config.n_enc_layers,
            Stream::Decoder => self.config.n_dec_layers,
        }
    }

    fn check_input(&self, input: &[usize], decoder_input: &[usize]) -> Result<()> {
        let v = self.config.vocab_size;
        if let Some(&t) = input.iter().chain(decoder_input).find(|&&t| t >= v) {
            return Err(ModelError::Length(format!(
                "token id {t} outside vocabulary of {v}"
            )));
        }
        if input.is_empty() || decoder_input.is_empty() {
            return Err(ModelError::Length("empty encoder or decoder input".into()));
        }
        let m = self.config.max_len;
        if input.len() > m || decoder_input.len() > m {
            return Err(ModelError::Length(format!(
                "sequence lengths {}/{} exceed max_len {m}",
                input.len(),
                decoder_input.len()
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        input: &[usize],
        decoder_input: &[usize],
        hooks: &mut Hooks<'_>,
    ) -> Result<Tensor> {
        self.check_input(input, decoder_input)?;
        hooks.check_layers(self.config.n_enc_layers, self.config.n_dec_layers)?;
        hooks.check_tokens(Stream::Encoder, input.len())?;
        hooks.check_tokens(Stream::Decoder, decoder_input.len())?;
        let mut g = Graph::new();
        let pv = self.layout.bind(&mut g, &self.params, false);
        let enc = forward::encode(&self.config, &self.layout, &mut g, &pv, input, hooks)?;
        let logits =
            forward::decode(&self.config, &self.layout, &mut g, &pv, enc, decoder_input, hooks)?;
        Ok(g.value(logits).clone())
    }

    /// Plain forward pass: logits `[decoder_len × vocab]`.
    pub fn forward(&self, input: &[usize], decoder_input: &[usize]) -> Result<Tensor> {
        self.run(input, decoder_input, &mut Hooks::none())
    }

    /// Forward pass capturing exactly the requested sites.
    pub fn forward_capture(
        &self,
        input: &[usize],
        decoder_input: &[usize],
        capture: &[Site],
        provenance: Provenance,
    ) -> Result<(Tensor, ActivationRecord)> {
        let mut hooks = Hooks::new(capture, &[], &[], provenance)?;
        let logits = self.run(input, decoder_input, &mut hooks)?;
        Ok((logits, hooks.captured))
    }

    /// Forward pass with interventions applied as each site is computed.
    pub fn forward_intervene(
        &self,
        input: &[usize],
        decoder_input: &[usize],
        interventions: &[Intervention],
        records: &[ActivationRecord],
    ) -> Result<Tensor> {
        let mut hooks = Hooks::new(&[], interventions, records, Provenance::Corrupted)?;
        self.run(input, decoder_input, &mut hooks)
    }

    /// Intervened forward pass that also captures sites (after intervention).
    pub fn forward_intervene_capture(
        &self,
        input: &[usize],
        decoder_input: &[usize],
        interventions: &[Intervention],
        records: &[ActivationRecord],
        capture: &[Site],
        provenance: Provenance,
    ) -> Result<(Tensor, ActivationRecord)> {
        let mut hooks = Hooks::new(capture, interventions, records, provenance)?;
        let logits = self.run(input, decoder_input, &mut hooks)?;
        Ok((logits, hooks.captured))
    }

    /// Teacher-forced `log P(answer | input)`: the sum over answer positions of
    /// the log-softmax probability of each answer token.
    pub fn sequence_logprob(
        &self,
        input: &[usize],
        answer: &[usize],
        interventions: &[Intervention],
        records: &[ActivationRecord],
    ) -> Result<f64> {
        Ok(self.answer_logprobs(input, &[answer], interventions, records)?[0])
    }

    /// [`Seq2Seq::sequence_logprob`] for several answers sharing one encoder
    /// pass. Decoder-side interventions apply to every answer's pass.
    pub fn answer_logprobs(
        &self,
        input: &[usize],
        answers: &[&[usize]],
        interventions: &[Intervention],
        records: &[ActivationRecord],
    ) -> Result<Vec<f64>> {
        let mut hooks = Hooks::new(&[], interventions, records, Provenance::Corrupted)?;
        self.score(input, answers, &mut hooks)
    }

    /// [`Seq2Seq::answer_logprobs`] that also captures the requested sites.
    /// Decoder sites hold the pass of the last answer.
    pub fn answer_logprobs_capture(
        &self,
        input: &[usize],
        answers: &[&[usize]],
        interventions: &[Intervention],
        records: &[ActivationRecord],
        capture: &[Site],
        provenance: Provenance,
    ) -> Result<(Vec<f64>, ActivationRecord)> {
        let mut hooks = Hooks::new(capture, interventions, records, provenance)?;
        let lp = self.score(input, answers, &mut hooks)?;
        Ok((lp, hooks.captured))
    }

    fn score(&self, input: &[usize], answers: &[&[usize]], hooks: &mut Hooks<'_>) -> Result<Vec<f64>> {
        for a in answers {
            if a.is_empty() {
                return Err(ModelError::Length("answer must be non-empty".into()));
            }
            if a.len() + 1 > self.config.max_len {
                return Err(ModelError::Length(format!(
                    "answer of {} tokens exceeds max_len {}",
                    a.len(),
                    self.config.max_len
                )));
            }
        }
        self.check_input(input, &[BOS])?;
        hooks.check_layers(self.config.n_enc_layers, self.config.n_dec_layers)?;
        hooks.check_tokens(Stream::Encoder, input.len())?;
        let mut g = Graph::new();
        let pv = self.layout.bind(&mut g, &self.params, false);
        let enc = forward::encode(&self.config, &self.layout, &mut g, &pv, input, hooks)?;
        let mut out = Vec::with_capacity(answers.len());
        for a in answers {
            let mut dec_in = Vec::with_capacity(a.len());
            dec_in.push(BOS);
            dec_in.extend_from_slice(&a[..a.len() - 1]);
            self.check_input(input, &dec_in)?;
            hooks.check_tokens(Stream::Decoder, dec_in.len())?;
            let logits =
                forward::decode(&self.config, &self.layout, &mut g, &pv, enc, &dec_in, hooks)?;
            let logp = g.value(logits).log_softmax_rows();
            let total: f64 = a.iter().enumerate().map(|(i, &t)| logp.get(i, t)).sum();
            if !total.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "sequence_logprob",
                }
                .into());
            }
            out.push(total);
        }
        Ok(out)
    }

    /// Greedy argmax decoding until `EOS` or `max_steps` tokens. Ties go to
    /// the lowest token id. The returned list excludes `EOS`.
    pub fn greedy_decode(&self, input: &[usize], max_steps: usize) -> Result<Vec<usize>> {
        if max_steps == 0 {
            return Err(ModelError::Length("max_steps must be at least 1".into()));
        }
        self.check_input(input, &[BOS])?;
        let mut g = Graph::new();
        let pv = self.layout.bind(&mut g, &self.params, false);
        let mut hooks = Hooks::none();
        let enc = forward::encode(&self.config, &self.layout, &mut g, &pv, input, &mut hooks)?;
        let mut dec = vec![BOS];
        let mut out = Vec::new();
        for _ in 0..max_steps {
            if dec.len() > self.config.max_len {
                break;
            }
            let logits =
                forward::decode(&self.config, &self.layout, &mut g, &pv, enc, &dec, &mut hooks)?;
            let lv = g.value(logits);
            let next = argmax(lv.row(lv.rows() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            dec.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
