use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::corpus::{instance_seed, CorpusSpec};
use crate::mediation::{default_window, Aggregation, Condition, TTest};
use crate::model::{ModelConfig, RecipeSpec, SiteKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Copier,
    Memorizer,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Copier => "copier",
            Self::Memorizer => "memorizer",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "copier" => Ok(Self::Copier),
            "memorizer" => Ok(Self::Memorizer),
            _ => Err(format!("unknown model variant {s:?} (expected copier or memorizer)")),
        }
    }
}

/// File locations. Relative paths resolve against the directory holding the
/// config file; unset entries default to locations under `output`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub output: PathBuf,
    pub facts: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("out"),
            facts: None,
            templates: None,
            checkpoints: None,
        }
    }
}

/// Model shape; the vocabulary size comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
    pub tie_output: bool,
    pub ln_eps: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = ModelConfig::demo(4);
        Self {
            d_model: d.d_model,
            n_enc_layers: d.n_enc_layers,
            n_dec_layers: d.n_dec_layers,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            max_len: d.max_len,
            seed: d.seed,
            tie_output: d.tie_output,
            ln_eps: d.ln_eps,
        }
    }
}

impl ModelSpec {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            seed: self.seed,
            tie_output: self.tie_output,
            ln_eps: self.ln_eps,
        }
    }
}

/// Which runs the path-specific sweeps start from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseBase {
    #[default]
    Exp1,
    Exp2Subject,
    Exp2Relation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub models: Vec<Variant>,
    pub conditions: Vec<Condition>,
    /// Module kinds swept for exp1/exp2; pse conditions use their own kind.
    pub kinds: Vec<SiteKind>,
    pub noise_multiplier: f64,
    pub window_hidden: usize,
    pub window_mlp: usize,
    pub window_attn: usize,
    /// Counterfactual contexts per instance for behavior classification.
    pub probes: usize,
    pub instance_seed: u64,
    pub noise_seed: u64,
    pub probe_seed: u64,
    pub max_instances: usize,
    pub aggregation: Aggregation,
    pub t_test: TTest,
    pub pse_base: PseBase,
    /// Worker threads for the sweeps; 0 uses every core.
    pub workers: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            models: vec![Variant::Copier, Variant::Memorizer],
            conditions: Condition::ALL.to_vec(),
            kinds: vec![SiteKind::Hidden, SiteKind::MlpOut, SiteKind::AttnOut],
            noise_multiplier: 3.0,
            window_hidden: default_window(SiteKind::Hidden),
            window_mlp: default_window(SiteKind::MlpOut),
            window_attn: default_window(SiteKind::AttnOut),
            probes: 5,
            instance_seed: 3,
            noise_seed: 5,
            probe_seed: 9,
            max_instances: 200,
            aggregation: Aggregation::TwoStage,
            t_test: TTest::Welch,
            pse_base: PseBase::Exp1,
            workers: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn window(&self, kind: SiteKind) -> usize {
        match kind {
            SiteKind::Hidden => self.window_hidden,
            SiteKind::MlpOut => self.window_mlp,
            SiteKind::AttnOut => self.window_attn,
            SiteKind::Embedding => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSpec {
    pub top_k: usize,
    /// Heatmap cell size in SVG user units.
    pub cell: usize,
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self { top_k: 3, cell: 36 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub corpus: CorpusSpec,
    pub model: ModelSpec,
    pub train: RecipeSpec,
    pub experiment: ExperimentSpec,
    pub report: ReportSpec,
    /// Directory relative paths resolve against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            corpus: CorpusSpec::default(),
            model: ModelSpec::default(),
            train: RecipeSpec::default(),
            experiment: ExperimentSpec::default(),
            report: ReportSpec::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut c = Self::from_toml_str(&text)
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        c.base_dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf);
        Ok(c)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.corpus.seed = instance_seed(seed, 1);
        self.model.seed = instance_seed(seed, 2);
        self.train.seed = instance_seed(seed, 3);
        self.experiment.instance_seed = instance_seed(seed, 4);
        self.experiment.noise_seed = instance_seed(seed, 5);
        self.experiment.probe_seed = instance_seed(seed, 6);
    }

    pub fn set_output(&mut self, dir: &Path) {
        self.paths.output = std::path::absolute(dir).unwrap_or_else(|_| dir.to_path_buf());
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.paths.output)
    }

    pub fn facts_path(&self) -> PathBuf {
        self.paths
            .facts
            .as_ref()
            .map_or_else(|| self.output_dir().join("corpus/facts.jsonl"), |p| self.resolve(p))
    }

    pub fn templates_path(&self) -> PathBuf {
        self.paths
            .templates
            .as_ref()
            .map_or_else(|| self.output_dir().join("corpus/templates.json"), |p| self.resolve(p))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.paths
            .checkpoints
            .as_ref()
            .map_or_else(|| self.output_dir().join("checkpoints"), |p| self.resolve(p))
    }

    pub fn checkpoint_path(&self, v: Variant) -> PathBuf {
        self.checkpoint_dir().join(format!("{v}.ckpt"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        if self.paths.output.as_os_str().is_empty() {
            return bad("paths.output must not be empty".into());
        }
        let c = &self.corpus;
        if c.facts_per_relation < 2 {
            return bad(format!(
                "corpus.facts_per_relation is {}, but every fact needs at least one other \
                 object in its relation to serve as a counterfactual (minimum 2)",
                c.facts_per_relation
            ));
        }
        if c.relations == 0 || c.relations > 27 {
            return bad(format!("corpus.relations must be in 1..=27, got {}", c.relations));
        }
        self.model
            .to_config(200)
            .validate()
            .map_err(|e| PipelineError::Validation(format!("model: {e}")))?;
        let t = &self.train;
        if !(t.target_accuracy > 0.0 && t.target_accuracy <= 1.0) {
            return bad(format!("train.target_accuracy must be in (0, 1], got {}", t.target_accuracy));
        }
        if !(0.0..1.0).contains(&t.holdout_fraction) {
            return bad(format!("train.holdout_fraction must be in [0, 1), got {}", t.holdout_fraction));
        }
        if !(t.optimizer.lr.is_finite() && t.optimizer.lr >= 0.0) || t.optimizer.batch_size == 0 {
            return bad("train.optimizer needs a finite lr ≥ 0 and batch_size ≥ 1".into());
        }
        let e = &self.experiment;
        if e.models.is_empty() || e.conditions.is_empty() || e.kinds.is_empty() {
            return bad("experiment.models, conditions and kinds must be non-empty".into());
        }
        if !(e.noise_multiplier.is_finite() && e.noise_multiplier >= 0.0) {
            return bad(format!("experiment.noise_multiplier must be non-negative, got {}", e.noise_multiplier));
        }
        if e.window_hidden == 0 || e.window_mlp == 0 || e.window_attn == 0 {
            return bad("experiment windows must be at least 1".into());
        }
        if e.max_instances == 0 {
            return bad("experiment.max_instances must be at least 1".into());
        }
        if self.report.cell == 0 {
            return bad("report.cell must be positive".into());
        }
        Ok(())
    }
}
