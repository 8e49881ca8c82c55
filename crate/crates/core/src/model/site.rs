//! Addressable activation sites, interventions on them, and captured records.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Encoder,
    Decoder,
}

/// Which activation inside a stream a site refers to.
///
/// `Hidden` is a block's output (the residual stream after the block).
/// `AttnOut` and `MlpOut` are the sublayer outputs before they are added
/// back into the residual. In the decoder `AttnOut` is the cross-attention
/// sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Embedding,
    Hidden,
    #[serde(rename = "mlp", alias = "mlp_out")]
    MlpOut,
    #[serde(rename = "attn", alias = "attn_out")]
    AttnOut,
}

impl Stream {
    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Encoder => "encoder",
            Stream::Decoder => "decoder",
        }
    }
}

impl SiteKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::Embedding => "embedding",
            SiteKind::Hidden => "hidden",
            SiteKind::MlpOut => "mlp",
            SiteKind::AttnOut => "attn",
        }
    }

    pub fn is_layered(self) -> bool {
        !matches!(self, SiteKind::Embedding)
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for SiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stream {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "encoder" => Ok(Stream::Encoder),
            "decoder" => Ok(Stream::Decoder),
            other => Err(ModelError::Site(format!("unknown stream '{other}'"))),
        }
    }
}

impl FromStr for SiteKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "embedding" => Ok(SiteKind::Embedding),
            "hidden" => Ok(SiteKind::Hidden),
            "mlp" | "mlp_out" => Ok(SiteKind::MlpOut),
            "attn" | "attn_out" => Ok(SiteKind::AttnOut),
            other => Err(ModelError::Site(format!("unknown site kind '{other}'"))),
        }
    }
}

/// One activation location: `(stream, kind, layer)` and a token range.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub stream: Stream,
    pub kind: SiteKind,
    pub layer: Option<usize>,
    pub start: usize,
    pub end: usize,
}

impl Site {
    pub fn new(stream: Stream, kind: SiteKind, layer: usize, tokens: Range<usize>) -> Self {
        Self {
            stream,
            kind,
            layer: kind.is_layered().then_some(layer),
            start: tokens.start,
            end: tokens.end,
        }
    }

    pub fn embedding(stream: Stream, tokens: Range<usize>) -> Self {
        Self {
            stream,
            kind: SiteKind::Embedding,
            layer: None,
            start: tokens.start,
            end: tokens.end,
        }
    }

    pub fn encoder(kind: SiteKind, layer: usize, tokens: Range<usize>) -> Self {
        Self::new(Stream::Encoder, kind, layer, tokens)
    }

    pub fn tokens(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn same_point(&self, other: &Site) -> bool {
        self.stream == other.stream && self.kind == other.kind && self.layer == other.layer
    }

    fn overlaps(&self, other: &Site) -> bool {
        self.same_point(other) && self.start < other.end && other.start < self.end
    }

    fn covers(&self, other: &Site) -> bool {
        self.same_point(other) && self.start <= other.start && other.end <= self.end
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "{}.{}[{}]@{}..{}", self.stream, self.kind, l, self.start, self.end),
            None => write!(f, "{}.{}@{}..{}", self.stream, self.kind, self.start, self.end),
        }
    }
}

/// Index into the record slice handed to an intervened forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RecordId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Action {
    /// Replace with the value captured in a record.
    PatchFromRecording(RecordId),
    /// Add `N(0, sigma²)` noise; the draw for each token row depends only on
    /// `(seed, row)`.
    AddGaussianNoise { sigma: f64, seed: u64 },
    /// Replace with a value captured from a corrupted (zero-state) run.
    FreezeToZeroState(RecordId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub site: Site,
    pub action: Action,
}

impl Intervention {
    pub fn patch(site: Site, record: RecordId) -> Self {
        Self {
            site,
            action: Action::PatchFromRecording(record),
        }
    }

    pub fn noise(site: Site, sigma: f64, seed: u64) -> Self {
        Self {
            site,
            action: Action::AddGaussianNoise { sigma, seed },
        }
    }

    pub fn freeze(site: Site, record: RecordId) -> Self {
        Self {
            site,
            action: Action::FreezeToZeroState(record),
        }
    }

    fn is_replacement(&self) -> bool {
        !matches!(self.action, Action::AddGaussianNoise { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Counterfactual,
    Corrupted,
}

/// Activations captured during one forward pass, keyed by site.
///
/// Stored tensors are owned copies, so later runs never alias them.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub provenance: Provenance,
    tensors: BTreeMap<Site, Tensor>,
}

impl ActivationRecord {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            provenance,
            tensors: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, site: &Site) -> Option<&Tensor> {
        self.tensors.get(site)
    }

    pub fn sites(&self) -> impl Iterator<Item = &Site> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, &Tensor)> {
        self.tensors.iter()
    }

    pub fn insert(&mut self, site: Site, value: Tensor) {
        self.tensors.insert(site, value);
    }

    /// Rows for `site`, taken from an exact entry or from any captured site
    /// at the same point whose token range covers it.
    pub fn lookup(&self, site: &Site) -> Option<Tensor> {
        if let Some(t) = self.tensors.get(site) {
            return Some(t.clone());
        }
        self.tensors
            .iter()
            .find(|(s, _)| s.covers(site))
            .and_then(|(s, t)| t.slice_rows(site.start - s.start, site.end - s.start).ok())
    }
}

fn noise_row(seed: u64, row: usize, width: usize, sigma: f64) -> Vec<f64> {
    let mut z = seed ^ (row as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    let mut rng = ChaCha8Rng::seed_from_u64(z ^ (z >> 31));
    (0..width)
        .map(|_| {
            let n: f64 = StandardNormal.sample(&mut rng);
            sigma * n
        })
        .collect()
}

/// Capture requests and interventions applied during one forward pass.
pub(crate) struct Hooks<'a> {
    capture: &'a [Site],
    interventions: &'a [Intervention],
    records: &'a [ActivationRecord],
    pub(crate) captured: ActivationRecord,
}

impl<'a> Hooks<'a> {
    pub(crate) fn none() -> Hooks<'static> {
        Hooks {
            capture: &[],
            interventions: &[],
            records: &[],
            captured: ActivationRecord::new(Provenance::Clean),
        }
    }

    pub(crate) fn new(
        capture: &'a [Site],
        interventions: &'a [Intervention],
        records: &'a [ActivationRecord],
        provenance: Provenance,
    ) -> Result<Self, ModelError> {
        for (i, a) in interventions.iter().enumerate() {
            match a.action {
                Action::PatchFromRecording(id) | Action::FreezeToZeroState(id) => {
                    let rec = records.get(id.0).ok_or_else(|| {
                        ModelError::State(format!("record {} missing for site {}", id.0, a.site))
                    })?;
                    if matches!(a.action, Action::FreezeToZeroState(_))
                        && rec.provenance != Provenance::Corrupted
                    {
                        return Err(ModelError::State(format!(
                            "freeze at {} needs a zero-state (corrupted) record",
                            a.site
                        )));
                    }
                }
                Action::AddGaussianNoise { sigma, .. } => {
                    if !sigma.is_finite() || sigma < 0.0 {
                        return Err(ModelError::Intervention {
                            site: a.site.to_string(),
                            msg: format!("invalid sigma {sigma}"),
                        });
                    }
                }
            }
            if a.is_replacement() {
                for b in &interventions[i + 1..] {
                    if b.is_replacement() && a.site.overlaps(&b.site) {
                        return Err(ModelError::Conflict(a.site.to_string()));
                    }
                }
            }
        }
        Ok(Self {
            capture,
            interventions,
            records,
            captured: ActivationRecord::new(provenance),
        })
    }

    pub(crate) fn is_idle(&self) -> bool {
        self.capture.is_empty() && self.interventions.is_empty()
    }

    /// Validates every site against stream layer counts; token bounds are
    /// checked when the stream's length is known.
    pub(crate) fn check_layers(&self, enc_layers: usize, dec_layers: usize) -> Result<(), ModelError> {
        let sites = self
            .capture
            .iter()
            .chain(self.interventions.iter().map(|i| &i.site));
        for s in sites {
            let n = match s.stream {
                Stream::Encoder => enc_layers,
                Stream::Decoder => dec_layers,
            };
            match (s.kind.is_layered(), s.layer) {
                (true, Some(l)) if l < n => {}
                (false, None) => {}
                _ => return Err(ModelError::Site(format!("invalid layer for site {s}"))),
            }
            if s.start >= s.end {
                return Err(ModelError::Site(format!("empty token range at {s}")));
            }
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, stream: Stream, len: usize) -> Result<(), ModelError> {
        let sites = self
            .capture
            .iter()
            .chain(self.interventions.iter().map(|i| &i.site));
        for s in sites.filter(|s| s.stream == stream) {
            if s.end > len {
                return Err(ModelError::Site(format!(
                    "site {s} exceeds sequence length {len}"
                )));
            }
        }
        Ok(())
    }

    /// Applies interventions at a point (noise first, then replacements) and
    /// captures requested sites from the resulting value.
    pub(crate) fn visit(
        &mut self,
        g: &mut crate::tensor::Graph,
        stream: Stream,
        kind: SiteKind,
        layer: Option<usize>,
        v: crate::tensor::Var,
    ) -> Result<crate::tensor::Var, ModelError> {
        if self.is_idle() {
            return Ok(v);
        }
        let here = |s: &Site| s.stream == stream && s.kind == kind && s.layer == layer;
        let mut v = v;
        let width = g.value(v).cols();
        for iv in self.interventions.iter().filter(|i| here(&i.site)) {
            if let Action::AddGaussianNoise { sigma, seed } = iv.action {
                if sigma == 0.0 {
                    continue;
                }
                let shape = g.value(v).shape().to_vec();
                let mut noise = Tensor::zeros(&shape);
                for r in iv.site.tokens() {
                    let row = noise_row(seed, r, width, sigma);
                    noise.data_mut()[r * width..(r + 1) * width].copy_from_slice(&row);
                }
                v = g.add_const(v, &noise)?;
            }
        }
        let mut ranges = Vec::new();
        let mut values = Vec::new();
        for iv in self.interventions.iter().filter(|i| here(&i.site)) {
            let id = match iv.action {
                Action::PatchFromRecording(id) | Action::FreezeToZeroState(id) => id,
                Action::AddGaussianNoise { .. } => continue,
            };
            let src = self.records[id.0].lookup(&iv.site).ok_or_else(|| {
                ModelError::Intervention {
                    site: iv.site.to_string(),
                    msg: format!("record {} has no value for this site", id.0),
                }
            })?;
            if src.rows() != iv.site.end - iv.site.start || src.cols() != width {
                return Err(ModelError::Intervention {
                    site: iv.site.to_string(),
                    msg: format!(
                        "recorded shape {:?} does not match activation rows {} x {}",
                        src.shape(),
                        iv.site.end - iv.site.start,
                        width
                    ),
                });
            }
            ranges.push(iv.site.tokens());
            values.push(src);
        }
        if !ranges.is_empty() {
            let refs: Vec<&Tensor> = values.iter().collect();
            v = g.overwrite_rows(v, &ranges, &refs)?;
        }
        for s in self.capture.iter().filter(|s| here(s)) {
            let snap = g.value(v).slice_rows(s.start, s.end)?;
            self.captured.insert(s.clone(), snap);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_kinds_and_streams() {
        assert_eq!("mlp".parse::<SiteKind>().unwrap(), SiteKind::MlpOut);
        assert_eq!("encoder".parse::<Stream>().unwrap(), Stream::Encoder);
        assert!(matches!("ffn".parse::<SiteKind>(), Err(ModelError::Site(_))));
        assert!(matches!("middle".parse::<Stream>(), Err(ModelError::Site(_))));
    }

    #[test]
    fn embedding_sites_have_no_layer() {
        let s = Site::new(Stream::Encoder, SiteKind::Embedding, 3, 0..2);
        assert_eq!(s.layer, None);
    }

    #[test]
    fn lookup_slices_covering_capture() {
        let mut r = ActivationRecord::new(Provenance::Clean);
        let full = Site::encoder(SiteKind::Hidden, 0, 0..3);
        r.insert(
            full,
            Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap(),
        );
        let got = r.lookup(&Site::encoder(SiteKind::Hidden, 0, 1..3)).unwrap();
        assert_eq!(got.data(), &[2.0, 3.0]);
        assert!(r.lookup(&Site::encoder(SiteKind::Hidden, 1, 1..3)).is_none());
    }

    #[test]
    fn overlapping_replacements_conflict() {
        let recs = vec![
            ActivationRecord::new(Provenance::Clean),
            ActivationRecord::new(Provenance::Corrupted),
        ];
        let a = Intervention::patch(Site::encoder(SiteKind::MlpOut, 1, 2..4), RecordId(0));
        let b = Intervention::freeze(Site::encoder(SiteKind::MlpOut, 1, 3..5), RecordId(1));
        let err = Hooks::new(&[], &[a.clone(), b], &recs, Provenance::Corrupted)
            .err()
            .unwrap();
        assert!(matches!(err, ModelError::Conflict(_)));
        let c = Intervention::noise(Site::encoder(SiteKind::MlpOut, 1, 2..4), 1.0, 3);
        assert!(Hooks::new(&[], &[a, c], &recs, Provenance::Corrupted).is_ok());
    }

    #[test]
    fn freeze_requires_corrupted_record() {
        let recs = vec![ActivationRecord::new(Provenance::Clean)];
        let f = Intervention::freeze(Site::encoder(SiteKind::AttnOut, 0, 0..1), RecordId(0));
        assert!(matches!(
            Hooks::new(&[], &[f], &recs, Provenance::Corrupted),
            Err(ModelError::State(_))
        ));
        let p = Intervention::patch(Site::encoder(SiteKind::AttnOut, 0, 0..1), RecordId(4));
        assert!(matches!(
            Hooks::new(&[], &[p], &recs, Provenance::Corrupted),
            Err(ModelError::State(_))
        ));
    }

    #[test]
    fn noise_rows_depend_only_on_seed_and_row() {
        assert_eq!(noise_row(9, 4, 6, 0.5), noise_row(9, 4, 6, 0.5));
        assert_ne!(noise_row(9, 4, 6, 0.5), noise_row(9, 5, 6, 0.5));
    }
}
