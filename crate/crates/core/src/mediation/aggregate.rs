use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Condition, EffectSample, MediationError, Result};
use crate::corpus::TokenDivision;
use crate::model::SiteKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Token mean within an instance, instance mean within a template, then
    /// mean over templates.
    #[default]
    TwoStage,
    /// Plain mean over every (instance, token) effect in the cell.
    Pooled,
}

/// AIE per (division, layer). Cells without any contributing token are
/// `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGrid {
    pub condition: Condition,
    pub kind: SiteKind,
    pub n_layers: usize,
    pub values: Vec<Vec<Option<f64>>>,
    /// Instances contributing to each cell.
    pub counts: Vec<Vec<usize>>,
}

impl TraceGrid {
    pub fn value(&self, division: TokenDivision, layer: usize) -> Option<f64> {
        self.values[division.index()].get(layer).copied().flatten()
    }

    /// Present cells ordered by decreasing value; ties keep division/layer order.
    pub fn ranked_cells(&self) -> Vec<(TokenDivision, usize, f64)> {
        let mut cells: Vec<_> = TokenDivision::ALL
            .iter()
            .flat_map(|&d| {
                self.values[d.index()]
                    .iter()
                    .enumerate()
                    .filter_map(move |(l, v)| v.map(|v| (d, l, v)))
            })
            .collect();
        cells.sort_by(|a, b| b.2.total_cmp(&a.2));
        cells
    }

    pub fn max_cell(&self) -> Option<(TokenDivision, usize, f64)> {
        self.ranked_cells().into_iter().next()
    }

    pub fn is_all_zero(&self) -> bool {
        self.values.iter().flatten().flatten().all(|v| *v == 0.0)
    }
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Aggregates the samples of one module kind into a grid. `divisions` maps
/// each instance id to the division label of every encoder-input token.
pub fn aggregate_grid(
    samples: &[EffectSample],
    divisions: &BTreeMap<usize, Vec<TokenDivision>>,
    kind: SiteKind,
    mode: Aggregation,
) -> Result<TraceGrid> {
    let picked: Vec<&EffectSample> = samples.iter().filter(|s| s.kind == kind).collect();
    let Some(first) = picked.first() else {
        return Err(MediationError::Argument(format!("no {kind} samples to aggregate")));
    };
    let condition = first.condition;
    if picked.iter().any(|s| s.condition != condition) {
        return Err(MediationError::Argument("samples mix conditions".into()));
    }
    let n_layers = picked
        .iter()
        .flat_map(|s| s.ie.keys())
        .map(|s| s.layer.unwrap_or(0) + 1)
        .max()
        .unwrap_or(1);
    let cells = TokenDivision::ALL.len() * n_layers;
    let cell = |d: TokenDivision, l: usize| d.index() * n_layers + l;

    // Per instance: token effects per cell.
    let mut per_instance: Vec<(&str, Vec<Vec<f64>>)> = Vec::with_capacity(picked.len());
    for s in &picked {
        let divs = divisions.get(&s.instance_id).ok_or_else(|| {
            MediationError::Argument(format!("no divisions for instance {}", s.instance_id))
        })?;
        let mut acc = vec![Vec::new(); cells];
        for (site, &v) in &s.ie {
            let d = *divs.get(site.start).ok_or_else(|| {
                MediationError::Argument(format!(
                    "token {} outside the {} labelled tokens of instance {}",
                    site.start,
                    divs.len(),
                    s.instance_id
                ))
            })?;
            acc[cell(d, site.layer.unwrap_or(0))].push(v);
        }
        per_instance.push((s.relation.as_str(), acc));
    }

    let mut values = vec![None; cells];
    let mut counts = vec![0usize; cells];
    for c in 0..cells {
        counts[c] = per_instance.iter().filter(|(_, a)| !a[c].is_empty()).count();
        if counts[c] == 0 {
            continue;
        }
        values[c] = Some(match mode {
            Aggregation::Pooled => {
                let all: Vec<f64> = per_instance.iter().flat_map(|(_, a)| a[c].iter().copied()).collect();
                mean_of(&all)
            }
            Aggregation::TwoStage => {
                let mut by_rel: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
                for (rel, a) in &per_instance {
                    if !a[c].is_empty() {
                        by_rel.entry(rel).or_default().push(mean_of(&a[c]));
                    }
                }
                let rel_means: Vec<f64> = by_rel.values().map(|v| mean_of(v)).collect();
                mean_of(&rel_means)
            }
        });
    }
    let rows = |v: &[Option<f64>]| v.chunks(n_layers).map(<[_]>::to_vec).collect();
    Ok(TraceGrid {
        condition,
        kind,
        n_layers,
        values: rows(&values),
        counts: counts.chunks(n_layers).map(<[_]>::to_vec).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Site;
    use TokenDivision as D;

    fn sample(id: usize, rel: &str, ies: &[(usize, usize, f64)]) -> EffectSample {
        EffectSample {
            instance_id: id,
            relation: rel.into(),
            condition: Condition::Exp1,
            kind: SiteKind::Hidden,
            y0: 0.0,
            y1: 1.0,
            te: 1.0,
            ie: ies
                .iter()
                .map(|&(l, t, v)| (Site::encoder(SiteKind::Hidden, l, t..t + 1), v))
                .collect(),
        }
    }

    #[test]
    fn single_instance_is_raw() {
        let s = sample(0, "r", &[(0, 0, 0.5), (1, 0, 0.25), (0, 1, -1.0), (1, 1, 2.0)]);
        let divs = BTreeMap::from([(0, vec![D::Question, D::LastToken])]);
        let g = aggregate_grid(&[s], &divs, SiteKind::Hidden, Aggregation::TwoStage).unwrap();
        assert_eq!(g.n_layers, 2);
        assert_eq!(g.value(D::Question, 1), Some(0.25));
        assert_eq!(g.value(D::LastToken, 0), Some(-1.0));
        assert_eq!(g.value(D::FirstObject, 0), None);
        assert_eq!(g.max_cell(), Some((D::LastToken, 1, 2.0)));
    }

    #[test]
    fn two_stage_versus_pooled() {
        // Relation a: two instances; relation b: one. Object cell, layer 0.
        let s = vec![
            sample(0, "a", &[(0, 0, 1.0), (0, 1, 3.0)]),
            sample(1, "a", &[(0, 0, 4.0)]),
            sample(2, "b", &[(0, 0, 10.0)]),
        ];
        let divs = BTreeMap::from([
            (0, vec![D::FirstObject, D::FirstObject]),
            (1, vec![D::FirstObject]),
            (2, vec![D::FirstObject]),
        ]);
        let two = aggregate_grid(&s, &divs, SiteKind::Hidden, Aggregation::TwoStage).unwrap();
        // a: mean(mean(1,3)=2, 4) = 3; b: 10; overall 6.5
        assert_eq!(two.value(D::FirstObject, 0), Some(6.5));
        let pooled = aggregate_grid(&s, &divs, SiteKind::Hidden, Aggregation::Pooled).unwrap();
        assert_eq!(pooled.value(D::FirstObject, 0), Some(18.0 / 4.0));
        assert_eq!(two.counts[D::FirstObject.index()][0], 3);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(aggregate_grid(&[], &BTreeMap::new(), SiteKind::Hidden, Aggregation::TwoStage).is_err());
    }
}
