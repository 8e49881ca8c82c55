//! CSV schemas. Every file starts with a `# <schema> v<N>` comment line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ensure_parent, PipelineError, Result};
use crate::corpus::{Behavior, Classification, TokenDivision};
use crate::mediation::{Aggregation, Condition, EffectSample, TraceGrid};
use crate::model::{SiteKind, TrainReport};

pub const EFFECTS_SCHEMA: &str = "# ragtrace-effects v1";
pub const GRID_SCHEMA: &str = "# ragtrace-grid v1";
pub const LOSS_SCHEMA: &str = "# ragtrace-loss v1";
pub const BEHAVIOR_SCHEMA: &str = "# ragtrace-behavior v1";

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn csv_err(path: &Path, e: csv::Error) -> PipelineError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    PipelineError::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

fn create(path: &Path, comments: &[String]) -> Result<csv::Writer<BufWriter<File>>> {
    ensure_parent(path)?;
    let f = File::create(path).map_err(|e| PipelineError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for c in comments {
        writeln!(w, "{c}").map_err(|e| PipelineError::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(w))
}

fn finish(path: &Path, w: csv::Writer<BufWriter<File>>) -> Result<()> {
    let mut inner = w
        .into_inner()
        .map_err(|e| PipelineError::io(path, std::io::Error::other(e.to_string())))?;
    inner.flush().map_err(|e| PipelineError::io(path, e))
}

/// One effects block: the samples of one model and the token divisions of
/// each instance (indexed like the samples).
pub(crate) fn write_effects(
    path: &Path,
    blocks: &[(&EffectSample, &[TokenDivision])],
) -> Result<()> {
    let mut w = create(path, &[EFFECTS_SCHEMA.to_string()])?;
    let e = |err| csv_err(path, err);
    w.write_record([
        "instance_id",
        "condition",
        "module_kind",
        "stream",
        "layer",
        "token_index",
        "division",
        "te",
        "ie_or_pse",
    ])
    .map_err(e)?;
    for (s, divs) in blocks {
        for (site, v) in &s.ie {
            let div = divs.get(site.start).map_or("", |d| d.as_str());
            w.write_record([
                s.instance_id.to_string(),
                s.condition.to_string(),
                s.kind.to_string(),
                site.stream.to_string(),
                site.layer.map(|l| l.to_string()).unwrap_or_default(),
                site.start.to_string(),
                div.to_string(),
                num(s.te),
                num(*v),
            ])
            .map_err(e)?;
        }
    }
    finish(path, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub model: String,
    pub aggregation: Aggregation,
    pub grid: TraceGrid,
}

pub fn write_grid(path: &Path, model: &str, grid: &TraceGrid, aggregation: Aggregation) -> Result<()> {
    let agg = match aggregation {
        Aggregation::TwoStage => "two-stage",
        Aggregation::Pooled => "pooled",
    };
    let meta = format!(
        "# model={model} condition={} kind={} aggregation={agg} layers={}",
        grid.condition, grid.kind, grid.n_layers
    );
    let mut w = create(path, &[GRID_SCHEMA.to_string(), meta])?;
    let e = |err| csv_err(path, err);
    let mut header = vec!["division".to_string()];
    header.extend((0..grid.n_layers).map(|l| format!("layer{l}")));
    w.write_record(&header).map_err(e)?;
    for d in TokenDivision::ALL {
        let mut row = vec![d.as_str().to_string()];
        row.extend(grid.values[d.index()].iter().map(|v| opt(*v)));
        w.write_record(&row).map_err(e)?;
    }
    finish(path, w)
}

pub fn read_grid(path: &Path) -> Result<GridFile> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let perr = |line: usize, msg: String| PipelineError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(GRID_SCHEMA) {
        return Err(perr(1, format!("expected schema line {GRID_SCHEMA:?}")));
    }
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| perr(2, "missing metadata comment".into()))?;
    let mut model = String::from("model");
    let mut condition = None;
    let mut kind = None;
    let mut aggregation = Aggregation::TwoStage;
    for kv in meta.split_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| perr(2, format!("malformed metadata entry {kv:?}")))?;
        match k {
            "model" => model = v.to_string(),
            "condition" => condition = Some(v.parse::<Condition>().map_err(|m| perr(2, m))?),
            "kind" => kind = Some(v.parse::<SiteKind>().map_err(|m| perr(2, m.to_string()))?),
            "aggregation" => {
                aggregation = match v {
                    "two-stage" => Aggregation::TwoStage,
                    "pooled" => Aggregation::Pooled,
                    _ => return Err(perr(2, format!("unknown aggregation {v:?}"))),
                }
            }
            _ => {}
        }
    }
    let condition = condition.ok_or_else(|| perr(2, "metadata lacks condition".into()))?;
    let kind = kind.ok_or_else(|| perr(2, "metadata lacks kind".into()))?;

    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let n_layers = header.len().saturating_sub(1);
    if header.get(0) != Some("division") || n_layers == 0 {
        return Err(perr(3, "header must be division,layer0,...".into()));
    }
    let mut values: Vec<Option<Vec<Option<f64>>>> = vec![None; TokenDivision::ALL.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let d: TokenDivision = rec[0].parse().map_err(|m| perr(line, m))?;
        if values[d.index()].is_some() {
            return Err(perr(line, format!("duplicate row for {d}")));
        }
        let row = rec
            .iter()
            .skip(1)
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>()
                        .map(Some)
                        .map_err(|_| perr(line, format!("bad number {c:?}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        values[d.index()] = Some(row);
    }
    let total = text.lines().count();
    let values = values
        .into_iter()
        .zip(TokenDivision::ALL)
        .map(|(v, d)| v.ok_or_else(|| perr(total, format!("missing row for {d}"))))
        .collect::<Result<Vec<_>>>()?;
    let counts = values
        .iter()
        .map(|r| r.iter().map(|v| usize::from(v.is_some())).collect())
        .collect();
    Ok(GridFile {
        model,
        aggregation,
        grid: TraceGrid {
            condition,
            kind,
            n_layers,
            values,
            counts,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub loss: f64,
    pub exact_match: Option<f64>,
}

pub(crate) fn write_loss_curve(path: &Path, prior: &[LossRow], report: &TrainReport) -> Result<Vec<LossRow>> {
    let mut rows = prior.to_vec();
    let start = prior.last().map_or(0, |r| r.epoch);
    for (i, (&loss, &em)) in report.epoch_loss.iter().zip(&report.exact_match).enumerate() {
        rows.push(LossRow {
            epoch: start + i + 1,
            loss,
            exact_match: em,
        });
    }
    let mut w = create(path, &[LOSS_SCHEMA.to_string()])?;
    let e = |err| csv_err(path, err);
    w.write_record(["epoch", "loss", "exact_match"]).map_err(e)?;
    for r in &rows {
        w.write_record([r.epoch.to_string(), num(r.loss), opt(r.exact_match)])
            .map_err(e)?;
    }
    finish(path, w)?;
    Ok(rows)
}

pub fn read_loss_curve(path: &Path) -> Result<Vec<LossRow>> {
    let f = File::open(path).map_err(|e| PipelineError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(f);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |m: &str| PipelineError::Parse {
            path: path.display().to_string(),
            line,
            msg: m.to_string(),
        };
        if rec.len() != 3 {
            return Err(bad("expected epoch,loss,exact_match"));
        }
        out.push(LossRow {
            epoch: rec[0].parse().map_err(|_| bad("bad epoch"))?,
            loss: rec[1].parse().map_err(|_| bad("bad loss"))?,
            exact_match: if rec[2].is_empty() {
                None
            } else {
                Some(rec[2].parse().map_err(|_| bad("bad exact_match"))?)
            },
        });
    }
    Ok(out)
}

pub(crate) fn write_behavior(
    path: &Path,
    rows: &[(usize, &str, Classification)],
) -> Result<()> {
    let mut w = create(path, &[BEHAVIOR_SCHEMA.to_string()])?;
    let e = |err| csv_err(path, err);
    w.write_record(["instance_id", "relation", "behavior", "probes", "held", "degenerate"])
        .map_err(e)?;
    for (id, rel, c) in rows {
        let b = match c.behavior {
            Behavior::Parametric => "parametric",
            Behavior::Nonparametric => "nonparametric",
        };
        w.write_record([
            id.to_string(),
            rel.to_string(),
            b.to_string(),
            c.probes.to_string(),
            c.held.to_string(),
            c.degenerate.to_string(),
        ])
        .map_err(e)?;
    }
    finish(path, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TraceGrid {
        let mut values = vec![vec![None, None]; 11];
        values[0] = vec![Some(0.5), Some(-1.25)];
        values[6] = vec![Some(2.0), None];
        TraceGrid {
            condition: Condition::Exp1,
            kind: SiteKind::MlpOut,
            n_layers: 2,
            counts: values
                .iter()
                .map(|r| r.iter().map(|v| usize::from(v.is_some())).collect())
                .collect(),
            values,
        }
    }

    #[test]
    fn grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        write_grid(&p, "copier", &grid(), Aggregation::TwoStage).unwrap();
        let back = read_grid(&p).unwrap();
        assert_eq!(back.grid, grid());
        assert_eq!(back.model, "copier");
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(GRID_SCHEMA));
    }

    #[test]
    fn malformed_grid_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        write_grid(&p, "copier", &grid(), Aggregation::TwoStage).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let broken = text.replacen("2,", "2x,", 1);
        std::fs::write(&p, broken).unwrap();
        match read_grid(&p) {
            Err(PipelineError::Parse { line, .. }) => assert_eq!(line, 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn loss_curve_appends() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let rep = TrainReport {
            epoch_loss: vec![1.0, 0.5],
            exact_match: vec![None, Some(0.25)],
            final_exact_match: 0.25,
            epochs_run: 2,
            untrained: false,
        };
        let first = write_loss_curve(&p, &[], &rep).unwrap();
        let again = write_loss_curve(&p, &first, &rep).unwrap();
        assert_eq!(again.len(), 4);
        assert_eq!(read_loss_curve(&p).unwrap(), again);
        assert_eq!(again[3].epoch, 4);
    }
}
