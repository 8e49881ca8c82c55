use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::tables::{read_grid, GridFile};
use super::{ensure_parent, file_digest, PipelineConfig, PipelineError, Result, RunManifest};
use crate::corpus::TokenDivision;
use crate::mediation::TraceGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub figures: Vec<PathBuf>,
    pub summary_path: PathBuf,
    pub text: String,
}

fn default_inputs(config: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let run = config.output_dir().join("run");
    let mut found = Vec::new();
    let models = match std::fs::read_dir(&run) {
        Ok(d) => d,
        Err(_) => {
            return Err(PipelineError::Validation(format!(
                "{} not found; run the experiments first",
                run.display()
            )))
        }
    };
    for entry in models {
        let grids = entry.map_err(|e| PipelineError::io(&run, e))?.path().join("grids");
        let Ok(files) = std::fs::read_dir(&grids) else {
            continue;
        };
        for f in files {
            let p = f.map_err(|e| PipelineError::io(&grids, e))?.path();
            if p.extension().is_some_and(|x| x == "csv") {
                found.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn verify(config: &PipelineConfig, manifest: &RunManifest, path: &Path) -> Result<()> {
    let key = RunManifest::key(config, path);
    let actual = file_digest(path)?;
    match manifest.outputs.get(&key) {
        None => Err(PipelineError::Validation(format!(
            "{} is not listed in the run manifest",
            path.display()
        ))),
        Some(expected) if *expected != actual => Err(PipelineError::Digest {
            path: path.display().to_string(),
            expected: expected.clone(),
            actual,
        }),
        Some(_) => Ok(()),
    }
}

/// Top cells of a grid as text lines, or a single "no effect" line.
pub fn summarize_grid(model: &str, grid: &TraceGrid, top_k: usize) -> String {
    let mut s = format!("{model} {} {}:", grid.condition, grid.kind);
    if grid.is_all_zero() {
        s.push_str(" no effect\n");
        return s;
    }
    s.push('\n');
    for (rank, (d, layer, v)) in grid.ranked_cells().into_iter().take(top_k).enumerate() {
        let _ = writeln!(s, "  {}. {} layer {layer}: {v:.4}", rank + 1, d.as_str());
    }
    s
}

fn color(v: Option<f64>, scale: f64) -> String {
    let Some(v) = v else {
        return "#bdbdbd".into();
    };
    let t = if scale > 0.0 { (v / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |c: f64| (255.0 - t.abs() * (255.0 - c)).round() as u8;
    if t >= 0.0 {
        format!("#{:02x}{:02x}{:02x}", fade(178.0), fade(24.0), fade(43.0))
    } else {
        format!("#{:02x}{:02x}{:02x}", fade(33.0), fade(102.0), fade(172.0))
    }
}

/// Heatmap with one row per token division and one column per layer.
/// `scale` is the absolute value mapped to full saturation.
pub fn render_svg(model: &str, grid: &TraceGrid, scale: f64, cell: usize) -> String {
    let label_w = 130;
    let top = 40;
    let legend = 40;
    let w = label_w + cell * grid.n_layers.max(1) + 20;
    let h = top + cell * TokenDivision::ALL.len() + legend + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{label_w}" y="16" font-size="13">{model}: {} {}</text>"#,
        grid.condition, grid.kind
    );
    for (r, d) in TokenDivision::ALL.iter().enumerate() {
        let y = top + r * cell;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            label_w - 6,
            y + cell / 2 + 4,
            d.as_str()
        );
        for l in 0..grid.n_layers {
            let v = grid.value(*d, l);
            let title = v.map_or("absent".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{cell}" height="{cell}" fill="{}" stroke="white"><title>{} layer {l}: {title}</title></rect>"#,
                label_w + l * cell,
                color(v, scale),
                d.as_str()
            );
        }
    }
    let base = top + cell * TokenDivision::ALL.len();
    for l in 0..grid.n_layers {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{l}</text>"#,
            label_w + l * cell + cell / 2,
            base + 14
        );
    }
    let ly = base + 26;
    let steps = 9;
    for i in 0..steps {
        let v = scale * (2.0 * i as f64 / (steps - 1) as f64 - 1.0);
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{ly}" width="14" height="10" fill="{}"/>"#,
            label_w + i * 14,
            color(Some(v), scale)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}">-{scale:.3} .. {scale:.3}</text>"#,
        label_w + steps * 14 + 8,
        ly + 9
    );
    s.push_str("</svg>\n");
    s
}

fn stats_text(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let mut s = String::new();
    let Some(groups) = v.get("stats").and_then(|x| x.as_object()) else {
        return Ok(s);
    };
    for (cond, records) in groups {
        for r in records.as_array().into_iter().flatten() {
            let cmp = r["comparison"].as_str().unwrap_or("");
            let models = r["models"]
                .as_array()
                .map(|m| m.iter().filter_map(|x| x.as_str()).collect::<Vec<_>>().join("+"))
                .unwrap_or_default();
            let _ = write!(s, "{cond} {cmp} [{models}]: ");
            if let Some(e) = r["error"].as_str() {
                let _ = writeln!(s, "not computed ({e})");
                continue;
            }
            let m = &r["summary"];
            let _ = writeln!(
                s,
                "{} n={} mean={:.4} | {} n={} mean={:.4} | t={:.3} df={:.1} p={:.4} d={:.3}",
                m["groups"][0].as_str().unwrap_or(""),
                m["sizes"][0],
                m["means"][0].as_f64().unwrap_or(f64::NAN),
                m["groups"][1].as_str().unwrap_or(""),
                m["sizes"][1],
                m["means"][1].as_f64().unwrap_or(f64::NAN),
                m["t"].as_f64().unwrap_or(f64::NAN),
                m["df"].as_f64().unwrap_or(f64::NAN),
                m["p"].as_f64().unwrap_or(f64::NAN),
                m["cohens_d"].as_f64().unwrap_or(f64::NAN),
            );
        }
    }
    Ok(s)
}

/// Renders heatmaps and a text summary from grid files. When the run
/// manifest exists every input must be listed there with a matching digest.
pub fn cmd_report(config: &PipelineConfig, inputs: &[PathBuf]) -> Result<ReportSummary> {
    config.validate()?;
    let t0 = Instant::now();
    let inputs = if inputs.is_empty() {
        default_inputs(config)?
    } else {
        inputs.to_vec()
    };
    if inputs.is_empty() {
        return Err(PipelineError::Validation("no grid files to report".into()));
    }
    let run_manifest = RunManifest::path_for(config, "run");
    let manifest = if run_manifest.is_file() {
        Some(RunManifest::read(&run_manifest)?)
    } else {
        None
    };
    let mut m = RunManifest::new("report", config);
    let mut grids: Vec<GridFile> = Vec::new();
    for p in &inputs {
        if let Some(man) = &manifest {
            verify(config, man, p)?;
        }
        grids.push(read_grid(p)?);
        m.add_input(config, p)?;
    }

    let mut scale: BTreeMap<(String, String), f64> = BTreeMap::new();
    for g in &grids {
        let peak = g
            .grid
            .values
            .iter()
            .flatten()
            .flatten()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        let e = scale
            .entry((g.model.clone(), g.grid.condition.to_string()))
            .or_insert(0.0);
        *e = e.max(peak);
    }

    let out = config.output_dir().join("report");
    let mut figures = Vec::new();
    let mut text = String::new();
    for g in &grids {
        let cond = g.grid.condition.to_string();
        let s = scale[&(g.model.clone(), cond.clone())];
        let path = out.join(&g.model).join(format!("{cond}_{}.svg", g.grid.kind));
        ensure_parent(&path)?;
        std::fs::write(&path, render_svg(&g.model, &g.grid, s, config.report.cell))
            .map_err(|e| PipelineError::io(&path, e))?;
        m.add_output(config, &path)?;
        figures.push(path);
        text.push_str(&summarize_grid(&g.model, &g.grid, config.report.top_k));
    }
    let stats = config.output_dir().join("run").join("stats.json");
    if stats.is_file() {
        if let Some(man) = &manifest {
            verify(config, man, &stats)?;
        }
        m.add_input(config, &stats)?;
        text.push('\n');
        text.push_str(&stats_text(&stats)?);
    }
    let summary_path = out.join("summary.txt");
    ensure_parent(&summary_path)?;
    std::fs::write(&summary_path, &text).map_err(|e| PipelineError::io(&summary_path, e))?;
    m.add_output(config, &summary_path)?;
    m.time("report", t0);
    m.write(&RunManifest::path_for(config, "report"))?;
    Ok(ReportSummary {
        figures,
        summary_path,
        text,
    })
}
