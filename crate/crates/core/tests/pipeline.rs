mod common;

use std::path::Path;

use ragtrace::mediation::Condition;
use ragtrace::pipeline::{
    cmd_build_corpus, cmd_report, cmd_run, cmd_train, file_digest, read_grid, read_loss_curve, render_svg,
    summarize_grid, PipelineConfig, PipelineError, RunManifest, Variant,
};

const SMALL: &str = r#"
[corpus]
relations = 4
facts_per_relation = 4
[model]
d_model = 32
d_ff = 64
[train]
epochs = 200
[experiment]
max_instances = 4
probes = 3
kinds = ["hidden", "mlp"]
"#;

fn small(dir: &Path) -> PipelineConfig {
    let mut c = PipelineConfig::from_toml_str(SMALL).unwrap();
    c.set_output(dir);
    c
}

fn trained(dir: &Path) -> PipelineConfig {
    let c = small(dir);
    cmd_build_corpus(&c).unwrap();
    cmd_train(&c, Variant::Memorizer, false).unwrap();
    cmd_train(&c, Variant::Copier, false).unwrap();
    c
}

fn csv_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn default_corpus_has_27_relations_and_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = PipelineConfig::default();
    ca.set_output(a.path());
    let mut cb = PipelineConfig::default();
    cb.set_output(b.path());
    let ma = cmd_build_corpus(&ca).unwrap();
    let mb = cmd_build_corpus(&cb).unwrap();
    assert_eq!(ma.outputs, mb.outputs);
    let (corpus, _) = ragtrace::pipeline::load_corpus(&ca).unwrap();
    assert_eq!(corpus.relations().len(), 27);
    let m = RunManifest::read(&RunManifest::path_for(&ca, "build-corpus")).unwrap();
    assert_eq!(m, ma);
}

#[test]
fn single_fact_relations_fail_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.corpus.facts_per_relation = 1;
    let e = cmd_build_corpus(&c).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("counterfactual"));
}

#[test]
fn missing_inputs_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let e = cmd_train(&c, Variant::Copier, false).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
    cmd_build_corpus(&c).unwrap();
    let e = cmd_run(&c, None, None).unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
    assert!(e.to_string().contains("train"));
}

#[test]
fn zero_epochs_gives_flagged_untrained_checkpoint_and_empty_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.train.epochs = 0;
    cmd_build_corpus(&c).unwrap();
    let s = cmd_train(&c, Variant::Copier, false).unwrap();
    assert!(s.untrained);
    assert!(c.checkpoint_path(Variant::Copier).is_file());
    let report = std::fs::read_to_string(dir.path().join("train/copier_report.json")).unwrap();
    assert!(report.contains("\"untrained\": true"));
    c.experiment.models = vec![Variant::Copier];
    let e = cmd_run(&c, Some(Condition::Exp1), None).unwrap_err();
    assert!(matches!(e, PipelineError::EmptyCohort { .. }));
    assert_eq!(e.exit_code(), 3);
    assert!(e.to_string().contains("parametric-knowledge filter"));
}

#[test]
fn missed_target_keeps_report_and_resume_continues_the_curve() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.train.epochs = 3;
    c.train.eval_every = 1;
    c.train.target_accuracy = 1.0;
    cmd_build_corpus(&c).unwrap();
    let e = cmd_train(&c, Variant::Copier, false).unwrap_err();
    assert_eq!(e.exit_code(), 4);
    let loss = dir.path().join("train/copier_loss.csv");
    let first = read_loss_curve(&loss).unwrap();
    assert_eq!(first.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    assert!(dir.path().join("train/copier_report.json").is_file());
    c.train.epochs = 2;
    let _ = cmd_train(&c, Variant::Copier, true);
    let curve = read_loss_curve(&loss).unwrap();
    assert_eq!(curve.len(), 5);
    assert_eq!(&curve[..3], first.as_slice());
    assert_eq!(curve.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    assert!(curve[4].loss < curve[0].loss);
}

#[test]
fn end_to_end_is_deterministic_across_worker_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = trained(a.path());
    let cb = trained(b.path());
    cmd_run(&ca, None, Some(1)).unwrap();
    cmd_run(&cb, None, Some(3)).unwrap();
    let files = csv_files(a.path());
    assert_eq!(files, csv_files(b.path()));
    assert!(files.len() > 10);
    for f in &files {
        assert_eq!(
            file_digest(&a.path().join(f)).unwrap(),
            file_digest(&b.path().join(f)).unwrap(),
            "{}",
            f.display()
        );
    }
    let ma = RunManifest::read(&RunManifest::path_for(&ca, "run")).unwrap();
    let mb = RunManifest::read(&RunManifest::path_for(&cb, "run")).unwrap();
    assert_eq!(ma.outputs, mb.outputs);

    // Report: one figure per grid, refuses tampered inputs.
    let r = cmd_report(&ca, &[]).unwrap();
    assert_eq!(r.figures.len(), files.iter().filter(|f| f.starts_with("run") && f.to_string_lossy().contains("grids")).count());
    let svg = std::fs::read_to_string(&r.figures[0]).unwrap();
    assert_eq!(svg.matches("text-anchor=\"end\"").count(), 11);
    let grid = a.path().join("run/copier/grids/exp1_hidden.csv");
    let text = std::fs::read_to_string(&grid).unwrap();
    std::fs::write(&grid, text.replacen("question,", "question,9", 1)).unwrap();
    let e = cmd_report(&ca, std::slice::from_ref(&grid)).unwrap_err();
    assert!(matches!(e, PipelineError::Digest { .. }), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn zero_sigma_exp2_grids_are_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = trained(dir.path());
    c.experiment.noise_multiplier = 0.0;
    c.experiment.models = vec![Variant::Memorizer];
    cmd_run(&c, Some(Condition::Exp2Subject), None).unwrap();
    for kind in ["hidden", "mlp"] {
        let g = read_grid(&dir.path().join(format!("run/memorizer/grids/exp2-subject_{kind}.csv"))).unwrap();
        assert!(g.grid.is_all_zero());
        assert!(summarize_grid(&g.model, &g.grid, 3).contains("no effect"));
    }
    let r = cmd_report(&c, &[]).unwrap();
    assert!(r.text.contains("no effect"));
}

#[test]
fn malformed_grid_reports_line_and_identical_grids_render_identically() {
    let dir = tempfile::tempdir().unwrap();
    let c = trained(dir.path());
    let mut only = c.clone();
    only.experiment.models = vec![Variant::Copier];
    only.experiment.kinds = vec![ragtrace::model::SiteKind::Hidden];
    cmd_run(&only, Some(Condition::Exp1), None).unwrap();
    let src = dir.path().join("run/copier/grids/exp1_hidden.csv");
    let g = read_grid(&src).unwrap();
    let copy = dir.path().join("copy.csv");
    std::fs::copy(&src, &copy).unwrap();
    let h = read_grid(&copy).unwrap();
    assert_eq!(render_svg(&g.model, &g.grid, 1.0, 30), render_svg(&h.model, &h.grid, 1.0, 30));

    let text = std::fs::read_to_string(&src).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut broken: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
    broken[6] = broken[6].replacen(',', ",zz", 1);
    std::fs::write(&copy, broken.join("\n")).unwrap();
    let e = read_grid(&copy).unwrap_err();
    match &e {
        PipelineError::Parse { line, .. } => assert_eq!(*line, 7),
        other => panic!("expected a parse error, got {other}"),
    }
    assert!(e.to_string().contains(":7:"));

    // Unlisted inputs are refused while a run manifest exists.
    let e = cmd_report(&only, &[copy]).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}
