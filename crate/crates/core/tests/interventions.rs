mod common;

use common::ident::{baseline_identities, full_mediator_gaps, null_effect, pse_reduction_gap};
use common::{instances, small_model};
use ragtrace::corpus::ContextKind;
use ragtrace::mediation::{
    estimate_noise_sigma, exp1_trace, exp2_trace, layer_window, pse_trace, pse_trace_with_states, Condition,
    MediationError, NoiseSpec, NoiseTarget, Setup, TraceOptions,
};
use ragtrace::model::{SiteKind, Stream};
use ragtrace::parallel::Executor;

#[test]
fn baseline_passes_are_bitwise_identical() {
    let (v, xs) = instances(4, 3, 2);
    for seed in 0..3 {
        let m = small_model(v.len(), seed);
        for inst in xs.iter().take(4) {
            assert!(baseline_identities(&m, inst), "instance {}", inst.id);
        }
    }
}

#[test]
fn zero_sigma_gives_null_effects() {
    let (v, xs) = instances(3, 3, 4);
    let m = small_model(v.len(), 1);
    let exec = Executor::sequential();
    for inst in xs.iter().take(4) {
        assert!(null_effect(&m, inst, &exec) <= 1e-12);
    }
}

#[test]
fn full_restoration_recovers_total_effect() {
    let (v, xs) = instances(4, 3, 6);
    let m = small_model(v.len(), 3);
    let sigma = estimate_noise_sigma(&m, &xs, 3.0).unwrap();
    for inst in xs.iter().take(8) {
        let (a, b) = full_mediator_gaps(&m, inst, sigma);
        assert!(a <= 1e-9 && b <= 1e-9, "instance {}: {a:e} {b:e}", inst.id);
    }
}

#[test]
fn pse_without_frozen_sites_is_plain_ie() {
    let (v, xs) = instances(3, 3, 8);
    let m = small_model(v.len(), 5);
    let exec = Executor::sequential();
    for inst in xs.iter().take(3) {
        assert!(pse_reduction_gap(&m, inst, &exec) <= 1e-12);
    }
}

#[test]
fn sweep_covers_every_site_with_window_keys() {
    let (v, xs) = instances(3, 3, 10);
    let m = small_model(v.len(), 2);
    let inst = &xs[0];
    let n = inst.input(Some(ContextKind::Original)).len();
    let exec = Executor::sequential();
    let opts = TraceOptions::default();
    let h = exp1_trace(&m, inst, SiteKind::Hidden, &opts, &exec).unwrap();
    assert_eq!(h.ie.len(), n * m.n_layers(Stream::Encoder));
    assert_eq!(h.condition, Condition::Exp1);
    let e = exp1_trace(&m, inst, SiteKind::Embedding, &opts, &exec).unwrap();
    assert_eq!(e.ie.len(), n);
    assert!(e.ie.keys().all(|s| s.layer.is_none()));
    assert_eq!(h.te, h.y1 - h.y0);
}

#[test]
fn parallel_sweep_matches_sequential() {
    let (v, xs) = instances(3, 3, 12);
    let m = small_model(v.len(), 4);
    let opts = TraceOptions { window: Some(2) };
    let seq = exp1_trace(&m, &xs[1], SiteKind::MlpOut, &opts, &Executor::sequential()).unwrap();
    let par = exp1_trace(&m, &xs[1], SiteKind::MlpOut, &opts, &Executor::new(3)).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn exp2_noise_is_reproducible_per_instance() {
    let (v, xs) = instances(3, 3, 14);
    let m = small_model(v.len(), 6);
    let noise = NoiseSpec { sigma: 0.5, seed: 9, target: NoiseTarget::Subject };
    let exec = Executor::sequential();
    let opts = TraceOptions::default();
    let a = exp2_trace(&m, &xs[0], &noise, SiteKind::Hidden, &opts, &exec).unwrap();
    let b = exp2_trace(&m, &xs[0], &noise, SiteKind::Hidden, &opts, &exec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.condition, Condition::Exp2Subject);
    assert_ne!(a.y0, a.y1);
}

#[test]
fn pse_labels_and_rejects_hidden_restore() {
    let (v, xs) = instances(3, 3, 16);
    let m = small_model(v.len(), 7);
    let exec = Executor::sequential();
    let opts = TraceOptions::default();
    let s = pse_trace(&m, &xs[0], &Setup::Exp1, SiteKind::AttnOut, &opts, &exec).unwrap();
    assert_eq!(s.condition, Condition::PseAttn);
    assert!(matches!(
        pse_trace(&m, &xs[0], &Setup::Exp1, SiteKind::Hidden, &opts, &exec),
        Err(MediationError::Argument(_))
    ));
    assert!(pse_trace_with_states(&m, &xs[0], &Setup::Exp1, SiteKind::MlpOut, &[SiteKind::AttnOut], None, &opts, &exec)
        .is_err());
}

#[test]
fn window_clipping_examples() {
    assert_eq!(layer_window(0, 6, 24), 0..=2);
    assert_eq!(layer_window(10, 6, 24), 7..=12);
    assert_eq!(layer_window(23, 6, 24), 20..=23);
    assert_eq!(layer_window(1, 6, 2), 0..=1);
    assert_eq!(layer_window(5, 1, 8), 5..=5);
}
