#![allow(dead_code)]

use ragtrace::corpus::{generate_synthetic_corpus, Corpus, CorpusSpec, PromptInstance, Vocab};
use ragtrace::model::{ModelConfig, Seq2Seq};

pub fn corpus(relations: usize, facts: usize, seed: u64) -> (Corpus, Vocab) {
    let c = generate_synthetic_corpus(&CorpusSpec::new(relations, facts, seed)).unwrap();
    let v = c.vocab();
    (c, v)
}

pub fn instances(relations: usize, facts: usize, seed: u64) -> (Vocab, Vec<PromptInstance>) {
    let (c, v) = corpus(relations, facts, seed);
    let xs = c.instances(&v, seed ^ 0x5a).unwrap();
    (v, xs)
}

/// Randomly initialised 2+2-layer model small enough for exhaustive sweeps.
pub fn small_model(vocab: usize, seed: u64) -> Seq2Seq {
    Seq2Seq::new(ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_enc_layers: 2,
        n_dec_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_len: 48,
        seed,
        tie_output: false,
        ln_eps: 1e-5,
    })
    .unwrap()
}

/// Denominator floor for gradients that vanish identically (attention key
/// biases), where finite differences only see rounding noise.
pub const GRAD_FLOOR: f64 = 1e-3;

/// Norm-wise relative error `|a - b| / max(|a| + |b|, GRAD_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nb).max(GRAD_FLOOR)
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Reference Welch test from the textbook formulas: `(t, df, two-sided p)`.
pub fn welch_oracle(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let (qa, qb) = (va / na, vb / nb);
    let t = (ma - mb) / (qa + qb).sqrt();
    let df = (qa + qb).powi(2) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    let p = inc_beta(df / 2.0, 0.5, df / (df + t * t));
    (t, df, p)
}

/// Reference Cohen's d with the (n - 1)-weighted pooled standard deviation.
pub fn cohens_d_oracle(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ma = a.iter().sum::<f64>() / na;
    let mb = b.iter().sum::<f64>() / nb;
    let ssa: f64 = a.iter().map(|v| (v - ma).powi(2)).sum();
    let ssb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
    (ma - mb) / ((ssa + ssb) / (na + nb - 2.0)).sqrt()
}

pub fn same_sig(a: f64, b: f64, digits: i32) -> bool {
    let scale = a.abs().max(b.abs());
    scale == 0.0 || (a - b).abs() <= 10f64.powi(-digits) * scale
}

pub mod grad {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use ragtrace::model::{batch_loss, loss_and_gradients, ModelConfig, Param, Seq2Seq, TrainExample};
    use ragtrace::tensor::{Graph, Tensor, Var};

    use super::rel_err;

    pub const STEP: f64 = 1e-6;

    pub struct OpCase {
        pub name: &'static str,
        pub shapes: Vec<Vec<usize>>,
        pub build: fn(&mut Graph, &[Var]) -> Var,
    }

    fn fixed(shape: &[usize], salt: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(salt);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    pub fn op_cases() -> Vec<OpCase> {
        vec![
            OpCase { name: "matmul", shapes: vec![vec![3, 4], vec![4, 2]], build: |g, v| g.matmul(v[0], v[1]).unwrap() },
            OpCase { name: "matmul_nt", shapes: vec![vec![3, 4], vec![2, 4]], build: |g, v| g.matmul_nt(v[0], v[1]).unwrap() },
            OpCase { name: "add", shapes: vec![vec![3, 4], vec![3, 4]], build: |g, v| g.add(v[0], v[1]).unwrap() },
            OpCase { name: "mul", shapes: vec![vec![3, 4], vec![3, 4]], build: |g, v| g.mul(v[0], v[1]).unwrap() },
            OpCase { name: "add_row", shapes: vec![vec![3, 4], vec![4]], build: |g, v| g.add_row(v[0], v[1]).unwrap() },
            OpCase { name: "scale", shapes: vec![vec![3, 4]], build: |g, v| g.scale(v[0], -0.7).unwrap() },
            OpCase {
                name: "add_const",
                shapes: vec![vec![3, 4]],
                build: |g, v| g.add_const(v[0], &fixed(&[3, 4], 99)).unwrap(),
            },
            OpCase { name: "gelu", shapes: vec![vec![3, 5]], build: |g, v| g.gelu(v[0]).unwrap() },
            OpCase {
                name: "layer_norm",
                shapes: vec![vec![3, 6], vec![6], vec![6]],
                build: |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
            },
            OpCase { name: "softmax_rows", shapes: vec![vec![3, 5]], build: |g, v| g.softmax_rows(v[0]).unwrap() },
            OpCase { name: "slice_cols", shapes: vec![vec![3, 5]], build: |g, v| g.slice_cols(v[0], 1, 3).unwrap() },
            OpCase {
                name: "concat_cols",
                shapes: vec![vec![3, 2], vec![3, 4]],
                build: |g, v| g.concat_cols(&[v[0], v[1], v[0]]).unwrap(),
            },
            OpCase {
                name: "gather_rows",
                shapes: vec![vec![5, 3]],
                build: |g, v| g.gather_rows(v[0], &[0, 2, 2, 4]).unwrap(),
            },
            OpCase {
                name: "overwrite_rows",
                shapes: vec![vec![5, 3]],
                build: |g, v| {
                    let (r, q) = (fixed(&[1, 3], 7), fixed(&[2, 3], 8));
                    g.overwrite_rows(v[0], &[0..1, 2..4], &[&r, &q]).unwrap()
                },
            },
            OpCase {
                name: "cross_entropy",
                shapes: vec![vec![3, 5]],
                build: |g, v| g.cross_entropy(v[0], &[4, 0, 2]).unwrap(),
            },
            OpCase { name: "sum", shapes: vec![vec![3, 4]], build: |g, v| g.sum(v[0]).unwrap() },
        ]
    }

    /// Scalar probe `sum(w ⊙ op(x))` with fixed random weights `w`.
    fn probe(case: &OpCase, inputs: &[Tensor], params: bool) -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| if params { g.param(Arc::new(t.clone())) } else { g.constant(t.clone()) })
            .collect();
        let out = (case.build)(&mut g, &vars);
        let w = fixed(g.value(out).shape(), 1234);
        let wv = g.constant(w);
        let prod = g.mul(out, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        let value = g.value(loss).item().unwrap();
        if !params {
            return (value, Vec::new());
        }
        g.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (value, grads)
    }

    /// Worst norm-wise relative error between analytic and central-difference
    /// gradients over the case's inputs.
    pub fn check_op(case: &OpCase, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(s, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
            })
            .collect();
        let (_, analytic) = probe(case, &inputs, true);
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let mut numeric = vec![0.0; a.len()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += STEP;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= STEP;
                *slot = (probe(case, &plus, false).0 - probe(case, &minus, false).0) / (2.0 * STEP);
            }
            worst = worst.max(rel_err(a.data(), &numeric));
        }
        worst
    }

    pub fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_len: 8,
            seed,
            tie_output: false,
            ln_eps: 1e-5,
        }
    }

    fn with_param(model: &Seq2Seq, i: usize, j: usize, delta: f64) -> Seq2Seq {
        let mut params: Vec<Param> = model.params().to_vec();
        let mut t = (*params[i].value).clone();
        t.data_mut()[j] += delta;
        params[i].value = Arc::new(t);
        Seq2Seq::from_params(model.config().clone(), params).unwrap()
    }

    /// Full-model loss gradient against central differences over every
    /// parameter coordinate.
    pub fn check_model(seed: u64) -> f64 {
        let model = Seq2Seq::new(tiny_config(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let data: Vec<TrainExample> = (0..2)
            .map(|_| TrainExample {
                input: (0..rng.random_range(3..6)).map(|_| rng.random_range(4..10)).collect(),
                target: (0..rng.random_range(1..3)).map(|_| rng.random_range(4..10)).collect(),
            })
            .collect();
        let batch: Vec<&TrainExample> = data.iter().collect();
        let (_, analytic) = loss_and_gradients(&model, &batch).unwrap();
        let loss = |m: &Seq2Seq| batch_loss(m, &batch).unwrap();
        let mut all_a = Vec::new();
        let mut all_n = Vec::new();
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let mut numeric = vec![0.0; a.len()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let up = loss(&with_param(&model, i, j, STEP));
                let down = loss(&with_param(&model, i, j, -STEP));
                *slot = (up - down) / (2.0 * STEP);
            }
            worst = worst.max(rel_err(a.data(), &numeric));
            all_a.extend_from_slice(a.data());
            all_n.extend(numeric);
        }
        worst.max(rel_err(&all_a, &all_n))
    }
}

pub mod ident {
    use ragtrace::corpus::{ContextKind, PromptInstance};
    use ragtrace::mediation::{
        capture_zero_states, exp1_trace, joint_effect, noise_span, pse_trace_with_states, trace, NoiseSpec,
        NoiseTarget, Setup, TraceOptions,
    };
    use ragtrace::model::{Intervention, Provenance, RecordId, Seq2Seq, Site, SiteKind, Stream, BOS};
    use ragtrace::parallel::Executor;

    pub fn all_sites(model: &Seq2Seq, enc_len: usize, dec_len: usize) -> Vec<Site> {
        let mut v = Vec::new();
        for (stream, n) in [(Stream::Encoder, enc_len), (Stream::Decoder, dec_len)] {
            v.push(Site::embedding(stream, 0..n));
            for l in 0..model.n_layers(stream) {
                for kind in [SiteKind::Hidden, SiteKind::MlpOut, SiteKind::AttnOut] {
                    v.push(Site::new(stream, kind, l, 0..n));
                }
            }
        }
        v
    }

    /// Self-patching, zero-noise and empty-intervention passes all reproduce
    /// the plain logits bit for bit.
    pub fn baseline_identities(model: &Seq2Seq, inst: &PromptInstance) -> bool {
        let input = inst.input(Some(ContextKind::Original));
        let mut dec = vec![BOS];
        dec.extend(&inst.answer);
        let base = model.forward(&input, &dec).unwrap();
        let sites = all_sites(model, input.len(), dec.len());
        let (captured, rec) = model.forward_capture(&input, &dec, &sites, Provenance::Clean).unwrap();
        let ivs: Vec<Intervention> = sites.iter().map(|s| Intervention::patch(s.clone(), RecordId(0))).collect();
        let patched = model.forward_intervene(&input, &dec, &ivs, &[rec]).unwrap();
        let noise = [
            Intervention::noise(Site::embedding(Stream::Encoder, 0..input.len()), 0.0, 3),
            Intervention::noise(Site::embedding(Stream::Decoder, 0..dec.len()), 0.0, 4),
        ];
        let noised = model.forward_intervene(&input, &dec, &noise, &[]).unwrap();
        let empty = model.forward_intervene(&input, &dec, &[], &[]).unwrap();
        let bits = |t: &ragtrace::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let b = bits(&base);
        [captured, patched, noised, empty].iter().all(|t| bits(t) == b)
    }

    fn zero_noise(target: NoiseTarget) -> Setup {
        Setup::Exp2(NoiseSpec { sigma: 0.0, seed: 1, target })
    }

    /// Largest |IE| or |PSE| over every site when the corruption is a no-op.
    pub fn null_effect(model: &Seq2Seq, inst: &PromptInstance, exec: &Executor) -> f64 {
        let opts = TraceOptions::default();
        let mut worst: f64 = 0.0;
        for target in [NoiseTarget::Subject, NoiseTarget::Relation] {
            let setup = zero_noise(target);
            for kind in [SiteKind::Embedding, SiteKind::Hidden, SiteKind::MlpOut, SiteKind::AttnOut] {
                let s = trace(model, inst, &setup, kind, &[], &opts, exec).unwrap();
                worst = s.ie.values().chain([&s.te]).fold(worst, |w, v| w.max(v.abs()));
            }
            for (restore, frozen) in [(SiteKind::MlpOut, SiteKind::AttnOut), (SiteKind::AttnOut, SiteKind::MlpOut)] {
                let s = trace(model, inst, &setup, restore, &[frozen], &opts, exec).unwrap();
                worst = s.ie.values().fold(worst, |w, v| w.max(v.abs()));
            }
        }
        worst
    }

    /// |IE - TE| when the whole final encoder hidden sequence is restored
    /// (exp1) and when every noised embedding site is restored (exp2).
    pub fn full_mediator_gaps(model: &Seq2Seq, inst: &PromptInstance, sigma: f64) -> (f64, f64) {
        let n = inst.input(Some(ContextKind::Original)).len();
        let last = model.n_layers(Stream::Encoder) - 1;
        let (te, ie) = joint_effect(model, inst, &Setup::Exp1, &[Site::encoder(SiteKind::Hidden, last, 0..n)]).unwrap();
        let exp1 = (te - ie).abs();
        let mut exp2: f64 = 0.0;
        for target in [NoiseTarget::Subject, NoiseTarget::Relation] {
            let sites: Vec<Site> = noise_span(inst, target)
                .into_iter()
                .filter(|s| !s.is_empty())
                .map(|s| Site::embedding(Stream::Encoder, s))
                .collect();
            let setup = Setup::Exp2(NoiseSpec { sigma, seed: 21, target });
            let (te, ie) = joint_effect(model, inst, &setup, &sites).unwrap();
            exp2 = exp2.max((te - ie).abs());
        }
        (exp1, exp2)
    }

    /// Largest per-site gap between a path-specific sweep with nothing frozen
    /// and the plain exp1 indirect-effect sweep.
    pub fn pse_reduction_gap(model: &Seq2Seq, inst: &PromptInstance, exec: &Executor) -> f64 {
        let opts = TraceOptions::default();
        let mut worst: f64 = 0.0;
        for (restore, other) in [(SiteKind::MlpOut, SiteKind::AttnOut), (SiteKind::AttnOut, SiteKind::MlpOut)] {
            let states = capture_zero_states(model, inst, &Setup::Exp1, &[other]).unwrap();
            let pse = pse_trace_with_states(model, inst, &Setup::Exp1, restore, &[], Some(&states), &opts, exec).unwrap();
            let ie = exp1_trace(model, inst, restore, &opts, exec).unwrap();
            assert_eq!(pse.ie.len(), ie.ie.len());
            for (site, v) in &ie.ie {
                worst = worst.max((pse.ie[site] - v).abs());
            }
        }
        worst
    }
}
