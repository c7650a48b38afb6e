//! Analytic cross-entropy gradients against central finite differences, with
//! the loss recomputed from scratch on the echo backend.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfie_core::adapter::Params;
use selfie_core::lm::template::TargetTemplate;
use selfie_core::lm::tokenizer::{TokenId, TOY_RESERVED};
use selfie_core::lm::{loss_with_injection, InjectionSpec, ToyLm};
use selfie_core::{Adapter, AdapterKind, ModelDims};

const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;
const INSTANCES: usize = 50;
const VOCAB: usize = 20;

fn kinds() -> [AdapterKind; 6] {
    [
        AdapterKind::Identity,
        AdapterKind::ScaleOnly,
        AdapterKind::ScalarAffine,
        AdapterKind::ScalarAffineLowRank { rank: 2 },
        AdapterKind::LowRankOnly { rank: 3 },
        AdapterKind::FullRank,
    ]
}

/// f(h) = alpha h + U (V^T h) + W h + b, straight from the definition.
fn forward(kind: AdapterKind, p: &Params<f64>, h: &[f64]) -> Vec<f64> {
    let d = h.len();
    if kind == AdapterKind::Identity {
        return h.to_vec();
    }
    let mut out = vec![0.0; d];
    if let Some(&a) = p.alpha.first() {
        for i in 0..d {
            out[i] += a * h[i];
        }
    }
    if let Some(r) = kind.rank() {
        for i in 0..d {
            for k in 0..r {
                let vth: f64 = (0..d).map(|j| p.v[j * r + k] * h[j]).sum();
                out[i] += p.u[i * r + k] * vth;
            }
        }
    }
    if !p.w.is_empty() {
        for i in 0..d {
            for j in 0..d {
                out[i] += p.w[i * d + j] * h[j];
            }
        }
    }
    if !p.bias.is_empty() {
        for i in 0..d {
            out[i] += p.bias[i];
        }
    }
    out
}

/// Mean over label tokens of -log softmax(E x)[y]. The echo backend shows
/// the same logits at every position after a slot.
fn ce(lm: &ToyLm, x: &[f64], labels: &[TokenId]) -> f64 {
    let e = lm.readout();
    let logits: Vec<f64> = (0..e.nrows())
        .map(|r| (0..e.ncols()).map(|c| e[(r, c)] * x[c]).sum())
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    labels.iter().map(|&y| lse - logits[y as usize]).sum::<f64>() / labels.len() as f64
}

fn flat(p: &Params<f64>) -> Vec<f64> {
    p.iter().cloned().collect()
}

fn set_flat(p: &mut Params<f64>, idx: usize, value: f64) {
    let mut i = idx;
    for slot in p.slots_mut() {
        if i < slot.len() {
            slot[i] = value;
            return;
        }
        i -= slot.len();
    }
    panic!("index {idx} out of range");
}

/// Largest elementwise relative error over entries whose magnitude exceeds 1e-6.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.abs().max(y.abs()) > 1e-6)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
        .fold(0.0, f64::max)
}

fn random_params(kind: AdapterKind, d: usize, rng: &mut ChaCha8Rng) -> Params<f32> {
    let template = Adapter::init(kind, ModelDims::new(d).unwrap(), &Default::default()).unwrap();
    let mut p = template.params().clone();
    let scale = 1.0 / (d as f32).sqrt();
    for slot in p.slots_mut() {
        for x in slot.iter_mut() {
            *x = rng.random_range(-1.0f32..1.0) * scale;
        }
    }
    if let Some(a) = p.alpha.first_mut() {
        *a = rng.random_range(0.5f32..3.0);
    }
    p
}

fn random_unit(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_labels(rng: &mut ChaCha8Rng) -> Vec<TokenId> {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| rng.random_range(TOY_RESERVED as TokenId..VOCAB as TokenId))
        .collect()
}

/// Worst relative error over all instances for one kind and width.
fn check_kind(kind: AdapterKind, d: usize, seed: u64) -> f64 {
    let lm = ToyLm::echo(VOCAB, d, seed).unwrap();
    let rendered = TargetTemplate::default().render(&lm).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let adapter = Adapter::from_params(kind, ModelDims::new(d).unwrap(), random_params(kind, d, &mut rng)).unwrap();
        let h = random_unit(d, &mut rng);
        let scale = rng.random_range(0.1..10.0);
        let sh: Vec<f64> = h.iter().map(|x| x * scale).collect();
        let labels = random_labels(&mut rng);

        let spec = InjectionSpec::new(adapter.apply(&sh).unwrap(), 1.0);
        let out = loss_with_injection(&lm, &rendered, &spec, &labels).unwrap();
        let analytic = adapter.gradients(&sh, &out.grad).unwrap();

        let base: Params<f64> = Params {
            alpha: adapter.params().alpha.iter().map(|&x| x as f64).collect(),
            bias: adapter.params().bias.iter().map(|&x| x as f64).collect(),
            u: adapter.params().u.iter().map(|&x| x as f64).collect(),
            v: adapter.params().v.iter().map(|&x| x as f64).collect(),
            w: adapter.params().w.iter().map(|&x| x as f64).collect(),
        };
        let oracle_loss = ce(&lm, &forward(kind, &base, &sh), &labels);
        assert!(
            (oracle_loss - out.loss).abs() <= 1e-10 * oracle_loss.abs().max(1.0),
            "{kind:?} d={d}: loss {} vs oracle {oracle_loss}",
            out.loss
        );

        let theta = flat(&base);
        let mut numeric = vec![0.0; theta.len()];
        for (i, &t) in theta.iter().enumerate() {
            let mut p = base.clone();
            set_flat(&mut p, i, t + STEP);
            let up = ce(&lm, &forward(kind, &p, &sh), &labels);
            set_flat(&mut p, i, t - STEP);
            let down = ce(&lm, &forward(kind, &p, &sh), &labels);
            numeric[i] = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(&flat(&analytic), &numeric));

        // Gradient with respect to the injected vector itself.
        let x = spec.vector.clone();
        let numeric_x: Vec<f64> = (0..d)
            .map(|i| {
                let mut a = x.clone();
                a[i] += STEP;
                let mut b = x.clone();
                b[i] -= STEP;
                (ce(&lm, &a, &labels) - ce(&lm, &b, &labels)) / (2.0 * STEP)
            })
            .collect();
        worst = worst.max(rel_err(&out.grad, &numeric_x));
    }
    worst
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut failures = Vec::new();
    for kind in kinds() {
        for d in [4, 8, 16] {
            let worst = check_kind(kind, d, 1000 + d as u64);
            if worst > REL_TOL {
                failures.push(format!("{kind:?} d={d}: worst relative error {worst:.2e}"));
            }
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn parameter_counts_match_tensor_sizes() {
    for kind in kinds() {
        for d in [4, 8, 16] {
            let a = Adapter::init(kind, ModelDims::new(d).unwrap(), &Default::default()).unwrap();
            assert_eq!(a.params().len(), kind.parameter_count(d), "{kind:?} d={d}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Gradient through the external scale: d/dv L(s v) = s L'(s v).
    #[test]
    fn external_scale_chain_rule(seed in 0u64..10_000, s in 0.05f64..25.0, d in 2usize..12) {
        let lm = ToyLm::echo(VOCAB, d, seed).unwrap();
        let rendered = TargetTemplate::default().render(&lm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_unit(d, &mut rng);
        let labels = random_labels(&mut rng);
        let out = loss_with_injection(&lm, &rendered, &InjectionSpec::new(v.clone(), s), &labels).unwrap();
        let unscaled = loss_with_injection(
            &lm,
            &rendered,
            &InjectionSpec::new(v.iter().map(|x| x * s).collect(), 1.0),
            &labels,
        )
        .unwrap();
        prop_assert!((out.loss - unscaled.loss).abs() < 1e-12 * out.loss.max(1.0));
        for (g, u) in out.grad.iter().zip(&unscaled.grad) {
            prop_assert!((g - s * u).abs() <= 1e-10 * (1.0 + (s * u).abs()));
        }
        let numeric: Vec<f64> = (0..d)
            .map(|i| {
                let mut a: Vec<f64> = v.iter().map(|x| x * s).collect();
                let mut b = a.clone();
                a[i] += s * STEP;
                b[i] -= s * STEP;
                (ce(&lm, &a, &labels) - ce(&lm, &b, &labels)) / (2.0 * STEP)
            })
            .collect();
        prop_assert!(rel_err(&out.grad, &numeric) < REL_TOL, "{:?} vs {:?}", out.grad, numeric);
    }
}
