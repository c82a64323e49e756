use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check, GradCheckConfig, GradFn};

fn rows(data: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(data).unwrap()
}

fn unit(rows: usize, dim: usize, seed: u64) -> Tensor<f64> {
    random_unit_rows(rows, dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Logits block built directly from raw `pos` and `neg` values.
fn raw_block(tape: &mut Tape<f64>, pos: &[f64], neg: &[&[f64]]) -> LogitsBlock {
    let n = pos.len();
    let pos = tape.constant(Tensor::from_vec(vec![n, 1], pos.to_vec()).unwrap());
    let neg = tape.constant(rows(neg));
    LogitsBlock { pos, neg, neg_mask: None }
}

fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
    tape.scalar_value(v).unwrap()
}

// Straightforward f64 reference implementations.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn ref_softmax(logits: &[f64], tau: f64, skip: Option<usize>) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    let mut z = 0.0;
    for (k, &l) in logits.iter().enumerate() {
        if Some(k) != skip {
            out[k] = (l / tau).exp();
            z += out[k];
        }
    }
    out.iter().map(|v| v / z).collect()
}

fn ref_candidates(z1: &Tensor<f64>, z2: &Tensor<f64>, q: &Tensor<f64>, i: usize) -> Vec<f64> {
    let mut c = vec![dot(z1.row(i), z2.row(i))];
    for j in 0..q.shape()[0] {
        c.push(dot(z1.row(i), q.row(j)));
    }
    c
}

fn ref_target(z2: &Tensor<f64>, q: &Tensor<f64>, tau_m: f64) -> Vec<Vec<f64>> {
    (0..z2.shape()[0])
        .map(|i| {
            let mut c = vec![0.0];
            for j in 0..q.shape()[0] {
                c.push(dot(z2.row(i), q.row(j)));
            }
            ref_softmax(&c, tau_m, Some(0))
        })
        .collect()
}

fn ref_ce(target: &[Vec<f64>], pred: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (t, p) in target.iter().zip(pred) {
        for (a, b) in t.iter().zip(p) {
            if *a > 0.0 {
                total -= a * b.ln();
            }
        }
    }
    total / target.len() as f64
}

#[test]
fn similarity_logits_examples() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let q = tape.constant(rows(&[&[0.0, 0.0], &[0.0, 0.0]]));
    let block = similarity_logits(&mut tape, a, a, q).unwrap();
    assert_eq!(tape.value(block.pos).data(), &[1.0, 1.0]);
    let a1 = tape.constant(rows(&[&[1.0, 0.0, 0.0]]));
    let q1 = tape.constant(rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]));
    let block = similarity_logits(&mut tape, a1, a1, q1).unwrap();
    assert_eq!(tape.value(block.neg).data(), &[0.0, 0.0]);

    let (z1, z2, q) = (unit(5, 7, 1), unit(5, 7, 2), unit(9, 7, 3));
    let mut tape = Tape::<f64>::new();
    let (a, b, c) = (tape.constant(z1.clone()), tape.constant(z2.clone()), tape.constant(q.clone()));
    let block = similarity_logits(&mut tape, a, b, c).unwrap();
    for i in 0..5 {
        let want = ref_candidates(&z1, &z2, &q, i);
        assert_abs_diff_eq!(tape.value(block.pos).data()[i], want[0], epsilon = 1e-6);
        for j in 0..9 {
            assert_abs_diff_eq!(tape.value(block.neg).row(i)[j], want[j + 1], epsilon = 1e-6);
            assert!(want[j + 1].abs() <= 1.0 + 1e-5);
        }
    }

    let bad = tape.constant(unit(3, 4, 4));
    assert!(matches!(similarity_logits(&mut tape, a, b, bad), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn info_nce_examples() {
    let mut tape = Tape::<f64>::new();
    let b = raw_block(&mut tape, &[0.3, -0.2], &[&[0.3, 0.3, 0.3], &[-0.2, -0.2, -0.2]]);
    let l = info_nce_loss(&mut tape, &b, 0.1).unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), 4f64.ln(), epsilon = 1e-12);

    let b = raw_block(&mut tape, &[1.0], &[&[0.0]]);
    let l = info_nce_loss(&mut tape, &b, 1.0).unwrap();
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(scalar(&tape, l), -(e / (e + 1.0)).ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(scalar(&tape, l), 0.3133, epsilon = 1e-4);

    let mut prev = f64::INFINITY;
    for step in 0..20 {
        let pos = -1.0 + 0.1 * step as f64;
        let b = raw_block(&mut tape, &[pos], &[&[0.2, -0.4, 0.1]]);
        let l = info_nce_loss(&mut tape, &b, 0.1).unwrap();
        assert!(scalar(&tape, l) < prev);
        prev = scalar(&tape, l);
    }
}

#[test]
fn ceil_examples() {
    let mut tape = Tape::<f64>::new();
    let b = raw_block(&mut tape, &[0.4], &[&[0.4, 0.4, 0.4]]);
    let l = ceil_loss(&mut tape, &b, 0.1).unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), (4.0f64 / 3.0).ln(), epsilon = 1e-12);

    let mut prev = 0.0;
    for step in 0..20 {
        let pos = -1.0 + 0.1 * step as f64;
        let b = raw_block(&mut tape, &[pos], &[&[0.2, -0.4, 0.1]]);
        let l = { let v = ceil_loss(&mut tape, &b, 0.1).unwrap(); scalar(&tape, v) };
        assert!(l > prev);
        prev = l;
    }

    let (z1, z2, q) = (unit(6, 8, 11), unit(6, 8, 12), unit(10, 8, 13));
    let mut tape = Tape::<f64>::new();
    let (a, bb, c) = (tape.constant(z1.clone()), tape.constant(z2.clone()), tape.constant(q.clone()));
    let block = similarity_logits(&mut tape, a, bb, c).unwrap();
    let got = { let v = ceil_loss(&mut tape, &block, 0.1).unwrap(); scalar(&tape, v) };
    let mut want = 0.0;
    for i in 0..6 {
        let c = ref_candidates(&z1, &z2, &q, i);
        let negs: f64 = c[1..].iter().map(|s| (s / 0.1).exp()).sum();
        want -= (negs / ((c[0] / 0.1).exp() + negs)).ln();
    }
    assert_abs_diff_eq!(got, want / 6.0, epsilon = 1e-6);
    assert!(got > 0.0);
}

#[test]
fn target_relations_examples() {
    let z2 = rows(&[&[1.0, 0.0]]);
    let q = rows(&[&[0.6, 0.8], &[0.6, -0.8]]);
    let p = target_relations(&z2, &q, 0.05, true).unwrap();
    assert_eq!(p.data(), &[0.0, 0.5, 0.5]);

    let q = rows(&[&[1.0, 0.0], &[0.8, 0.6], &[0.0, 1.0]]);
    let sharp = target_relations(&z2, &q, 1e-3, true).unwrap();
    assert_abs_diff_eq!(sharp.data()[1], 1.0, epsilon = 1e-12);

    let (z2, q) = (unit(7, 16, 21), unit(12, 16, 22));
    let p = target_relations(&z2, &q, 0.05, true).unwrap();
    let want = ref_target(&z2, &q, 0.05);
    for i in 0..7 {
        assert_eq!(p.row(i)[0], 0.0);
        for k in 0..13 {
            assert_abs_diff_eq!(p.row(i)[k], want[i][k], epsilon = 1e-6);
        }
    }

    // Unmasked variant keeps the self slot at logit 0.
    let p = target_relations(&z2, &q, 0.05, false).unwrap();
    for i in 0..7 {
        let mut c = vec![0.0];
        c.extend((0..12).map(|j| dot(z2.row(i), q.row(j))));
        let want = ref_softmax(&c, 0.05, None);
        assert!(p.row(i)[0] > 0.0);
        for k in 0..13 {
            assert_abs_diff_eq!(p.row(i)[k], want[k], epsilon = 1e-9);
        }
    }

    // An empty candidate set leaves nothing to normalize over.
    let none: Tensor<f64> = Tensor::raw(vec![0, 16], vec![]);
    assert!(matches!(
        target_relations(&z2, &none, 0.05, true),
        Err(Error::DegenerateRow { row: 0 })
    ));
    assert!(target_relations(&z2, &q, 0.0, true).is_err());
}

#[test]
fn online_relations_mask_positive_slot() {
    let (z1, z2, q) = (unit(4, 8, 31), unit(4, 8, 32), unit(6, 8, 33));
    let mut tape = Tape::<f64>::new();
    let (a, b, c) = (tape.param(z1.clone()), tape.constant(z2.clone()), tape.constant(q.clone()));
    let block = similarity_logits(&mut tape, a, b, c).unwrap();
    let p1 = online_relations_masked(&mut tape, &block, 0.1).unwrap();
    for i in 0..4 {
        let row = tape.value(p1).row(i);
        assert_eq!(row[0], 0.0);
        let want = ref_softmax(&ref_candidates(&z1, &z2, &q, i), 0.1, Some(0));
        for k in 0..7 {
            assert_abs_diff_eq!(row[k], want[k], epsilon = 1e-9);
        }
    }
}

#[test]
fn ressl_examples() {
    let mut tape = Tape::<f64>::new();
    let p = rows(&[&[0.0, 0.2, 0.3, 0.5], &[0.0, 0.7, 0.1, 0.2]]);
    let pv = tape.constant(p.clone());
    let l = ressl_loss(&mut tape, &p, pv).unwrap();
    let entropy: f64 = p.data().iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum::<f64>() / 2.0;
    assert_abs_diff_eq!(scalar(&tape, l), entropy, epsilon = 1e-12);

    let onehot = rows(&[&[0.0, 0.0, 1.0, 0.0, 0.0]]);
    let uniform = tape.constant(rows(&[&[0.0, 0.25, 0.25, 0.25, 0.25]]));
    let l = ressl_loss(&mut tape, &onehot, uniform).unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), 4f64.ln(), epsilon = 1e-12);

    // Target mass on a slot the prediction masks out.
    let target = rows(&[&[0.5, 0.5, 0.0]]);
    let pred = tape.constant(rows(&[&[0.0, 0.5, 0.5]]));
    assert!(matches!(
        ressl_loss(&mut tape, &target, pred),
        Err(Error::InconsistentMask { row: 0, slot: 0, .. })
    ));

    let (z1, z2, q) = (unit(5, 8, 41), unit(5, 8, 42), unit(9, 8, 43));
    let mut tape = Tape::<f64>::new();
    let (a, b, c) = (tape.constant(z1.clone()), tape.constant(z2.clone()), tape.constant(q.clone()));
    let block = similarity_logits(&mut tape, a, b, c).unwrap();
    let p2 = target_relations(&z2, &q, 0.05, true).unwrap();
    let p1 = online_relations_masked(&mut tape, &block, 0.1).unwrap();
    let got = { let v = ressl_loss(&mut tape, &p2, p1).unwrap(); scalar(&tape, v) };
    let pred: Vec<Vec<f64>> = (0..5).map(|i| ref_softmax(&ref_candidates(&z1, &z2, &q, i), 0.1, Some(0))).collect();
    assert_abs_diff_eq!(got, ref_ce(&ref_target(&z2, &q, 0.05), &pred), epsilon = 1e-6);
}

#[test]
fn sce_target_examples() {
    let p2 = rows(&[&[0.0, 0.5, 0.5], &[0.0, 0.9, 0.1]]);
    assert_eq!(sce_target(&p2, 0.5).unwrap().row(0), &[0.5, 0.25, 0.25]);
    assert_eq!(sce_target(&p2, 1.0).unwrap().data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    assert_eq!(sce_target(&p2, 0.0).unwrap().data(), p2.data());
    assert!(sce_target(&p2, 1.5).is_err());
    assert!(sce_target(&p2, -0.1).is_err());
}

#[test]
fn sce_online_is_unmasked_softmax() {
    let mut tape = Tape::<f64>::new();
    let b = raw_block(&mut tape, &[0.5], &[&[0.5, 0.5, 0.5]]);
    let p = sce_online(&mut tape, &b, 0.1).unwrap();
    for &v in tape.value(p).data() {
        assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
    }

    let (z1, z2, q) = (unit(3, 8, 51), unit(3, 8, 52), unit(5, 8, 53));
    let mut tape = Tape::<f64>::new();
    let (a, b, c) = (tape.constant(z1.clone()), tape.constant(z2.clone()), tape.constant(q.clone()));
    let block = similarity_logits(&mut tape, a, b, c).unwrap();
    let p = sce_online(&mut tape, &block, 0.1).unwrap();
    for i in 0..3 {
        let want = ref_softmax(&ref_candidates(&z1, &z2, &q, i), 0.1, None);
        for k in 0..6 {
            assert_abs_diff_eq!(tape.value(p).row(i)[k], want[k], epsilon = 1e-6);
        }
        assert_abs_diff_eq!(tape.value(p).row(i).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}

#[test]
fn sce_loss_limits_and_identity() {
    let (z1, z2, q) = (unit(8, 16, 61), unit(8, 16, 62), unit(32, 16, 63));
    let p2 = target_relations(&z2, &q, 0.05, true).unwrap();
    let mut tape = Tape::<f64>::new();
    let (a, b, c) = (tape.constant(z1), tape.constant(z2), tape.constant(q));
    let block = similarity_logits(&mut tape, a, b, c).unwrap();
    let p1 = sce_online(&mut tape, &block, 0.1).unwrap();
    let nce = { let v = info_nce_loss(&mut tape, &block, 0.1).unwrap(); scalar(&tape, v) };
    let one = { let v = sce_loss(&mut tape, &sce_target(&p2, 1.0).unwrap(), p1).unwrap(); scalar(&tape, v) };
    assert_abs_diff_eq!(one, nce, epsilon = 1e-6);

    let p1_t = tape.value(p1).clone();
    let ent = { let v = sce_loss(&mut tape, &p1_t, p1).unwrap(); scalar(&tape, v) };
    let want: f64 = p1_t.data().iter().map(|x| -x * x.ln()).sum::<f64>() / 8.0;
    assert_abs_diff_eq!(ent, want, epsilon = 1e-12);

    for lambda in [0.0, 0.3, 0.5, 0.9] {
        let cfg = ObjectiveConfig {
            kind: ObjectiveKind::Combined,
            lambda,
            mu: 1.0 - lambda,
            eta: 1.0 - lambda,
            ..ObjectiveConfig::default()
        };
        let comb = { let v = combined_loss(&mut tape, &block, &p2, &cfg).unwrap(); scalar(&tape, v) };
        let sce = { let v = sce_loss(&mut tape, &sce_target(&p2, lambda).unwrap(), p1).unwrap(); scalar(&tape, v) };
        assert!((comb - sce).abs() / sce.abs().max(1.0) <= 1e-10, "lambda {lambda}");
    }
}

#[test]
fn combined_selects_single_terms() {
    let (z1, z2, q) = (unit(4, 8, 71), unit(4, 8, 72), unit(8, 8, 73));
    let p2 = target_relations(&z2, &q, 0.05, true).unwrap();
    let mut tape = Tape::<f64>::new();
    let (a, b, c) = (tape.constant(z1), tape.constant(z2), tape.constant(q));
    let block = similarity_logits(&mut tape, a, b, c).unwrap();
    let nce = { let v = info_nce_loss(&mut tape, &block, 0.1).unwrap(); scalar(&tape, v) };
    let p1 = online_relations_masked(&mut tape, &block, 0.1).unwrap();
    let rel = { let v = ressl_loss(&mut tape, &p2, p1).unwrap(); scalar(&tape, v) };
    let with = |lambda, mu, eta| ObjectiveConfig { lambda, mu, eta, ..ObjectiveConfig::default() };
    let l = combined_loss(&mut tape, &block, &p2, &with(1.0, 0.0, 0.0)).unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), nce, epsilon = 1e-12);
    let l = combined_loss(&mut tape, &block, &p2, &with(0.0, 1.0, 0.0)).unwrap();
    assert_abs_diff_eq!(scalar(&tape, l), rel, epsilon = 1e-12);
}

#[test]
fn batch_formulation_uses_other_rows_as_candidates() {
    let (z1, z2) = (unit(6, 8, 81), unit(6, 8, 82));
    let mut tape = Tape::<f64>::new();
    let (a, b) = (tape.constant(z1.clone()), tape.constant(z2.clone()));
    let block = batch_logits(&mut tape, a, b).unwrap();
    let nce = { let v = info_nce_loss(&mut tape, &block, 0.1).unwrap(); scalar(&tape, v) };

    let mut want = 0.0;
    for i in 0..6 {
        let logits: Vec<f64> = (0..6).map(|k| dot(z1.row(i), z2.row(k)) / 0.1).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        want -= (logits[i].exp() / z).ln();
    }
    assert_abs_diff_eq!(nce, want / 6.0, epsilon = 1e-9);

    // The duplicate of the positive carries no mass in any distribution.
    let p = sce_online(&mut tape, &block, 0.1).unwrap();
    let p2 = target_relations_excluding(&z2, &z2, 0.05, true, block.neg_mask.as_ref()).unwrap();
    for i in 0..6 {
        assert_eq!(tape.value(p).row(i)[i + 1], 0.0);
        assert_eq!(p2.row(i)[i + 1], 0.0);
        assert_eq!(p2.row(i)[0], 0.0);
    }
    let p1 = online_relations_masked(&mut tape, &block, 0.1).unwrap();
    let rel = ressl_loss(&mut tape, &p2, p1).unwrap();
    assert!(scalar(&tape, rel).is_finite());
}

#[test]
fn evaluate_objective_only_reaches_online_embeddings() {
    let (z1, z2, q) = (unit(4, 8, 91), unit(4, 8, 92), unit(8, 8, 93));
    for kind in [ObjectiveKind::Sce, ObjectiveKind::Infonce, ObjectiveKind::Ressl, ObjectiveKind::Combined] {
        let cfg = ObjectiveConfig { kind, ..ObjectiveConfig::default() };
        let mut tape = Tape::<f64>::new();
        let zv = tape.param(z1.clone());
        let out = evaluate_objective(&mut tape, zv, &z2, &q, &cfg).unwrap();
        assert!(out.terms.total.is_finite());
        tape.backward(out.loss).unwrap();
        assert!(tape.grad(zv).unwrap().iter().any(|g| *g != 0.0));
        if kind == ObjectiveKind::Sce {
            assert!(out.terms.decomposition_residual(cfg.lambda) <= 1e-10);
        }
    }
    // Constants never record nodes, so no gradient slot can exist for z2 or the queue.
    let mut tape = Tape::<f64>::new();
    let zv = tape.constant(z1);
    let out = evaluate_objective(&mut tape, zv, &z2, &q, &ObjectiveConfig::default()).unwrap();
    assert_eq!(tape.node_count(), 0);
    assert!(!tape.requires_grad(out.loss));
}

struct OnlineRelations;

impl GradFn for OnlineRelations {
    fn eval<T: Scalar>(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
        let z = tape.l2_normalize_rows(params[0], 1e-12)?;
        let b = tape.constant(unit(3, 5, 101).cast());
        let q = tape.constant(unit(6, 5, 102).cast());
        let block = similarity_logits(tape, z, b, q)?;
        let p1 = online_relations_masked(tape, &block, 0.1)?;
        let r = tape.constant(unit(3, 7, 103).cast());
        let prod = tape.mul(p1, r)?;
        Ok(tape.sum(prod))
    }
}

#[test]
fn online_relations_gradient_matches_differences() {
    let cfg = GradCheckConfig::default();
    let report = grad_check::<f32, _>(&OnlineRelations, &[unit(3, 5, 104)], &cfg).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn verify_passes_and_negative_control_fails() {
    let cfg = VerifyConfig {
        trials: 100,
        batch_sizes: vec![8],
        queue_sizes: vec![32],
        dims: vec![16],
        lambdas: vec![0.0, 0.5, 1.0],
        ..VerifyConfig::default()
    };
    let r32 = verify_decomposition::<f32>(&cfg).unwrap();
    assert!(r32.passed, "{r32:?}");
    assert_eq!(r32.evaluations, 300);
    let r64 = verify_decomposition::<f64>(&cfg).unwrap();
    assert!(r64.passed && r64.max_residual <= 1e-10, "{r64:?}");

    let only_one = VerifyConfig { lambdas: vec![1.0], ..cfg.clone() };
    assert!(verify_decomposition::<f64>(&only_one).unwrap().max_residual < 1e-13);

    // Dropping the positive's mass from the ceiling term breaks the identity.
    let corrupted = verify_decomposition_with::<f64, _>(&cfg, |tape, logits, tau| {
        let all = logits.candidates(tape)?;
        let neg_mask = logits.candidate_mask(tape, true);
        let a = tape.logsumexp_rows(all, tau, neg_mask.as_ref())?;
        let b = tape.logsumexp_rows(all, tau, neg_mask.as_ref())?;
        let d = tape.sub(a, b)?;
        Ok(tape.mean(d))
    })
    .unwrap();
    assert!(!corrupted.passed);
    assert!(verify_decomposition::<f64>(&VerifyConfig { trials: 0, ..cfg }).is_err());
}

#[test]
fn config_validation() {
    assert!(ObjectiveConfig::default().validate().is_ok());
    let d = ObjectiveConfig::default();
    assert!(d.tau_m < d.tau);
    for bad in [
        ObjectiveConfig { tau: 0.0, ..d.clone() },
        ObjectiveConfig { tau_m: -1.0, ..d.clone() },
        ObjectiveConfig { lambda: 1.1, ..d.clone() },
        ObjectiveConfig { eta: -0.1, ..d.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
    assert_eq!("MoCo".parse::<ObjectiveKind>().unwrap(), ObjectiveKind::Infonce);
    assert!("byol".parse::<ObjectiveKind>().is_err());
}

fn entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

#[test]
fn sharper_target_temperature_never_raises_entropy() {
    for seed in 0..20 {
        let (z2, q) = (unit(4, 16, 200 + seed), unit(24, 16, 300 + seed));
        let mut prev = [f64::INFINITY; 4];
        for tau_m in [0.10, 0.07, 0.05, 0.03] {
            let p = target_relations(&z2, &q, tau_m, true).unwrap();
            for i in 0..4 {
                let h = entropy(p.row(i));
                assert!(h <= prev[i] + 1e-12);
                prev[i] = h;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributions_are_row_stochastic(
        n in 1usize..6, m in 1usize..12, d in 2usize..10, seed in 0u64..1000,
        lambda in 0.0f64..=1.0, tau in 0.03f64..1.0, tau_m in 0.03f64..1.0,
    ) {
        let (z1, z2, q) = (unit(n, d, seed), unit(n, d, seed + 1), unit(m, d, seed + 2));
        let p2 = target_relations(&z2.cast::<f32>(), &q.cast(), tau_m, true).unwrap();
        let w2 = sce_target(&p2, lambda).unwrap();
        let mut tape = Tape::<f32>::new();
        let (a, b, c) = (tape.constant(z1.cast()), tape.constant(z2.cast()), tape.constant(q.cast()));
        let block = similarity_logits(&mut tape, a, b, c).unwrap();
        let p1 = sce_online(&mut tape, &block, tau).unwrap();
        let p1r = online_relations_masked(&mut tape, &block, tau).unwrap();
        for i in 0..n {
            for (name, row) in [("p2", p2.row(i)), ("w2", w2.row(i)), ("p1", tape.value(p1).row(i)), ("p1r", tape.value(p1r).row(i))] {
                let s: f64 = row.iter().map(|&x| x as f64).sum();
                prop_assert!((s - 1.0).abs() <= 1e-6, "{} row {} sums to {}", name, i, s);
                prop_assert!(row.iter().all(|x| x.is_finite() && *x >= 0.0));
            }
            prop_assert_eq!(p2.row(i)[0], 0.0);
            prop_assert_eq!(tape.value(p1r).row(i)[0], 0.0);
        }
    }

    #[test]
    fn decomposition_holds_on_random_shapes(
        n in 1usize..10, m in 1usize..20, d in 2usize..16, seed in 0u64..1000, lambda in 0.0f64..=1.0,
    ) {
        let cfg = VerifyConfig {
            trials: 1,
            batch_sizes: vec![n],
            queue_sizes: vec![m],
            dims: vec![d],
            lambdas: vec![lambda],
            seed,
            ..VerifyConfig::default()
        };
        let r = verify_decomposition::<f32>(&cfg).unwrap();
        prop_assert!(r.passed, "{:?}", r);
    }
}
