//! Algebraic properties of the three MIL objectives.

use deepmil::head::{self, loss_from_probabilities, Bag};
use deepmil::{Graph, LossScheme, MilHyperparams, NodeId, Tensor, PROB_EPSILON};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hp(lambda: f64, mu: f64, k: usize) -> MilHyperparams {
    MilHyperparams {
        lambda,
        mu,
        k,
        epsilon: PROB_EPSILON,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, m: usize) -> Vec<(Vec<f64>, bool)> {
    let n = rng.random_range(1..6);
    (0..n)
        .map(|_| {
            (
                (0..m).map(|_| rng.random_range(0.0..1.0)).collect(),
                rng.random_bool(0.5),
            )
        })
        .collect()
}

/// Loss with a regularised weight tensor, so that the L2 term is present.
fn loss_with_weights(scheme: LossScheme, batch: &[(Vec<f64>, bool)], weights: &[f64], hp: &MilHyperparams) -> f64 {
    let mut g = Graph::<f64>::new();
    let w = g.param(Tensor::vector(weights).unwrap());
    let bags: Vec<Bag> = batch
        .iter()
        .map(|(r, label)| {
            let x = g.param(Tensor::vector(r).unwrap());
            let c = g.clamp(x, hp.epsilon, 1.0 - hp.epsilon).unwrap();
            Bag {
                ranked: head::rank(&mut g, c).unwrap(),
                label: *label,
            }
        })
        .collect();
    let loss = head::batch_loss(&mut g, scheme, &bags, &[w], hp).unwrap();
    g.value(loss).item().unwrap()
}

#[test]
fn sparse_without_l1_is_max_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let m = rng.random_range(1..40);
        let batch = random_batch(&mut rng, m);
        let weights: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda = rng.random_range(0.0..0.1);
        let sparse = loss_with_weights(LossScheme::Sparse, &batch, &weights, &hp(lambda, 0.0, 1));
        let maxpool = loss_with_weights(LossScheme::MaxPool, &batch, &weights, &hp(lambda, 0.0, 1));
        assert!((sparse - maxpool).abs() < 1e-12, "{sparse} vs {maxpool}");
    }
}

#[test]
fn label_assignment_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let m = rng.random_range(1..40);
        let r: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut shuffled = r.clone();
        shuffled.shuffle(&mut rng);
        let k = rng.random_range(1..=m);
        let neg = |v: &Vec<f64>| {
            loss_from_probabilities(LossScheme::LabelAssign, &[(v.clone(), false)], &hp(0.0, 0.0, k)).unwrap()
        };
        assert!((neg(&r) - neg(&shuffled)).abs() < 1e-12);
        // for a negative bag the loss is the plain mean of -ln(1 - r)
        let direct = -r
            .iter()
            .map(|p| (1.0 - p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)).ln())
            .sum::<f64>()
            / m as f64;
        assert!((neg(&r) - direct).abs() < 1e-12);
        let pos_all = |v: &Vec<f64>| {
            loss_from_probabilities(LossScheme::LabelAssign, &[(v.clone(), true)], &hp(0.0, 0.0, m)).unwrap()
        };
        assert!((pos_all(&r) - pos_all(&shuffled)).abs() < 1e-12);
    }
}

#[test]
fn closed_form_values() {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-6;
    let mp = |r: &[f64], y| loss_from_probabilities(LossScheme::MaxPool, &[(r.to_vec(), y)], &hp(0.0, 0.0, 1)).unwrap();
    assert!(close(mp(&[0.8], true), -(0.8f64).ln()));
    assert!(close(mp(&[0.5], false), 2f64.ln()));
    assert!(mp(&[1.0 - PROB_EPSILON], true) < 1e-6);
    let la = loss_from_probabilities(
        LossScheme::LabelAssign,
        &[(vec![0.8, 0.6, 0.4], true)],
        &hp(0.0, 0.0, 1),
    )
    .unwrap();
    assert!(close(la, -((0.8f64).ln() + (0.4f64).ln() + (0.6f64).ln()) / 3.0));
    let sp = loss_from_probabilities(LossScheme::Sparse, &[(vec![0.8, 0.6, 0.4], true)], &hp(0.0, 0.01, 1)).unwrap();
    assert!(close(sp, -(0.8f64).ln() + 0.01 * 1.8));
    // probabilities at the boundary are clamped, not infinite
    let extreme = loss_from_probabilities(
        LossScheme::MaxPool,
        &[(vec![0.0], true), (vec![1.0], false)],
        &hp(0.0, 0.0, 1),
    )
    .unwrap();
    assert!(extreme.is_finite());
    assert!(close(extreme, -(PROB_EPSILON.ln())));
}

#[test]
fn max_pooling_is_monotone_in_the_top_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let m = rng.random_range(1..10);
        let mut r: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..0.5)).collect();
        let base = r.clone();
        r[0] = 0.6;
        let higher = {
            let mut h = r.clone();
            h[0] = 0.9;
            h
        };
        let f =
            |v: &[f64], y| loss_from_probabilities(LossScheme::MaxPool, &[(v.to_vec(), y)], &hp(0.0, 0.0, 1)).unwrap();
        assert!(f(&higher, true) < f(&r, true));
        assert!(f(&higher, false) > f(&r, false));
        assert!(f(&base, true).is_finite());
    }
}

#[test]
fn l1_term_has_gradient_mu_on_every_patch() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let m = rng.random_range(2..20);
        let r: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
        let label = rng.random_bool(0.5);
        let mu = rng.random_range(1e-6..1e-1);
        let grad = |scheme, mu| {
            let mut g = Graph::<f64>::new();
            let x: NodeId = g.param(Tensor::vector(&r).unwrap());
            let ranked = head::rank(&mut g, x).unwrap();
            let loss = head::batch_loss(&mut g, scheme, &[Bag { ranked, label }], &[], &hp(0.0, mu, 1)).unwrap();
            g.backward(loss).unwrap();
            g.grad(x).unwrap().data().to_vec()
        };
        let sparse = grad(LossScheme::Sparse, mu);
        let maxpool = grad(LossScheme::MaxPool, 0.0);
        for (s, p) in sparse.iter().zip(&maxpool) {
            assert!((s - p - mu).abs() < 1e-12, "{s} - {p} != {mu}");
        }
    }
}

#[test]
fn k_outside_the_bag_is_rejected() {
    let err = loss_from_probabilities(LossScheme::LabelAssign, &[(vec![0.5, 0.5], true)], &hp(0.0, 0.0, 3));
    assert!(err.is_err());
    let err = loss_from_probabilities(LossScheme::LabelAssign, &[(vec![0.5, 0.5], true)], &hp(0.0, 0.0, 0));
    assert!(err.is_err());
}

#[test]
fn l2_term_is_added_once_per_batch() {
    let weights = [1.0, -2.0];
    let batch = vec![(vec![0.5], true), (vec![0.5], false), (vec![0.5], true)];
    let with = loss_with_weights(LossScheme::MaxPool, &batch, &weights, &hp(0.1, 0.0, 1));
    let without = loss_with_weights(LossScheme::MaxPool, &batch, &weights, &hp(0.0, 0.0, 1));
    assert!((with - without - 0.1 / 2.0 * 5.0).abs() < 1e-12);
}

#[test]
fn scheme_names_round_trip() {
    for s in [LossScheme::MaxPool, LossScheme::LabelAssign, LossScheme::Sparse] {
        assert_eq!(s.name().parse::<LossScheme>().unwrap(), s);
    }
    let err = "softmax".parse::<LossScheme>().unwrap_err().to_string();
    assert!(
        err.contains("maxpool") && err.contains("labelassign") && err.contains("sparse"),
        "{err}"
    );
}
