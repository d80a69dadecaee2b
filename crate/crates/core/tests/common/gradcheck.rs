//! Central finite-difference checks of the full backbone + MIL head
//! pipeline in 64-bit mode.
//!
//! A coordinate is only compared when the perturbed forward passes take the
//! same branches as the unperturbed one (same ReLU masks, pooling winners,
//! ranking and clamp activity); otherwise the loss is not differentiable
//! along that step and the coordinate is counted as skipped.

#![allow(dead_code)]

use deepmil::backbone::{self, BackboneConfig, BoundParams};
use deepmil::dataset::{generate_synthetic, SynthConfig};
use deepmil::head::{self, Bag};
use deepmil::preprocess::resize_bilinear;
use deepmil::{Graph, LossScheme, MilHyperparams, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients below this magnitude are compared on an absolute scale of
/// `TOLERANCE * FLOOR`, where the central difference is dominated by
/// rounding.
pub const FLOOR: f64 = 1e-6;

pub type Batch = Vec<(Tensor<f64>, bool)>;

/// One positive and one negative synthetic image at the backbone's input
/// size.
pub fn synthetic_batch(config: &BackboneConfig, seed: u64) -> Batch {
    let samples = generate_synthetic(&SynthConfig {
        n: 2,
        side: config.input_side.max(16),
        pos_frac: 0.5,
        mass_area_frac: 0.02,
        seed,
    })
    .unwrap();
    samples
        .iter()
        .map(|s| {
            let side = config.input_side;
            let image = resize_bilinear(&s.image, side, side).unwrap();
            (config.image_tensor(&image).unwrap(), s.label)
        })
        .collect()
}

/// Loss, branch signature and (optionally) parameter gradients.
pub fn evaluate(
    config: &BackboneConfig,
    params: &ModelParams<f64>,
    batch: &Batch,
    scheme: LossScheme,
    hp: &MilHyperparams,
    with_grad: bool,
) -> (f64, u64, Option<ModelParams<f64>>) {
    let mut g = Graph::<f64>::new();
    let bound = BoundParams::bind(&mut g, params);
    let mut bags = Vec::new();
    for (x, label) in batch {
        let input = g.input(x.clone());
        let f = backbone::forward(config, &mut g, &bound, input).unwrap();
        let r = head::instance_probs_bound(&mut g, f, &bound, hp.epsilon).unwrap();
        let ranked = head::rank(&mut g, r).unwrap();
        bags.push(Bag { ranked, label: *label });
    }
    let loss = head::batch_loss(&mut g, scheme, &bags, &bound.regularized(), hp).unwrap();
    let value = g.value(loss).item().unwrap();
    let signature = g.branch_signature();
    let grads = if with_grad {
        g.backward(loss).unwrap();
        Some(bound.gradients(&g))
    } else {
        None
    };
    (value, signature, grads)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct CheckStats {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

impl CheckStats {
    fn record(&mut self, err: f64) {
        self.checked += 1;
        self.worst = self.worst.max(err);
    }

    pub fn merge(&mut self, other: CheckStats) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.worst = self.worst.max(other.worst);
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.worst < TOLERANCE
    }
}

/// Which coordinates to perturb.
#[derive(Debug, Clone, Copy)]
pub enum Coverage {
    /// Every scalar of every tensor.
    Exhaustive,
    /// `per_tensor` random scalars per tensor plus one random direction
    /// spanning the whole tensor.
    Sampled { per_tensor: usize, seed: u64 },
}

/// Central difference of the loss along `direction` (same layout as the
/// parameters), or `None` if a perturbed pass changes branches.
fn directional_difference(
    config: &BackboneConfig,
    params: &ModelParams<f64>,
    batch: &Batch,
    scheme: LossScheme,
    hp: &MilHyperparams,
    signature: u64,
    direction: &ModelParams<f64>,
) -> Option<f64> {
    let shifted = |sign: f64| {
        let mut p = params.clone();
        for ((_, t), (_, d)) in p.iter_mut().zip(direction.iter()) {
            for (v, dv) in t.data_mut().iter_mut().zip(d.data()) {
                *v += sign * STEP * dv;
            }
        }
        evaluate(config, &p, batch, scheme, hp, false)
    };
    let (plus, sig_plus, _) = shifted(1.0);
    let (minus, sig_minus, _) = shifted(-1.0);
    (sig_plus == signature && sig_minus == signature).then(|| (plus - minus) / (2.0 * STEP))
}

pub fn check_pipeline(
    config: &BackboneConfig,
    params: &ModelParams<f64>,
    batch: &Batch,
    scheme: LossScheme,
    hp: &MilHyperparams,
    coverage: Coverage,
) -> CheckStats {
    let (_, signature, grads) = evaluate(config, params, batch, scheme, hp, true);
    let grads = grads.unwrap();
    let mut stats = CheckStats::default();
    let zero = config.zero_params::<f64>();
    let mut rng = match coverage {
        Coverage::Sampled { seed, .. } => ChaCha8Rng::seed_from_u64(seed),
        Coverage::Exhaustive => ChaCha8Rng::seed_from_u64(0),
    };

    for (name, tensor) in params.iter() {
        let grad = grads.get(name).unwrap();
        let coords: Vec<usize> = match coverage {
            Coverage::Exhaustive => (0..tensor.len()).collect(),
            Coverage::Sampled { per_tensor, .. } => (0..per_tensor.min(tensor.len()))
                .map(|_| rng.random_range(0..tensor.len()))
                .collect(),
        };
        for idx in coords {
            let mut direction = zero.clone();
            direction.get_mut(name).unwrap().data_mut()[idx] = 1.0;
            match directional_difference(config, params, batch, scheme, hp, signature, &direction) {
                Some(numeric) => stats.record(relative_error(grad.data()[idx], numeric)),
                None => stats.skipped += 1,
            }
        }
        if let Coverage::Sampled { .. } = coverage {
            let mut direction = zero.clone();
            let d = direction.get_mut(name).unwrap();
            for v in d.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let analytic: f64 = grad.data().iter().zip(d.data()).map(|(g, v)| g * v).sum();
            match directional_difference(config, params, batch, scheme, hp, signature, &direction) {
                Some(numeric) => stats.record(relative_error(analytic, numeric)),
                None => stats.skipped += 1,
            }
        }
    }
    stats
}
