//! Training loop, evaluation and cross-validation.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneConfig, BoundParams, Preset};
use crate::dataset::{stratified_kfold, FoldSplit, MassBox, Sample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{self, Bag, LossScheme, MilHyperparams, PROB_EPSILON};
use crate::heatmap;
use crate::image::GrayImage;
use crate::metrics::{self, Confusion};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ModelParams;
use crate::preprocess::{self, augment_seeded, AugmentConfig};
use crate::scalar::Real;

/// Decision threshold on the bag probability.
pub const ACCURACY_THRESHOLD: f64 = 0.5;

/// Typical fraction of the (cropped) image covered by a mass.
pub const MASS_AREA_FRACTION: f64 = 0.02;

pub const DEFAULT_EPOCHS: usize = 50;

/// Label assignment trains longer: it spends its first
/// [`LABEL_WARMUP_EPOCHS`] with a shrinking `k`.
pub const LABEL_ASSIGN_EPOCHS: usize = 80;

/// Epochs over which label assignment shrinks `k` from the full patch count
/// to its target.
pub const LABEL_WARMUP_EPOCHS: usize = 20;

/// Default label-assignment `k`: three quarters of the patches whose
/// receptive field overlaps a centred mass of [`MASS_AREA_FRACTION`].
///
/// Neighbouring patches share most of their receptive field, so one mass
/// lights up a block of patches rather than a single one. Patches on the
/// rim of that block see only part of the mass and are left unlabelled.
pub fn default_label_k(config: &BackboneConfig) -> usize {
    let covering = config.patches_covering(MASS_AREA_FRACTION) as f64;
    (libm::floor(0.75 * covering + 0.5) as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scheme: LossScheme,
    pub preset: Preset,
    pub lambda: f64,
    pub mu: f64,
    /// Label-carrying patches for the label-assignment scheme; `None`
    /// picks [`default_label_k`].
    pub k: Option<usize>,
    /// Optional label-assignment warm-up `(start_k, epochs)`: `k` shrinks
    /// linearly from `start_k` to its target over `epochs` epochs, and only
    /// later epochs are eligible as the returned checkpoint.
    pub k_warmup: Option<(usize, usize)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
}

impl TrainConfig {
    /// Defaults for `scheme` on `preset`.
    pub fn new(scheme: LossScheme, preset: Preset) -> Self {
        let (lambda, mu) = scheme.default_regularization();
        Self {
            scheme,
            preset,
            lambda,
            mu,
            k: None,
            k_warmup: match scheme {
                LossScheme::LabelAssign => Some((preset.config().num_patches(), LABEL_WARMUP_EPOCHS)),
                _ => None,
            },
            epochs: match scheme {
                LossScheme::LabelAssign => LABEL_ASSIGN_EPOCHS,
                _ => DEFAULT_EPOCHS,
            },
            batch_size: 16,
            seed: 0,
            augment: AugmentConfig::default(),
            adam: AdamConfig {
                lr: default_lr(preset),
                ..AdamConfig::default()
            },
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        self.preset.config()
    }

    pub fn hyperparams(&self) -> MilHyperparams {
        let m = self.backbone().num_patches();
        MilHyperparams {
            lambda: self.lambda,
            mu: self.mu,
            k: self.k.unwrap_or_else(|| default_label_k(&self.backbone()).min(m)),
            epsilon: PROB_EPSILON,
        }
    }

    /// Hyperparameters in force during `epoch`.
    pub fn hyperparams_at(&self, epoch: usize) -> MilHyperparams {
        let mut hp = self.hyperparams();
        if let (LossScheme::LabelAssign, Some((start, len))) = (self.scheme, self.k_warmup) {
            if epoch < len && start > hp.k {
                let frac = epoch as f64 / len as f64;
                let k = start as f64 + (hp.k as f64 - start as f64) * frac;
                hp.k = libm::floor(k + 0.5) as usize;
            }
        }
        hp
    }

    /// First epoch eligible for checkpoint selection.
    pub fn selection_start(&self) -> usize {
        match (self.scheme, self.k_warmup) {
            (LossScheme::LabelAssign, Some((_, len))) => len.min(self.epochs - 1),
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let backbone = self.backbone();
        backbone.validate()?;
        self.hyperparams().validate(backbone.num_patches())?;
        self.augment.validate()?;
        if let Some((start, _)) = self.k_warmup {
            let m = backbone.num_patches();
            if start == 0 || start > m {
                return Err(Error::invalid(
                    "train",
                    format!("warm-up k must be in 1..={m}, got {start}"),
                ));
            }
        }
        if self.epochs == 0 {
            return Err(Error::invalid("train", "epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train", "batch size must be at least 1"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::invalid(
                "train",
                format!("learning rate must be positive, got {}", a.lr),
            ));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::invalid("train", "Adam betas must be in [0, 1) and eps positive"));
        }
        Ok(())
    }
}

/// Default learning rate per preset. The AlexNet stack keeps the small
/// fine-tuning rate; the tiny network trains from scratch and needs a
/// larger step.
pub fn default_lr(preset: Preset) -> f64 {
    match preset {
        Preset::AlexNetConv => 5e-5,
        Preset::Tiny => 1e-3,
    }
}

/// Sample after background removal and resizing to the backbone input.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub image: GrayImage,
    pub label: bool,
    pub mass_box: Option<MassBox>,
}

pub fn prepare_samples(samples: &[Sample], side: usize) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            let p = preprocess::prepare(&s.image, s.mass_box, side)?;
            Ok(PreparedSample {
                image: p.image,
                label: s.label,
                mass_box: p.mass_box,
            })
        })
        .collect()
}

/// Forward pass of one image: patch probabilities in feature-map order.
pub fn patch_probabilities<T: Real>(
    config: &BackboneConfig,
    params: &ModelParams<T>,
    image: &GrayImage,
) -> Result<Vec<f64>> {
    let mut g = Graph::<T>::new();
    let bound = BoundParams::bind(&mut g, params);
    let x = g.input(config.image_tensor(image)?);
    let f = backbone::forward(config, &mut g, &bound, x)?;
    let r = head::instance_probs_bound(&mut g, f, &bound, PROB_EPSILON)?;
    Ok(g.value(r).data().iter().map(|v| v.to_f64()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: bool,
    /// Bag probability, the largest patch probability.
    pub score: f64,
    /// Feature-map index of the highest patch (first on ties).
    pub argmax_patch: usize,
    /// Whether the argmax patch centre falls in the ground-truth box grown
    /// by one patch stride; `None` without a box.
    pub in_box: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub auc: f64,
    pub confusion: Confusion,
    /// Mean data term of the training objective (no L2 penalty).
    pub loss: f64,
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn scores(&self) -> Vec<f64> {
        self.predictions.iter().map(|p| p.score).collect()
    }

    /// Fraction of correctly classified positives with a box whose argmax
    /// patch lies inside it, and how many such positives there were.
    pub fn localization_rate(&self) -> (f64, usize) {
        let hits: Vec<bool> = self
            .predictions
            .iter()
            .filter(|p| p.label && p.score >= ACCURACY_THRESHOLD)
            .filter_map(|p| p.in_box)
            .collect();
        if hits.is_empty() {
            return (0.0, 0);
        }
        let n = hits.iter().filter(|&&h| h).count();
        (n as f64 / hits.len() as f64, hits.len())
    }
}

pub fn evaluate<T: Real>(
    config: &BackboneConfig,
    params: &ModelParams<T>,
    samples: &[PreparedSample],
    scheme: LossScheme,
    hp: &MilHyperparams,
) -> Result<EvalReport> {
    let mut predictions = Vec::with_capacity(samples.len());
    let mut loss = 0.0;
    for s in samples {
        let probs = patch_probabilities(config, params, &s.image)?;
        let argmax = crate::graph::descending_permutation(&probs)[0];
        let score = probs[argmax];
        let eval_hp = MilHyperparams { lambda: 0.0, ..*hp };
        loss += head::loss_from_probabilities(scheme, &[(probs, s.label)], &eval_hp)?;
        predictions.push(Prediction {
            label: s.label,
            score,
            argmax_patch: argmax,
            in_box: s.mass_box.map(|b| heatmap::patch_in_box(config, argmax, &b)),
        });
    }
    let scores: Vec<f64> = predictions.iter().map(|p| p.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let confusion = metrics::confusion(&scores, &labels, ACCURACY_THRESHOLD)?;
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        auc: metrics::auc(&scores, &labels)?,
        confusion,
        loss: loss / samples.len() as f64,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation AUC (lower
    /// validation loss breaks ties).
    pub params: ModelParams<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// One optimisation step on `batch`; returns the batch loss.
fn train_step(
    config: &BackboneConfig,
    params: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    batch: &[GrayImage],
    labels: &[bool],
    scheme: LossScheme,
    hp: &MilHyperparams,
) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let bound = BoundParams::bind(&mut g, params);
    let mut bags = Vec::with_capacity(batch.len());
    for (img, &label) in batch.iter().zip(labels) {
        let x = g.input(config.image_tensor(img)?);
        let f = backbone::forward(config, &mut g, &bound, x)?;
        let r = head::instance_probs_bound(&mut g, f, &bound, hp.epsilon)?;
        let ranked = head::rank(&mut g, r)?;
        bags.push(Bag { ranked, label });
    }
    let loss = head::batch_loss(&mut g, scheme, &bags, &bound.regularized(), hp)?;
    g.backward(loss)?;
    let grads = bound.gradients(&g);
    adam.step(params, &grads)?;
    Ok(f64::from(g.value(loss).data()[0]))
}

/// Trains from a fresh initialisation on already prepared samples.
pub fn train_prepared(train: &[PreparedSample], val: &[PreparedSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let config = cfg.backbone();
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(
            "train",
            "training and validation sets must be non-empty",
        ));
    }
    if !(train.iter().any(|s| s.label) && train.iter().any(|s| !s.label)) {
        return Err(Error::invalid("train", "training set must contain both classes"));
    }
    let hp = cfg.hyperparams();
    let mut params = config.build(cfg.seed)?;
    let mut adam = AdamState::new(&params, cfg.adam);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();

    let mut best: Option<(f64, f64, usize, ModelParams<f32>)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let epoch_hp = cfg.hyperparams_at(epoch);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<GrayImage> = chunk
                .iter()
                .map(|&i| {
                    let seed = preprocess::augment_seed(cfg.seed, i, epoch);
                    augment_seeded(&train[i].image, &cfg.augment, seed)
                })
                .collect();
            let labels: Vec<bool> = chunk.iter().map(|&i| train[i].label).collect();
            let loss =
                train_step(&config, &mut params, &mut adam, &images, &labels, cfg.scheme, &epoch_hp).map_err(|e| {
                    match e {
                        Error::NonFinite { .. } | Error::LogDomain { .. } => Error::NonFiniteLoss { epoch, batch: b },
                        other => other,
                    }
                })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            epoch_loss += loss;
            batches += 1;
        }
        let report = evaluate(&config, &params, val, cfg.scheme, &hp)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_auc: report.auc,
            val_loss: report.loss,
        });
        let better = match &best {
            _ if epoch < cfg.selection_start() => false,
            None => true,
            Some((auc, loss, _, _)) => report.auc > *auc || (report.auc == *auc && report.loss < *loss),
        };
        if better {
            best = Some((report.auc, report.loss, epoch, params.clone()));
        }
    }
    let (_, _, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params,
        best_epoch,
        history,
    })
}

/// Prepares both splits and trains.
pub fn train(train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let side = cfg.backbone().input_side;
    let train = prepare_samples(train, side)?;
    let val = prepare_samples(val, side)?;
    train_prepared(&train, &val, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub val_fold: usize,
    /// Indices into the full sample list, in report order.
    pub test_indices: Vec<usize>,
    pub report: EvalReport,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub split: FoldSplit,
    pub folds: Vec<FoldResult>,
    pub accuracy: (f64, f64),
    pub auc: (f64, f64),
}

/// K-fold cross-validation: each fold is the test set once, the following
/// fold (cyclically) validates, the rest train. Fold assignment uses
/// `cfg.seed`.
pub fn cross_validate(samples: &[Sample], cfg: &TrainConfig, folds: usize) -> Result<CvReport> {
    cross_validate_with(samples, cfg, folds, |_, _| {})
}

/// [`cross_validate`] with a callback after every finished fold.
pub fn cross_validate_with(
    samples: &[Sample],
    cfg: &TrainConfig,
    folds: usize,
    mut on_fold: impl FnMut(usize, &FoldResult),
) -> Result<CvReport> {
    cfg.validate()?;
    if folds < 3 {
        return Err(Error::invalid(
            "cross_validate",
            format!("need at least 3 folds (train, validation, test), got {folds}"),
        ));
    }
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let split = stratified_kfold(&labels, folds, cfg.seed)?;
    let config = cfg.backbone();
    let prepared = prepare_samples(samples, config.input_side)?;
    let pick = |idx: &[usize]| -> Vec<PreparedSample> { idx.iter().map(|&i| prepared[i].clone()).collect() };

    let mut results = Vec::with_capacity(folds);
    for test in 0..folds {
        let val = (test + 1) % folds;
        let train_idx = split.complement(&[test, val]);
        let outcome = train_prepared(&pick(&train_idx), &pick(split.fold(val)), cfg)?;
        let test_idx = split.fold(test).to_vec();
        let report = evaluate(
            &config,
            &outcome.params,
            &pick(&test_idx),
            cfg.scheme,
            &cfg.hyperparams(),
        )?;
        let result = FoldResult {
            fold: test,
            val_fold: val,
            test_indices: test_idx,
            report,
            outcome,
        };
        on_fold(test, &result);
        results.push(result);
    }
    let accs: Vec<f64> = results.iter().map(|r| r.report.accuracy).collect();
    let aucs: Vec<f64> = results.iter().map(|r| r.report.auc).collect();
    Ok(CvReport {
        split,
        folds: results,
        accuracy: metrics::mean_std(&accs),
        auc: metrics::mean_std(&aucs),
    })
}
