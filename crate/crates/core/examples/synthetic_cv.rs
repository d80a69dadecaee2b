//! Cross-validates one loss scheme on a generated dataset and prints
//! per-fold metrics.
//!
//! cargo run --release -p deepmil --example synthetic_cv -- sparse 50

use std::time::Instant;

use deepmil::dataset::{generate_synthetic, SynthConfig};
use deepmil::train::{cross_validate_with, TrainConfig};
use deepmil::{LossScheme, Preset};

fn main() {
    let mut args = std::env::args().skip(1);
    let scheme: LossScheme = args
        .next()
        .unwrap_or_else(|| "sparse".into())
        .parse()
        .expect("loss scheme");
    let epochs: Option<usize> = args.next().map(|e| e.parse().expect("epochs"));

    let samples = generate_synthetic(&SynthConfig::default()).expect("synthetic data");
    let mut cfg = TrainConfig::new(scheme, Preset::Tiny);
    if let Some(epochs) = epochs {
        cfg.epochs = epochs;
    }
    cfg.seed = 7;

    let start = Instant::now();
    let report = cross_validate_with(&samples, &cfg, 5, |fold, r| {
        let (loc, n) = r.report.localization_rate();
        println!(
            "fold {fold}: acc {:.3} auc {:.3} best epoch {} loc {loc:.2} ({n}) [{:.1}s]",
            r.report.accuracy,
            r.report.auc,
            r.outcome.best_epoch,
            start.elapsed().as_secs_f64()
        );
    })
    .expect("cross-validation");
    println!(
        "{scheme}: accuracy {:.3} ± {:.3}, auc {:.3} ± {:.3}",
        report.accuracy.0, report.accuracy.1, report.auc.0, report.auc.1
    );
}
