use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use deepmil::dataset::{generate_synthetic, stratified_kfold, SynthConfig};
use deepmil::heatmap::export_heatmap;
use deepmil::preprocess::prepare;
use deepmil::train::{self, CvReport, FoldResult, TrainOutcome};
use deepmil::Preset;

use crate::args::{Cli, Command, CvArgs, HeatmapArgs, SynthArgs, TrainArgs};
use crate::config::RunConfig;
use crate::dataset_io::{load_dataset, save_dataset, Dataset};
use crate::error::{CliError, Result};
use crate::{checkpoint, fsutil, pgm};

/// Folds used by `train` to carve out its validation split (fold 0).
pub const TRAIN_VALIDATION_FOLDS: usize = 5;

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Cv(a) => cv(&a, out),
        Command::Heatmap(a) => heatmap(&a, out),
    }
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = SynthConfig {
        n: a.n,
        side: a.side,
        pos_frac: a.pos_frac,
        mass_area_frac: a.mass_frac,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let data = Dataset::with_default_names(generate_synthetic(&cfg)?);
    save_dataset(&a.out, &data)?;
    let positives = data.samples.iter().filter(|s| s.label).count();
    say(
        out,
        format_args!(
            "wrote {} images ({positives} positive) to {}",
            data.samples.len(),
            a.out.display()
        ),
    )
}

fn resolve(run: &crate::args::RunArgs, flags: RunConfig) -> Result<RunConfig> {
    let base = match &run.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    Ok(base.merged(flags))
}

/// `model.ckpt` -> `model.history.csv`.
pub fn history_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("history.csv")
}

fn history_csv(outcome: &TrainOutcome) -> Vec<u8> {
    let mut s = String::from("epoch,train_loss,val_auc,val_loss\n");
    for h in &outcome.history {
        let _ = writeln!(s, "{},{},{},{}", h.epoch, h.train_loss, h.val_auc, h.val_loss);
    }
    s.into_bytes()
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let rc = resolve(&a.run, a.run.flags(a.out.clone(), None))?;
    let cfg = rc.train_config()?;
    let data_dir = rc.require_data()?;
    let ckpt = rc.require_out()?;

    let data = load_dataset(data_dir)?;
    let labels: Vec<bool> = data.samples.iter().map(|s| s.label).collect();
    let split = stratified_kfold(&labels, TRAIN_VALIDATION_FOLDS, cfg.seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.samples[i].clone()).collect::<Vec<_>>();
    let val = pick(split.fold(0));
    let trn = pick(&split.complement(&[0]));

    let outcome = train::train(&trn, &val, &cfg)?;
    checkpoint::save(ckpt, &outcome.params)?;
    let history = history_path(ckpt);
    fsutil::write_atomic(&history, &history_csv(&outcome))?;
    let best = &outcome.history[outcome.best_epoch];
    say(
        out,
        format_args!(
            "best epoch {} of {}: val_auc={:.6} val_loss={:.6}",
            outcome.best_epoch + 1,
            cfg.epochs,
            best.val_auc,
            best.val_loss
        ),
    )?;
    say(
        out,
        format_args!("checkpoint: {}\nhistory: {}", ckpt.display(), history.display()),
    )
}

/// `fold,accuracy,auc` rows followed by a `mean±std` row.
pub fn metrics_csv(report: &CvReport) -> String {
    let mut s = String::from("fold,accuracy,auc\n");
    for f in &report.folds {
        let _ = writeln!(s, "{},{},{}", f.fold, f.report.accuracy, f.report.auc);
    }
    let (am, asd) = report.accuracy;
    let (um, usd) = report.auc;
    let _ = writeln!(s, "mean±std,{am}±{asd},{um}±{usd}");
    s
}

fn predictions_csv(report: &CvReport, names: &[String]) -> String {
    let mut s = String::from("fold,filename,label,score,argmax_patch,in_box\n");
    for f in &report.folds {
        for (&i, p) in f.test_indices.iter().zip(&f.report.predictions) {
            let in_box = p.in_box.map_or("", |b| if b { "1" } else { "0" });
            let _ = writeln!(
                s,
                "{},{},{},{},{},{in_box}",
                f.fold,
                names[i],
                u8::from(p.label),
                p.score,
                p.argmax_patch
            );
        }
    }
    s
}

fn cv(a: &CvArgs, out: &mut dyn Write) -> Result<()> {
    let rc = resolve(&a.run, a.run.flags(a.out.clone(), a.folds))?;
    let cfg = rc.train_config()?;
    let folds = rc.folds.unwrap_or(5);
    if folds < 3 {
        return Err(CliError::Usage(format!("--folds must be at least 3, got {folds}")));
    }
    let data_dir = rc.require_data()?;
    let dir = rc.require_out()?;

    let data = load_dataset(data_dir)?;
    fsutil::create_dir(dir)?;
    let mut saved = Ok(());
    let report = train::cross_validate_with(&data.samples, &cfg, folds, |i, r: &FoldResult| {
        eprintln!(
            "fold {}/{folds}: accuracy={:.4} auc={:.4} (best epoch {})",
            i + 1,
            r.report.accuracy,
            r.report.auc,
            r.outcome.best_epoch + 1
        );
        if saved.is_ok() {
            saved = checkpoint::save(&dir.join(format!("fold{i}.ckpt")), &r.outcome.params);
        }
    })?;
    saved?;
    fsutil::write_atomic(&dir.join("metrics.csv"), metrics_csv(&report).as_bytes())?;
    fsutil::write_atomic(
        &dir.join("predictions.csv"),
        predictions_csv(&report, &data.names).as_bytes(),
    )?;

    let (am, asd) = report.accuracy;
    let (um, usd) = report.auc;
    say(
        out,
        format_args!("{}: accuracy={am:.4}±{asd:.4} auc={um:.4}±{usd:.4}", cfg.scheme.name()),
    )?;
    let (hits, total) = report.folds.iter().fold((0.0, 0), |(h, t), f| {
        let (rate, n) = f.report.localization_rate();
        (h + rate * n as f64, t + n)
    });
    if total > 0 {
        say(
            out,
            format_args!(
                "localization={:.4} over {total} correctly classified positives",
                hits / total as f64
            ),
        )?;
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn heatmap(a: &HeatmapArgs, out: &mut dyn Write) -> Result<()> {
    let explicit = a
        .preset
        .as_deref()
        .map(|p| p.parse::<Preset>().map_err(|e| CliError::Usage(e.to_string())))
        .transpose()?;
    let (preset, params) = match explicit {
        Some(p) => (p, checkpoint::load_for(&a.ckpt, &p.config())?),
        None => {
            let params = checkpoint::load(&a.ckpt)?;
            let preset = checkpoint::infer_preset(&params).ok_or_else(|| {
                CliError::format(
                    &a.ckpt,
                    "parameters match no preset (tiny, alexnet-conv); pass --preset to see the mismatch",
                )
            })?;
            (preset, params)
        }
    };
    let config = preset.config();
    let image = pgm::read(&a.image)?;
    let prepared = prepare(&image, None, config.input_side)?;
    let h = export_heatmap(&config, &params, &prepared.image)?;

    let mut csv = String::new();
    for row in h.prob_map.chunks(h.cols) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(csv, "{}", cells.join(","));
    }
    pgm::write(&with_suffix(&a.out, ".pgm"), &h.rendered)?;
    fsutil::write_atomic(&with_suffix(&a.out, ".csv"), csv.as_bytes())?;
    say(out, format_args!("score={:.6}", h.score))
}
