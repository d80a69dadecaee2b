//! Acceptance suite: one PASS/FAIL line per criterion. Runs as part of
//! `cargo test` (it is a `harness = false` target) and exits non-zero if any
//! criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use common::gradcheck::{self, check_pipeline, CheckStats, Coverage, TOLERANCE};
use common::reference::{auc_oracle, oracle_conv, oracle_pool, otsu_oracle, Geometry};
use deepmil::backbone::{self, BoundParams};
use deepmil::head::{self, loss_from_probabilities, Bag};
use deepmil::metrics::auc;
use deepmil::preprocess::otsu_threshold;
use deepmil::{Graph, GrayImage, LossScheme, MilHyperparams, Preset, Tensor, PROB_EPSILON};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCHEMES: [LossScheme; 3] = [LossScheme::MaxPool, LossScheme::LabelAssign, LossScheme::Sparse];

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let config = Preset::Tiny.config();
    let m = config.num_patches();
    let mut report = Vec::new();
    let mut ok = true;
    for scheme in SCHEMES {
        let mut total = CheckStats::default();
        for seed in 0..20u64 {
            let params = config.build(seed).unwrap().cast::<f64>();
            let batch = gradcheck::synthetic_batch(&config, 500 + seed);
            let mut hp = MilHyperparams::for_scheme(scheme, m);
            if scheme == LossScheme::LabelAssign {
                hp.k = 1 + (seed as usize * 5) % m;
            }
            total.merge(check_pipeline(
                &config,
                &params,
                &batch,
                scheme,
                &hp,
                Coverage::Sampled { per_tensor: 4, seed },
            ));
        }
        ok &= total.passed() && total.checked >= 4 * total.skipped;
        report.push(format!(
            "{} worst {:.1e} ({} checked, {} skipped)",
            scheme.name(),
            total.worst,
            total.checked,
            total.skipped
        ));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(120);
    check(
        ok,
        format!(
            "{}; tolerance {TOLERANCE:.0e}; {:.1}s (limit 120s)",
            report.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

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

fn identities() -> Verdict {
    let hp = |lambda, mu, k| MilHyperparams {
        lambda,
        mu,
        k,
        epsilon: PROB_EPSILON,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sparse_gap: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(1..40);
        let n = rng.random_range(1..6);
        let batch: Vec<(Vec<f64>, bool)> = (0..n)
            .map(|_| {
                (
                    (0..m).map(|_| rng.random_range(0.0..1.0)).collect(),
                    rng.random_bool(0.5),
                )
            })
            .collect();
        let weights: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda = rng.random_range(0.0..0.1);
        let s = loss_with_weights(LossScheme::Sparse, &batch, &weights, &hp(lambda, 0.0, 1));
        let p = loss_with_weights(LossScheme::MaxPool, &batch, &weights, &hp(lambda, 0.0, 1));
        sparse_gap = sparse_gap.max((s - p).abs());
    }
    let mut perm_gap: f64 = 0.0;
    for _ in 0..100 {
        let m = rng.random_range(1..40);
        let r: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut shuffled = r.clone();
        shuffled.shuffle(&mut rng);
        let la = |v: &[f64], label, k| {
            loss_from_probabilities(LossScheme::LabelAssign, &[(v.to_vec(), label)], &hp(0.0, 0.0, k)).unwrap()
        };
        let k = rng.random_range(1..=m);
        perm_gap = perm_gap.max((la(&r, false, k) - la(&shuffled, false, k)).abs());
        perm_gap = perm_gap.max((la(&r, true, m) - la(&shuffled, true, m)).abs());
    }
    check(
        sparse_gap <= 1e-12 && perm_gap <= 1e-12,
        format!("sparse(mu=0) vs maxpool max gap {sparse_gap:.1e}, labelassign permutation max gap {perm_gap:.1e} (limit 1e-12)"),
    )
}

fn random_image(rng: &mut ChaCha8Rng) -> GrayImage {
    let (w, h) = (rng.random_range(1..=24), rng.random_range(1..=24));
    let style = rng.random_range(0..4);
    let pixels = (0..w * h)
        .map(|_| match style {
            0 => rng.random_range(0..=255u8),
            1 => {
                if rng.random_bool(0.4) {
                    rng.random_range(10..40)
                } else {
                    rng.random_range(150..220)
                }
            }
            2 => [0u8, 64, 128, 255][rng.random_range(0..4)],
            _ => rng.random_range(100..=104),
        })
        .collect();
    GrayImage::new(w, h, pixels).unwrap()
}

fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let otsu_mismatch = (0..1000)
        .filter(|_| {
            let img = random_image(&mut rng);
            otsu_threshold(&img) != otsu_oracle(img.pixels())
        })
        .count();

    let mut auc_mismatch = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..80);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let levels = rng.random_range(2..20);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect();
        if auc(&scores, &labels).unwrap() != auc_oracle(&scores, &labels) {
            auc_mismatch += 1;
        }
    }

    let mut kernel_gap: f64 = 0.0;
    let vec = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    for _ in 0..300 {
        let (c_in, h, w, pad) = (
            rng.random_range(1..=3),
            rng.random_range(1..=10),
            rng.random_range(1..=10),
            rng.random_range(0..=2),
        );
        let k = rng.random_range(1..=(h + 2 * pad).min(w + 2 * pad).min(5));
        let g = Geometry {
            c_in,
            h,
            w,
            c_out: rng.random_range(1..=3),
            k,
            stride: rng.random_range(1..=3),
            pad,
        };
        let (x, kern, b) = (
            vec(&mut rng, c_in * h * w),
            vec(&mut rng, g.c_out * c_in * k * k),
            vec(&mut rng, g.c_out),
        );
        let mut graph = Graph::<f64>::new();
        let xn = graph.input(Tensor::new(vec![c_in, h, w], x.clone()).unwrap());
        let kn = graph.input(Tensor::new(vec![g.c_out, c_in, k, k], kern.clone()).unwrap());
        let bn = graph.input(Tensor::new(vec![g.c_out], b.clone()).unwrap());
        let y = graph.conv2d(xn, kn, bn, g.stride, g.pad).unwrap();
        let (_, _, want) = oracle_conv(&g, &x, &kern, &b);
        for (a, e) in graph.value(y).data().iter().zip(&want) {
            kernel_gap = kernel_gap.max((a - e).abs());
        }
        let pk = rng.random_range(1..=h.min(w));
        let ps = rng.random_range(1..=3);
        let p = graph.maxpool2d(xn, pk, ps).unwrap();
        let (_, _, want) = oracle_pool(c_in, h, w, pk, ps, &x);
        for (a, e) in graph.value(p).data().iter().zip(&want) {
            kernel_gap = kernel_gap.max((a - e).abs());
        }
    }
    check(
        otsu_mismatch == 0 && auc_mismatch == 0 && kernel_gap < 1e-6,
        format!(
            "otsu mismatches {otsu_mismatch}/1000, auc mismatches {auc_mismatch}/200, conv/pool max gap {kernel_gap:.1e} (limit 1e-6)"
        ),
    )
}

fn deepmil_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_deepmil"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "deepmil {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// One full benchmark run: synthetic data plus 5-fold CV per scheme.
struct Benchmark {
    root: PathBuf,
    elapsed: Duration,
}

impl Benchmark {
    fn run(root: &Path) -> Result<Self, String> {
        let start = Instant::now();
        let data = root.join("data");
        let s = |p: &Path| p.to_str().unwrap().to_string();
        deepmil_cli(&[
            "synth",
            "--out",
            &s(&data),
            "--n",
            "200",
            "--side",
            "64",
            "--pos-frac",
            "0.5",
            "--mass-frac",
            "0.02",
            "--seed",
            "7",
        ])?;
        for scheme in SCHEMES {
            let out = root.join(scheme.name());
            deepmil_cli(&[
                "cv",
                "--data",
                &s(&data),
                "--loss",
                scheme.name(),
                "--folds",
                "5",
                "--preset",
                "tiny",
                "--seed",
                "7",
                "--out",
                &s(&out),
            ])?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            elapsed: start.elapsed(),
        })
    }

    fn read(&self, scheme: LossScheme, file: &str) -> String {
        fs::read_to_string(self.root.join(scheme.name()).join(file)).unwrap()
    }

    /// Mean accuracy and AUC from the `mean±std` row of metrics.csv.
    fn means(&self, scheme: LossScheme) -> (f64, f64) {
        let metrics = self.read(scheme, "metrics.csv");
        let row = metrics.lines().find(|l| l.starts_with("mean±std,")).expect("mean row");
        let mean = |cell: &str| cell.split('±').next().unwrap().parse::<f64>().unwrap();
        let cells: Vec<&str> = row.split(',').collect();
        (mean(cells[1]), mean(cells[2]))
    }

    /// Localisation hits among correctly classified positives with a box.
    fn localization(&self, scheme: LossScheme) -> (usize, usize) {
        let predictions = self.read(scheme, "predictions.csv");
        let mut hits = 0;
        let mut total = 0;
        for line in predictions.lines().skip(1) {
            let c: Vec<&str> = line.split(',').collect();
            let (label, score, in_box) = (c[2], c[3].parse::<f64>().unwrap(), c[5]);
            if label == "1" && score >= 0.5 && !in_box.is_empty() {
                total += 1;
                hits += usize::from(in_box == "1");
            }
        }
        (hits, total)
    }

    /// Every file the run produced, relative path and bytes.
    fn files(&self) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(&dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(&self.root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }
}

fn benchmark(run: &Result<Benchmark, String>) -> Verdict {
    let b = run.as_ref().map_err(Clone::clone)?;
    let mut ok = b.elapsed < Duration::from_secs(15 * 60);
    let mut parts = Vec::new();
    for scheme in SCHEMES {
        let (acc, auc) = b.means(scheme);
        ok &= auc >= 0.85 && acc >= 0.80;
        parts.push(format!("{} acc {acc:.3} auc {auc:.3}", scheme.name()));
    }
    check(
        ok,
        format!("{}; {:.0}s (limit 900s)", parts.join(", "), b.elapsed.as_secs_f64()),
    )
}

fn localization(run: &Result<Benchmark, String>) -> Verdict {
    let b = run.as_ref().map_err(Clone::clone)?;
    let (hits, total) = b.localization(LossScheme::Sparse);
    let rate = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    check(
        total > 0 && rate >= 0.70,
        format!("sparse argmax patch in dilated box for {hits}/{total} = {rate:.3} (limit 0.70)"),
    )
}

fn determinism(first: &Result<Benchmark, String>, root: &Path) -> Verdict {
    let a = first.as_ref().map_err(Clone::clone)?;
    let b = Benchmark::run(root)?;
    let (fa, fb) = (a.files(), b.files());
    let names = |f: &[(PathBuf, Vec<u8>)]| f.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>();
    if names(&fa) != names(&fb) {
        return Err("the two runs wrote different sets of files".into());
    }
    let differing: Vec<String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let ckpts = fa
        .iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "ckpt"))
        .count();
    let csvs = fa
        .iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "csv"))
        .count();
    check(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files identical ({ckpts} checkpoints, {csvs} CSVs)", fa.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

fn alexnet_shape() -> Verdict {
    let config = Preset::AlexNetConv.config();
    let params = config.build(0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = GrayImage::new(227, 227, (0..227 * 227).map(|_| rng.random()).collect()).unwrap();
    let mut g = Graph::<f32>::new();
    let bound = BoundParams::bind(&mut g, &params);
    let x = g.input(config.image_tensor(&image).map_err(|e| e.to_string())?);
    let f = backbone::forward(&config, &mut g, &bound, x).map_err(|e| e.to_string())?;
    let dims = g.value(f).dims().to_vec();
    check(dims == [256, 6, 6], format!("feature map {dims:?} on a 227x227 input"))
}

fn report(number: usize, name: &str, verdict: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = panic::catch_unwind(AssertUnwindSafe(verdict)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match &verdict {
        Ok(d) => println!("PASS {number} {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("FAIL {number} {name}: {d} [{secs:.1}s]"),
    }
    verdict.is_ok()
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut results = vec![
        report(1, "gradient suite", gradient_suite),
        report(2, "algebraic identities", identities),
        report(3, "oracle equivalence", oracles),
    ];
    let first = Benchmark::run(&tmp.path().join("run1"));
    results.push(report(4, "synthetic benchmark", || benchmark(&first)));
    results.push(report(5, "weak localization", || localization(&first)));
    results.push(report(6, "determinism", || {
        determinism(&first, &tmp.path().join("run2"))
    }));
    results.push(report(7, "alexnet shape", alexnet_shape));
    let passed = results.iter().filter(|&&r| r).count();
    println!("{passed}/{} acceptance criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
