//! End-to-end acceptance run. Every criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Dataset sizes are scaled down from the default config so the whole run
//! fits a single-core budget; see the README.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use peepscope_cli::commands::{self, ExplainOptions, InjectSummary};
use peepscope_cli::RunConfig;
use peepscope_core::anomaly::IntensityCalibration;
use peepscope_core::autoencoder::{gradient_check, load_model, Network};
use peepscope_core::eval::auc;
use peepscope_core::peephole::{
    augment, build_reduced_map, core_vector, estimate_posterior, gmm_fit, membership, thin_svd,
};
use peepscope_core::telemetry::{chunk_stream, read_stream_csv, N_CHANNELS, WINDOW};
use peepscope_core::{AnomalyKind, ArchitectureDescriptor, Dataset, Scenario, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const TRAIN_CHUNKS: usize = 8000;
const VAL_CHUNKS: usize = 12_500;
const TEST_CHUNKS: usize = 6000;
const CORRUPTED_TEST: usize = 3000;
const EPOCHS: usize = 20;
const STREAM_TRIALS: u64 = 10;

fn report(results: &mut Vec<(String, bool)>, name: &str, pass: bool, detail: String) {
    let line = format!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    // Written straight to the handle so the line survives output capture.
    let _ = writeln!(std::io::stderr(), "{line}");
    results.push((name.to_string(), pass));
}

fn config(dir: &Path) -> RunConfig {
    let text = format!(
        r#"
seed = 20240501
out_dir = {dir:?}

[generator]

[dataset]
train_chunks = {TRAIN_CHUNKS}
val_chunks = {VAL_CHUNKS}
test_chunks = {TEST_CHUNKS}

[anomaly]
test_chunks = {CORRUPTED_TEST}

[train]
epochs = {EPOCHS}
val_monitor = 1000

[peephole]

[eval]
"#,
        dir = dir.to_str().unwrap()
    );
    RunConfig::parse(&text).unwrap()
}

fn nominal_split(dir: &Path, split: Split) -> Dataset {
    let stream = read_stream_csv(dir.join(commands::split_file(split))).unwrap();
    Dataset::nominal(chunk_stream(&stream, WINDOW).unwrap(), split)
}

fn detection(results: &mut Vec<(String, bool)>, summary: &commands::EvalSummary, elapsed: f64) {
    let mut worst = [(1.0f64, ""), (1.0f64, "")];
    let mut pass = summary.aucs.len() == 10;
    for a in &summary.aucs {
        let (i, bound) = match a.scenario.unwrap() {
            Scenario::I => (0, 0.97),
            Scenario::II => (1, 0.90),
        };
        pass &= a.value >= bound;
        if a.value < worst[i].0 {
            worst[i] = (a.value, a.kind.unwrap().name());
        }
    }
    report(
        results,
        "1 detection AUC",
        pass,
        format!(
            "{} rows; min scenario I {:.4} ({}) >= 0.97, min scenario II {:.4} ({}) >= 0.90; pipeline took {elapsed:.0} s",
            summary.aucs.len(),
            worst[0].0,
            worst[0].1,
            worst[1].0,
            worst[1].1
        ),
    );
}

fn identification(results: &mut Vec<(String, bool)>, summary: &commands::EvalSummary) {
    let m = &summary.scope("I_kinds").expect("kind confusion").matrix;
    let ix = |k: AnomalyKind| k.index().unwrap();
    let p = &m.probabilities;
    let mean_diag = m.mean_diagonal();
    let imp = ix(AnomalyKind::Impulse);
    let impulse_ok = (0..5).all(|c| p[[imp, imp]] >= p[[imp, c]]);
    let psa = ix(AnomalyKind::Psa);
    let toward_gwn_step = p[[psa, ix(AnomalyKind::Gwn)]] + p[[psa, ix(AnomalyKind::Step)]];
    let toward_off_imp = (p[[psa, ix(AnomalyKind::Offset)]] + p[[psa, imp]]) / 2.0;
    let psa_ok = toward_gwn_step > toward_off_imp;
    report(
        results,
        "3 kind identification",
        mean_diag >= 0.6 && impulse_ok && psa_ok,
        format!(
            "mean diagonal {mean_diag:.3} >= 0.6; Impulse diagonal dominant {impulse_ok}; \
             PSA->GWN+Step {toward_gwn_step:.3} > PSA->Offset/Impulse mean {toward_off_imp:.3}; rows {:?}",
            p.rows().into_iter().map(|r| r.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()).collect::<Vec<_>>()
        ),
    );
}

fn localization(results: &mut Vec<(String, bool)>, summary: &commands::EvalSummary) {
    let pooled = summary.scope("II_wheels").expect("wheel confusion");
    let panels: Vec<_> = summary
        .scopes
        .iter()
        .filter(|s| s.scope.starts_with("II_wheels_") && s.kind.is_some())
        .collect();
    let biases: Vec<String> = std::iter::once(pooled)
        .chain(panels.iter().copied())
        .map(|s| format!("{} {:.3}", s.kind.map_or("all", AnomalyKind::name), s.matrix.bias_index()))
        .collect();
    let acc = pooled.matrix.accuracy();
    report(
        results,
        "4 wheel localization",
        acc > 0.25 && panels.len() == 5,
        format!("accuracy {acc:.3} > 0.25; {} per-kind panels; bias index {}", panels.len(), biases.join(", ")),
    );
}

/// Singular values by one-sided (Hestenes) Jacobi rotations.
fn jacobi_singular_values(a: &Array2<f64>) -> Vec<f64> {
    let mut u = if a.nrows() >= a.ncols() { a.clone() } else { a.t().to_owned() };
    let n = u.ncols();
    for _ in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = u.column(p).dot(&u.column(p));
                let beta = u.column(q).dot(&u.column(q));
                let gamma = u.column(p).dot(&u.column(q));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (cp, cq) = (u.column(p).to_owned(), u.column(q).to_owned());
                u.column_mut(p).assign(&(&cp * c - &cq * s));
                u.column_mut(q).assign(&(&cp * s + &cq * c));
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut s: Vec<f64> = u.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

fn numerical_oracles(results: &mut Vec<(String, bool)>, dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut notes = Vec::new();
    let mut pass = true;

    // Full-rank reconstruction and core-vector fidelity on the trained latent layer.
    let model = load_model(dir.join(commands::MODEL_FILE)).unwrap();
    let (w, b) = model.latent_layer();
    let map = build_reduced_map(w.view(), b.view(), w.nrows()).unwrap();
    let a = augment(w.view(), b.view()).unwrap();
    let rel = (&map.reconstruct() - &a).mapv(|x| x * x).sum().sqrt() / a.mapv(|x| x * x).sum().sqrt();
    pass &= rel < 1e-6;
    notes.push(format!("reconstruction {rel:.1e}"));
    let test = nominal_split(dir, Split::Test);
    let mut fidelity = 0.0f64;
    for chunk in &test.chunks()[..20] {
        let f = model.forward(chunk).unwrap();
        let v = core_vector(f.latent_input.view(), &map).unwrap();
        let z = map.lift(v.view());
        let scale = f.latent.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        fidelity = fidelity.max((&z - &f.latent).iter().fold(0.0f64, |m, x| m.max(x.abs())) / scale);
    }
    pass &= fidelity < 1e-6;
    notes.push(format!("fidelity {fidelity:.1e}"));

    let mut svd_err = 0.0f64;
    for _ in 0..50 {
        let (m, n) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let a = gaussian(&mut rng, m, n);
        let (_, sigma, _) = thin_svd(a.view()).unwrap();
        let oracle = jacobi_singular_values(&a);
        for (i, o) in oracle.iter().enumerate() {
            let s = sigma.get(i).copied().unwrap_or(0.0);
            svd_err = svd_err.max((s - o).abs());
        }
    }
    pass &= svd_err < 1e-8;
    notes.push(format!("jacobi {svd_err:.1e}"));

    let mut monotone = true;
    for seed in 0..20u64 {
        let mut data = gaussian(&mut rng, 300, 4);
        for (i, mut row) in data.axis_iter_mut(Axis(0)).enumerate() {
            row += (i % 3) as f64 * 4.0;
        }
        let g = gmm_fit(data.view(), 3, seed).unwrap();
        monotone &= g
            .log_likelihood
            .windows(2)
            .all(|w| w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0));
    }
    pass &= monotone;
    notes.push(format!("EM monotone {monotone}"));

    let data = gaussian(&mut rng, 400, 5);
    let g = gmm_fit(data.view(), 4, 1).unwrap();
    let vocabulary: Vec<String> = (0..5).map(|i| format!("T{i}")).collect();
    let pairs: Vec<(usize, usize)> = (0..200).map(|i| (i % 5, (i * 7) % 4)).collect();
    let u = estimate_posterior(&pairs, &vocabulary, 4).unwrap();
    let mut simplex = 0.0f64;
    for i in 0..10_000 {
        let mut v: Array1<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
        if i % 10 == 0 {
            v *= 10f64.powi(rng.random_range(3..=200));
        }
        let m = membership(v.view(), &g);
        let p = u.peephole(m.d.view());
        simplex = simplex.max((m.d.sum() - 1.0).abs()).max((p.sum() - 1.0).abs());
    }
    pass &= simplex <= 1e-9;
    notes.push(format!("simplex {simplex:.1e}"));

    let mut net = Network::<f64>::init(&ArchitectureDescriptor::reference(), 3);
    let x = Array2::from_shape_fn((1, WINDOW * N_CHANNELS), |(_, j)| ((j as f64) * 0.73).sin());
    let gc = gradient_check(&mut net, x.view(), 1e-4, 60, 4).unwrap();
    pass &= gc.max_rel_error < 1e-4;
    notes.push(format!("gradcheck {:.1e} over {}", gc.max_rel_error, gc.checked));

    let mut auc_exact = true;
    for _ in 0..100 {
        let nom: Vec<f64> = (0..rng.random_range(1..200)).map(|_| rng.random_range(0..30) as f64).collect();
        let anom: Vec<f64> = (0..rng.random_range(1..200)).map(|_| rng.random_range(10..40) as f64).collect();
        let mut pairs = 0.0;
        for &a in &nom {
            for &b in &anom {
                pairs += if a < b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        auc_exact &= auc(&nom, &anom).unwrap().value == pairs / (nom.len() * anom.len()) as f64;
    }
    pass &= auc_exact;
    notes.push(format!("AUC exact {auc_exact}"));
    report(results, "5 numerical oracles", pass, notes.join(", "));
}

fn injector_calibration(results: &mut Vec<(String, bool)>, dir: &Path, injected: &[InjectSummary]) {
    let cal: IntensityCalibration =
        toml::from_str(&std::fs::read_to_string(dir.join(commands::CALIBRATION_FILE)).unwrap()).unwrap();
    let val = nominal_split(dir, Split::Validation);
    let mut pass = true;
    let mut notes = Vec::new();
    let (mut norm_err, mut angle_err) = (0.0f64, 0.0f64);
    for s in injected.iter().filter(|s| s.split == Split::Validation) {
        let labels = s.dataset.labels().unwrap();
        let mut energy = [(0.0f64, 0usize); 5];
        for ((clean, dirty), tag) in val.chunks().iter().zip(s.dataset.chunks()).zip(labels) {
            assert_eq!(clean.origin(), dirty.origin());
            let draw = tag.params.as_ref().unwrap();
            let k = tag.kind.index().unwrap();
            for &ch in &draw.channels {
                let (w, w2) = (clean.column(ch as usize), dirty.column(ch as usize));
                energy[k].0 += (&w2 - &w).mapv(|x| x * x).sum();
                energy[k].1 += 1;
                if tag.kind == AnomalyKind::Psa && !draw.degenerate.contains(&ch) {
                    let (n0, n1) = (w.dot(&w).sqrt(), w2.dot(&w2).sqrt());
                    norm_err = norm_err.max((n1 - n0).abs() / n0);
                    let angle = (w.dot(&w2) / (n0 * n1)).clamp(-1.0, 1.0).acos();
                    angle_err = angle_err.max((angle - draw.theta.unwrap()).abs());
                }
            }
        }
        let ratios: Vec<String> = AnomalyKind::INJECTED
            .iter()
            .map(|k| {
                let (e, n) = energy[k.index().unwrap()];
                let r = e / n as f64 / cal.nominal_energy;
                pass &= (0.9..=1.1).contains(&r);
                format!("{} {r:.3}", k.name())
            })
            .collect();
        notes.push(format!("scenario {}: {}", s.scenario.name(), ratios.join(" ")));
    }
    pass &= norm_err <= 1e-9 && angle_err <= 1e-6;
    notes.push(format!("PSA norm {norm_err:.1e}, angle {angle_err:.1e}"));
    report(results, "6 injector calibration", pass, notes.join("; "));
}

fn streaming(results: &mut Vec<(String, bool)>, cfg: &RunConfig) {
    let mut hits = 0;
    let mut notes = Vec::new();
    for trial in 0..STREAM_TRIALS {
        let out = commands::cmd_explain(cfg, &ExplainOptions { trial, ..ExplainOptions::default() }).unwrap();
        let (start, len) = out.event.unwrap();
        let overlapping: Vec<_> = out.trace.regions.iter().filter(|r| r.overlaps(start, len)).collect();
        let tags: Vec<&str> = overlapping.iter().map(|r| out.trace.vocabulary[r.dominant_tag].as_str()).collect();
        if !tags.is_empty() && tags.iter().all(|t| *t == "Step" || *t == "Offset") {
            hits += 1;
        }
        notes.push(format!(
            "{}:{}",
            if tags.is_empty() { "none".to_string() } else { tags.join("/") },
            out.trace.rows.iter().filter(|r| r.flagged).count()
        ));
    }
    report(
        results,
        "8 streaming explanation",
        hits >= 8,
        format!("{hits}/{STREAM_TRIALS} trials Step/Offset (tag:flagged windows {})", notes.join(" ")),
    );
}

fn bundle_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(results: &mut Vec<(String, bool)>, root: &Path) {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml");
    let mut bundles = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        for cmd in ["generate", "inject", "train", "fit-peephole", "evaluate", "explain"] {
            let status = Command::new(env!("CARGO_BIN_EXE_peepscope"))
                .args([cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
                .env("RUST_LOG", "warn")
                .status()
                .unwrap();
            assert!(status.success(), "{cmd} failed");
        }
        bundles.push(bundle_files(&out));
    }
    let identical = bundles[0] == bundles[1];
    report(
        results,
        "7 determinism",
        identical && !bundles[0].is_empty(),
        format!("{} files byte-identical across two runs: {identical}", bundles[0].len()),
    );
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    let cfg = config(&dir);
    let mut results = Vec::new();

    let started = Instant::now();
    commands::cmd_generate(&cfg).unwrap();
    let injected = commands::cmd_inject(&cfg, &[Scenario::I, Scenario::II], None).unwrap();
    commands::cmd_train(&cfg, false).unwrap();
    commands::cmd_fit_peephole(&cfg, &[Scenario::I, Scenario::II], None).unwrap();
    let summary = commands::cmd_evaluate(&cfg).unwrap();
    let elapsed = started.elapsed().as_secs_f64();

    detection(&mut results, &summary, elapsed);
    report(
        &mut results,
        "2 threshold contract",
        summary.fpr() <= 0.002,
        format!(
            "nominal test FPR {:.5} ({} of {}) <= 0.002",
            summary.fpr(),
            summary.false_positives,
            summary.n_nominal
        ),
    );
    identification(&mut results, &summary);
    localization(&mut results, &summary);
    numerical_oracles(&mut results, &dir);
    injector_calibration(&mut results, &dir, &injected);
    determinism(&mut results, &root.path().join("determinism"));
    streaming(&mut results, &cfg);

    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
