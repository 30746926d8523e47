//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 4, 8 and 9 need the JHU CSSE global time-series files
//! (`time_series_covid19_{confirmed,recovered,deaths}_global.csv`) in
//! `$ATTNFC_DATA_DIR`, or in `data/jhu` at the workspace root.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use attnfc_core::attention::{AttentionKind, AttentionScorerParams};
use attnfc_core::data::{
    descriptive_stats, make_windows, prepare, ScalerParams, SplitSpec,
};
use attnfc_core::evaluation::{evaluate_horizon, evaluate_test, mape, rmse, RowOutcome, PUBLISHED};
use attnfc_core::exec::Execution;
use attnfc_core::layers::Time2VecParams;
use attnfc_core::model::{Model, ModelConfig, ModelKind};
use attnfc_core::numerics::Tensor;
use attnfc_core::pipeline::{self, RunConfig};
use attnfc_core::training::{dataset_mse, train_with, Control, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use support::cases::{case, check_case};

struct Verdict {
    pass: bool,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Verdict {
    Verdict {
        pass: true,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Verdict {
    Verdict {
        pass: false,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_correctness() -> Verdict {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let config = ModelConfig::default();
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut rechecked = 0;
    let mut failures = Vec::new();
    for seed in 0..20 {
        let c = case(&config, seed);
        let r = check_case(&c, STEP, TOL);
        entries += r.entries;
        rechecked += r.rechecked.len();
        worst = worst.max(r.max_rel_error);
        failures.extend(r.failures.into_iter().map(|f| (seed, f)));
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "20 seeds, {entries} entries, max rel err {worst:.2e} (tol {TOL:.0e}); {rechecked} cancellation-limited entries resolved in double-double; {}",
        secs(elapsed)
    );
    if !failures.is_empty() {
        let (seed, f) = &failures[0];
        return fail(format!(
            "{detail}; {} failing, first: seed {seed} {}[{}] analytic {:e} numeric {:e}",
            failures.len(),
            f.param,
            f.index,
            f.analytic,
            f.numeric_dd.unwrap_or(f.numeric_f64)
        ));
    }
    if elapsed > Duration::from_secs(60) {
        return fail(format!("{detail}; exceeds 1 minute"));
    }
    pass(detail)
}

fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.gen_range(-3.0..3.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn attention_normalization() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum: f64 = 0.0;
    let mut worst_tied: f64 = 0.0;
    for _ in 0..500 {
        let t = r.gen_range(1..=14);
        let n = r.gen_range(1..=16);
        let dec = r.gen_range(1..=8);
        let s = r.gen_range(1..=8);
        let states = random_matrix(&mut r, t, n);
        let d = Tensor::vector((0..dec).map(|_| r.gen_range(-3.0..3.0)).collect());

        let fine = AttentionScorerParams::init(AttentionKind::FineGrained, n, dec, s, &mut r);
        let a = fine.attend_fine(&states, &d).unwrap();
        for j in 0..n {
            let sum: f64 = (0..t).map(|k| a.weights.get2(k, j)).sum();
            worst_sum = worst_sum.max((sum - 1.0).abs());
        }

        let basic = AttentionScorerParams::init(AttentionKind::Basic, n, dec, s, &mut r);
        let mut tied = basic.clone();
        let w = basic.output.weight.row(0).to_vec();
        tied.output.weight = Tensor::matrix(&vec![w; n]).unwrap();
        tied.output.bias = Tensor::filled(&[n], basic.output.bias.data()[0]);
        let b = basic.attend_basic(&states, &d).unwrap();
        let f = tied.attend_fine(&states, &d).unwrap();
        for (x, y) in b.context.data().iter().zip(f.context.data()) {
            worst_tied = worst_tied.max((x - y).abs());
        }
    }
    let detail = format!(
        "500 random cases; max |Σ_t α_tj − 1| {worst_sum:.1e} (tol 1e-9); tied fine vs basic max |Δ| {worst_tied:.1e} (tol 1e-12)"
    );
    if worst_sum <= 1e-9 && worst_tied <= 1e-12 {
        pass(detail)
    } else {
        fail(detail)
    }
}

/// Random element of a coarse dyadic grid: `k / 2^bits` with `|k| < 2^bits`.
fn dyadic(r: &mut ChaCha8Rng, bits: u32) -> f64 {
    let k = r.gen_range(-(1i64 << bits) + 1..(1i64 << bits));
    k as f64 / (1i64 << bits) as f64
}

fn time2vec_rescaling() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let l = 7;
    let mut exact_cases = 0;
    let mut mismatches = 0;
    let mut worst_general: f64 = 0.0;
    for _ in 0..2000 {
        for &c in &[2.0, 7.0, 100.0] {
            // α = c·a with a dyadic, t an integer day: α/c and c·t are then
            // exactly representable, so the rescaled evaluation is the same
            // arithmetic as the original.
            let a: Vec<f64> = (0..=l).map(|_| dyadic(&mut r, 10)).collect();
            let alpha: Vec<f64> = a.iter().map(|x| c * x).collect();
            let beta: Vec<f64> = (0..=l).map(|_| dyadic(&mut r, 10)).collect();
            let t = r.gen_range(0..400) as f64;
            let p = Time2VecParams::new(Tensor::vector(alpha.clone()), Tensor::vector(beta.clone())).unwrap();
            let q = Time2VecParams::new(
                Tensor::vector(alpha.iter().map(|x| x / c).collect()),
                Tensor::vector(beta.clone()),
            )
            .unwrap();
            let y = p.embed(t).unwrap();
            let z = q.embed(c * t).unwrap();
            exact_cases += 1;
            if y.data().iter().zip(z.data()).any(|(u, v)| u.to_bits() != v.to_bits()) {
                mismatches += 1;
            }

            // Arbitrary doubles: α/c and c·t round, so only agreement to a
            // few units in the last place is possible.
            let alpha: Vec<f64> = (0..=l).map(|_| r.gen_range(-2.0..2.0)).collect();
            let beta: Vec<f64> = (0..=l).map(|_| r.gen_range(-2.0..2.0)).collect();
            let t: f64 = r.gen_range(0.0..400.0);
            let p = Time2VecParams::new(Tensor::vector(alpha.clone()), Tensor::vector(beta.clone())).unwrap();
            let q = Time2VecParams::new(Tensor::vector(alpha.iter().map(|x| x / c).collect()), Tensor::vector(beta))
                .unwrap();
            let y = p.embed(t).unwrap();
            let z = q.embed(c * t).unwrap();
            for (j, (u, v)) in y.data().iter().zip(z.data()).enumerate() {
                let scale = (alpha[j] * t).abs().max(u.abs()).max(f64::MIN_POSITIVE);
                worst_general = worst_general.max((u - v).abs() / (scale * f64::EPSILON));
            }
        }
    }
    let detail = format!(
        "{exact_cases} random cases with representable α/c and c·t, c ∈ {{2, 7, 100}}: {mismatches} not bitwise identical; arbitrary doubles agree to {worst_general:.1} ulp of α·t"
    );
    if mismatches == 0 && worst_general <= 4.0 {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn data_root() -> PathBuf {
    std::env::var_os("ATTNFC_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let workspace = Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap();
            workspace.join("data/jhu")
        })
}

fn jhu_config(out: &Path) -> std::result::Result<RunConfig, String> {
    let root = data_root();
    let cfg = RunConfig {
        output_dir: out.to_path_buf(),
        ..RunConfig::default()
    };
    for f in [&cfg.data.confirmed, cfg.data.recovered.as_ref().unwrap(), &cfg.data.deaths] {
        let p = cfg.data_file(f, Some(&root));
        if !p.is_file() {
            return Err(format!("JHU archive not available: {} missing", p.display()));
        }
    }
    Ok(RunConfig {
        data: attnfc_core::pipeline::DataPaths {
            dir: Some(root),
            ..cfg.data.clone()
        },
        ..cfg
    })
}

const TABLE2: [(&str, f64, f64, f64); 4] = [
    ("Italy", 153083.69, 254235.0, -1.42),
    ("Spain", 162619.42, 359082.0, -1.41),
    ("Canada", 56910.16, 124218.0, -1.70),
    ("France", 125117.03, 256533.0, -1.57),
];

fn data_statistics() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg = match jhu_config(dir.path()) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let start = Instant::now();
    let tables = match pipeline::load_tables(&cfg, None) {
        Ok(t) => t,
        Err(e) => return fail(format!("ingest failed: {e}")),
    };
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    let mut ok = true;
    for outcome in pipeline::ingest(&cfg, &tables, Execution::default()) {
        let series = match outcome.result {
            Ok(s) => s,
            Err(e) => return fail(format!("{}: {e}", outcome.country)),
        };
        let (_, mean, max, kurt) = *TABLE2.iter().find(|r| r.0 == outcome.country).unwrap();
        let s = match descriptive_stats(&series.confirmed) {
            Ok(s) => s,
            Err(e) => return fail(format!("{}: {e}", outcome.country)),
        };
        for (name, got, want) in [("mean", s.mean, mean), ("max", s.max, max), ("kurtosis", s.kurtosis, kurt)] {
            let rel = (got - want).abs() / want.abs();
            worst = worst.max(rel);
            if rel > 0.02 {
                ok = false;
                notes.push(format!("{} {name} {got:.2} vs {want}", outcome.country));
            }
        }
    }
    let detail = format!(
        "mean/max/kurtosis for 4 countries, worst rel err {:.2}% (tol 2%){}; {}",
        100.0 * worst,
        if notes.is_empty() { String::new() } else { format!("; off: {}", notes.join(", ")) },
        secs(start.elapsed())
    );
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn scaler_and_windowing() -> Verdict {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut worst_round_trip: f64 = 0.0;
    let mut window_mismatches = 0;
    let mut cases = 0;
    for _ in 0..500 {
        let n = r.gen_range(10..=50);
        let lookback = r.gen_range(1..n);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| r.gen_range(-1e6..1e6)).collect())
            .collect();
        let scaler = ScalerParams::fit(&rows).unwrap();
        let back = scaler.inverse(&scaler.scale(&rows));
        for (a, b) in rows.iter().flatten().zip(back.iter().flatten()) {
            worst_round_trip = worst_round_trip.max((a - b).abs());
        }

        let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let target = r.gen_range(0..3);
        let ds = make_windows(&rows, &times, lookback, target).unwrap();
        // Brute force: every start index whose window and target fit.
        let mut expected = Vec::new();
        for start in 0..n {
            if start + lookback < n {
                expected.push((start, rows[start + lookback][target]));
            }
        }
        cases += 1;
        let same = ds.len() == expected.len()
            && expected.iter().enumerate().all(|(i, &(start, y))| {
                ds.targets[i] == y
                    && (0..lookback).all(|k| ds.inputs[i].row(k) == rows[start + k].as_slice())
                    && ds.time_indices[i] == times[start..start + lookback]
            });
        if !same {
            window_mismatches += 1;
        }
    }
    let detail = format!(
        "{cases} random series of length 10–50: max |inverse(scale(x)) − x| {worst_round_trip:.1e} (tol 1e-9); {window_mismatches} windowing mismatches vs brute force"
    );
    if worst_round_trip <= 1e-9 && window_mismatches == 0 {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn metric_oracles() -> Verdict {
    let r = rmse(&[100.0, 200.0], &[110.0, 190.0]).unwrap();
    let m = mape(&[100.0, 200.0], &[110.0, 190.0]).unwrap();
    let mut notes = vec![format!("rmse {r}, mape {m}%")];
    let mut ok = r == 10.0 && m == 7.5;

    let persistence = Model::new(ModelConfig::default().with_kind(ModelKind::Persistence), 0).unwrap();
    let mut worst: f64 = 0.0;
    for &(n, slope) in &[(60usize, 1.0), (80, 3.5), (120, 250.0)] {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let v = 1000.0 + slope * i as f64;
                vec![v, 0.4 * v, 0.05 * v]
            })
            .collect();
        let times: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let data = prepare(&rows, &times, 7, 0, &SplitSpec::default()).unwrap();
        let test = evaluate_test(&persistence, &data.test, &data.scaler, Execution::Sequential).unwrap();
        // One step ahead on a ramp misses by exactly one slope.
        worst = worst.max((test.metrics.rmse - slope).abs());

        let actual: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let boundary = *data.validation.target_rows.last().unwrap();
        for h in (2..=14).step_by(2).filter(|h| boundary + h < n) {
            let got = evaluate_horizon(&persistence, &data, &actual, h).unwrap().scored.metrics.rmse;
            let closed = slope * (((h + 1) * (2 * h + 1)) as f64 / 6.0).sqrt();
            let brute = {
                let last = actual[boundary];
                let sse: f64 = (1..=h).map(|k| (actual[boundary + k] - last).powi(2)).sum();
                (sse / h as f64).sqrt()
            };
            worst = worst.max((got - closed).abs()).max((got - brute).abs());
        }
    }
    notes.push(format!("persistence-on-ramp max |Δ| vs closed form / brute force {worst:.1e} (tol 1e-9)"));
    ok &= worst <= 1e-9;
    let detail = notes.join("; ");
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn trainability() -> Verdict {
    let start = Instant::now();
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|t| {
            let t = t as f64;
            vec![t, 0.5 * t, 0.1 * t]
        })
        .collect();
    let times: Vec<f64> = (0..60).map(f64::from).collect();
    let scaler = ScalerParams::fit(&rows).unwrap();
    let ds = make_windows(&scaler.scale(&rows), &times, 7, 0).unwrap();
    let model = Model::new(ModelConfig::default(), 42).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        seed: 42,
        ..TrainConfig::default()
    };
    // Monitoring set = training set: the selection criterion is the
    // eval-mode training MSE.
    let out = match train_with(&model, &ds, &ds, &cfg, Execution::Sequential, |r| {
        if r.validation_loss < 1e-3 {
            Control::Stop
        } else {
            Control::Continue
        }
    }) {
        Ok(o) => o,
        Err(e) => return fail(format!("training failed: {e}")),
    };
    let mse = dataset_mse(&out.model, &ds, Execution::Sequential).unwrap();
    let elapsed = start.elapsed();
    let detail = format!(
        "60-point ramp, {} samples: training MSE {mse:.2e} (tol 1e-3) after {} epochs (limit 500); {}",
        ds.len(),
        out.best_epoch,
        secs(elapsed)
    );
    if mse < 1e-3 && elapsed < Duration::from_secs(120) {
        pass(detail)
    } else {
        fail(detail)
    }
}

const SEED: u64 = 42;

struct ProtocolRun {
    elapsed: Duration,
    report: attnfc_core::evaluation::MetricsReport,
    dir: tempfile::TempDir,
}

fn protocol_run() -> std::result::Result<ProtocolRun, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = jhu_config(dir.path())?;
    let start = Instant::now();
    let exec = Execution::default();
    let tables = pipeline::load_tables(&cfg, None).map_err(|e| e.to_string())?;
    for o in pipeline::ingest(&cfg, &tables, exec) {
        o.result.map_err(|e| format!("{}: {e}", o.country))?;
    }
    for o in pipeline::train(&cfg, SEED, exec) {
        o.result.map_err(|e| format!("{}: {e}", o.country))?;
    }
    let report = pipeline::evaluate(&cfg, SEED, exec).map_err(|e| e.to_string())?;
    Ok(ProtocolRun {
        elapsed: start.elapsed(),
        report,
        dir,
    })
}

fn test_rmse(report: &attnfc_core::evaluation::MetricsReport, country: &str, model: &str, col: usize) -> Option<f64> {
    match &report.find(country, model)?.outcome {
        RowOutcome::Scored { test, horizons } => Some(if col == 0 { test.rmse } else { horizons[col - 1].rmse }),
        RowOutcome::Failed(_) => None,
    }
}

fn end_to_end(run: &std::result::Result<ProtocolRun, String>) -> Verdict {
    let run = match run {
        Ok(r) => r,
        Err(e) => return fail(format!("protocol run did not complete: {e}")),
    };
    let mut beats_persistence = 0;
    let mut beats_lstm = 0;
    for (country, _, _, _) in TABLE2 {
        let att = test_rmse(&run.report, country, "AttentionLSTM", 0);
        let per = test_rmse(&run.report, country, "Persistence", 0);
        let att2 = test_rmse(&run.report, country, "AttentionLSTM", 1);
        let lstm2 = test_rmse(&run.report, country, "LSTM", 1);
        if let (Some(a), Some(p)) = (att, per) {
            beats_persistence += (a < p) as usize;
        }
        if let (Some(a), Some(l)) = (att2, lstm2) {
            beats_lstm += (a < l) as usize;
        }
        let published = PUBLISHED
            .iter()
            .find(|(c, m, _)| *c == country && *m == "AttentionLSTM")
            .map(|p| p.2[0]);
        println!(
            "      {country}: test RMSE AttentionLSTM {} | LSTM {} | persistence {} | published AttentionLSTM {}",
            att.map_or("-".into(), |v| format!("{v:.2}")),
            test_rmse(&run.report, country, "LSTM", 0).map_or("-".into(), |v| format!("{v:.2}")),
            per.map_or("-".into(), |v| format!("{v:.2}")),
            published.map_or("-".into(), |v| format!("{v:.2}")),
        );
    }
    let detail = format!(
        "{} for 4 countries; AttentionLSTM beats persistence on test RMSE in {beats_persistence}/4 (need 3), beats LSTM at horizon 2 in {beats_lstm}/4 (need 2)",
        secs(run.elapsed)
    );
    if run.elapsed < Duration::from_secs(30 * 60) && beats_persistence >= 3 && beats_lstm >= 2 {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn report_files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let mut entries: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("report")) {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(first: &std::result::Result<ProtocolRun, String>) -> Verdict {
    let first = match first {
        Ok(r) => r,
        Err(e) => return fail(format!("protocol run did not complete: {e}")),
    };
    let second = match protocol_run() {
        Ok(r) => r,
        Err(e) => return fail(format!("second run did not complete: {e}")),
    };
    let a = report_files(first.dir.path());
    let b = report_files(second.dir.path());
    let detail = format!("{} report files compared byte for byte", a.len());
    if !a.is_empty() && a == b {
        pass(detail)
    } else {
        fail(format!("{detail}; outputs differ"))
    }
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: Verdict| {
        println!("[{}] {n}. {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += (!v.pass) as usize;
    };
    report(1, "gradient correctness", gradient_correctness());
    report(2, "attention normalization", attention_normalization());
    report(3, "Time2Vec rescaling", time2vec_rescaling());
    report(4, "data statistics", data_statistics());
    report(5, "scaler and windowing oracles", scaler_and_windowing());
    report(6, "metric oracles", metric_oracles());
    report(7, "trainability", trainability());
    let run = protocol_run();
    report(8, "end-to-end protocol", end_to_end(&run));
    report(9, "determinism", determinism(&run));
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
