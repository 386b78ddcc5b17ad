//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line; run with
//! `cargo test -p gatecast --test acceptance -- --nocapture` to see them.

use std::fs;
use std::sync::OnceLock;
use std::time::Instant;

use gatecast::cells::{
    forward_window, gru_step, lstm_step, CellParams, CellState, GruParams, LstmConfig,
    LstmParams, Network,
};
use gatecast::dataprep::{denormalize, make_windows, normalize, Series};
use gatecast::evaluation::{
    directional_accuracy, exact_two_tailed_p, mann_whitney_two_tailed, rmse, ModelKind,
    TestMethod,
};
use gatecast::experiment::{run_experiment, ExperimentConfig, ExperimentResult, Profile};
use gatecast::numerics::Rng;
use gatecast::training::bptt_gradients;
use gatecast::{CellKind, Error, Matrix};

fn verdict(id: u32, title: &str, pass: bool, detail: String) {
    println!(
        "criterion {id} [{}] {title}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} ({title}) failed: {detail}");
}

fn random_network(kind: CellKind, units: usize, steps: usize, rng: &mut Rng) -> Network {
    let mut net = Network::init(kind, units, steps, LstmConfig::default(), rng).unwrap();
    let flat: Vec<f64> = (0..net.param_count()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    net.set_flat(&flat).unwrap();
    net
}

fn batch_loss(net: &Network, windows: &Matrix, targets: &Matrix) -> f64 {
    let mut total = 0.0;
    for b in 0..windows.rows() {
        let (pred, _) = forward_window(net, windows.row(b), false).unwrap();
        for (p, y) in pred.iter().zip(targets.row(b)) {
            total += (p - y) * (p - y);
        }
    }
    total / (windows.rows() * targets.cols()) as f64
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for kind in [CellKind::Lstm, CellKind::Gru] {
        for steps in [1usize, 3] {
            for _ in 0..20 {
                let net = random_network(kind, 2, steps, &mut rng);
                let windows = Matrix::new(2, 3, (0..6).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
                let targets =
                    Matrix::new(2, steps, (0..2 * steps).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
                let (grads, _) = bptt_gradients(&net, &windows, &targets).unwrap();
                let analytic = grads.to_flat();
                let theta = net.to_flat();
                let eps = 1e-6;
                for k in 0..theta.len() {
                    let mut probe = net.clone();
                    let mut t = theta.clone();
                    t[k] = theta[k] + eps;
                    probe.set_flat(&t).unwrap();
                    let up = batch_loss(&probe, &windows, &targets);
                    t[k] = theta[k] - eps;
                    probe.set_flat(&t).unwrap();
                    let down = batch_loss(&probe, &windows, &targets);
                    let numeric = (up - down) / (2.0 * eps);
                    let rel = (analytic[k] - numeric).abs() / (analytic[k].abs() + numeric.abs()).max(1e-3);
                    worst = worst.max(rel);
                    checks += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "BPTT matches central differences",
        worst < 1e-4 && secs < 10.0,
        format!("{checks} partials, max relative error {worst:.2e}, {secs:.2}s"),
    );
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn criterion_2_cell_equation_fidelity() {
    let start = Instant::now();
    let mut rng = Rng::new(77);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = rng.uniform(-2.0, 2.0);
        let h = [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)];
        let c = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];

        let Network { cell: CellParams::Lstm(p), .. } = random_network(CellKind::Lstm, 2, 1, &mut rng) else {
            unreachable!()
        };
        let lstm: &LstmParams = &p;
        let w = |m: &Matrix, j: usize| m.get(j, 0);
        let u = |m: &Matrix, j: usize| m.get(j, 0) * h[0] + m.get(j, 1) * h[1];
        let i0 = sig(w(&lstm.w_i, 0) * x + u(&lstm.u_i, 0) + lstm.v_i.get(0, 0) * c[0]);
        let i1 = sig(w(&lstm.w_i, 1) * x + u(&lstm.u_i, 1) + lstm.v_i.get(1, 0) * c[1]);
        let f0 = sig(w(&lstm.w_f, 0) * x + u(&lstm.u_f, 0) + lstm.v_f.get(0, 0) * c[0]);
        let f1 = sig(w(&lstm.w_f, 1) * x + u(&lstm.u_f, 1) + lstm.v_f.get(1, 0) * c[1]);
        let ct0 = (w(&lstm.w_c, 0) * x + u(&lstm.u_c, 0)).tanh();
        let ct1 = (w(&lstm.w_c, 1) * x + u(&lstm.u_c, 1)).tanh();
        let c0 = f0 * c[0] + i0 * ct0;
        let c1 = f1 * c[1] + i1 * ct1;
        let o0 = sig(w(&lstm.w_o, 0) * x + u(&lstm.u_o, 0) + lstm.v_o.get(0, 0) * c0);
        let o1 = sig(w(&lstm.w_o, 1) * x + u(&lstm.u_o, 1) + lstm.v_o.get(1, 0) * c1);
        let h0 = o0 * c0.tanh();
        let h1 = o1 * c1.tanh();
        let prev = CellState { h: h.to_vec(), c: c.to_vec() };
        let (got, _) = lstm_step(lstm, &[x], &prev).unwrap();
        for (a, b) in got.h.iter().chain(&got.c).zip([h0, h1, c0, c1]) {
            worst = worst.max((a - b).abs());
        }

        let Network { cell: CellParams::Gru(g), .. } = random_network(CellKind::Gru, 2, 1, &mut rng) else {
            unreachable!()
        };
        let gru: &GruParams = &g;
        let z0 = sig(w(&gru.w_z, 0) * x + u(&gru.u_z, 0));
        let z1 = sig(w(&gru.w_z, 1) * x + u(&gru.u_z, 1));
        let r0 = sig(w(&gru.w_r, 0) * x + u(&gru.u_r, 0));
        let r1 = sig(w(&gru.w_r, 1) * x + u(&gru.u_r, 1));
        let ht0 = (w(&gru.w_h, 0) * x + r0 * u(&gru.u_h, 0)).tanh();
        let ht1 = (w(&gru.w_h, 1) * x + r1 * u(&gru.u_h, 1)).tanh();
        let g0 = (1.0 - z0) * h[0] + z0 * ht0;
        let g1 = (1.0 - z1) * h[1] + z1 * ht1;
        let (got, _) = gru_step(gru, &[x], &CellState { h: h.to_vec(), c: Vec::new() }).unwrap();
        worst = worst.max((got.h[0] - g0).abs()).max((got.h[1] - g1).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "cell steps match scalar re-derivations",
        worst < 1e-12 && secs < 1.0,
        format!("100 draws per cell, max abs error {worst:.2e}, {secs:.3}s"),
    );
}

#[test]
fn criterion_3_windowing_arithmetic() {
    let series = Series::new("q3032", (0..3032).map(|i| (i as f64 * 0.37).sin() + i as f64 * 1e-3).collect());
    let (norm, rec) = normalize(&series).unwrap();
    let f1 = make_windows(&norm, 60, 1, 251, rec).unwrap();
    let f20 = make_windows(&norm, 60, 20, 251, rec).unwrap();
    let got = (f1.rows(), f1.n_train, f1.test_rows(), f20.rows(), f20.test_rows());
    verdict(
        3,
        "window counts",
        got == (2972, 2721, 251, 2953, 232),
        format!(
            "f=1 rows {} train {} test {}; f=20 rows {} test {}",
            got.0, got.1, got.2, got.3, got.4
        ),
    );
}

fn quick_config() -> ExperimentConfig {
    ExperimentConfig::profile(Profile::Quick)
}

/// The quick-profile experiment, run once and shared by criteria 4 and 7.
fn quick_run() -> &'static (ExperimentResult, Vec<u8>, Vec<u8>, f64) {
    static RUN: OnceLock<(ExperimentResult, Vec<u8>, Vec<u8>, f64)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let result = run_experiment(&quick_config(), Some(dir.path())).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let reports = fs::read(dir.path().join("reports.csv")).unwrap();
        let stats = fs::read(dir.path().join("stats.csv")).unwrap();
        (result, reports, stats, secs)
    })
}

#[test]
fn criterion_4_activities_significance() {
    let (result, _, _, secs) = quick_run();
    let run = result.run(1).unwrap();
    let summary = |m: ModelKind| run.summaries.iter().find(|s| s.model == m).unwrap();
    let p = |a: ModelKind| {
        run.comparisons
            .iter()
            .find(|c| c.metric == "rmse" && c.a == a && c.b == ModelKind::Baseline)
            .unwrap()
            .result
            .p_two_tailed
    };
    let base = summary(ModelKind::Baseline);
    let mut pass = *secs < 600.0;
    let mut detail = format!("baseline rmse {:.4} da {:.3}", base.rmse_mean, base.da_mean);
    for m in [ModelKind::Lstm, ModelKind::Gru] {
        let s = summary(m);
        let pm = p(m);
        pass &= pm < 0.05 && s.rmse_mean < base.rmse_mean && s.da_mean > base.da_mean;
        detail += &format!("; {m} rmse {:.4} da {:.3} p {:.2e}", s.rmse_mean, s.da_mean, pm);
    }
    detail += &format!("; {secs:.0}s for the whole quick run");
    verdict(4, "networks beat the baseline on Activities", pass, detail);
}

#[test]
fn criterion_5_random_walk_null() {
    let mut cfg = quick_config();
    cfg.set("dataset", "random-walk").unwrap();
    cfg.set("steps", "1").unwrap();
    let start = Instant::now();
    let result = run_experiment(&cfg, None).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let run = result.run(1).unwrap();
    let rmse_cmp: Vec<_> = run.comparisons.iter().filter(|c| c.metric == "rmse").collect();
    let pass = rmse_cmp.len() == 3 && rmse_cmp.iter().all(|c| c.result.p_two_tailed > 0.05) && secs < 600.0;
    let detail = rmse_cmp
        .iter()
        .map(|c| format!("{}-{} p {:.3}", c.a, c.b, c.result.p_two_tailed))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(5, "no RMSE difference on random walks", pass, format!("{detail}; {secs:.0}s"));
}

#[test]
fn criterion_6_mann_whitney_exactness() {
    let start = Instant::now();
    // 3 vs 3, fully separated: U = 0.
    let sep = mann_whitney_two_tailed(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    // 19.5 beats nine of `b`, 20.5 beats all ten: U = 19.
    let mut a19: Vec<f64> = (1..=8).map(f64::from).collect();
    a19.extend([19.5, 20.5]);
    let b: Vec<f64> = (11..=20).map(f64::from).collect();
    let r19 = mann_whitney_two_tailed(&a19, &b).unwrap();
    let direct = exact_two_tailed_p(19.0, 10, 10);
    let pass = sep.p_two_tailed == 0.1
        && sep.method == TestMethod::Exact
        && r19.u_statistic == 19.0
        && r19.method == TestMethod::Exact
        && r19.p_two_tailed < 0.05
        && direct < 0.05
        && start.elapsed().as_secs_f64() < 1.0;
    verdict(
        6,
        "exact Mann-Whitney p-values",
        pass,
        format!(
            "3v3 separated p = {}; U = {} (10,10) p = {:.4}",
            sep.p_two_tailed, r19.u_statistic, r19.p_two_tailed
        ),
    );
}

#[test]
fn criterion_7_determinism() {
    let (_, reports, stats, _) = quick_run();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&quick_config(), Some(dir.path())).unwrap();
    let reports2 = fs::read(dir.path().join("reports.csv")).unwrap();
    let stats2 = fs::read(dir.path().join("stats.csv")).unwrap();
    verdict(
        7,
        "repeat runs are byte-identical",
        *reports == reports2 && *stats == stats2,
        format!("reports.csv {} bytes, stats.csv {} bytes", reports.len(), stats.len()),
    );
}

#[test]
fn criterion_8_metric_oracles() {
    let mut rng = Rng::new(8);
    let mut worst: f64 = 0.0;
    let mut da_mismatch = 0;
    for _ in 0..100 {
        let n = 1 + (rng.next_u64() % 40) as usize;
        let a: Vec<f64> = (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.uniform(-5.0, 5.0)).collect();
        let (aa, ap) = (rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0));

        let mut sq = 0.0;
        for k in 0..n {
            sq += (a[k] - p[k]) * (a[k] - p[k]);
        }
        let oracle = (sq / n as f64).sqrt();
        let got = rmse(&Matrix::column(&a).unwrap(), &Matrix::column(&p).unwrap()).unwrap();
        worst = worst.max((got - oracle).abs());

        let mut hits = 0;
        for k in 0..n {
            let da = a[k] - if k == 0 { aa } else { a[k - 1] };
            let dp = p[k] - if k == 0 { ap } else { p[k - 1] };
            if (da > 0.0 && dp > 0.0) || (da < 0.0 && dp < 0.0) || da == 0.0 || dp == 0.0 {
                hits += 1;
            }
        }
        let got_da = directional_accuracy(&a, &p, aa, ap).unwrap();
        if (got_da - hits as f64 / n as f64).abs() > 1e-12 {
            da_mismatch += 1;
        }
    }
    let hand = directional_accuracy(&[1.0, 2.0, 1.0, 2.0], &[2.0, 1.0, 2.0, 1.0], 1.0, 1.0).unwrap();
    verdict(
        8,
        "RMSE and DA match loop oracles",
        worst < 1e-12 && da_mismatch == 0 && hand == 0.25,
        format!("max RMSE error {worst:.2e}, DA mismatches {da_mismatch}, hand case {hand}"),
    );
}

#[test]
fn criterion_9_normalization_round_trip() {
    let mut rng = Rng::new(9);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let n = 2 + (rng.next_u64() % 300) as usize;
        let scale = 10f64.powf(rng.uniform(-3.0, 4.0));
        let offset = rng.uniform(-1e3, 1e3);
        let s = Series::new(format!("s{k}"), (0..n).map(|_| offset + scale * rng.standard_normal()).collect());
        let (norm, rec) = normalize(&s).unwrap();
        let back = denormalize(&norm, &rec);
        for (a, b) in s.values.iter().zip(&back.values) {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    let degenerate = normalize(&Series::new("flat", vec![4.2; 50]));
    let named = matches!(&degenerate, Err(Error::DegenerateSeries { name, value }) if name == "flat" && *value == 4.2);
    verdict(
        9,
        "normalization round trip",
        worst < 1e-12 && named,
        format!("max error {worst:.2e}; constant series -> {}", match degenerate {
            Err(e) => e.to_string(),
            Ok(_) => "accepted".into(),
        }),
    );
}
