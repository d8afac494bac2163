//! End-to-end acceptance suite. One test per shipped guarantee, driven
//! through the public library API and the installed binary; the heavyweight
//! transfer checks train full models and carry explicit runtime budgets.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rnlab_core::analysis::{
    a_distance_from_epsilon, estimate_a_distance, nearest_channel_distances,
};
use rnlab_core::config::{ExperimentConfig, TaskSpec};
use rnlab_core::gradcheck::CheckSettings;
use rnlab_core::layercheck::{check_layer, LayerCheckSpec};
use rnlab_core::norm::{
    ema_update, ra_aggregate, rc_compensate, rn_forward_eval, rn_forward_train,
    CorrelationReport, Domain, DomainStats, GateParams, Measure, NormKind, NormLayer,
    NormOptions, RnLayerState,
};
use rnlab_core::tape::Tape;
use rnlab_core::tensor::{channel_moments, Tensor};
use rnlab_core::train::{train_run, OptimConfig};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

fn runif(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn rand_stats(rng: &mut ChaCha8Rng, c: usize) -> DomainStats {
    DomainStats {
        mu: runif(rng, &[c], -5.0, 5.0),
        var: runif(rng, &[c], 0.05, 9.0),
    }
}

#[test]
fn criterion_1_gradient_fidelity() {
    let t0 = Instant::now();
    let kinds = [
        NormKind::Rn,
        NormKind::Bn,
        NormKind::AutoDial,
        NormKind::Dsbn,
        NormKind::Tn,
    ];
    for (i, &kind) in kinds.iter().enumerate() {
        for &c in &[1usize, 2, 4, 8] {
            for &n in &[2usize, 8] {
                let seed = 1000 + 97 * i as u64 + (10 * c + n) as u64;
                let mut spec = LayerCheckSpec::new(kind, c, n, seed);
                spec.settings = CheckSettings {
                    rel_tol: 1e-4,
                    abs_tol: 1e-7,
                    ..CheckSettings::default()
                };
                let report = check_layer(&spec).unwrap();
                assert!(report.passed, "{kind:?} C={c} N={n}: {}", report.describe());
            }
        }
    }

    // frozen statistics take exactly zero gradient at every size, even
    // through a nonlinear readout
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for &c in &[1usize, 2, 4, 8] {
        for &n in &[2usize, 8] {
            let x_s = runif(&mut rng, &[n, c, 1, 1], -2.0, 2.0);
            let x_t = runif(&mut rng, &[n, c, 1, 1], -2.0, 2.0);
            let mut tn = NormLayer::new(NormKind::Tn, c, &NormOptions::default()).unwrap();
            let mut tape = Tape::new();
            let vs = tape.leaf(x_s);
            let vt = tape.leaf(x_t);
            let out = tn.forward_train(&mut tape, vs, vt).unwrap();
            let sum_s = tape.sum_all(out.out_s);
            let sum_t = tape.sum_all(out.out_t);
            let sq_s = tape.mul(sum_s, sum_s).unwrap();
            let sq_t = tape.mul(sum_t, sum_t).unwrap();
            let loss = tape.add(sq_s, sq_t).unwrap();
            let grads = tape.backward(loss).unwrap();
            for &v in &out.stat_nodes {
                let g = grads.dense(v, tape.value(v).shape());
                assert!(
                    g.data().iter().all(|&gi| gi == 0.0),
                    "statistic gradient leaked at C={c} N={n}"
                );
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient fidelity took {secs:.1}s");
}

#[test]
fn criterion_2_algebraic_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    // unit gates collapse to per-domain standardization under the shared
    // affine
    for &(c, n) in &[(1usize, 3usize), (3, 4), (6, 5), (8, 8)] {
        let x_s = runif(&mut rng, &[n, c, 1, 1], -4.0, 4.0);
        let x_t = runif(&mut rng, &[n, c, 1, 1], -4.0, 4.0);
        let mut layer = RnLayerState::new(c, &NormOptions::default()).unwrap();
        layer.gamma = runif(&mut rng, &[c], 0.6, 1.4);
        layer.beta = runif(&mut rng, &[c], -0.5, 0.5);
        let mut tape = Tape::new();
        let vs = tape.leaf(x_s.clone());
        let vt = tape.leaf(x_t.clone());
        let out = rn_forward_train(&mut layer, &mut tape, vs, vt).unwrap();
        for (x, var) in [(&x_s, out.out_s), (&x_t, out.out_t)] {
            let (mu, sig2) = channel_moments(x).unwrap();
            let got = tape.value(var);
            for i in 0..n {
                for j in 0..c {
                    let want = layer.gamma.data()[j] * (x.data()[i * c + j] - mu.data()[j])
                        / (sig2.data()[j] + layer.epsilon).sqrt()
                        + layer.beta.data()[j];
                    let diff = (got.data()[i * c + j] - want).abs();
                    assert!(diff <= 1e-9, "C={c} N={n}: diff {diff}");
                }
            }
        }
    }

    // any group size at or above C is the ungrouped computation, bit for bit
    for &c in &[1usize, 2, 5, 8] {
        let s = rand_stats(&mut rng, c);
        let t = rand_stats(&mut rng, c);
        for measure in [Measure::NegL2, Measure::NegL1, Measure::NegCosine] {
            let base = rc_compensate(&s, &t, measure, c).unwrap();
            for group in [c + 3, 512] {
                let other = rc_compensate(&s, &t, measure, group).unwrap();
                assert_eq!(base.rho_mu_ts.data(), other.rho_mu_ts.data());
                assert_eq!(base.rho_var_ts.data(), other.rho_var_ts.data());
                assert_eq!(base.rho_mu_st.data(), other.rho_mu_st.data());
                assert_eq!(base.rho_var_st.data(), other.rho_var_st.data());
                assert_eq!(base.cc_mu_t.data(), other.cc_mu_t.data());
                assert_eq!(base.cc_var_t.data(), other.cc_var_t.data());
                assert_eq!(base.cc_mu_s.data(), other.cc_mu_s.data());
                assert_eq!(base.cc_var_s.data(), other.cc_var_s.data());
            }
        }
    }

    // with one channel the softmax is degenerate, so aggregation is the
    // closed-form two-point blend
    let s = DomainStats {
        mu: Tensor::from_vec(vec![0.8]),
        var: Tensor::from_vec(vec![1.7]),
    };
    let t = DomainStats {
        mu: Tensor::from_vec(vec![-0.45]),
        var: Tensor::from_vec(vec![0.62]),
    };
    for &g in &[0.5, 0.66, 0.85, 1.0] {
        let rep = rc_compensate(&s, &t, Measure::NegL2, 512).unwrap();
        let gv = Tensor::full(&[1], g);
        let agg_t = ra_aggregate(&t, &rep.cc_mu_t, &rep.cc_var_t, &gv, &gv).unwrap();
        let want_mu = g * t.mu.data()[0] + (1.0 - g) * s.mu.data()[0];
        let want_var = g * t.var.data()[0] + (1.0 - g) * s.var.data()[0];
        assert!((agg_t.mu.data()[0] - want_mu).abs() <= 1e-12);
        assert!((agg_t.var.data()[0] - want_var).abs() <= 1e-12);
        let agg_s = ra_aggregate(&s, &rep.cc_mu_s, &rep.cc_var_s, &gv, &gv).unwrap();
        let want_mu = g * s.mu.data()[0] + (1.0 - g) * t.mu.data()[0];
        let want_var = g * s.var.data()[0] + (1.0 - g) * t.var.data()[0];
        assert!((agg_s.mu.data()[0] - want_mu).abs() <= 1e-12);
        assert!((agg_s.var.data()[0] - want_var).abs() <= 1e-12);
    }
}

#[test]
fn criterion_3_stochasticity_and_ema() {
    // every correlation row is a probability distribution, across 1000
    // random statistic pairs
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let measures = [Measure::NegL2, Measure::NegL1, Measure::NegCosine];
    for k in 0..1000 {
        let c = rng.gen_range(1..=32);
        let s = rand_stats(&mut rng, c);
        let t = rand_stats(&mut rng, c);
        let rep = rc_compensate(&s, &t, measures[k % 3], 512).unwrap();
        for rho in [
            &rep.rho_mu_ts,
            &rep.rho_var_ts,
            &rep.rho_mu_st,
            &rep.rho_var_st,
        ] {
            for i in 0..c {
                let row: f64 = rho.data()[i * c..(i + 1) * c].iter().sum();
                assert!((row - 1.0).abs() <= 1e-6, "pair {k} row {i} sums to {row}");
            }
        }
    }

    // repeated updates with a constant batch follow the geometric closed form
    for &alpha in &[0.1, 0.37, 1.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let c = 6;
        let r0 = rand_stats(&mut rng, c);
        let batch = rand_stats(&mut rng, c);
        let mut running = DomainStats {
            mu: r0.mu.clone(),
            var: r0.var.clone(),
        };
        for step in 1..=25i32 {
            running = ema_update(&running, &batch, alpha).unwrap();
            let w = (1.0 - alpha).powi(step);
            for j in 0..c {
                let want = r0.mu.data()[j] * w + batch.mu.data()[j] * (1.0 - w);
                assert!((running.mu.data()[j] - want).abs() <= 1e-9);
                let want = r0.var.data()[j] * w + batch.var.data()[j] * (1.0 - w);
                assert!((running.var.data()[j] - want).abs() <= 1e-9);
            }
        }
    }

    // alpha = 1: after a single training step the eval path normalizes with
    // exactly that step's aggregated statistics
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, c) = (6, 4);
    let x_s = runif(&mut rng, &[n, c, 1, 1], -3.0, 3.0);
    let x_t = runif(&mut rng, &[n, c, 1, 1], -3.0, 3.0);
    let opts = NormOptions {
        alpha: 1.0,
        ..NormOptions::default()
    };
    let mut layer = RnLayerState::new(c, &opts).unwrap();
    layer.gates = GateParams::constant(c, 0.7).unwrap();
    let mut tape = Tape::new();
    let vs = tape.leaf(x_s.clone());
    let vt = tape.leaf(x_t.clone());
    let out = rn_forward_train(&mut layer, &mut tape, vs, vt).unwrap();

    let (mu_s, var_s) = channel_moments(&x_s).unwrap();
    let (mu_t, var_t) = channel_moments(&x_t).unwrap();
    let bs = DomainStats { mu: mu_s, var: var_s };
    let bt = DomainStats { mu: mu_t, var: var_t };
    let rep = rc_compensate(&bs, &bt, layer.measure, layer.group_size).unwrap();
    let agg_s = ra_aggregate(
        &bs,
        &rep.cc_mu_s,
        &rep.cc_var_s,
        &layer.gates.g_mu_s,
        &layer.gates.g_var_s,
    )
    .unwrap();
    let agg_t = ra_aggregate(
        &bt,
        &rep.cc_mu_t,
        &rep.cc_var_t,
        &layer.gates.g_mu_t,
        &layer.gates.g_var_t,
    )
    .unwrap();
    for j in 0..c {
        assert!((layer.running_s.mu.data()[j] - agg_s.mu.data()[j]).abs() <= 1e-9);
        assert!((layer.running_s.var.data()[j] - agg_s.var.data()[j]).abs() <= 1e-9);
        assert!((layer.running_t.mu.data()[j] - agg_t.mu.data()[j]).abs() <= 1e-9);
        assert!((layer.running_t.var.data()[j] - agg_t.var.data()[j]).abs() <= 1e-9);
    }
    let eval_s = rn_forward_eval(&layer, &x_s, Domain::Source).unwrap();
    let eval_t = rn_forward_eval(&layer, &x_t, Domain::Target).unwrap();
    for (got, want) in [
        (&eval_s, tape.value(out.out_s)),
        (&eval_t, tape.value(out.out_t)),
    ] {
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn criterion_4_brute_force_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let c = rng.gen_range(1..=64);
        let s = rand_stats(&mut rng, c);
        let t = rand_stats(&mut rng, c);
        let rep = nearest_channel_distances(&s, &t).unwrap();

        let sig = |st: &DomainStats| -> Vec<f64> {
            st.mu
                .data()
                .iter()
                .zip(st.var.data())
                .map(|(&m, &v)| m / v.sqrt())
                .collect()
        };
        let sig_s = sig(&s);
        let sig_t = sig(&t);
        let mut pairs = Vec::with_capacity(c);
        let mut sum = 0.0;
        for i in 0..c {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, &v) in sig_s.iter().enumerate() {
                let d = (sig_t[i] - v).abs();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            pairs.push(best);
            sum += (sig_t[i] - sig_s[best]).abs();
        }
        assert_eq!(rep.pairs, pairs, "case {case} pairs disagree");
        assert_eq!(
            rep.sum.to_bits(),
            sum.to_bits(),
            "case {case}: {} vs {sum}",
            rep.sum
        );
    }
}

#[test]
fn criterion_5_theory_diagnostics() {
    assert_eq!(a_distance_from_epsilon(0.0), 2.0);
    assert_eq!(a_distance_from_epsilon(0.25), 1.0);
    assert_eq!(a_distance_from_epsilon(0.5), 0.0);

    let m = 2000usize;
    let f = 16usize;

    // the same rows in two different orders are indistinguishable
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let rows: Vec<f64> = (0..m * f).map(|_| rng.sample(StandardNormal)).collect();
    let base = Tensor::new(vec![m, f], rows).unwrap();
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng);
    let mut shuffled = Vec::with_capacity(m * f);
    for &i in &order {
        shuffled.extend_from_slice(&base.data()[i * f..(i + 1) * f]);
    }
    let shuffled = Tensor::new(vec![m, f], shuffled).unwrap();
    let (a, _) = estimate_a_distance(&base, &shuffled, 17).unwrap();
    assert!(a <= 0.3, "indistinguishable sets scored {a}");

    // a unit mean shift on every coordinate is near-ceiling divergence, on
    // every seed
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let fs: Vec<f64> = (0..m * f).map(|_| rng.sample(StandardNormal)).collect();
        let ft: Vec<f64> = (0..m * f)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                v + 1.0
            })
            .collect();
        let fs = Tensor::new(vec![m, f], fs).unwrap();
        let ft = Tensor::new(vec![m, f], ft).unwrap();
        let (a, _) = estimate_a_distance(&fs, &ft, seed).unwrap();
        assert!(a >= 1.7, "seed {seed}: separated sets scored {a}");
    }
}

/// The directional transfer task: four Gaussian classes in 16 features where
/// the target swaps two feature pairs and shifts every coordinate, so two
/// blocks of channels stop corresponding across domains.
fn transfer_config(kind: NormKind, fixed_gate: Option<f64>, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskSpec::ChannelPermuted {
            classes: 4,
            features: 16,
            per_class: 500,
            permutation: vec![2, 3, 0, 1, 6, 7, 4, 5, 8, 9, 10, 11, 12, 13, 14, 15],
            shift: vec![3.0; 16],
        },
        hidden: vec![32],
        normalizer: kind,
        norm_opts: NormOptions {
            fixed_gate,
            ..NormOptions::default()
        },
        optim: OptimConfig::default(),
        epochs: 30,
        batch_size: 64,
        lambda: 0.3,
        anneal: true,
        disc_hidden: 32,
        seed,
        out: None,
    }
}

fn final_target_accuracy(cfg: &ExperimentConfig, out: Option<&Path>) -> f64 {
    let (source, target) = cfg.generate().unwrap();
    let outcome = train_run(&cfg.train_config(), &source, &target, out, &cfg.to_text()).unwrap();
    outcome
        .metrics
        .iter()
        .rev()
        .find(|r| r.split == "eval_t")
        .unwrap()
        .accuracy
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn criterion_6_directional_transfer() {
    let t0 = Instant::now();
    let median_for = |kind: NormKind| -> f64 {
        median(
            (0..5u64)
                .map(|s| final_target_accuracy(&transfer_config(kind, None, s), None))
                .collect(),
        )
    };
    let bn = median_for(NormKind::Bn);
    let autodial = median_for(NormKind::AutoDial);
    let dsbn = median_for(NormKind::Dsbn);
    let rn = median_for(NormKind::Rn);

    assert!(rn >= bn + 0.05, "rn {rn} vs bn {bn}");
    assert!(rn >= autodial, "rn {rn} vs autodial {autodial}");
    assert!(rn >= dsbn, "rn {rn} vs dsbn {dsbn}");
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 600.0, "directional transfer took {secs:.1}s");
}

#[test]
fn criterion_7_gate_ablation() {
    let fixed_medians: Vec<(f64, f64)> = [0.5, 0.75, 1.0]
        .iter()
        .map(|&g| {
            let accs = (0..5u64)
                .map(|s| final_target_accuracy(&transfer_config(NormKind::Rn, Some(g), s), None))
                .collect();
            (g, median(accs))
        })
        .collect();

    let mut learnable = Vec::new();
    for s in 0..5u64 {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run");
        learnable.push(final_target_accuracy(
            &transfer_config(NormKind::Rn, None, s),
            Some(&run),
        ));

        // every exported epoch report keeps its gates inside the box
        let mut paths: Vec<_> = std::fs::read_dir(run.join("reports"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                name.starts_with("epoch_") && name.ends_with(".json")
            })
            .collect();
        paths.sort();
        assert_eq!(paths.len(), 30, "one report per epoch");
        for path in paths {
            let body = std::fs::read_to_string(&path).unwrap();
            let reports: Vec<Option<CorrelationReport>> = serde_json::from_str(&body).unwrap();
            assert!(reports.iter().any(|r| r.is_some()));
            for rep in reports.iter().flatten() {
                assert!(
                    rep.gates.all_in_range(),
                    "gates escaped [0.5, 1] in {}",
                    path.display()
                );
            }
        }
    }
    let learnable = median(learnable);
    for (g, fixed) in fixed_medians {
        assert!(
            learnable >= fixed - 0.01,
            "learnable {learnable} vs fixed gate {g}: {fixed}"
        );
    }
}

fn run_ok(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_rnlab"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "rnlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Drop the trailing wall-time column from a metrics table.
fn strip_wall(metrics: &str) -> String {
    metrics
        .lines()
        .map(|l| {
            let mut parts: Vec<&str> = l.split(',').collect();
            parts.pop();
            parts.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_8_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("demo.cfg");
    std::fs::write(
        &cfg_path,
        concat!(
            "task = shifted_gaussians\n",
            "classes = 2\n",
            "features = 4\n",
            "per_class = 40\n",
            "shift = 0.6\n",
            "scale = 1.0\n",
            "hidden = 8\n",
            "normalizer = rn\n",
            "lambda = 0.2\n",
            "epochs = 3\n",
            "batch_size = 16\n",
            "seed = 5\n",
        ),
    )
    .unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let read = |p: &Path, n: &str| std::fs::read_to_string(p.join(n)).unwrap();

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&["train", "--config", cfg, "--out", a.to_str().unwrap()]);
    run_ok(&["train", "--config", cfg, "--out", b.to_str().unwrap()]);
    let metrics = read(&a, "metrics.csv");
    assert!(metrics.lines().count() > 1);
    assert_eq!(strip_wall(&metrics), strip_wall(&read(&b, "metrics.csv")));
    assert_eq!(read(&a, "checkpoint.json"), read(&b, "checkpoint.json"));
    assert_eq!(read(&a, "features.csv"), read(&b, "features.csv"));
    assert_eq!(read(&a, "data.csv"), read(&b, "data.csv"));

    let args = [
        "gradcheck", "--layer", "rn", "--channels", "3", "--batch", "4", "--seed", "9",
    ];
    assert_eq!(run_ok(&args), run_ok(&args));

    let (e1, e2) = (dir.path().join("e1"), dir.path().join("e2"));
    let ck = a.join("checkpoint.json");
    let data = a.join("data.csv");
    for out in [&e1, &e2] {
        run_ok(&[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(read(&e1, "eval.csv"), read(&e2, "eval.csv"));

    run_ok(&["analyze", "--run", a.to_str().unwrap(), "--seed", "3"]);
    let first = read(&a, "analysis.json");
    run_ok(&["analyze", "--run", a.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(first, read(&a, "analysis.json"));

    let (s1, s2) = (dir.path().join("s1"), dir.path().join("s2"));
    for out in [&s1, &s2] {
        run_ok(&[
            "sweep",
            "--config",
            cfg,
            "--vary",
            "measure",
            "--seeds",
            "0,1",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(read(&s1, "summary.csv"), read(&s2, "summary.csv"));
}
