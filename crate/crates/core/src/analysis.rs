//! Diagnostics over trained runs: domain divergence (A-distance), the risk
//! of an ideal joint hypothesis, and cross-domain channel alignment from
//! running statistics.

use crate::data::{read_csv, DomainDataset};
use crate::error::{Error, Result};
use crate::model::{Discriminator, Mlp};
use crate::norm::{CorrelationReport, DomainStats, GateParams};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{OptimConfig, RunCheckpoint, Sgd};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::path::Path;

/// Divergence and joint-risk estimates over one pair of feature sets.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TheoryReport {
    pub a_distance: f64,
    pub epsilon: f64,
    pub lambda_risk: f64,
}

/// Alignment of one layer's per-channel statistics across domains.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelDistanceReport {
    /// Sum over target channels of the distance to the nearest source channel.
    pub sum: f64,
    /// Share of target channels whose nearest source channel is themselves, in percent.
    pub ratio_percent: f64,
    /// Nearest source channel per target channel.
    pub pairs: Vec<usize>,
}

/// d = 2(1 - 2 eps), with eps clamped at chance level so a worse-than-chance
/// discriminator cannot yield a negative distance.
pub fn a_distance_from_epsilon(epsilon: f64) -> f64 {
    2.0 * (1.0 - 2.0 * epsilon.min(0.5))
}

const DIAG_HIDDEN: usize = 32;
const DIAG_EPOCHS: usize = 30;
const DIAG_BATCH: usize = 64;

fn diag_optim() -> OptimConfig {
    OptimConfig {
        lr: 0.01,
        momentum: 0.9,
        weight_decay: 0.0,
        affine_lr: None,
        affine_weight_decay: None,
    }
}

fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], data).unwrap()
}

fn fit_classifier(
    net: &mut Discriminator,
    x: &Tensor,
    y: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let m = x.shape()[0];
    let mut sgd = Sgd::new(diag_optim())?;
    let mut order: Vec<usize> = (0..m).collect();
    for _ in 0..DIAG_EPOCHS {
        order.shuffle(rng);
        for chunk in order.chunks(DIAG_BATCH) {
            let xb = gather_rows(x, chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.leaf(xb);
            let (logits, bindings) = net.forward_train(&mut tape, xv)?;
            let loss = tape.cross_entropy_logits(logits, &yb)?;
            let grads = tape.backward(loss)?;
            sgd.begin_step();
            for ((_, tensor), binding) in net.params_mut().into_iter().zip(&bindings) {
                sgd.update(tensor, &binding.meta, grads.wrt(binding.var))?;
            }
        }
    }
    Ok(())
}

fn error_rate(net: &Discriminator, x: &Tensor, y: &[usize]) -> Result<f64> {
    let logits = net.forward_plain(x)?;
    let k = logits.shape()[1];
    let mut wrong = 0usize;
    for (i, &label) in y.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mut arg = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
        }
        if arg != label {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / y.len() as f64)
}

/// Shuffled 80/20 index split; errors out when either side would be empty.
fn split_indices(m: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let cut = (m * 4) / 5;
    if cut == 0 || cut == m {
        return Err(Error::invalid(format!(
            "{m} examples are too few for an 80/20 split"
        )));
    }
    let test = order.split_off(cut);
    Ok((order, test))
}

fn check_matrix(name: &str, x: &Tensor) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[0] == 0 || x.shape()[1] == 0 {
        return Err(Error::invalid(format!("{name} features must be a nonempty [M, F] matrix")));
    }
    Ok(())
}

/// Train a fresh domain discriminator on an 80% split of each feature set
/// and convert its held-out error into the divergence d = 2(1 - 2 eps).
/// Returns (a_distance, epsilon).
pub fn estimate_a_distance(
    features_s: &Tensor,
    features_t: &Tensor,
    seed: u64,
) -> Result<(f64, f64)> {
    check_matrix("source", features_s)?;
    check_matrix("target", features_t)?;
    if features_s.shape()[1] != features_t.shape()[1] {
        return Err(Error::invalid("domains must share a feature dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s_train, s_test) = split_indices(features_s.shape()[0], &mut rng)?;
    let (t_train, t_test) = split_indices(features_t.shape()[0], &mut rng)?;

    let stack = |si: &[usize], ti: &[usize]| {
        let a = gather_rows(features_s, si);
        let b = gather_rows(features_t, ti);
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let x = Tensor::new(vec![si.len() + ti.len(), features_s.shape()[1]], data).unwrap();
        let mut y = vec![0usize; si.len()];
        y.extend(std::iter::repeat(1).take(ti.len()));
        (x, y)
    };
    let (x_train, y_train) = stack(&s_train, &t_train);
    let (x_test, y_test) = stack(&s_test, &t_test);

    let mut net = Discriminator::new(features_s.shape()[1], DIAG_HIDDEN, &mut rng);
    fit_classifier(&mut net, &x_train, &y_train, &mut rng)?;
    let epsilon = error_rate(&net, &x_test, &y_test)?;
    Ok((a_distance_from_epsilon(epsilon), epsilon))
}

fn dataset_order(xa: &Tensor, ya: &[usize], xb: &Tensor, yb: &[usize]) -> Ordering {
    match xa.numel().cmp(&xb.numel()) {
        Ordering::Equal => {}
        o => return o,
    }
    for (p, q) in xa.data().iter().zip(xb.data()) {
        match p.to_bits().cmp(&q.to_bits()) {
            Ordering::Equal => {}
            o => return o,
        }
    }
    ya.cmp(yb)
}

/// Risk of a single hypothesis trained on the union of both labeled domains:
/// the mean of its held-out error on each. Labels for both domains are an
/// analysis-only privilege. The result does not depend on argument order.
pub fn estimate_lambda(
    features_s: &Tensor,
    labels_s: &[usize],
    features_t: &Tensor,
    labels_t: &[usize],
    seed: u64,
) -> Result<f64> {
    check_matrix("source", features_s)?;
    check_matrix("target", features_t)?;
    if features_s.shape()[1] != features_t.shape()[1] {
        return Err(Error::invalid("domains must share a feature dimension"));
    }
    if labels_s.len() != features_s.shape()[0] || labels_t.len() != features_t.shape()[0] {
        return Err(Error::invalid("label count must match the feature rows"));
    }
    let k = labels_s.iter().chain(labels_t).copied().max().unwrap() + 1;
    for (name, labels) in [("source", labels_s), ("target", labels_t)] {
        for class in 0..k {
            if !labels.contains(&class) {
                return Err(Error::invalid(format!(
                    "class {class} missing from the {name} domain"
                )));
            }
        }
    }

    // canonical argument order so (s, t) and (t, s) run identical arithmetic
    let (xa, ya, xb, yb) =
        if dataset_order(features_t, labels_t, features_s, labels_s) == Ordering::Less {
            (features_t, labels_t, features_s, labels_s)
        } else {
            (features_s, labels_s, features_t, labels_t)
        };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a_train, a_test) = split_indices(xa.shape()[0], &mut rng)?;
    let (b_train, b_test) = split_indices(xb.shape()[0], &mut rng)?;

    let mut data = gather_rows(xa, &a_train).data().to_vec();
    data.extend_from_slice(gather_rows(xb, &b_train).data());
    let x_train = Tensor::new(
        vec![a_train.len() + b_train.len(), xa.shape()[1]],
        data,
    )
    .unwrap();
    let mut y_train: Vec<usize> = a_train.iter().map(|&i| ya[i]).collect();
    y_train.extend(b_train.iter().map(|&i| yb[i]));

    let mut net = Discriminator::with_classes(xa.shape()[1], DIAG_HIDDEN, k, &mut rng);
    fit_classifier(&mut net, &x_train, &y_train, &mut rng)?;

    let err_a = error_rate(
        &net,
        &gather_rows(xa, &a_test),
        &a_test.iter().map(|&i| ya[i]).collect::<Vec<_>>(),
    )?;
    let err_b = error_rate(
        &net,
        &gather_rows(xb, &b_test),
        &b_test.iter().map(|&i| yb[i]).collect::<Vec<_>>(),
    )?;
    Ok((err_a + err_b) / 2.0)
}

/// Both estimators over one labeled dataset pair.
pub fn theory_report(
    source: &DomainDataset,
    target: &DomainDataset,
    seed: u64,
) -> Result<TheoryReport> {
    let (a_distance, epsilon) =
        estimate_a_distance(&source.features, &target.features, seed)?;
    let lambda_risk = estimate_lambda(
        &source.features,
        &source.labels,
        &target.features,
        &target.labels,
        seed.wrapping_add(1),
    )?;
    Ok(TheoryReport { a_distance, epsilon, lambda_risk })
}

fn signatures(name: &str, stats: &DomainStats) -> Result<Vec<f64>> {
    let c = stats.mu.numel();
    if stats.var.numel() != c {
        return Err(Error::invalid("statistics vectors disagree on channel count"));
    }
    let mut sig = Vec::with_capacity(c);
    for j in 0..c {
        let var = stats.var.data()[j];
        if !(var > 0.0) {
            return Err(Error::invalid(format!(
                "{name} channel {j} has nonpositive variance {var}"
            )));
        }
        let s = stats.mu.data()[j] / var.sqrt();
        if !s.is_finite() {
            return Err(Error::invalid(format!(
                "{name} channel {j} has a non-finite signature"
            )));
        }
        sig.push(s);
    }
    Ok(sig)
}

/// For every target channel, find the source channel whose signature
/// mu/sqrt(var) is closest (ties to the lowest source index). Runs in
/// O(C log C) via a sorted scan rather than the quadratic all-pairs sweep.
pub fn nearest_channel_distances(
    stats_s: &DomainStats,
    stats_t: &DomainStats,
) -> Result<ChannelDistanceReport> {
    let sig_s = signatures("source", stats_s)?;
    let sig_t = signatures("target", stats_t)?;
    let c = sig_s.len();
    if sig_t.len() != c {
        return Err(Error::invalid("domains disagree on channel count"));
    }

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| sig_s[a].partial_cmp(&sig_s[b]).unwrap().then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&j| sig_s[j]).collect();
    // first position of each run of equal signatures; order within a run is
    // by original index, so run starts carry the lowest index for that value
    let mut run_start = vec![0usize; c];
    for p in 1..c {
        run_start[p] = if sorted[p] == sorted[p - 1] { run_start[p - 1] } else { p };
    }

    let mut pairs = Vec::with_capacity(c);
    let mut sum = 0.0;
    let mut hits = 0usize;
    for (i, &t) in sig_t.iter().enumerate() {
        let ins = sorted.partition_point(|&v| v < t);
        let mut best_d = f64::INFINITY;
        let mut best_j = usize::MAX;
        for p in [ins.checked_sub(1), (ins < c).then_some(ins)].into_iter().flatten() {
            let d = (t - sorted[p]).abs();
            let j = order[run_start[p]];
            if d < best_d || (d == best_d && j < best_j) {
                best_d = d;
                best_j = j;
            }
        }
        let d = (sig_t[i] - sig_s[best_j]).abs();
        sum += d;
        pairs.push(best_j);
        if best_j == i {
            hits += 1;
        }
    }
    Ok(ChannelDistanceReport {
        sum,
        ratio_percent: 100.0 * hits as f64 / c as f64,
        pairs,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerChannelDistances {
    pub layer: usize,
    #[serde(flatten)]
    pub report: ChannelDistanceReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateSnapshot {
    pub epoch: usize,
    /// One entry per hidden block; None for layers without gates.
    pub layers: Vec<Option<GateParams>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub theory: TheoryReport,
    pub channel_distances: Vec<LayerChannelDistances>,
    pub gate_snapshots: Vec<GateSnapshot>,
    /// The last captured per-layer compensation reports, correlation
    /// matrices included.
    pub final_reports: Vec<Option<CorrelationReport>>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
    serde_json::from_str(&body).map_err(|e| Error::json(path.display().to_string(), e))
}

fn gate_snapshots(run: &Path) -> Result<Vec<GateSnapshot>> {
    let dir = run.join("reports");
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut names: Vec<String> = Vec::new();
    let entries = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(dir.display().to_string(), e.to_string()))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e.to_string()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("epoch_") && name.ends_with(".json") {
            names.push(name);
        }
    }
    names.sort();
    let mut snaps = Vec::with_capacity(names.len());
    for name in names {
        let epoch: usize = name["epoch_".len()..name.len() - ".json".len()]
            .parse()
            .map_err(|_| Error::invalid(format!("unrecognized report file name '{name}'")))?;
        let reports: Vec<Option<CorrelationReport>> = read_json(&dir.join(&name))?;
        snaps.push(GateSnapshot {
            epoch,
            layers: reports.into_iter().map(|r| r.map(|r| r.gates)).collect(),
        });
    }
    Ok(snaps)
}

/// Assemble analysis.json for a finished run directory: theory estimates on
/// the exported bottleneck features, channel-distance reports from the
/// checkpoint's running statistics, and gate trajectories from the per-epoch
/// reports.
pub fn export_reports(run: &Path, seed: u64) -> Result<AnalysisReport> {
    let ck_path = run.join("checkpoint.json");
    if !ck_path.is_file() {
        return Err(Error::invalid(format!(
            "{} has no checkpoint.json; expected a finished run directory",
            run.display()
        )));
    }
    let ck: RunCheckpoint = read_json(&ck_path)?;
    let model = Mlp::from_checkpoint(&ck.model)?;

    let mut channel_distances = Vec::new();
    for (layer, (_, norm)) in model.blocks.iter().enumerate() {
        let (rs, rt) = norm.running_stats();
        channel_distances.push(LayerChannelDistances {
            layer,
            report: nearest_channel_distances(rs, rt)?,
        });
    }

    let (source, target) = read_csv(&run.join("features.csv"))?;
    let theory = theory_report(&source, &target, seed)?;

    let gate_snapshots = gate_snapshots(run)?;
    let final_reports: Vec<Option<CorrelationReport>> = match gate_snapshots.last() {
        Some(last) => {
            let name = format!("reports/epoch_{:04}.json", last.epoch);
            read_json(&run.join(name))?
        }
        None => Vec::new(),
    };

    let report = AnalysisReport { theory, channel_distances, gate_snapshots, final_reports };
    let out = run.join("analysis.json");
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::json(out.display().to_string(), e))?;
    std::fs::write(&out, body).map_err(|e| Error::io(out.display().to_string(), e.to_string()))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn a_distance_formula_exact_points() {
        assert_eq!(a_distance_from_epsilon(0.0), 2.0);
        assert_eq!(a_distance_from_epsilon(0.25), 1.0);
        assert_eq!(a_distance_from_epsilon(0.5), 0.0);
        // worse than chance clamps to zero instead of going negative
        assert_eq!(a_distance_from_epsilon(0.9), 0.0);
    }

    #[test]
    fn a_distance_monotone_in_epsilon() {
        let mut last = f64::INFINITY;
        for i in 0..=10 {
            let d = a_distance_from_epsilon(i as f64 * 0.05);
            assert!(d <= last);
            last = d;
        }
    }

    fn gaussian_blob(m: usize, d: usize, mean: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..m * d)
            .map(|_| mean + rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        Tensor::new(vec![m, d], data).unwrap()
    }

    #[test]
    fn indistinguishable_features_give_small_a_distance() {
        let s = gaussian_blob(500, 4, 0.0, 1);
        // same rows, shuffled
        let mut idx: Vec<usize> = (0..500).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        idx.shuffle(&mut rng);
        let t = gather_rows(&s, &idx);
        let (a, eps) = estimate_a_distance(&s, &t, 3).unwrap();
        assert!(a < 0.4, "a_distance {a}, eps {eps}");
    }

    #[test]
    fn separated_features_give_large_a_distance() {
        let s = gaussian_blob(500, 4, 0.0, 4);
        let t = gaussian_blob(500, 4, 4.0, 5);
        let (a, eps) = estimate_a_distance(&s, &t, 6).unwrap();
        assert!(a > 1.8, "a_distance {a}, eps {eps}");
    }

    #[test]
    fn a_distance_deterministic_per_seed() {
        let s = gaussian_blob(120, 3, 0.0, 7);
        let t = gaussian_blob(120, 3, 1.0, 8);
        let a = estimate_a_distance(&s, &t, 9).unwrap();
        let b = estimate_a_distance(&s, &t, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn a_distance_rejects_tiny_inputs() {
        let s = gaussian_blob(1, 3, 0.0, 1);
        let t = gaussian_blob(50, 3, 0.0, 2);
        assert!(estimate_a_distance(&s, &t, 0).is_err());
    }

    fn labeled_two_class(m_per: usize, sep: f64, seed: u64) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for k in 0..2usize {
            let mean = if k == 0 { -sep } else { sep };
            for _ in 0..m_per {
                data.push(mean + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal));
                data.push(0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal));
                labels.push(k);
            }
        }
        (Tensor::new(vec![2 * m_per, 2], data).unwrap(), labels)
    }

    #[test]
    fn lambda_near_zero_for_identical_separable_domains() {
        let (x, y) = labeled_two_class(100, 2.0, 11);
        let l = estimate_lambda(&x, &y, &x, &y, 12).unwrap();
        assert!(l < 0.05, "lambda {l}");
    }

    #[test]
    fn lambda_near_half_when_target_labels_flip() {
        let (x, y) = labeled_two_class(150, 2.0, 13);
        let flipped: Vec<usize> = y.iter().map(|&l| 1 - l).collect();
        let l = estimate_lambda(&x, &y, &x, &flipped, 14).unwrap();
        assert!((l - 0.5).abs() <= 0.1, "lambda {l}");
    }

    #[test]
    fn lambda_invariant_to_domain_order() {
        let (xs, ys) = labeled_two_class(60, 1.0, 15);
        let (xt, yt) = labeled_two_class(80, 1.5, 16);
        let a = estimate_lambda(&xs, &ys, &xt, &yt, 17).unwrap();
        let b = estimate_lambda(&xt, &yt, &xs, &ys, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lambda_rejects_missing_class() {
        let (xs, ys) = labeled_two_class(40, 1.0, 18);
        let (xt, _) = labeled_two_class(40, 1.0, 19);
        let yt = vec![0usize; xt.shape()[0]];
        let err = estimate_lambda(&xs, &ys, &xt, &yt, 20).unwrap_err();
        assert!(err.to_string().contains("missing"), "{err}");
    }

    fn stats(mu: Vec<f64>, var: Vec<f64>) -> DomainStats {
        DomainStats { mu: Tensor::from_vec(mu), var: Tensor::from_vec(var) }
    }

    #[test]
    fn identical_stats_align_perfectly() {
        let s = stats(vec![0.0, 1.0, -2.0], vec![1.0, 4.0, 0.25]);
        let r = nearest_channel_distances(&s, &s.clone()).unwrap();
        assert_eq!(r.sum, 0.0);
        assert_eq!(r.ratio_percent, 100.0);
        assert_eq!(r.pairs, vec![0, 1, 2]);
    }

    #[test]
    fn single_channel_signature_hand_value() {
        let s = stats(vec![0.0], vec![1.0]);
        let t = stats(vec![3.0], vec![4.0]);
        let r = nearest_channel_distances(&s, &t).unwrap();
        // |0/1 - 3/2| = 1.5
        assert_eq!(r.sum, 1.5);
        assert_eq!(r.pairs, vec![0]);
        assert_eq!(r.ratio_percent, 100.0);
    }

    #[test]
    fn swapped_signatures_cross_match() {
        let s = stats(vec![1.0, -1.0], vec![1.0, 1.0]);
        let t = stats(vec![-1.0, 1.0], vec![1.0, 1.0]);
        let r = nearest_channel_distances(&s, &t).unwrap();
        assert_eq!(r.pairs, vec![1, 0]);
        assert_eq!(r.ratio_percent, 0.0);
        assert_eq!(r.sum, 0.0);
    }

    #[test]
    fn ties_break_to_lowest_source_index() {
        let s = stats(vec![1.0, 1.0], vec![1.0, 1.0]);
        let t = stats(vec![1.0, 1.0], vec![1.0, 1.0]);
        let r = nearest_channel_distances(&s, &t).unwrap();
        assert_eq!(r.pairs, vec![0, 0]);
        assert_eq!(r.ratio_percent, 50.0);

        // equidistant from both sides also prefers the lower index
        let s = stats(vec![0.0, 2.0], vec![1.0, 1.0]);
        let t = stats(vec![1.0, 1.0], vec![1.0, 1.0]);
        let r = nearest_channel_distances(&s, &t).unwrap();
        assert_eq!(r.pairs, vec![0, 0]);
    }

    #[test]
    fn zero_variance_rejected() {
        let s = stats(vec![0.0], vec![0.0]);
        let t = stats(vec![0.0], vec![1.0]);
        assert!(nearest_channel_distances(&s, &t).is_err());
        assert!(nearest_channel_distances(&t, &s).is_err());
    }

    fn brute_force(stats_s: &DomainStats, stats_t: &DomainStats) -> ChannelDistanceReport {
        let c = stats_s.mu.numel();
        let sig = |st: &DomainStats, j: usize| st.mu.data()[j] / st.var.data()[j].sqrt();
        let mut pairs = Vec::new();
        let mut sum = 0.0;
        let mut hits = 0;
        for i in 0..c {
            let ti = sig(stats_t, i);
            let mut best = 0usize;
            let mut best_d = (ti - sig(stats_s, 0)).abs();
            for j in 1..c {
                let d = (ti - sig(stats_s, j)).abs();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            sum += (ti - sig(stats_s, best)).abs();
            pairs.push(best);
            if best == i {
                hits += 1;
            }
        }
        ChannelDistanceReport { sum, ratio_percent: 100.0 * hits as f64 / c as f64, pairs }
    }

    #[test]
    fn sorted_scan_matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..30 {
            let c = 1 + rng.gen_range(0..64);
            let mu = |rng: &mut ChaCha8Rng| {
                (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<f64>>()
            };
            let var = |rng: &mut ChaCha8Rng| {
                (0..c).map(|_| rng.gen_range(0.1..4.0)).collect::<Vec<f64>>()
            };
            // quantized draws so exact ties actually occur
            let quant = |v: Vec<f64>| {
                v.into_iter().map(|x| (x * 4.0).round() / 4.0).collect::<Vec<f64>>()
            };
            let s = stats(quant(mu(&mut rng)), var(&mut rng).iter().map(|v| v.max(0.25)).collect());
            let t = stats(quant(mu(&mut rng)), var(&mut rng).iter().map(|v| v.max(0.25)).collect());
            let fast = nearest_channel_distances(&s, &t).unwrap();
            let slow = brute_force(&s, &t);
            assert_eq!(fast.pairs, slow.pairs, "case {case}");
            assert_eq!(fast.sum.to_bits(), slow.sum.to_bits(), "case {case}");
            assert_eq!(fast.ratio_percent, slow.ratio_percent, "case {case}");
        }
    }

    #[test]
    fn export_requires_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let err = export_reports(dir.path(), 0).unwrap_err();
        assert!(err.to_string().contains("checkpoint.json"), "{err}");
    }

    fn train_demo_run(dir: &Path, affine_lr: Option<f64>) {
        use crate::model::MlpSpec;
        use crate::norm::{NormKind, NormOptions};
        use crate::train::{train_run, TrainConfig};
        let (src, tgt) =
            crate::data::make_shifted_gaussians(2, 4, &[1.0; 4], &[1.0; 4], 40, 31).unwrap();
        let cfg = TrainConfig {
            spec: MlpSpec {
                input: 4,
                hidden: vec![6],
                classes: 2,
                norm: NormKind::Rn,
                norm_opts: NormOptions::default(),
            },
            optim: OptimConfig { affine_lr, ..OptimConfig::default() },
            epochs: 3,
            batch_size: 16,
            lambda: 0.2,
            anneal: true,
            disc_hidden: 8,
            seed: 33,
        };
        train_run(&cfg, &src, &tgt, Some(dir), "demo").unwrap();
    }

    #[test]
    fn export_bundle_is_consistent() {
        let dir = tempfile::tempdir().unwrap();
        train_demo_run(dir.path(), None);
        let report = export_reports(dir.path(), 5).unwrap();
        assert!(dir.path().join("analysis.json").exists());
        assert!(report.theory.a_distance >= 0.0 && report.theory.a_distance <= 2.0);
        assert!(report.theory.lambda_risk >= 0.0);
        assert_eq!(report.channel_distances.len(), 1);
        assert_eq!(report.gate_snapshots.len(), 3);
        for snap in &report.gate_snapshots {
            for gates in snap.layers.iter().flatten() {
                assert!(gates.all_in_range());
            }
        }
        // exported correlation rows are stochastic
        let final_rn = report.final_reports[0].as_ref().unwrap();
        for row in 0..final_rn.rho_mu_ts.shape()[0] {
            let c = final_rn.rho_mu_ts.shape()[1];
            let s: f64 = final_rn.rho_mu_ts.data()[row * c..(row + 1) * c].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        // round trips as JSON
        let body = std::fs::read_to_string(dir.path().join("analysis.json")).unwrap();
        let _: AnalysisReport = serde_json::from_str(&body).unwrap();
    }

    #[test]
    fn untouched_gates_export_as_exact_unit() {
        let dir = tempfile::tempdir().unwrap();
        train_demo_run(dir.path(), Some(0.0));
        let report = export_reports(dir.path(), 6).unwrap();
        for snap in &report.gate_snapshots {
            for gates in snap.layers.iter().flatten() {
                for g in [&gates.g_mu_s, &gates.g_var_s, &gates.g_mu_t, &gates.g_var_t] {
                    assert!(g.data().iter().all(|&v| v == 1.0));
                }
            }
        }
    }
}
