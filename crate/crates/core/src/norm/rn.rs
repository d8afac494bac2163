//! The reciprocal normalization layer.
//!
//! Train-mode forward, per channel group: compute both domains' batch
//! moments, score every cross-domain channel pair by the configured measure,
//! softmax the scores row-wise, and form each channel's compensatory
//! statistic as the score-weighted combination of the other domain's
//! statistics. Gates then blend original and compensatory statistics, and
//! each domain is standardized by its own blended moments under a shared
//! affine. Running per-domain estimates of the blended statistics serve the
//! eval path.

use crate::error::{Error, Result};
use crate::norm::{
    ema_update, partition_channels, standardize_eval, tape_moments, CorrelationReport, Domain,
    DomainStats, GateParams, Measure, NormOptions, NormTrainOut,
};
use crate::params::{ParamBinding, ParamMeta};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub struct RnLayerState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub gates: GateParams,
    pub running_s: DomainStats,
    pub running_t: DomainStats,
    pub epsilon: f64,
    pub alpha: f64,
    pub group_size: usize,
    pub measure: Measure,
    /// True when a fixed-gate override is in force; the trainer then leaves
    /// the gates untouched.
    pub frozen_gates: bool,
}

impl RnLayerState {
    pub fn new(c: usize, opts: &NormOptions) -> Result<Self> {
        opts.validate()?;
        let gates = match opts.fixed_gate {
            Some(v) => GateParams::constant(c, v)?,
            None => GateParams::unit(c),
        };
        Ok(RnLayerState {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            gates,
            running_s: DomainStats::init(c),
            running_t: DomainStats::init(c),
            epsilon: opts.epsilon,
            alpha: opts.alpha,
            group_size: opts.group_size,
            measure: opts.measure,
            frozen_gates: opts.fixed_gate.is_some(),
        })
    }
}

/// Tape nodes produced by reciprocal compensation, plus the assembled
/// full-size score matrices (block-diagonal when grouping splits channels).
pub(crate) struct RcGraph {
    pub cc_mu_t: Var,
    pub cc_var_t: Var,
    pub cc_mu_s: Var,
    pub cc_var_s: Var,
    pub rho_mu_ts: Tensor,
    pub rho_var_ts: Tensor,
    pub rho_mu_st: Tensor,
    pub rho_var_st: Tensor,
}

fn write_block(full: &mut Tensor, block: &Tensor, start: usize) {
    let c = full.shape()[0];
    let len = block.shape()[0];
    for i in 0..len {
        for j in 0..len {
            full.data_mut()[(start + i) * c + (start + j)] = block.data()[i * len + j];
        }
    }
}

pub(crate) fn rc_graph(
    tape: &mut Tape,
    mu_s: Var,
    var_s: Var,
    mu_t: Var,
    var_t: Var,
    measure: Measure,
    group_size: usize,
) -> Result<RcGraph> {
    let c = match tape.value(mu_s).shape() {
        [c] => *c,
        other => {
            return Err(Error::invalid(format!(
                "rc: statistics must be rank-1, got {other:?}"
            )))
        }
    };
    for v in [var_s, mu_t, var_t] {
        if tape.value(v).shape() != [c] {
            return Err(Error::invalid(
                "rc: all four statistic vectors must share one channel count",
            ));
        }
    }
    if group_size == 0 {
        return Err(Error::invalid("rc: group_size must be positive"));
    }

    let groups = partition_channels(c, group_size);
    let mut cc_mu_t_parts = Vec::with_capacity(groups.len());
    let mut cc_var_t_parts = Vec::with_capacity(groups.len());
    let mut cc_mu_s_parts = Vec::with_capacity(groups.len());
    let mut cc_var_s_parts = Vec::with_capacity(groups.len());
    let mut rho_mu_ts = Tensor::zeros(&[c, c]);
    let mut rho_var_ts = Tensor::zeros(&[c, c]);
    let mut rho_mu_st = Tensor::zeros(&[c, c]);
    let mut rho_var_st = Tensor::zeros(&[c, c]);

    for &(start, len) in &groups {
        let g_mu_s = tape.narrow0(mu_s, start, len)?;
        let g_var_s = tape.narrow0(var_s, start, len)?;
        let g_mu_t = tape.narrow0(mu_t, start, len)?;
        let g_var_t = tape.narrow0(var_t, start, len)?;

        let (e_mu_ts, e_var_ts) = match measure {
            Measure::NegL2 => (
                tape.pairwise_neg_sq(g_mu_t, g_mu_s)?,
                tape.pairwise_neg_sq(g_var_t, g_var_s)?,
            ),
            Measure::NegL1 => (
                tape.pairwise_neg_abs(g_mu_t, g_mu_s)?,
                tape.pairwise_neg_abs(g_var_t, g_var_s)?,
            ),
            Measure::NegCosine => {
                let e = tape.pairwise_neg_cosdist(g_mu_t, g_var_t, g_mu_s, g_var_s)?;
                (e, e)
            }
        };

        let r_mu_ts = tape.softmax_rows(e_mu_ts)?;
        let r_var_ts = if e_var_ts == e_mu_ts {
            r_mu_ts
        } else {
            tape.softmax_rows(e_var_ts)?
        };
        let e_mu_st = tape.transpose(e_mu_ts)?;
        let r_mu_st = tape.softmax_rows(e_mu_st)?;
        let r_var_st = if e_var_ts == e_mu_ts {
            r_mu_st
        } else {
            let e_var_st = tape.transpose(e_var_ts)?;
            tape.softmax_rows(e_var_st)?
        };

        cc_mu_t_parts.push(tape.matvec(r_mu_ts, g_mu_s)?);
        cc_var_t_parts.push(tape.matvec(r_var_ts, g_var_s)?);
        cc_mu_s_parts.push(tape.matvec(r_mu_st, g_mu_t)?);
        cc_var_s_parts.push(tape.matvec(r_var_st, g_var_t)?);

        write_block(&mut rho_mu_ts, tape.value(r_mu_ts), start);
        write_block(&mut rho_var_ts, tape.value(r_var_ts), start);
        write_block(&mut rho_mu_st, tape.value(r_mu_st), start);
        write_block(&mut rho_var_st, tape.value(r_var_st), start);
    }

    Ok(RcGraph {
        cc_mu_t: tape.concat0(&cc_mu_t_parts)?,
        cc_var_t: tape.concat0(&cc_var_t_parts)?,
        cc_mu_s: tape.concat0(&cc_mu_s_parts)?,
        cc_var_s: tape.concat0(&cc_var_s_parts)?,
        rho_mu_ts,
        rho_var_ts,
        rho_mu_st,
        rho_var_st,
    })
}

/// Gated blend on the tape: `g*z + (1-g)*cc`.
pub(crate) fn ra_graph(tape: &mut Tape, g: Var, z: Var, cc: Var) -> Result<Var> {
    let keep = tape.mul(g, z)?;
    let inv = tape.affine(g, -1.0, 1.0);
    let borrow = tape.mul(inv, cc)?;
    tape.add(keep, borrow)
}

/// All tape variables an RN training forward consumes.
pub struct RnGraphVars {
    pub x_s: Var,
    pub x_t: Var,
    pub gamma: Var,
    pub beta: Var,
    pub g_mu_s: Var,
    pub g_var_s: Var,
    pub g_mu_t: Var,
    pub g_var_t: Var,
}

pub struct RnGraphOut {
    pub out_s: Var,
    pub out_t: Var,
    pub mu_s: Var,
    pub var_s: Var,
    pub mu_t: Var,
    pub var_t: Var,
    pub agg_mu_s: Var,
    pub agg_var_s: Var,
    pub agg_mu_t: Var,
    pub agg_var_t: Var,
    pub report: CorrelationReport,
}

/// Builds the full RN training forward on a tape. Pure with respect to layer
/// state; callers handle parameter binding and running-statistics updates.
pub fn rn_train_graph(
    tape: &mut Tape,
    v: &RnGraphVars,
    measure: Measure,
    group_size: usize,
    eps: f64,
) -> Result<RnGraphOut> {
    let (mu_s, var_s, mu_t, var_t, _) = tape_moments(tape, v.x_s, v.x_t)?;
    let rc = rc_graph(tape, mu_s, var_s, mu_t, var_t, measure, group_size)?;

    let agg_mu_t = ra_graph(tape, v.g_mu_t, mu_t, rc.cc_mu_t)?;
    let agg_var_t = ra_graph(tape, v.g_var_t, var_t, rc.cc_var_t)?;
    let agg_mu_s = ra_graph(tape, v.g_mu_s, mu_s, rc.cc_mu_s)?;
    let agg_var_s = ra_graph(tape, v.g_var_s, var_s, rc.cc_var_s)?;

    let out_s = tape.channel_norm_affine(v.x_s, agg_mu_s, agg_var_s, v.gamma, v.beta, eps)?;
    let out_t = tape.channel_norm_affine(v.x_t, agg_mu_t, agg_var_t, v.gamma, v.beta, eps)?;

    let report = CorrelationReport {
        rho_mu_ts: rc.rho_mu_ts,
        rho_var_ts: rc.rho_var_ts,
        rho_mu_st: rc.rho_mu_st,
        rho_var_st: rc.rho_var_st,
        cc_mu_t: tape.value(rc.cc_mu_t).clone(),
        cc_var_t: tape.value(rc.cc_var_t).clone(),
        cc_mu_s: tape.value(rc.cc_mu_s).clone(),
        cc_var_s: tape.value(rc.cc_var_s).clone(),
        gates: GateParams {
            g_mu_s: tape.value(v.g_mu_s).clone(),
            g_var_s: tape.value(v.g_var_s).clone(),
            g_mu_t: tape.value(v.g_mu_t).clone(),
            g_var_t: tape.value(v.g_var_t).clone(),
        },
    };

    Ok(RnGraphOut {
        out_s,
        out_t,
        mu_s,
        var_s,
        mu_t,
        var_t,
        agg_mu_s,
        agg_var_s,
        agg_mu_t,
        agg_var_t,
        report,
    })
}

/// Train-mode forward: binds the layer's parameters, runs the graph, and
/// refreshes the per-domain running estimates with the blended statistics.
pub fn rn_forward_train(
    layer: &mut RnLayerState,
    tape: &mut Tape,
    x_s: Var,
    x_t: Var,
) -> Result<NormTrainOut> {
    let frozen = layer.frozen_gates;
    let vars = RnGraphVars {
        x_s,
        x_t,
        gamma: tape.leaf(layer.gamma.clone()),
        beta: tape.leaf(layer.beta.clone()),
        g_mu_s: tape.leaf(layer.gates.g_mu_s.clone()),
        g_var_s: tape.leaf(layer.gates.g_var_s.clone()),
        g_mu_t: tape.leaf(layer.gates.g_mu_t.clone()),
        g_var_t: tape.leaf(layer.gates.g_var_t.clone()),
    };
    let params = vec![
        ParamBinding { var: vars.gamma, meta: ParamMeta::affine("gamma") },
        ParamBinding { var: vars.beta, meta: ParamMeta::affine("beta") },
        ParamBinding { var: vars.g_mu_s, meta: ParamMeta::gate("g_mu_s", frozen) },
        ParamBinding { var: vars.g_var_s, meta: ParamMeta::gate("g_var_s", frozen) },
        ParamBinding { var: vars.g_mu_t, meta: ParamMeta::gate("g_mu_t", frozen) },
        ParamBinding { var: vars.g_var_t, meta: ParamMeta::gate("g_var_t", frozen) },
    ];

    let graph = rn_train_graph(tape, &vars, layer.measure, layer.group_size, layer.epsilon)?;

    let agg_s = DomainStats::new(
        tape.value(graph.agg_mu_s).clone(),
        tape.value(graph.agg_var_s).clone(),
    )?;
    let agg_t = DomainStats::new(
        tape.value(graph.agg_mu_t).clone(),
        tape.value(graph.agg_var_t).clone(),
    )?;
    layer.running_s = ema_update(&layer.running_s, &agg_s, layer.alpha)?;
    layer.running_t = ema_update(&layer.running_t, &agg_t, layer.alpha)?;

    Ok(NormTrainOut {
        out_s: graph.out_s,
        out_t: graph.out_t,
        params,
        stat_nodes: vec![graph.mu_s, graph.var_s, graph.mu_t, graph.var_t],
        report: Some(graph.report),
    })
}

/// Eval-mode forward: standardize with the selected domain's running
/// estimates under the shared affine. No compensation is recomputed.
pub fn rn_forward_eval(layer: &RnLayerState, x: &Tensor, domain: Domain) -> Result<Tensor> {
    let stats = match domain {
        Domain::Source => &layer.running_s,
        Domain::Target => &layer.running_t,
    };
    standardize_eval(x, stats, &layer.gamma, &layer.beta, layer.epsilon)
}

/// Reciprocal compensation on plain statistics, for diagnostics and tests.
///
/// The report's gate snapshot is the unit vector: bare compensation applies
/// no aggregation. Callers that aggregate overwrite it.
pub fn rc_compensate(
    stats_s: &DomainStats,
    stats_t: &DomainStats,
    measure: Measure,
    group_size: usize,
) -> Result<CorrelationReport> {
    if stats_s.channels() != stats_t.channels() {
        return Err(Error::invalid(format!(
            "rc_compensate: {} source channels vs {} target channels",
            stats_s.channels(),
            stats_t.channels()
        )));
    }
    let c = stats_s.channels();
    let mut tape = Tape::new();
    let mu_s = tape.leaf(stats_s.mu.clone());
    let var_s = tape.leaf(stats_s.var.clone());
    let mu_t = tape.leaf(stats_t.mu.clone());
    let var_t = tape.leaf(stats_t.var.clone());
    let rc = rc_graph(&mut tape, mu_s, var_s, mu_t, var_t, measure, group_size)?;
    Ok(CorrelationReport {
        rho_mu_ts: rc.rho_mu_ts,
        rho_var_ts: rc.rho_var_ts,
        rho_mu_st: rc.rho_mu_st,
        rho_var_st: rc.rho_var_st,
        cc_mu_t: tape.value(rc.cc_mu_t).clone(),
        cc_var_t: tape.value(rc.cc_var_t).clone(),
        cc_mu_s: tape.value(rc.cc_mu_s).clone(),
        cc_var_s: tape.value(rc.cc_var_s).clone(),
        gates: GateParams::unit(c),
    })
}

/// Gated aggregation on plain statistics: `mu~ = g_mu*mu + (1-g_mu)*cc_mu`
/// and likewise for the variance.
pub fn ra_aggregate(
    stats: &DomainStats,
    cc_mu: &Tensor,
    cc_var: &Tensor,
    g_mu: &Tensor,
    g_var: &Tensor,
) -> Result<DomainStats> {
    let c = stats.channels();
    for (label, t) in [("cc_mu", cc_mu), ("cc_var", cc_var), ("g_mu", g_mu), ("g_var", g_var)] {
        if t.shape() != [c] {
            return Err(Error::invalid(format!(
                "ra_aggregate: {label} must have shape [{c}], got {:?}",
                t.shape()
            )));
        }
    }
    let blend = |g: &Tensor, z: &Tensor, cc: &Tensor| {
        let keep = g.mul(z).unwrap();
        let borrow = g.map(|v| 1.0 - v).mul(cc).unwrap();
        keep.add(&borrow).unwrap()
    };
    DomainStats::new(
        blend(g_mu, &stats.mu, cc_mu),
        blend(g_var, &stats.var, cc_var),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::NormLayer;
    use crate::norm::NormKind;
    use crate::tensor::channel_moments;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn stats(mu: Vec<f64>, var: Vec<f64>) -> DomainStats {
        DomainStats::new(Tensor::from_vec(mu), Tensor::from_vec(var)).unwrap()
    }

    #[test]
    fn rc_single_channel_is_plain_exchange() {
        let s = stats(vec![3.0], vec![2.0]);
        let t = stats(vec![-1.0], vec![0.5]);
        let rep = rc_compensate(&s, &t, Measure::NegL2, 512).unwrap();
        assert_eq!(rep.rho_mu_ts.data(), &[1.0]);
        assert_eq!(rep.cc_mu_t.data(), &[3.0]);
        assert_eq!(rep.cc_var_t.data(), &[2.0]);
        assert_eq!(rep.cc_mu_s.data(), &[-1.0]);
    }

    #[test]
    fn rc_uniform_stats_give_uniform_rows() {
        let s = stats(vec![2.0; 4], vec![1.0; 4]);
        let t = stats(vec![2.0; 4], vec![1.0; 4]);
        let rep = rc_compensate(&s, &t, Measure::NegL2, 512).unwrap();
        for &v in rep.rho_mu_ts.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        for &v in rep.cc_mu_t.data() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rc_hand_evaluated_two_channels() {
        // E row for mu_t[0] against mu_s = [0, 1] is [0, -1]; softmax gives
        // [e^0, e^-1] normalized = [0.7311, 0.2689].
        let s = stats(vec![0.0, 1.0], vec![1.0, 1.0]);
        let t = stats(vec![0.0, 1.0], vec![1.0, 1.0]);
        let rep = rc_compensate(&s, &t, Measure::NegL2, 512).unwrap();
        assert!((rep.rho_mu_ts.at2(0, 0) - 0.7311).abs() < 1e-4);
        assert!((rep.rho_mu_ts.at2(0, 1) - 0.2689).abs() < 1e-4);
        assert!((rep.rho_mu_ts.at2(1, 0) - 0.2689).abs() < 1e-4);
        assert!((rep.rho_mu_ts.at2(1, 1) - 0.7311).abs() < 1e-4);
        assert!((rep.cc_mu_t.data()[0] - 0.2689).abs() < 1e-4);
        assert!((rep.cc_mu_t.data()[1] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn rc_rows_are_stochastic_for_all_measures() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for measure in [Measure::NegL2, Measure::NegL1, Measure::NegCosine] {
            let c = 6;
            let m = |rng: &mut ChaCha8Rng| {
                Tensor::from_vec((0..c).map(|_| rng.gen_range(-3.0..3.0)).collect())
            };
            let v = |rng: &mut ChaCha8Rng| {
                Tensor::from_vec((0..c).map(|_| rng.gen_range(0.1..4.0)).collect())
            };
            let s = DomainStats::new(m(&mut rng), v(&mut rng)).unwrap();
            let t = DomainStats::new(m(&mut rng), v(&mut rng)).unwrap();
            let rep = rc_compensate(&s, &t, measure, 512).unwrap();
            for rho in [&rep.rho_mu_ts, &rep.rho_var_ts, &rep.rho_mu_st, &rep.rho_var_st] {
                for i in 0..c {
                    let sum: f64 = (0..c).map(|j| rho.at2(i, j)).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn rc_grouping_matches_ungrouped_when_group_covers_all() {
        let s = stats(vec![0.3, -1.0, 2.0, 0.9], vec![1.0, 0.2, 3.0, 0.7]);
        let t = stats(vec![1.1, 0.0, -0.4, 2.2], vec![0.5, 1.5, 0.9, 2.0]);
        let a = rc_compensate(&s, &t, Measure::NegL2, 4).unwrap();
        let b = rc_compensate(&s, &t, Measure::NegL2, usize::MAX).unwrap();
        assert_eq!(a.rho_mu_ts, b.rho_mu_ts);
        assert_eq!(a.cc_mu_t, b.cc_mu_t);
        assert_eq!(a.cc_var_s, b.cc_var_s);
    }

    #[test]
    fn rc_group_size_one_degenerates_to_identity_rho() {
        let s = stats(vec![0.3, -1.0, 2.0], vec![1.0, 0.2, 3.0]);
        let t = stats(vec![1.1, 0.0, -0.4], vec![0.5, 1.5, 0.9]);
        let rep = rc_compensate(&s, &t, Measure::NegL2, 1).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(rep.rho_mu_ts.at2(i, j), expect);
            }
        }
        assert_eq!(rep.cc_mu_t, s.mu);
        assert_eq!(rep.cc_mu_s, t.mu);
    }

    #[test]
    fn rc_compensatory_variance_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let c = rng.gen_range(1..9);
            let mk = |rng: &mut ChaCha8Rng| {
                DomainStats::new(
                    Tensor::from_vec((0..c).map(|_| rng.gen_range(-5.0..5.0)).collect()),
                    Tensor::from_vec((0..c).map(|_| rng.gen_range(0.0..6.0)).collect()),
                )
                .unwrap()
            };
            let s = mk(&mut rng);
            let t = mk(&mut rng);
            let rep = rc_compensate(&s, &t, Measure::NegL2, 3).unwrap();
            assert!(rep.cc_var_t.data().iter().all(|&v| v >= 0.0));
            assert!(rep.cc_var_s.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn ra_examples() {
        let st = stats(vec![0.0], vec![1.0]);
        let unit = Tensor::ones(&[1]);
        let out = ra_aggregate(&st, &Tensor::from_vec(vec![2.0]), &Tensor::from_vec(vec![3.0]), &unit, &unit).unwrap();
        assert_eq!(out.mu.data(), &[0.0]);
        assert_eq!(out.var.data(), &[1.0]);

        let half = Tensor::full(&[1], 0.5);
        let out = ra_aggregate(&st, &Tensor::from_vec(vec![2.0]), &Tensor::from_vec(vec![3.0]), &half, &half).unwrap();
        assert_eq!(out.mu.data(), &[1.0]);
        assert_eq!(out.var.data(), &[2.0]);

        let st = stats(vec![4.0], vec![1.0]);
        let g = Tensor::full(&[1], 0.75);
        let out = ra_aggregate(&st, &Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![1.0]), &g, &g).unwrap();
        assert_eq!(out.mu.data(), &[3.0]);
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
        Tensor::new(
            vec![n, c, 1, 1],
            (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rn_with_unit_gates_reduces_to_separate_standardization() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, c) = (6, 4);
        let x_s = random_batch(&mut rng, n, c);
        let x_t = random_batch(&mut rng, n, c);
        let mut layer = RnLayerState::new(c, &NormOptions::default()).unwrap();
        layer.gamma = Tensor::from_vec((0..c).map(|_| rng.gen_range(0.5..1.5)).collect());
        layer.beta = Tensor::from_vec((0..c).map(|_| rng.gen_range(-0.5..0.5)).collect());

        let mut tape = Tape::new();
        let xs = tape.leaf(x_s.clone());
        let xt = tape.leaf(x_t.clone());
        let out = rn_forward_train(&mut layer, &mut tape, xs, xt).unwrap();

        for (x, var) in [(&x_s, out.out_s), (&x_t, out.out_t)] {
            let (mu, v) = channel_moments(x).unwrap();
            let expect = standardize_eval(
                x,
                &DomainStats::new(mu, v).unwrap(),
                &layer.gamma,
                &layer.beta,
                layer.epsilon,
            )
            .unwrap();
            assert!(tape.value(var).max_abs_diff(&expect) < 1e-9);
        }
    }

    #[test]
    fn rn_c1_midpoint_closed_form() {
        // C=1 collapses rho to [[1]], so the blended target mean with g=0.5
        // is the plain cross-domain average.
        let x_s = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let x_t = Tensor::new(vec![2, 1, 1, 1], vec![5.0, 9.0]).unwrap();
        let opts = NormOptions { fixed_gate: Some(0.5), ..NormOptions::default() };
        let mut layer = RnLayerState::new(1, &opts).unwrap();
        let mut tape = Tape::new();
        let xs = tape.leaf(x_s);
        let xt = tape.leaf(x_t);
        let out = rn_forward_train(&mut layer, &mut tape, xs, xt).unwrap();
        let rep = out.report.unwrap();

        // mu_s = 2, mu_t = 7: blended target mean 0.5*7 + 0.5*2 = 4.5
        assert!((rep.cc_mu_t.data()[0] - 2.0).abs() < 1e-12);
        let g = 0.5_f64;
        let blended_t = g * 7.0 + (1.0 - g) * 2.0;
        assert!((blended_t - 4.5).abs() < 1e-12);
        // running stats saw exactly that value through the EMA
        let after = 0.9 * 0.0 + 0.1 * blended_t;
        assert!((layer.running_t.mu.data()[0] - after).abs() < 1e-12);
    }

    #[test]
    fn rn_identical_batches_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_batch(&mut rng, 5, 3);
        let mut layer = RnLayerState::new(3, &NormOptions::default()).unwrap();
        let mut tape = Tape::new();
        let xs = tape.leaf(x.clone());
        let xt = tape.leaf(x);
        let out = rn_forward_train(&mut layer, &mut tape, xs, xt).unwrap();
        assert_eq!(tape.value(out.out_s), tape.value(out.out_t));
    }

    #[test]
    fn rn_swap_symmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for measure in [Measure::NegL2, Measure::NegL1, Measure::NegCosine] {
            let c = 4;
            let x_a = random_batch(&mut rng, 6, c);
            let x_b = random_batch(&mut rng, 6, c);
            let shared_gate: Vec<f64> = (0..c).map(|_| rng.gen_range(0.55..0.95)).collect();
            let opts = NormOptions { measure, ..NormOptions::default() };

            let run = |first: &Tensor, second: &Tensor| {
                let mut layer = RnLayerState::new(c, &opts).unwrap();
                let g = Tensor::from_vec(shared_gate.clone());
                layer.gates = GateParams {
                    g_mu_s: g.clone(),
                    g_var_s: g.clone(),
                    g_mu_t: g.clone(),
                    g_var_t: g,
                };
                let mut tape = Tape::new();
                let xs = tape.leaf(first.clone());
                let xt = tape.leaf(second.clone());
                let out = rn_forward_train(&mut layer, &mut tape, xs, xt).unwrap();
                (
                    tape.value(out.out_s).clone(),
                    tape.value(out.out_t).clone(),
                )
            };

            let (ab_s, ab_t) = run(&x_a, &x_b);
            let (ba_s, ba_t) = run(&x_b, &x_a);
            assert_eq!(ab_s, ba_t);
            assert_eq!(ab_t, ba_s);
        }
    }

    #[test]
    fn rn_eval_uses_running_stats() {
        let mut layer = RnLayerState::new(1, &NormOptions::default()).unwrap();
        layer.running_t =
            DomainStats::new(Tensor::from_vec(vec![2.0]), Tensor::from_vec(vec![4.0])).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 1], vec![4.0]).unwrap();
        let out = rn_forward_eval(&layer, &x, Domain::Target).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rn_alpha_one_makes_eval_reproduce_train_aggregates() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let c = 3;
        let x_s = random_batch(&mut rng, 8, c);
        let x_t = random_batch(&mut rng, 8, c);
        let opts = NormOptions { alpha: 1.0, ..NormOptions::default() };
        let mut layer = RnLayerState::new(c, &opts).unwrap();
        let mut tape = Tape::new();
        let xs = tape.leaf(x_s.clone());
        let xt = tape.leaf(x_t.clone());
        let out = rn_forward_train(&mut layer, &mut tape, xs, xt).unwrap();

        let eval_s = rn_forward_eval(&layer, &x_s, Domain::Source).unwrap();
        assert!(eval_s.max_abs_diff(tape.value(out.out_s)) < 1e-9);
        let eval_t = rn_forward_eval(&layer, &x_t, Domain::Target).unwrap();
        assert!(eval_t.max_abs_diff(tape.value(out.out_t)) < 1e-9);
    }

    #[test]
    fn rn_gradients_reach_inputs_and_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 3;
        let x_s = random_batch(&mut rng, 4, c);
        let x_t = random_batch(&mut rng, 4, c);
        let mut layer = RnLayerState::new(c, &NormOptions::default()).unwrap();
        layer.gates = GateParams::constant(c, 0.8).unwrap();
        let mut tape = Tape::new();
        let xs = tape.leaf(x_s);
        let xt = tape.leaf(x_t);
        let out = rn_forward_train(&mut layer, &mut tape, xs, xt).unwrap();
        let s1 = tape.sum_all(out.out_s);
        let w = tape.leaf(Tensor::full(&[4, c, 1, 1], 0.3));
        let weighted = tape.mul(out.out_t, w).unwrap();
        let s2 = tape.sum_all(weighted);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();

        assert!(grads.wrt(xs).is_some());
        assert!(grads.wrt(xt).is_some());
        for b in &out.params {
            assert!(grads.wrt(b.var).is_some(), "no grad for {}", b.meta.name);
        }
        // batch statistics sit inside the differentiable path
        for &node in &out.stat_nodes {
            let g = grads.dense(node, tape.value(node).shape());
            assert!(g.data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn rn_layer_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = 4;
        let opts = NormOptions { measure: Measure::NegL1, group_size: 2, ..NormOptions::default() };
        let mut layer = NormLayer::new(NormKind::Rn, c, &opts).unwrap();
        let mut tape = Tape::new();
        let xs = tape.leaf(random_batch(&mut rng, 5, c));
        let xt = tape.leaf(random_batch(&mut rng, 5, c));
        layer.forward_train(&mut tape, xs, xt).unwrap();

        let ck = layer.to_checkpoint();
        let json = serde_json::to_string(&ck).unwrap();
        let back: crate::norm::LayerCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = NormLayer::from_checkpoint(&back).unwrap();
        match (&layer, &restored) {
            (NormLayer::Rn(a), NormLayer::Rn(b)) => {
                assert_eq!(a.running_s, b.running_s);
                assert_eq!(a.running_t, b.running_t);
                assert_eq!(a.measure, b.measure);
                assert_eq!(a.group_size, b.group_size);
            }
            _ => panic!("kind changed through checkpoint"),
        }
    }
}
