//! Baseline normalizers sharing the reciprocal layer's interface: joint
//! batch norm, AdaBN, AutoDIAL-style mixing, domain-specific batch norm, and
//! transferable norm with channel attention.
//!
//! Each baseline exposes a pure graph builder over tape variables plus a
//! stateful wrapper that binds parameters and maintains running statistics.

use crate::error::{Error, Result};
use crate::norm::{
    ema_update, standardize_eval, tape_moments, Domain, DomainStats, NormOptions, NormTrainOut,
};
use crate::params::{ParamBinding, ParamMeta};
use crate::tape::{Tape, Var};
use crate::tensor::{channel_moments, dims4, Tensor};

fn bind_affine(tape: &mut Tape, gamma: &Tensor, beta: &Tensor) -> (Var, Var) {
    (tape.leaf(gamma.clone()), tape.leaf(beta.clone()))
}

fn affine_bindings(gamma: Var, beta: Var) -> Vec<ParamBinding> {
    vec![
        ParamBinding { var: gamma, meta: ParamMeta::affine("gamma") },
        ParamBinding { var: beta, meta: ParamMeta::affine("beta") },
    ]
}

fn stats_of(tape: &Tape, mu: Var, var: Var) -> Result<DomainStats> {
    DomainStats::new(tape.value(mu).clone(), tape.value(var).clone())
}

pub struct BnGraph {
    pub out_s: Var,
    pub out_t: Var,
    pub mu: Var,
    pub var: Var,
}

/// Joint batch norm: one set of moments over the concatenated batches.
pub fn bn_train_graph(
    tape: &mut Tape,
    x_s: Var,
    x_t: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<BnGraph> {
    let (n_s, _, _, _) = dims4(tape.value(x_s))?;
    let (n_t, _, _, _) = dims4(tape.value(x_t))?;
    let joint = tape.concat0(&[x_s, x_t])?;
    let mu = tape.channel_mean(joint)?;
    let var = tape.channel_var(joint, mu)?;
    let out = tape.channel_norm_affine(joint, mu, var, gamma, beta, eps)?;
    let out_s = tape.narrow0(out, 0, n_s)?;
    let out_t = tape.narrow0(out, n_s, n_t)?;
    Ok(BnGraph { out_s, out_t, mu, var })
}

pub struct BnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_s: DomainStats,
    pub running_t: DomainStats,
    pub epsilon: f64,
    pub alpha: f64,
}

impl BnState {
    pub fn new(c: usize, opts: &NormOptions) -> Self {
        BnState {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            running_s: DomainStats::init(c),
            running_t: DomainStats::init(c),
            epsilon: opts.epsilon,
            alpha: opts.alpha,
        }
    }

    pub fn forward_train(&mut self, tape: &mut Tape, x_s: Var, x_t: Var) -> Result<NormTrainOut> {
        let (gamma, beta) = bind_affine(tape, &self.gamma, &self.beta);
        let g = bn_train_graph(tape, x_s, x_t, gamma, beta, self.epsilon)?;
        // both domains track the same joint statistics
        let batch = stats_of(tape, g.mu, g.var)?;
        self.running_s = ema_update(&self.running_s, &batch, self.alpha)?;
        self.running_t = ema_update(&self.running_t, &batch, self.alpha)?;
        Ok(NormTrainOut {
            out_s: g.out_s,
            out_t: g.out_t,
            params: affine_bindings(gamma, beta),
            stat_nodes: vec![g.mu, g.var],
            report: None,
        })
    }

    pub fn forward_eval(&self, x: &Tensor, domain: Domain) -> Result<Tensor> {
        let stats = match domain {
            Domain::Source => &self.running_s,
            Domain::Target => &self.running_t,
        };
        standardize_eval(x, stats, &self.gamma, &self.beta, self.epsilon)
    }
}

pub struct AdaBnGraph {
    pub out_s: Var,
    pub out_t: Var,
    pub mu_s: Var,
    pub var_s: Var,
}

/// AdaBN training: source statistics normalize both batches. The target
/// branch only replaces statistics at evaluation time.
pub fn adabn_train_graph(
    tape: &mut Tape,
    x_s: Var,
    x_t: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<AdaBnGraph> {
    let mu_s = tape.channel_mean(x_s)?;
    let var_s = tape.channel_var(x_s, mu_s)?;
    let out_s = tape.channel_norm_affine(x_s, mu_s, var_s, gamma, beta, eps)?;
    let out_t = tape.channel_norm_affine(x_t, mu_s, var_s, gamma, beta, eps)?;
    Ok(AdaBnGraph { out_s, out_t, mu_s, var_s })
}

pub struct AdaBnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_s: DomainStats,
    pub running_t: DomainStats,
    pub epsilon: f64,
    pub alpha: f64,
}

impl AdaBnState {
    pub fn new(c: usize, opts: &NormOptions) -> Self {
        AdaBnState {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            running_s: DomainStats::init(c),
            running_t: DomainStats::init(c),
            epsilon: opts.epsilon,
            alpha: opts.alpha,
        }
    }

    pub fn forward_train(&mut self, tape: &mut Tape, x_s: Var, x_t: Var) -> Result<NormTrainOut> {
        let (gamma, beta) = bind_affine(tape, &self.gamma, &self.beta);
        let g = adabn_train_graph(tape, x_s, x_t, gamma, beta, self.epsilon)?;
        let batch_s = stats_of(tape, g.mu_s, g.var_s)?;
        self.running_s = ema_update(&self.running_s, &batch_s, self.alpha)?;
        // target moments are tracked off the graph; they never touch the
        // training forward
        let (bmu_t, bvar_t) = channel_moments(tape.value(x_t))?;
        let batch_t = DomainStats::new(bmu_t, bvar_t)?;
        self.running_t = ema_update(&self.running_t, &batch_t, self.alpha)?;
        Ok(NormTrainOut {
            out_s: g.out_s,
            out_t: g.out_t,
            params: affine_bindings(gamma, beta),
            stat_nodes: vec![g.mu_s, g.var_s],
            report: None,
        })
    }

    pub fn forward_eval(&self, x: &Tensor, domain: Domain) -> Result<Tensor> {
        let stats = match domain {
            Domain::Source => &self.running_s,
            Domain::Target => &self.running_t,
        };
        standardize_eval(x, stats, &self.gamma, &self.beta, self.epsilon)
    }
}

pub struct AutoDialGraph {
    pub out_s: Var,
    pub out_t: Var,
    pub mu_s: Var,
    pub var_s: Var,
    pub mu_t: Var,
    pub var_t: Var,
    pub mix_mu_s: Var,
    pub mix_var_s: Var,
    pub mix_mu_t: Var,
    pub mix_var_t: Var,
}

/// Domain alignment by per-channel statistic mixing: each domain is
/// normalized by `a*own + (1-a)*other` moments under a shared affine.
pub fn autodial_train_graph(
    tape: &mut Tape,
    x_s: Var,
    x_t: Var,
    gamma: Var,
    beta: Var,
    mix: Var,
    eps: f64,
) -> Result<AutoDialGraph> {
    let (mu_s, var_s, mu_t, var_t, _) = tape_moments(tape, x_s, x_t)?;
    let other = tape.affine(mix, -1.0, 1.0);
    let mut blend = |own: Var, opposite: Var| -> Result<Var> {
        let keep = tape.mul(mix, own)?;
        let borrow = tape.mul(other, opposite)?;
        tape.add(keep, borrow)
    };
    let mix_mu_s = blend(mu_s, mu_t)?;
    let mix_var_s = blend(var_s, var_t)?;
    let mix_mu_t = blend(mu_t, mu_s)?;
    let mix_var_t = blend(var_t, var_s)?;
    let out_s = tape.channel_norm_affine(x_s, mix_mu_s, mix_var_s, gamma, beta, eps)?;
    let out_t = tape.channel_norm_affine(x_t, mix_mu_t, mix_var_t, gamma, beta, eps)?;
    Ok(AutoDialGraph {
        out_s,
        out_t,
        mu_s,
        var_s,
        mu_t,
        var_t,
        mix_mu_s,
        mix_var_s,
        mix_mu_t,
        mix_var_t,
    })
}

pub struct AutoDialState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mix: Tensor,
    pub running_s: DomainStats,
    pub running_t: DomainStats,
    pub epsilon: f64,
    pub alpha: f64,
}

impl AutoDialState {
    pub fn new(c: usize, opts: &NormOptions) -> Self {
        AutoDialState {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            mix: Tensor::ones(&[c]),
            running_s: DomainStats::init(c),
            running_t: DomainStats::init(c),
            epsilon: opts.epsilon,
            alpha: opts.alpha,
        }
    }

    pub fn forward_train(&mut self, tape: &mut Tape, x_s: Var, x_t: Var) -> Result<NormTrainOut> {
        let (gamma, beta) = bind_affine(tape, &self.gamma, &self.beta);
        let mix = tape.leaf(self.mix.clone());
        let g = autodial_train_graph(tape, x_s, x_t, gamma, beta, mix, self.epsilon)?;
        let mut params = affine_bindings(gamma, beta);
        params.push(ParamBinding { var: mix, meta: ParamMeta::gate("mix", false) });
        // running estimates follow the mixed statistics each domain actually
        // normalized with
        let mixed_s = stats_of(tape, g.mix_mu_s, g.mix_var_s)?;
        let mixed_t = stats_of(tape, g.mix_mu_t, g.mix_var_t)?;
        self.running_s = ema_update(&self.running_s, &mixed_s, self.alpha)?;
        self.running_t = ema_update(&self.running_t, &mixed_t, self.alpha)?;
        Ok(NormTrainOut {
            out_s: g.out_s,
            out_t: g.out_t,
            params,
            stat_nodes: vec![g.mu_s, g.var_s, g.mu_t, g.var_t],
            report: None,
        })
    }

    pub fn forward_eval(&self, x: &Tensor, domain: Domain) -> Result<Tensor> {
        let stats = match domain {
            Domain::Source => &self.running_s,
            Domain::Target => &self.running_t,
        };
        standardize_eval(x, stats, &self.gamma, &self.beta, self.epsilon)
    }
}

pub struct DsbnGraph {
    pub out_s: Var,
    pub out_t: Var,
    pub mu_s: Var,
    pub var_s: Var,
    pub mu_t: Var,
    pub var_t: Var,
}

/// Domain-specific batch norm: each domain keeps its own statistics and its
/// own affine.
pub fn dsbn_train_graph(
    tape: &mut Tape,
    x_s: Var,
    x_t: Var,
    gamma_s: Var,
    beta_s: Var,
    gamma_t: Var,
    beta_t: Var,
    eps: f64,
) -> Result<DsbnGraph> {
    let (mu_s, var_s, mu_t, var_t, _) = tape_moments(tape, x_s, x_t)?;
    let out_s = tape.channel_norm_affine(x_s, mu_s, var_s, gamma_s, beta_s, eps)?;
    let out_t = tape.channel_norm_affine(x_t, mu_t, var_t, gamma_t, beta_t, eps)?;
    Ok(DsbnGraph { out_s, out_t, mu_s, var_s, mu_t, var_t })
}

pub struct DsbnState {
    pub gamma_s: Tensor,
    pub beta_s: Tensor,
    pub gamma_t: Tensor,
    pub beta_t: Tensor,
    pub running_s: DomainStats,
    pub running_t: DomainStats,
    pub epsilon: f64,
    pub alpha: f64,
}

impl DsbnState {
    pub fn new(c: usize, opts: &NormOptions) -> Self {
        DsbnState {
            gamma_s: Tensor::ones(&[c]),
            beta_s: Tensor::zeros(&[c]),
            gamma_t: Tensor::ones(&[c]),
            beta_t: Tensor::zeros(&[c]),
            running_s: DomainStats::init(c),
            running_t: DomainStats::init(c),
            epsilon: opts.epsilon,
            alpha: opts.alpha,
        }
    }

    pub fn forward_train(&mut self, tape: &mut Tape, x_s: Var, x_t: Var) -> Result<NormTrainOut> {
        let (gamma_s, beta_s) = bind_affine(tape, &self.gamma_s, &self.beta_s);
        let (gamma_t, beta_t) = bind_affine(tape, &self.gamma_t, &self.beta_t);
        let g = dsbn_train_graph(tape, x_s, x_t, gamma_s, beta_s, gamma_t, beta_t, self.epsilon)?;
        let params = vec![
            ParamBinding { var: gamma_s, meta: ParamMeta::affine("gamma_s") },
            ParamBinding { var: beta_s, meta: ParamMeta::affine("beta_s") },
            ParamBinding { var: gamma_t, meta: ParamMeta::affine("gamma_t") },
            ParamBinding { var: beta_t, meta: ParamMeta::affine("beta_t") },
        ];
        let batch_s = stats_of(tape, g.mu_s, g.var_s)?;
        let batch_t = stats_of(tape, g.mu_t, g.var_t)?;
        self.running_s = ema_update(&self.running_s, &batch_s, self.alpha)?;
        self.running_t = ema_update(&self.running_t, &batch_t, self.alpha)?;
        Ok(NormTrainOut {
            out_s: g.out_s,
            out_t: g.out_t,
            params,
            stat_nodes: vec![g.mu_s, g.var_s, g.mu_t, g.var_t],
            report: None,
        })
    }

    pub fn forward_eval(&self, x: &Tensor, domain: Domain) -> Result<Tensor> {
        let (stats, gamma, beta) = match domain {
            Domain::Source => (&self.running_s, &self.gamma_s, &self.beta_s),
            Domain::Target => (&self.running_t, &self.gamma_t, &self.beta_t),
        };
        standardize_eval(x, stats, gamma, beta, self.epsilon)
    }
}

/// Channel transferability weights from per-domain statistics. Channels
/// whose standardized means agree across domains get attention near or above
/// one; discrepant channels are downweighted. Weights average to one.
pub fn tn_attention(stats_s: &DomainStats, stats_t: &DomainStats, eps: f64) -> Result<Tensor> {
    let c = stats_s.channels();
    if stats_t.channels() != c {
        return Err(Error::invalid("tn_attention: channel counts differ"));
    }
    let mut inv = vec![0.0; c];
    for j in 0..c {
        let rs = stats_s.mu.data()[j] / (stats_s.var.data()[j] + eps).sqrt();
        let rt = stats_t.mu.data()[j] / (stats_t.var.data()[j] + eps).sqrt();
        let d = (rs - rt).abs();
        inv[j] = 1.0 / (1.0 + d);
    }
    let total: f64 = inv.iter().sum();
    Ok(Tensor::from_vec(
        inv.iter().map(|&v| c as f64 * v / total).collect(),
    ))
}

fn one_plus(a: &Tensor) -> Tensor {
    a.map(|v| 1.0 + v)
}

pub struct TnGraph {
    pub out_s: Var,
    pub out_t: Var,
    pub mu_s: Var,
    pub var_s: Var,
    pub mu_t: Var,
    pub var_t: Var,
}

/// Transferable norm training forward. Moments are computed on the tape and
/// then detached, so normalization statistics carry no gradient; only the
/// affine and the inputs do. The attention scale is a constant built from
/// the detached values.
pub fn tn_train_graph(
    tape: &mut Tape,
    x_s: Var,
    x_t: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<TnGraph> {
    let (mu_s, var_s, mu_t, var_t, _) = tape_moments(tape, x_s, x_t)?;
    let dmu_s = tape.detach(mu_s);
    let dvar_s = tape.detach(var_s);
    let dmu_t = tape.detach(mu_t);
    let dvar_t = tape.detach(var_t);

    let batch_s = DomainStats::new(tape.value(dmu_s).clone(), tape.value(dvar_s).clone())?;
    let batch_t = DomainStats::new(tape.value(dmu_t).clone(), tape.value(dvar_t).clone())?;
    let scale = one_plus(&tn_attention(&batch_s, &batch_t, eps)?);

    let norm_s = tape.channel_norm_affine(x_s, dmu_s, dvar_s, gamma, beta, eps)?;
    let norm_t = tape.channel_norm_affine(x_t, dmu_t, dvar_t, gamma, beta, eps)?;
    let out_s = tape.scale_channels_const(norm_s, &scale)?;
    let out_t = tape.scale_channels_const(norm_t, &scale)?;
    Ok(TnGraph { out_s, out_t, mu_s, var_s, mu_t, var_t })
}

/// Fixed-statistics variant for gradient verification: statistics enter as
/// plain leaves instead of being computed from the batch, which makes the
/// function differentiable in exactly the parameters training updates.
pub fn tn_frozen_graph(
    tape: &mut Tape,
    x_s: Var,
    x_t: Var,
    mu_s: Var,
    var_s: Var,
    mu_t: Var,
    var_t: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, Var)> {
    let stats_s = DomainStats::new(tape.value(mu_s).clone(), tape.value(var_s).clone())?;
    let stats_t = DomainStats::new(tape.value(mu_t).clone(), tape.value(var_t).clone())?;
    let scale = one_plus(&tn_attention(&stats_s, &stats_t, eps)?);
    let norm_s = tape.channel_norm_affine(x_s, mu_s, var_s, gamma, beta, eps)?;
    let norm_t = tape.channel_norm_affine(x_t, mu_t, var_t, gamma, beta, eps)?;
    let out_s = tape.scale_channels_const(norm_s, &scale)?;
    let out_t = tape.scale_channels_const(norm_t, &scale)?;
    Ok((out_s, out_t))
}

pub struct TnState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_s: DomainStats,
    pub running_t: DomainStats,
    pub epsilon: f64,
    pub alpha: f64,
}

impl TnState {
    pub fn new(c: usize, opts: &NormOptions) -> Self {
        TnState {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
            running_s: DomainStats::init(c),
            running_t: DomainStats::init(c),
            epsilon: opts.epsilon,
            alpha: opts.alpha,
        }
    }

    pub fn forward_train(&mut self, tape: &mut Tape, x_s: Var, x_t: Var) -> Result<NormTrainOut> {
        let (gamma, beta) = bind_affine(tape, &self.gamma, &self.beta);
        let g = tn_train_graph(tape, x_s, x_t, gamma, beta, self.epsilon)?;
        let batch_s = stats_of(tape, g.mu_s, g.var_s)?;
        let batch_t = stats_of(tape, g.mu_t, g.var_t)?;
        self.running_s = ema_update(&self.running_s, &batch_s, self.alpha)?;
        self.running_t = ema_update(&self.running_t, &batch_t, self.alpha)?;
        Ok(NormTrainOut {
            out_s: g.out_s,
            out_t: g.out_t,
            params: affine_bindings(gamma, beta),
            stat_nodes: vec![g.mu_s, g.var_s, g.mu_t, g.var_t],
            report: None,
        })
    }

    pub fn forward_eval(&self, x: &Tensor, domain: Domain) -> Result<Tensor> {
        let stats = match domain {
            Domain::Source => &self.running_s,
            Domain::Target => &self.running_t,
        };
        let base = standardize_eval(x, stats, &self.gamma, &self.beta, self.epsilon)?;
        let scale = one_plus(&tn_attention(&self.running_s, &self.running_t, self.epsilon)?);
        let (n, c, h, w) = dims4(&base)?;
        let mut out = base;
        let plane = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let base_idx = (ni * c + ci) * plane;
                for p in 0..plane {
                    out.data_mut()[base_idx + p] *= scale.data()[ci];
                }
            }
        }
        Ok(out)
    }
}
