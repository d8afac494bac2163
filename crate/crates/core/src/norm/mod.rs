//! Normalization layers for two-domain training.
//!
//! `rn` holds the reciprocal layer; `baselines` holds BN, AdaBN, AutoDIAL,
//! DSBN, and TN. All layers expose a tape-building train forward (both
//! domains at once) and a plain eval forward driven by running statistics.

pub mod baselines;
pub mod rn;

use crate::error::{Error, Result};
use crate::params::ParamBinding;
use crate::tape::{Tape, Var};
use crate::tensor::{dims4, Tensor};
use serde::{Deserialize, Serialize};

pub use baselines::{AdaBnState, AutoDialState, BnState, DsbnState, TnState};
pub use rn::{ra_aggregate, rc_compensate, rn_forward_eval, rn_forward_train, RnLayerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(self) -> char {
        match self {
            Domain::Source => 's',
            Domain::Target => 't',
        }
    }
}

/// Correlation measure used by reciprocal compensation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    /// Negative squared l2 distance between scalar statistics (default).
    NegL2,
    /// Negative l1 distance between scalar statistics.
    NegL1,
    /// Cosine similarity minus one over stacked (mean, variance) pairs.
    NegCosine,
}

impl Measure {
    pub fn as_str(self) -> &'static str {
        match self {
            Measure::NegL2 => "neg_l2",
            Measure::NegL1 => "neg_l1",
            Measure::NegCosine => "neg_cos",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "neg_l2" => Ok(Measure::NegL2),
            "neg_l1" => Ok(Measure::NegL1),
            "neg_cos" => Ok(Measure::NegCosine),
            other => Err(Error::invalid(format!(
                "unknown measure '{other}' (expected neg_l2, neg_l1, or neg_cos)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Bn,
    AdaBn,
    AutoDial,
    Dsbn,
    Tn,
    Rn,
}

impl NormKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::AdaBn => "adabn",
            NormKind::AutoDial => "autodial",
            NormKind::Dsbn => "dsbn",
            NormKind::Tn => "tn",
            NormKind::Rn => "rn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bn" => Ok(NormKind::Bn),
            "adabn" => Ok(NormKind::AdaBn),
            "autodial" => Ok(NormKind::AutoDial),
            "dsbn" => Ok(NormKind::Dsbn),
            "tn" => Ok(NormKind::Tn),
            "rn" => Ok(NormKind::Rn),
            other => Err(Error::invalid(format!(
                "unknown normalizer '{other}' (expected bn, adabn, autodial, dsbn, tn, or rn)"
            ))),
        }
    }
}

/// Construction options shared by all layer kinds. Fields irrelevant to a
/// kind (measure and group_size outside RN, fixed_gate outside RN) are
/// ignored by it.
#[derive(Clone, Copy, Debug)]
pub struct NormOptions {
    pub epsilon: f64,
    pub alpha: f64,
    pub group_size: usize,
    pub measure: Measure,
    pub fixed_gate: Option<f64>,
}

impl Default for NormOptions {
    fn default() -> Self {
        NormOptions {
            epsilon: 1e-5,
            alpha: 0.1,
            group_size: 512,
            measure: Measure::NegL2,
            fixed_gate: None,
        }
    }
}

impl NormOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1]"));
        }
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be positive"));
        }
        if let Some(g) = self.fixed_gate {
            if !(0.5..=1.0).contains(&g) {
                return Err(Error::invalid("fixed_gate must lie in [0.5, 1]"));
            }
        }
        Ok(())
    }
}

/// Per-channel mean and variance of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub mu: Tensor,
    pub var: Tensor,
}

impl DomainStats {
    /// BN-style defaults: zero means, unit variances.
    pub fn init(c: usize) -> Self {
        DomainStats {
            mu: Tensor::zeros(&[c]),
            var: Tensor::ones(&[c]),
        }
    }

    pub fn new(mu: Tensor, var: Tensor) -> Result<Self> {
        if mu.shape().len() != 1 || mu.shape() != var.shape() || mu.numel() == 0 {
            return Err(Error::invalid(format!(
                "stats must be equal-length rank-1 vectors, got {:?} and {:?}",
                mu.shape(),
                var.shape()
            )));
        }
        if var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("variance entries must be nonnegative"));
        }
        Ok(DomainStats { mu, var })
    }

    pub fn channels(&self) -> usize {
        self.mu.numel()
    }
}

/// `new = (1 - alpha) * running + alpha * batch`, per channel.
pub fn ema_update(running: &DomainStats, batch: &DomainStats, alpha: f64) -> Result<DomainStats> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("ema_update: alpha must lie in (0, 1]"));
    }
    if running.channels() != batch.channels() {
        return Err(Error::invalid(format!(
            "ema_update: {} running channels vs {} batch channels",
            running.channels(),
            batch.channels()
        )));
    }
    let mix = |r: &Tensor, b: &Tensor| r.scale(1.0 - alpha).add(&b.scale(alpha)).unwrap();
    Ok(DomainStats {
        mu: mix(&running.mu, &batch.mu),
        var: mix(&running.var, &batch.var),
    })
}

/// The four gate vectors of reciprocal aggregation, each in `[0.5, 1]^C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub g_mu_s: Tensor,
    pub g_var_s: Tensor,
    pub g_mu_t: Tensor,
    pub g_var_t: Tensor,
}

impl GateParams {
    pub fn unit(c: usize) -> Self {
        GateParams {
            g_mu_s: Tensor::ones(&[c]),
            g_var_s: Tensor::ones(&[c]),
            g_mu_t: Tensor::ones(&[c]),
            g_var_t: Tensor::ones(&[c]),
        }
    }

    pub fn constant(c: usize, value: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&value) {
            return Err(Error::invalid("gate values must lie in [0.5, 1]"));
        }
        Ok(GateParams {
            g_mu_s: Tensor::full(&[c], value),
            g_var_s: Tensor::full(&[c], value),
            g_mu_t: Tensor::full(&[c], value),
            g_var_t: Tensor::full(&[c], value),
        })
    }

    pub fn all_in_range(&self) -> bool {
        [&self.g_mu_s, &self.g_var_s, &self.g_mu_t, &self.g_var_t]
            .iter()
            .all(|t| t.data().iter().all(|&v| (0.5..=1.0).contains(&v)))
    }
}

/// Everything reciprocal compensation produced for one forward pass:
/// correlation score matrices, compensatory statistics, and the gate values
/// in force when it ran.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rho_mu_ts: Tensor,
    pub rho_var_ts: Tensor,
    pub rho_mu_st: Tensor,
    pub rho_var_st: Tensor,
    pub cc_mu_t: Tensor,
    pub cc_var_t: Tensor,
    pub cc_mu_s: Tensor,
    pub cc_var_s: Tensor,
    pub gates: GateParams,
}

/// Result of a train-mode forward: per-domain outputs, the parameters bound
/// onto the tape (in the layer's canonical order), the pre-detach statistic
/// nodes, and the correlation report when the layer computes one.
pub struct NormTrainOut {
    pub out_s: Var,
    pub out_t: Var,
    pub params: Vec<ParamBinding>,
    pub stat_nodes: Vec<Var>,
    pub report: Option<CorrelationReport>,
}

/// Contiguous channel groups of at most `group_size`.
pub(crate) fn partition_channels(c: usize, group_size: usize) -> Vec<(usize, usize)> {
    let mut groups = Vec::new();
    let mut start = 0;
    while start < c {
        let len = group_size.min(c - start);
        groups.push((start, len));
        start += len;
    }
    groups
}

/// Eval-path standardization: `gamma*(x - mu)/sqrt(var + eps) + beta` with
/// fixed statistics, no tape involved.
pub(crate) fn standardize_eval(
    x: &Tensor,
    stats: &DomainStats,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x)?;
    if stats.channels() != c || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::invalid(format!(
            "standardize_eval: channel mismatch for input with C={c}"
        )));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let istd = 1.0 / (stats.var.data()[ci] + eps).sqrt();
            let g = gamma.data()[ci];
            let b = beta.data()[ci];
            let mu = stats.mu.data()[ci];
            let base = (ni * c + ci) * plane;
            for k in 0..plane {
                out.data_mut()[base + k] = g * (x.data()[base + k] - mu) * istd + b;
            }
        }
    }
    Ok(out)
}

/// Batch moments of both domain inputs as tape nodes, with shape checks.
pub(crate) fn tape_moments(
    tape: &mut Tape,
    x_s: Var,
    x_t: Var,
) -> Result<(Var, Var, Var, Var, usize)> {
    let (_, c_s, _, _) = dims4(tape.value(x_s))?;
    let (_, c_t, _, _) = dims4(tape.value(x_t))?;
    if c_s != c_t {
        return Err(Error::invalid(format!(
            "domain inputs disagree on channels: {c_s} vs {c_t}"
        )));
    }
    let mu_s = tape.channel_mean(x_s)?;
    let var_s = tape.channel_var(x_s, mu_s)?;
    let mu_t = tape.channel_mean(x_t)?;
    let var_t = tape.channel_var(x_t, mu_t)?;
    Ok((mu_s, var_s, mu_t, var_t, c_s))
}

/// JSON checkpoint for a single normalization layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub kind: String,
    #[serde(rename = "C")]
    pub c: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub group_size: usize,
    pub measure: String,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_t: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_t: Option<Vec<f64>>,
    pub gates: LayerGates,
    pub running_s: StatsCheckpoint,
    pub running_t: StatsCheckpoint,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LayerGates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_mu_s: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_var_s: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_mu_t: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_var_t: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsCheckpoint {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl StatsCheckpoint {
    pub fn from_stats(s: &DomainStats) -> Self {
        StatsCheckpoint {
            mu: s.mu.data().to_vec(),
            var: s.var.data().to_vec(),
        }
    }

    pub fn to_stats(&self, c: usize) -> Result<DomainStats> {
        if self.mu.len() != c || self.var.len() != c {
            return Err(Error::invalid(format!(
                "checkpoint stats expect {c} channels, got mu={} var={}",
                self.mu.len(),
                self.var.len()
            )));
        }
        DomainStats::new(
            Tensor::from_vec(self.mu.clone()),
            Tensor::from_vec(self.var.clone()),
        )
    }
}

pub(crate) fn vec_c(label: &str, v: &[f64], c: usize) -> Result<Tensor> {
    if v.len() != c {
        return Err(Error::invalid(format!(
            "checkpoint field {label} expects {c} entries, got {}",
            v.len()
        )));
    }
    Ok(Tensor::from_vec(v.to_vec()))
}

/// One normalization layer of any supported kind.
pub enum NormLayer {
    Bn(BnState),
    AdaBn(AdaBnState),
    AutoDial(AutoDialState),
    Dsbn(DsbnState),
    Tn(TnState),
    Rn(RnLayerState),
}

impl NormLayer {
    pub fn new(kind: NormKind, c: usize, opts: &NormOptions) -> Result<Self> {
        opts.validate()?;
        if c == 0 {
            return Err(Error::invalid("normalization layer needs C >= 1"));
        }
        Ok(match kind {
            NormKind::Bn => NormLayer::Bn(BnState::new(c, opts)),
            NormKind::AdaBn => NormLayer::AdaBn(AdaBnState::new(c, opts)),
            NormKind::AutoDial => NormLayer::AutoDial(AutoDialState::new(c, opts)),
            NormKind::Dsbn => NormLayer::Dsbn(DsbnState::new(c, opts)),
            NormKind::Tn => NormLayer::Tn(TnState::new(c, opts)),
            NormKind::Rn => NormLayer::Rn(RnLayerState::new(c, opts)?),
        })
    }

    pub fn kind(&self) -> NormKind {
        match self {
            NormLayer::Bn(_) => NormKind::Bn,
            NormLayer::AdaBn(_) => NormKind::AdaBn,
            NormLayer::AutoDial(_) => NormKind::AutoDial,
            NormLayer::Dsbn(_) => NormKind::Dsbn,
            NormLayer::Tn(_) => NormKind::Tn,
            NormLayer::Rn(_) => NormKind::Rn,
        }
    }

    /// The (source, target) running statistics the eval path normalizes with.
    pub fn running_stats(&self) -> (&DomainStats, &DomainStats) {
        match self {
            NormLayer::Bn(s) => (&s.running_s, &s.running_t),
            NormLayer::AdaBn(s) => (&s.running_s, &s.running_t),
            NormLayer::AutoDial(s) => (&s.running_s, &s.running_t),
            NormLayer::Dsbn(s) => (&s.running_s, &s.running_t),
            NormLayer::Tn(s) => (&s.running_s, &s.running_t),
            NormLayer::Rn(s) => (&s.running_s, &s.running_t),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            NormLayer::Bn(s) => s.gamma.numel(),
            NormLayer::AdaBn(s) => s.gamma.numel(),
            NormLayer::AutoDial(s) => s.gamma.numel(),
            NormLayer::Dsbn(s) => s.gamma_s.numel(),
            NormLayer::Tn(s) => s.gamma.numel(),
            NormLayer::Rn(s) => s.gamma.numel(),
        }
    }

    /// Train-mode forward over both domain batches. Binds this layer's
    /// parameters as tape leaves and updates running statistics.
    pub fn forward_train(&mut self, tape: &mut Tape, x_s: Var, x_t: Var) -> Result<NormTrainOut> {
        match self {
            NormLayer::Bn(s) => s.forward_train(tape, x_s, x_t),
            NormLayer::AdaBn(s) => s.forward_train(tape, x_s, x_t),
            NormLayer::AutoDial(s) => s.forward_train(tape, x_s, x_t),
            NormLayer::Dsbn(s) => s.forward_train(tape, x_s, x_t),
            NormLayer::Tn(s) => s.forward_train(tape, x_s, x_t),
            NormLayer::Rn(s) => rn::rn_forward_train(s, tape, x_s, x_t),
        }
    }

    /// Eval-mode forward: running statistics only, no state mutation.
    pub fn forward_eval(&self, x: &Tensor, domain: Domain) -> Result<Tensor> {
        match self {
            NormLayer::Bn(s) => s.forward_eval(x, domain),
            NormLayer::AdaBn(s) => s.forward_eval(x, domain),
            NormLayer::AutoDial(s) => s.forward_eval(x, domain),
            NormLayer::Dsbn(s) => s.forward_eval(x, domain),
            NormLayer::Tn(s) => s.forward_eval(x, domain),
            NormLayer::Rn(s) => rn::rn_forward_eval(s, x, domain),
        }
    }

    /// Mutable views of the learnable tensors, in the same order
    /// `forward_train` binds them.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            NormLayer::Bn(s) => vec![("gamma", &mut s.gamma), ("beta", &mut s.beta)],
            NormLayer::AdaBn(s) => vec![("gamma", &mut s.gamma), ("beta", &mut s.beta)],
            NormLayer::AutoDial(s) => vec![
                ("gamma", &mut s.gamma),
                ("beta", &mut s.beta),
                ("mix", &mut s.mix),
            ],
            NormLayer::Dsbn(s) => vec![
                ("gamma_s", &mut s.gamma_s),
                ("beta_s", &mut s.beta_s),
                ("gamma_t", &mut s.gamma_t),
                ("beta_t", &mut s.beta_t),
            ],
            NormLayer::Tn(s) => vec![("gamma", &mut s.gamma), ("beta", &mut s.beta)],
            NormLayer::Rn(s) => vec![
                ("gamma", &mut s.gamma),
                ("beta", &mut s.beta),
                ("g_mu_s", &mut s.gates.g_mu_s),
                ("g_var_s", &mut s.gates.g_var_s),
                ("g_mu_t", &mut s.gates.g_mu_t),
                ("g_var_t", &mut s.gates.g_var_t),
            ],
        }
    }

    pub fn to_checkpoint(&self) -> LayerCheckpoint {
        let c = self.channels();
        let mut ck = LayerCheckpoint {
            kind: self.kind().as_str().to_string(),
            c,
            epsilon: 1e-5,
            alpha: 0.1,
            group_size: 512,
            measure: Measure::NegL2.as_str().to_string(),
            gamma: vec![],
            beta: vec![],
            gamma_t: None,
            beta_t: None,
            gates: LayerGates::default(),
            running_s: StatsCheckpoint { mu: vec![], var: vec![] },
            running_t: StatsCheckpoint { mu: vec![], var: vec![] },
        };
        match self {
            NormLayer::Bn(s) => {
                ck.epsilon = s.epsilon;
                ck.alpha = s.alpha;
                ck.gamma = s.gamma.data().to_vec();
                ck.beta = s.beta.data().to_vec();
                ck.running_s = StatsCheckpoint::from_stats(&s.running_s);
                ck.running_t = StatsCheckpoint::from_stats(&s.running_t);
            }
            NormLayer::AdaBn(s) => {
                ck.epsilon = s.epsilon;
                ck.alpha = s.alpha;
                ck.gamma = s.gamma.data().to_vec();
                ck.beta = s.beta.data().to_vec();
                ck.running_s = StatsCheckpoint::from_stats(&s.running_s);
                ck.running_t = StatsCheckpoint::from_stats(&s.running_t);
            }
            NormLayer::AutoDial(s) => {
                ck.epsilon = s.epsilon;
                ck.alpha = s.alpha;
                ck.gamma = s.gamma.data().to_vec();
                ck.beta = s.beta.data().to_vec();
                ck.gates.mix = Some(s.mix.data().to_vec());
                ck.running_s = StatsCheckpoint::from_stats(&s.running_s);
                ck.running_t = StatsCheckpoint::from_stats(&s.running_t);
            }
            NormLayer::Dsbn(s) => {
                ck.epsilon = s.epsilon;
                ck.alpha = s.alpha;
                ck.gamma = s.gamma_s.data().to_vec();
                ck.beta = s.beta_s.data().to_vec();
                ck.gamma_t = Some(s.gamma_t.data().to_vec());
                ck.beta_t = Some(s.beta_t.data().to_vec());
                ck.running_s = StatsCheckpoint::from_stats(&s.running_s);
                ck.running_t = StatsCheckpoint::from_stats(&s.running_t);
            }
            NormLayer::Tn(s) => {
                ck.epsilon = s.epsilon;
                ck.alpha = s.alpha;
                ck.gamma = s.gamma.data().to_vec();
                ck.beta = s.beta.data().to_vec();
                ck.running_s = StatsCheckpoint::from_stats(&s.running_s);
                ck.running_t = StatsCheckpoint::from_stats(&s.running_t);
            }
            NormLayer::Rn(s) => {
                ck.epsilon = s.epsilon;
                ck.alpha = s.alpha;
                ck.group_size = s.group_size;
                ck.measure = s.measure.as_str().to_string();
                ck.gamma = s.gamma.data().to_vec();
                ck.beta = s.beta.data().to_vec();
                ck.gates.g_mu_s = Some(s.gates.g_mu_s.data().to_vec());
                ck.gates.g_var_s = Some(s.gates.g_var_s.data().to_vec());
                ck.gates.g_mu_t = Some(s.gates.g_mu_t.data().to_vec());
                ck.gates.g_var_t = Some(s.gates.g_var_t.data().to_vec());
                ck.running_s = StatsCheckpoint::from_stats(&s.running_s);
                ck.running_t = StatsCheckpoint::from_stats(&s.running_t);
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &LayerCheckpoint) -> Result<Self> {
        let kind = NormKind::parse(&ck.kind)?;
        let c = ck.c;
        if c == 0 {
            return Err(Error::invalid("checkpoint has C = 0"));
        }
        let opts = NormOptions {
            epsilon: ck.epsilon,
            alpha: ck.alpha,
            group_size: ck.group_size,
            measure: Measure::parse(&ck.measure)?,
            fixed_gate: None,
        };
        opts.validate()?;
        let gamma = vec_c("gamma", &ck.gamma, c)?;
        let beta = vec_c("beta", &ck.beta, c)?;
        let running_s = ck.running_s.to_stats(c)?;
        let running_t = ck.running_t.to_stats(c)?;
        Ok(match kind {
            NormKind::Bn => {
                let mut s = BnState::new(c, &opts);
                s.gamma = gamma;
                s.beta = beta;
                s.running_s = running_s;
                s.running_t = running_t;
                NormLayer::Bn(s)
            }
            NormKind::AdaBn => {
                let mut s = AdaBnState::new(c, &opts);
                s.gamma = gamma;
                s.beta = beta;
                s.running_s = running_s;
                s.running_t = running_t;
                NormLayer::AdaBn(s)
            }
            NormKind::AutoDial => {
                let mut s = AutoDialState::new(c, &opts);
                s.gamma = gamma;
                s.beta = beta;
                let mix = ck
                    .gates
                    .mix
                    .as_ref()
                    .ok_or_else(|| Error::invalid("autodial checkpoint missing gates.mix"))?;
                s.mix = vec_c("gates.mix", mix, c)?;
                if s.mix.data().iter().any(|&v| !(0.5..=1.0).contains(&v)) {
                    return Err(Error::invalid("gates.mix entries must lie in [0.5, 1]"));
                }
                s.running_s = running_s;
                s.running_t = running_t;
                NormLayer::AutoDial(s)
            }
            NormKind::Dsbn => {
                let mut s = DsbnState::new(c, &opts);
                s.gamma_s = gamma;
                s.beta_s = beta;
                let gt = ck
                    .gamma_t
                    .as_ref()
                    .ok_or_else(|| Error::invalid("dsbn checkpoint missing gamma_t"))?;
                let bt = ck
                    .beta_t
                    .as_ref()
                    .ok_or_else(|| Error::invalid("dsbn checkpoint missing beta_t"))?;
                s.gamma_t = vec_c("gamma_t", gt, c)?;
                s.beta_t = vec_c("beta_t", bt, c)?;
                s.running_s = running_s;
                s.running_t = running_t;
                NormLayer::Dsbn(s)
            }
            NormKind::Tn => {
                let mut s = TnState::new(c, &opts);
                s.gamma = gamma;
                s.beta = beta;
                s.running_s = running_s;
                s.running_t = running_t;
                NormLayer::Tn(s)
            }
            NormKind::Rn => {
                let mut s = RnLayerState::new(c, &opts)?;
                s.gamma = gamma;
                s.beta = beta;
                let g = &ck.gates;
                let need = |label: &str, v: &Option<Vec<f64>>| -> Result<Tensor> {
                    match v {
                        Some(v) => vec_c(label, v, c),
                        None => Err(Error::invalid(format!("rn checkpoint missing gates.{label}"))),
                    }
                };
                s.gates = GateParams {
                    g_mu_s: need("g_mu_s", &g.g_mu_s)?,
                    g_var_s: need("g_var_s", &g.g_var_s)?,
                    g_mu_t: need("g_mu_t", &g.g_mu_t)?,
                    g_var_t: need("g_var_t", &g.g_var_t)?,
                };
                if !s.gates.all_in_range() {
                    return Err(Error::invalid("rn checkpoint gates outside [0.5, 1]"));
                }
                s.running_s = running_s;
                s.running_t = running_t;
                NormLayer::Rn(s)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_basic_and_fixed_point() {
        let r = DomainStats::init(1);
        let b = DomainStats::new(Tensor::from_vec(vec![1.0]), Tensor::from_vec(vec![1.0])).unwrap();
        let next = ema_update(&r, &b, 0.1).unwrap();
        assert!((next.mu.data()[0] - 0.1).abs() < 1e-15);

        let fixed = ema_update(&b, &b, 0.1).unwrap();
        assert_eq!(fixed.mu, b.mu);
        assert_eq!(fixed.var, b.var);
    }

    #[test]
    fn ema_geometric_closed_form() {
        let r0 = 3.0;
        let s = -1.5;
        let alpha = 0.1;
        let mut running =
            DomainStats::new(Tensor::from_vec(vec![r0]), Tensor::from_vec(vec![r0.abs()])).unwrap();
        let batch =
            DomainStats::new(Tensor::from_vec(vec![s]), Tensor::from_vec(vec![2.0])).unwrap();
        let t = 17;
        for _ in 0..t {
            running = ema_update(&running, &batch, alpha).unwrap();
        }
        let decay = (1.0f64 - alpha).powi(t);
        let expect = r0 * decay + s * (1.0 - decay);
        assert!((running.mu.data()[0] - expect).abs() < 1e-9);
    }

    #[test]
    fn ema_rejects_bad_alpha() {
        let r = DomainStats::init(1);
        assert!(ema_update(&r, &r, 0.0).is_err());
        assert!(ema_update(&r, &r, 1.5).is_err());
        assert!(ema_update(&r, &r, 1.0).is_ok());
    }

    #[test]
    fn partition_shapes() {
        assert_eq!(partition_channels(8, 512), vec![(0, 8)]);
        assert_eq!(partition_channels(8, 3), vec![(0, 3), (3, 3), (6, 2)]);
        assert_eq!(partition_channels(4, 1), vec![(0, 1), (1, 1), (2, 1), (3, 1)]);
    }

    #[test]
    fn standardize_eval_examples() {
        // identity stats, unit affine: identity map
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.7]).unwrap();
        let stats = DomainStats::init(1);
        let out = standardize_eval(&x, &stats, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), 1e-12)
            .unwrap();
        assert!((out.data()[0] - 0.7).abs() < 1e-6);

        // (4 - 2) / sqrt(4) = 1
        let x = Tensor::new(vec![1, 1, 1, 1], vec![4.0]).unwrap();
        let stats =
            DomainStats::new(Tensor::from_vec(vec![2.0]), Tensor::from_vec(vec![4.0])).unwrap();
        let out = standardize_eval(&x, &stats, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), 1e-12)
            .unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);

        // gamma = 0 collapses to beta
        let out = standardize_eval(&x, &stats, &Tensor::zeros(&[1]), &Tensor::full(&[1], 5.0), 1e-12)
            .unwrap();
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn measure_and_kind_round_trip() {
        for m in [Measure::NegL2, Measure::NegL1, Measure::NegCosine] {
            assert_eq!(Measure::parse(m.as_str()).unwrap(), m);
        }
        for k in [
            NormKind::Bn,
            NormKind::AdaBn,
            NormKind::AutoDial,
            NormKind::Dsbn,
            NormKind::Tn,
            NormKind::Rn,
        ] {
            assert_eq!(NormKind::parse(k.as_str()).unwrap(), k);
        }
        assert!(NormKind::parse("groupnorm").is_err());
    }
}
