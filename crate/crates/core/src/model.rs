//! Classifier and discriminator networks. The classifier is a small MLP
//! whose hidden layers each run a two-domain normalization; the
//! discriminator is a plain two-layer net over the learned features.

use crate::error::{Error, Result};
use crate::norm::{
    CorrelationReport, Domain, LayerCheckpoint, Measure, NormKind, NormLayer, NormOptions,
};
use crate::params::{ParamBinding, ParamMeta};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub norm: NormKind,
    pub norm_opts: NormOptions,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 {
            return Err(Error::invalid("mlp: input dimension must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid(
                "mlp: at least one hidden layer, all widths positive",
            ));
        }
        if self.classes < 2 {
            return Err(Error::invalid("mlp: need at least two classes"));
        }
        self.norm_opts.validate()
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().unwrap()
    }
}

pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// He-style init: weights from N(0, 2/fan_in), zero bias.
    pub fn new(din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / din as f64).sqrt()).unwrap();
        Linear {
            w: Tensor::new(
                vec![din, dout],
                (0..din * dout).map(|_| normal.sample(rng)).collect(),
            )
            .unwrap(),
            b: Tensor::zeros(&[dout]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    fn bind(&self, tape: &mut Tape) -> (Var, Var, Vec<ParamBinding>) {
        let w = tape.leaf(self.w.clone());
        let b = tape.leaf(self.b.clone());
        let binds = vec![
            ParamBinding { var: w, meta: ParamMeta::weight("w") },
            ParamBinding { var: b, meta: ParamMeta::bias("b") },
        ];
        (w, b, binds)
    }

    fn apply(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_row_bias(y, b)
    }

    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul(x, &self.w)?;
        let (rows, cols) = (y.shape()[0], y.shape()[1]);
        let mut out = y;
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] += self.b.data()[c];
            }
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
pub struct LinearCheckpoint {
    pub din: usize,
    pub dout: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearCheckpoint {
    pub fn from_linear(l: &Linear) -> Self {
        LinearCheckpoint {
            din: l.w.shape()[0],
            dout: l.w.shape()[1],
            w: l.w.data().to_vec(),
            b: l.b.data().to_vec(),
        }
    }

    pub fn to_linear(&self) -> Result<Linear> {
        if self.w.len() != self.din * self.dout || self.b.len() != self.dout {
            return Err(Error::invalid("linear checkpoint dimensions disagree"));
        }
        Ok(Linear {
            w: Tensor::new(vec![self.din, self.dout], self.w.clone())?,
            b: Tensor::new(vec![self.dout], self.b.clone())?,
        })
    }
}

pub struct MlpTrainOut {
    pub feat_s: Var,
    pub feat_t: Var,
    pub logits_s: Var,
    pub logits_t: Var,
    pub params: Vec<ParamBinding>,
    pub stat_nodes: Vec<Var>,
    pub reports: Vec<Option<CorrelationReport>>,
}

pub struct Mlp {
    pub spec: MlpSpec,
    pub blocks: Vec<(Linear, NormLayer)>,
    pub head: Linear,
}

impl Mlp {
    pub fn new(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.hidden.len());
        let mut din = spec.input;
        for &width in &spec.hidden {
            let lin = Linear::new(din, width, rng);
            let norm = NormLayer::new(spec.norm, width, &spec.norm_opts)?;
            blocks.push((lin, norm));
            din = width;
        }
        let head = Linear::new(din, spec.classes, rng);
        Ok(Mlp { spec, blocks, head })
    }

    /// Two-domain training forward. Parameters are bound in the fixed order
    /// `params_mut` exposes: per block the linear then the normalizer, then
    /// the head.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        x_s: &Tensor,
        x_t: &Tensor,
    ) -> Result<MlpTrainOut> {
        let n_s = *x_s
            .shape()
            .first()
            .ok_or_else(|| Error::invalid("mlp: inputs must be [N, F]"))?;
        let n_t = *x_t
            .shape()
            .first()
            .ok_or_else(|| Error::invalid("mlp: inputs must be [N, F]"))?;
        let mut hs = tape.leaf(x_s.clone());
        let mut ht = tape.leaf(x_t.clone());
        let mut params = Vec::new();
        let mut stat_nodes = Vec::new();
        let mut reports = Vec::new();

        for (lin, norm) in &mut self.blocks {
            let (w, b, binds) = lin.bind(tape);
            params.extend(binds);
            let d = lin.out_dim();
            let ys = lin.apply(tape, hs, w, b)?;
            let yt = lin.apply(tape, ht, w, b)?;
            let ys4 = tape.reshape(ys, vec![n_s, d, 1, 1])?;
            let yt4 = tape.reshape(yt, vec![n_t, d, 1, 1])?;
            let nt = norm.forward_train(tape, ys4, yt4)?;
            params.extend(nt.params);
            stat_nodes.extend(nt.stat_nodes);
            reports.push(nt.report);
            let os = tape.reshape(nt.out_s, vec![n_s, d])?;
            let ot = tape.reshape(nt.out_t, vec![n_t, d])?;
            hs = tape.relu(os);
            ht = tape.relu(ot);
        }

        let (w, b, binds) = self.head.bind(tape);
        params.extend(binds);
        let logits_s = self.head.apply(tape, hs, w, b)?;
        let logits_t = self.head.apply(tape, ht, w, b)?;

        Ok(MlpTrainOut {
            feat_s: hs,
            feat_t: ht,
            logits_s,
            logits_t,
            params,
            stat_nodes,
            reports,
        })
    }

    /// Penultimate features for one domain, running statistics only.
    pub fn features_eval(&self, x: &Tensor, domain: Domain) -> Result<Tensor> {
        let n = *x
            .shape()
            .first()
            .ok_or_else(|| Error::invalid("mlp: inputs must be [N, F]"))?;
        let mut h = x.clone();
        for (lin, norm) in &self.blocks {
            let d = lin.out_dim();
            let y = lin.forward_plain(&h)?;
            let y4 = y.reshaped(vec![n, d, 1, 1])?;
            let o4 = norm.forward_eval(&y4, domain)?;
            let o = o4.reshaped(vec![n, d])?;
            h = o.map(|v| v.max(0.0));
        }
        Ok(h)
    }

    /// Class logits for one domain, running statistics only.
    pub fn forward_eval(&self, x: &Tensor, domain: Domain) -> Result<Tensor> {
        let feat = self.features_eval(x, domain)?;
        self.head.forward_plain(&feat)
    }

    /// Mutable learnable tensors in the binding order of `forward_train`.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = Vec::new();
        for (lin, norm) in &mut self.blocks {
            out.push(("w", &mut lin.w));
            out.push(("b", &mut lin.b));
            out.extend(norm.params_mut());
        }
        out.push(("w", &mut self.head.w));
        out.push(("b", &mut self.head.b));
        out
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            input: self.spec.input,
            hidden: self.spec.hidden.clone(),
            classes: self.spec.classes,
            normalizer: self.spec.norm.as_str().to_string(),
            blocks: self
                .blocks
                .iter()
                .map(|(lin, norm)| BlockCheckpoint {
                    linear: LinearCheckpoint::from_linear(lin),
                    norm: norm.to_checkpoint(),
                })
                .collect(),
            head: LinearCheckpoint::from_linear(&self.head),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        if ck.blocks.len() != ck.hidden.len() {
            return Err(Error::invalid("model checkpoint: block count disagrees"));
        }
        let norm = NormKind::parse(&ck.normalizer)?;
        let first = ck
            .blocks
            .first()
            .ok_or_else(|| Error::invalid("model checkpoint has no blocks"))?;
        let norm_opts = NormOptions {
            epsilon: first.norm.epsilon,
            alpha: first.norm.alpha,
            group_size: first.norm.group_size,
            measure: Measure::parse(&first.norm.measure)?,
            fixed_gate: None,
        };
        let spec = MlpSpec {
            input: ck.input,
            hidden: ck.hidden.clone(),
            classes: ck.classes,
            norm,
            norm_opts,
        };
        spec.validate()?;
        let mut blocks = Vec::with_capacity(ck.blocks.len());
        for (i, b) in ck.blocks.iter().enumerate() {
            let lin = b.linear.to_linear()?;
            let layer = NormLayer::from_checkpoint(&b.norm)?;
            if layer.kind() != norm {
                return Err(Error::invalid("model checkpoint mixes normalizer kinds"));
            }
            if layer.channels() != ck.hidden[i] || lin.out_dim() != ck.hidden[i] {
                return Err(Error::invalid("model checkpoint widths disagree"));
            }
            blocks.push((lin, layer));
        }
        let head = ck.head.to_linear()?;
        Ok(Mlp { spec, blocks, head })
    }
}

#[derive(Serialize, Deserialize)]
pub struct BlockCheckpoint {
    pub linear: LinearCheckpoint,
    pub norm: LayerCheckpoint,
}

#[derive(Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub normalizer: String,
    pub blocks: Vec<BlockCheckpoint>,
    pub head: LinearCheckpoint,
}

/// Two-layer domain discriminator over the classifier's features.
pub struct Discriminator {
    pub l1: Linear,
    pub l2: Linear,
}

impl Discriminator {
    pub fn new(feat_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::with_classes(feat_dim, hidden, 2, rng)
    }

    /// Same two-layer shape with an arbitrary output count, for diagnostic
    /// classifiers that predict class labels rather than domains.
    pub fn with_classes(feat_dim: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Discriminator {
            l1: Linear::new(feat_dim, hidden, rng),
            l2: Linear::new(hidden, classes, rng),
        }
    }

    pub fn forward_train(&self, tape: &mut Tape, x: Var) -> Result<(Var, Vec<ParamBinding>)> {
        let (w1, b1, mut params) = self.l1.bind(tape);
        let (w2, b2, binds2) = self.l2.bind(tape);
        params.extend(binds2);
        let h = self.l1.apply(tape, x, w1, b1)?;
        let h = tape.relu(h);
        let logits = self.l2.apply(tape, h, w2, b2)?;
        Ok((logits, params))
    }

    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.forward_plain(x)?.map(|v| v.max(0.0));
        self.l2.forward_plain(&h)
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w", &mut self.l1.w),
            ("b", &mut self.l1.b),
            ("w", &mut self.l2.w),
            ("b", &mut self.l2.b),
        ]
    }

    pub fn to_checkpoint(&self) -> DiscCheckpoint {
        DiscCheckpoint {
            l1: LinearCheckpoint::from_linear(&self.l1),
            l2: LinearCheckpoint::from_linear(&self.l2),
        }
    }

    pub fn from_checkpoint(ck: &DiscCheckpoint) -> Result<Self> {
        Ok(Discriminator {
            l1: ck.l1.to_linear()?,
            l2: ck.l2.to_linear()?,
        })
    }
}

#[derive(Serialize, Deserialize)]
pub struct DiscCheckpoint {
    pub l1: LinearCheckpoint,
    pub l2: LinearCheckpoint,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn spec(norm: NormKind) -> MlpSpec {
        MlpSpec {
            input: 5,
            hidden: vec![8, 6],
            classes: 3,
            norm,
            norm_opts: NormOptions::default(),
        }
    }

    fn batch(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Tensor {
        Tensor::new(
            vec![n, f],
            (0..n * f).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(spec(NormKind::Rn), &mut rng).unwrap();
        let x_s = batch(&mut rng, 7, 5);
        let x_t = batch(&mut rng, 4, 5);
        let mut tape = Tape::new();
        let out = mlp.forward_train(&mut tape, &x_s, &x_t).unwrap();
        assert_eq!(tape.value(out.logits_s).shape(), &[7, 3]);
        assert_eq!(tape.value(out.logits_t).shape(), &[4, 3]);
        assert_eq!(tape.value(out.feat_s).shape(), &[7, 6]);
        assert_eq!(out.reports.len(), 2);
        assert!(out.reports.iter().all(|r| r.is_some()));
    }

    #[test]
    fn binding_order_matches_params_mut() {
        for kind in [
            NormKind::Bn,
            NormKind::AdaBn,
            NormKind::AutoDial,
            NormKind::Dsbn,
            NormKind::Tn,
            NormKind::Rn,
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut mlp = Mlp::new(spec(kind), &mut rng).unwrap();
            let x_s = batch(&mut rng, 6, 5);
            let x_t = batch(&mut rng, 6, 5);
            let mut tape = Tape::new();
            let out = mlp.forward_train(&mut tape, &x_s, &x_t).unwrap();
            let bound: Vec<(&str, Vec<usize>)> = out
                .params
                .iter()
                .map(|p| (p.meta.name, tape.value(p.var).shape().to_vec()))
                .collect();
            let owned: Vec<(&str, Vec<usize>)> = mlp
                .params_mut()
                .into_iter()
                .map(|(name, t)| (name, t.shape().to_vec()))
                .collect();
            assert_eq!(bound, owned, "{kind:?}");
        }
    }

    #[test]
    fn eval_matches_train_for_bn_when_alpha_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = spec(NormKind::Bn);
        s.norm_opts.alpha = 1.0;
        let mut mlp = Mlp::new(s, &mut rng).unwrap();
        let x_s = batch(&mut rng, 6, 5);
        let x_t = batch(&mut rng, 6, 5);
        let mut tape = Tape::new();
        let out = mlp.forward_train(&mut tape, &x_s, &x_t).unwrap();
        // joint statistics became the running statistics, so the eval pass
        // reproduces the train-time outputs
        let eval_s = mlp.forward_eval(&x_s, Domain::Source).unwrap();
        assert!(eval_s.max_abs_diff(tape.value(out.logits_s)) < 1e-9);
        let eval_t = mlp.forward_eval(&x_t, Domain::Target).unwrap();
        assert!(eval_t.max_abs_diff(tape.value(out.logits_t)) < 1e-9);
    }

    #[test]
    fn seeded_construction_is_reproducible() {
        let a = Mlp::new(spec(NormKind::Rn), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Mlp::new(spec(NormKind::Rn), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.blocks[0].0.w, b.blocks[0].0.w);
        assert_eq!(a.head.w, b.head.w);
    }

    #[test]
    fn checkpoint_round_trip_preserves_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mlp = Mlp::new(spec(NormKind::Dsbn), &mut rng).unwrap();
        let x_s = batch(&mut rng, 6, 5);
        let x_t = batch(&mut rng, 6, 5);
        let mut tape = Tape::new();
        mlp.forward_train(&mut tape, &x_s, &x_t).unwrap();

        let json = serde_json::to_string(&mlp.to_checkpoint()).unwrap();
        let ck: ModelCheckpoint = serde_json::from_str(&json).unwrap();
        let restored = Mlp::from_checkpoint(&ck).unwrap();
        let probe = batch(&mut rng, 5, 5);
        for domain in [Domain::Source, Domain::Target] {
            let a = mlp.forward_eval(&probe, domain).unwrap();
            let b = restored.forward_eval(&probe, domain).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn discriminator_outputs_two_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let disc = Discriminator::new(6, 4, &mut rng);
        let x = batch(&mut rng, 9, 6);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let (logits, params) = disc.forward_train(&mut tape, v).unwrap();
        assert_eq!(tape.value(logits).shape(), &[9, 2]);
        assert_eq!(params.len(), 4);
        let plain = disc.forward_plain(&x).unwrap();
        assert!(plain.max_abs_diff(tape.value(logits)) < 1e-12);
    }

    #[test]
    fn rejects_empty_hidden() {
        let s = MlpSpec {
            input: 4,
            hidden: vec![],
            classes: 2,
            norm: NormKind::Bn,
            norm_opts: NormOptions::default(),
        };
        assert!(Mlp::new(s, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
