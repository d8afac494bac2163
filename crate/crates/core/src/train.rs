//! Adversarial training loop. One objective covers both regimes: cross
//! entropy on source labels plus lambda times the domain-confusion cross
//! entropy routed through gradient reversal; lambda = 0 is source-only
//! training. Constrained parameters are projected after every step.

use crate::data::{write_csv, BatchIter, DomainDataset};
use crate::error::{Error, Result};
use crate::model::{DiscCheckpoint, Discriminator, Mlp, ModelCheckpoint};
use crate::norm::{CorrelationReport, Domain, NormLayer};
use crate::params::{ParamClass, ParamMeta};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate for affine and gate parameters; falls back to `lr`.
    pub affine_lr: Option<f64>,
    /// Weight decay for affine and gate parameters; defaults to none, since
    /// decaying toward zero fights their unit initialization.
    pub affine_weight_decay: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            affine_lr: None,
            affine_weight_decay: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.affine_weight_decay.unwrap_or(0.0) < 0.0 {
            return Err(Error::invalid("weight decay must be nonnegative"));
        }
        if let Some(a) = self.affine_lr {
            // zero is allowed: it pins affine and gate parameters in place
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::invalid("affine learning rate must be finite and nonnegative"));
            }
        }
        Ok(())
    }
}

/// Momentum SGD with per-class hyperparameters and box projection.
///
/// Momentum buffers are addressed by a cursor that must walk the parameters
/// in the same order every step; `begin_step` resets it. Frozen parameters
/// still consume a slot so the addressing stays stable.
pub struct Sgd {
    cfg: OptimConfig,
    bufs: Vec<Tensor>,
    cursor: usize,
}

impl Sgd {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sgd { cfg, bufs: Vec::new(), cursor: 0 })
    }

    pub fn begin_step(&mut self) {
        self.cursor = 0;
    }

    pub fn update(
        &mut self,
        param: &mut Tensor,
        meta: &ParamMeta,
        grad: Option<&Tensor>,
    ) -> Result<()> {
        let slot = self.cursor;
        self.cursor += 1;
        if self.bufs.len() <= slot {
            self.bufs.push(Tensor::zeros(param.shape()));
        }
        if meta.frozen {
            return Ok(());
        }
        let Some(g) = grad else {
            return Ok(());
        };
        if g.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: param.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {}", meta.name),
            });
        }
        let (lr, wd) = match meta.class {
            ParamClass::Weight => (self.cfg.lr, self.cfg.weight_decay),
            ParamClass::Bias => (self.cfg.lr, 0.0),
            ParamClass::Affine | ParamClass::Gate => (
                self.cfg.affine_lr.unwrap_or(self.cfg.lr),
                self.cfg.affine_weight_decay.unwrap_or(0.0),
            ),
        };
        let buf = &mut self.bufs[slot];
        let momentum = self.cfg.momentum;
        for i in 0..param.numel() {
            let p = param.data()[i];
            let v = momentum * buf.data()[i] + g.data()[i] + wd * p;
            buf.data_mut()[i] = v;
            param.data_mut()[i] = p - lr * v;
        }
        if let Some((lo, hi)) = meta.constraint {
            for v in param.data_mut() {
                *v = v.clamp(lo, hi);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub spec: crate::model::MlpSpec,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    /// Scale lambda by the DANN schedule 2/(1+exp(-10p)) - 1 over training
    /// progress p; otherwise lambda is constant.
    pub anneal: bool,
    pub disc_hidden: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.optim.validate()?;
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid("lambda must be finite and nonnegative"));
        }
        if self.disc_hidden == 0 {
            return Err(Error::invalid("discriminator width must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: &'static str,
    pub class_loss: f64,
    pub domain_loss: f64,
    pub accuracy: f64,
    pub wall_ms: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,class_loss,domain_loss,accuracy,wall_ms";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.class_loss, self.domain_loss, self.accuracy, self.wall_ms
        )
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

#[derive(Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub model: ModelCheckpoint,
    pub disc: DiscCheckpoint,
}

pub struct TrainOutcome {
    pub model: Mlp,
    pub disc: Discriminator,
    pub metrics: Vec<MetricsRow>,
    /// Per epoch, per hidden block: the last training step's compensation
    /// report (None for normalizers that produce none).
    pub reports: Vec<Vec<Option<CorrelationReport>>>,
}

fn ce_and_accuracy(logits: &Tensor, labels: &[usize]) -> (f64, f64) {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    let mut loss = 0.0;
    let mut hits = 0usize;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
        let mut arg = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[arg] {
                arg = j;
            }
            let _ = j;
        }
        if arg == labels[i] {
            hits += 1;
        }
    }
    (loss / n as f64, hits as f64 / n as f64)
}

/// Accuracy and mean cross entropy on one dataset through the running-stats
/// path. Stateless: repeated calls return identical numbers.
pub fn evaluate(model: &Mlp, data: &DomainDataset, domain: Domain) -> Result<(f64, f64)> {
    let logits = model.forward_eval(&data.features, domain)?;
    let (loss, acc) = ce_and_accuracy(&logits, &data.labels);
    Ok((acc, loss))
}

fn dann_lambda(lambda: f64, anneal: bool, step: usize, total_steps: usize) -> f64 {
    if !anneal {
        return lambda;
    }
    let p = step as f64 / total_steps as f64;
    lambda * (2.0 / (1.0 + (-10.0 * p).exp()) - 1.0)
}

fn disc_loss_on(disc: &Discriminator, feats: &Tensor, domain_label: usize) -> Result<f64> {
    let logits = disc.forward_plain(feats)?;
    let labels = vec![domain_label; feats.shape()[0]];
    let (loss, _) = ce_and_accuracy(&logits, &labels);
    Ok(loss)
}

struct RunDir<'a> {
    out: &'a Path,
}

impl<'a> RunDir<'a> {
    fn create(out: &'a Path, config_text: &str) -> Result<Self> {
        let mk = |p: &Path| {
            std::fs::create_dir_all(p).map_err(|e| Error::io(p.display().to_string(), e.to_string()))
        };
        mk(out)?;
        mk(&out.join("reports"))?;
        let cfg_path = out.join("config.txt");
        std::fs::write(&cfg_path, config_text)
            .map_err(|e| Error::io(cfg_path.display().to_string(), e.to_string()))?;
        Ok(RunDir { out })
    }

    fn write_metrics(&self, rows: &[MetricsRow]) -> Result<()> {
        let p = self.out.join("metrics.csv");
        std::fs::write(&p, metrics_to_csv(rows))
            .map_err(|e| Error::io(p.display().to_string(), e.to_string()))
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let p = self.out.join(rel);
        let body = serde_json::to_string_pretty(value)
            .map_err(|e| Error::json(p.display().to_string(), e))?;
        std::fs::write(&p, body).map_err(|e| Error::io(p.display().to_string(), e.to_string()))
    }

    fn write_checkpoint(&self, model: &Mlp, disc: &Discriminator) -> Result<()> {
        self.write_json(
            "checkpoint.json",
            &RunCheckpoint { model: model.to_checkpoint(), disc: disc.to_checkpoint() },
        )
    }

    fn write_reports(&self, epoch: usize, reports: &[Option<CorrelationReport>]) -> Result<()> {
        self.write_json(&format!("reports/epoch_{epoch:04}.json"), &reports)
    }

    fn write_features(
        &self,
        model: &Mlp,
        source: &DomainDataset,
        target: &DomainDataset,
    ) -> Result<()> {
        let fs = model.features_eval(&source.features, Domain::Source)?;
        let ft = model.features_eval(&target.features, Domain::Target)?;
        let ds_s = DomainDataset::new(fs, source.labels.clone(), Domain::Source)?;
        let ds_t = DomainDataset::new(ft, target.labels.clone(), Domain::Target)?;
        write_csv(&self.out.join("features.csv"), &ds_s, &ds_t)
    }
}

fn apply_step(
    sgd: &mut Sgd,
    owned: Vec<(&'static str, &mut Tensor)>,
    bindings: &[crate::params::ParamBinding],
    grads: &crate::tape::Gradients,
) -> Result<()> {
    assert_eq!(owned.len(), bindings.len(), "binding order drifted");
    sgd.begin_step();
    for ((name, tensor), binding) in owned.into_iter().zip(bindings) {
        debug_assert_eq!(name, binding.meta.name, "binding order drifted");
        sgd.update(tensor, &binding.meta, grads.wrt(binding.var))?;
    }
    Ok(())
}

/// Run the full training loop. When `out_dir` is given, the run directory
/// (config.txt, metrics.csv, checkpoint.json, reports/, features.csv) is
/// kept current every epoch, so a divergence abort leaves the last finished
/// state behind.
pub fn train_run(
    cfg: &TrainConfig,
    source: &DomainDataset,
    target: &DomainDataset,
    out_dir: Option<&Path>,
    config_text: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.feature_dim() != cfg.spec.input || target.feature_dim() != cfg.spec.input {
        return Err(Error::invalid(format!(
            "model expects {} input features, data has {}/{}",
            cfg.spec.input,
            source.feature_dim(),
            target.feature_dim()
        )));
    }
    if source.num_classes() > cfg.spec.classes {
        return Err(Error::invalid("source labels exceed the configured class count"));
    }

    let run_dir = match out_dir {
        Some(p) => Some(RunDir::create(p, config_text)?),
        None => None,
    };
    if let Some(rd) = &run_dir {
        // the raw dataset, so eval can be pointed at this run directly
        write_csv(&rd.out.join("data.csv"), source, target)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Mlp::new(cfg.spec.clone(), &mut rng)?;
    let mut disc = Discriminator::new(cfg.spec.feature_dim(), cfg.disc_hidden, &mut rng);
    let mut sgd_model = Sgd::new(cfg.optim.clone())?;
    let mut sgd_disc = Sgd::new(cfg.optim.clone())?;

    let mut batches = BatchIter::new(source, target, cfg.batch_size, cfg.seed.wrapping_add(1))?;
    let steps_per_epoch = batches.steps_per_epoch();
    let total_steps = steps_per_epoch * cfg.epochs;

    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut all_reports: Vec<Vec<Option<CorrelationReport>>> = Vec::new();
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut sum_cls = 0.0;
        let mut sum_dom = 0.0;
        let mut sum_acc = 0.0;
        let mut epoch_reports: Vec<Option<CorrelationReport>> = Vec::new();

        for _ in 0..steps_per_epoch {
            let batch = batches.next_batch();
            let lambda_eff = dann_lambda(cfg.lambda, cfg.anneal, global_step, total_steps);

            let mut tape = Tape::new();
            let out = model.forward_train(&mut tape, &batch.x_s, &batch.x_t)?;
            let ce_cls = tape.cross_entropy_logits(out.logits_s, &batch.y_s)?;

            let feats = tape.concat0(&[out.feat_s, out.feat_t])?;
            let rev = tape.grad_reverse(feats, 1.0);
            let (dom_logits, disc_bindings) = disc.forward_train(&mut tape, rev)?;
            let mut dom_labels = vec![0usize; batch.x_s.shape()[0]];
            dom_labels.extend(std::iter::repeat(1).take(batch.x_t.shape()[0]));
            let ce_dom = tape.cross_entropy_logits(dom_logits, &dom_labels)?;

            let dom_term = tape.affine(ce_dom, lambda_eff, 0.0);
            let total = tape.add(ce_cls, dom_term)?;

            let cls_val = tape.value(ce_cls).item();
            let dom_val = tape.value(ce_dom).item();
            if !tape.value(total).item().is_finite() {
                if let Some(rd) = &run_dir {
                    rd.write_metrics(&metrics)?;
                    rd.write_checkpoint(&model, &disc)?;
                }
                return Err(Error::NonFinite {
                    context: format!("training loss at epoch {epoch}; last checkpoint retained"),
                });
            }

            let grads = tape.backward(total)?;
            apply_step(&mut sgd_model, model.params_mut(), &out.params, &grads)?;
            apply_step(&mut sgd_disc, disc.params_mut(), &disc_bindings, &grads)?;

            let (_, acc) = ce_and_accuracy(tape.value(out.logits_s), &batch.y_s);
            sum_cls += cls_val;
            sum_dom += dom_val;
            sum_acc += acc;
            epoch_reports = out.reports;
            global_step += 1;
        }

        let n = steps_per_epoch as f64;
        metrics.push(MetricsRow {
            epoch,
            split: "train_s",
            class_loss: sum_cls / n,
            domain_loss: sum_dom / n,
            accuracy: sum_acc / n,
            wall_ms: t0.elapsed().as_secs_f64() * 1000.0,
        });

        for (split, data, domain, dom_label) in [
            ("eval_s", source, Domain::Source, 0usize),
            ("eval_t", target, Domain::Target, 1usize),
        ] {
            let te = Instant::now();
            let (acc, loss) = evaluate(&model, data, domain)?;
            let feats = model.features_eval(&data.features, domain)?;
            let dom_loss = disc_loss_on(&disc, &feats, dom_label)?;
            metrics.push(MetricsRow {
                epoch,
                split,
                class_loss: loss,
                domain_loss: dom_loss,
                accuracy: acc,
                wall_ms: te.elapsed().as_secs_f64() * 1000.0,
            });
        }

        all_reports.push(epoch_reports.clone());
        if let Some(rd) = &run_dir {
            rd.write_metrics(&metrics)?;
            rd.write_checkpoint(&model, &disc)?;
            rd.write_reports(epoch, &epoch_reports)?;
        }
    }

    if let Some(rd) = &run_dir {
        rd.write_features(&model, source, target)?;
    }

    Ok(TrainOutcome { model, disc, metrics, reports: all_reports })
}

/// True when every gate of every reciprocal layer lies inside [0.5, 1].
pub fn gates_in_range(model: &Mlp) -> bool {
    model.blocks.iter().all(|(_, norm)| match norm {
        NormLayer::Rn(s) => s.gates.all_in_range(),
        NormLayer::AutoDial(s) => s.mix.data().iter().all(|&v| (0.5..=1.0).contains(&v)),
        _ => true,
    })
}
