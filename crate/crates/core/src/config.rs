//! Flat key = value experiment configuration. One key per field, `#`
//! comments, order-free; unknown or duplicate keys are rejected with the
//! offending line so sweep diffs stay honest.

use crate::data::{
    make_channel_permuted, make_shifted_gaussians, make_two_moons_shift, DomainDataset,
};
use crate::error::{Error, Result};
use crate::model::MlpSpec;
use crate::norm::{Measure, NormKind, NormOptions};
use crate::train::{OptimConfig, TrainConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub enum TaskSpec {
    ShiftedGaussians {
        classes: usize,
        features: usize,
        per_class: usize,
        shift: Vec<f64>,
        scale: Vec<f64>,
    },
    ChannelPermuted {
        classes: usize,
        features: usize,
        per_class: usize,
        permutation: Vec<usize>,
        shift: Vec<f64>,
    },
    TwoMoons {
        per_class: usize,
        angle: f64,
        noise: f64,
    },
}

impl TaskSpec {
    pub fn feature_dim(&self) -> usize {
        match self {
            TaskSpec::ShiftedGaussians { features, .. } => *features,
            TaskSpec::ChannelPermuted { features, .. } => *features,
            TaskSpec::TwoMoons { .. } => 2,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            TaskSpec::ShiftedGaussians { classes, .. } => *classes,
            TaskSpec::ChannelPermuted { classes, .. } => *classes,
            TaskSpec::TwoMoons { .. } => 2,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
        match self {
            TaskSpec::ShiftedGaussians { classes, features, per_class, shift, scale } => {
                make_shifted_gaussians(*classes, *features, shift, scale, *per_class, seed)
            }
            TaskSpec::ChannelPermuted { classes, features, per_class, permutation, shift } => {
                make_channel_permuted(*classes, *features, permutation, shift, *per_class, seed)
            }
            TaskSpec::TwoMoons { per_class, angle, noise } => {
                make_two_moons_shift(*per_class, *angle, *noise, seed)
            }
        }
    }
}

/// Full description of a seeded experiment: task generator, model, optimizer,
/// schedule, and output location.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub hidden: Vec<usize>,
    pub normalizer: NormKind,
    pub norm_opts: NormOptions,
    pub optim: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub anneal: bool,
    pub disc_hidden: usize,
    pub seed: u64,
    pub out: Option<String>,
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            spec: MlpSpec {
                input: self.task.feature_dim(),
                hidden: self.hidden.clone(),
                classes: self.task.classes(),
                norm: self.normalizer,
                norm_opts: self.norm_opts,
            },
            optim: self.optim.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lambda: self.lambda,
            anneal: self.anneal,
            disc_hidden: self.disc_hidden,
            seed: self.seed,
        }
    }

    pub fn generate(&self) -> Result<(DomainDataset, DomainDataset)> {
        // data and model initialization use decorrelated streams
        self.task.generate(self.seed.wrapping_mul(0x9e37_79b9).wrapping_add(12345))
    }

    /// Render back to the flat key = value format, one key per line, in a
    /// fixed order. `parse(to_text(c))` reproduces `c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let num_list = |v: &[f64]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        match &self.task {
            TaskSpec::ShiftedGaussians { classes, features, per_class, shift, scale } => {
                writeln!(s, "task = shifted_gaussians").unwrap();
                writeln!(s, "classes = {classes}").unwrap();
                writeln!(s, "features = {features}").unwrap();
                writeln!(s, "per_class = {per_class}").unwrap();
                writeln!(s, "shift = {}", num_list(shift)).unwrap();
                writeln!(s, "scale = {}", num_list(scale)).unwrap();
            }
            TaskSpec::ChannelPermuted { classes, features, per_class, permutation, shift } => {
                writeln!(s, "task = channel_permuted").unwrap();
                writeln!(s, "classes = {classes}").unwrap();
                writeln!(s, "features = {features}").unwrap();
                writeln!(s, "per_class = {per_class}").unwrap();
                let perm =
                    permutation.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",");
                writeln!(s, "permutation = {perm}").unwrap();
                writeln!(s, "shift = {}", num_list(shift)).unwrap();
            }
            TaskSpec::TwoMoons { per_class, angle, noise } => {
                writeln!(s, "task = two_moons").unwrap();
                writeln!(s, "per_class = {per_class}").unwrap();
                writeln!(s, "angle = {angle}").unwrap();
                writeln!(s, "noise = {noise}").unwrap();
            }
        }
        let hidden = self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",");
        writeln!(s, "hidden = {hidden}").unwrap();
        writeln!(s, "normalizer = {}", self.normalizer.as_str()).unwrap();
        writeln!(s, "measure = {}", self.norm_opts.measure.as_str()).unwrap();
        writeln!(s, "group_size = {}", self.norm_opts.group_size).unwrap();
        if let Some(g) = self.norm_opts.fixed_gate {
            writeln!(s, "fixed_gate = {g}").unwrap();
        }
        writeln!(s, "epsilon = {}", self.norm_opts.epsilon).unwrap();
        writeln!(s, "alpha = {}", self.norm_opts.alpha).unwrap();
        writeln!(s, "lr = {}", self.optim.lr).unwrap();
        writeln!(s, "momentum = {}", self.optim.momentum).unwrap();
        writeln!(s, "weight_decay = {}", self.optim.weight_decay).unwrap();
        if let Some(a) = self.optim.affine_lr {
            writeln!(s, "affine_lr = {a}").unwrap();
        }
        if let Some(a) = self.optim.affine_weight_decay {
            writeln!(s, "affine_weight_decay = {a}").unwrap();
        }
        writeln!(s, "epochs = {}", self.epochs).unwrap();
        writeln!(s, "batch_size = {}", self.batch_size).unwrap();
        writeln!(s, "lambda = {}", self.lambda).unwrap();
        writeln!(s, "anneal = {}", self.anneal).unwrap();
        writeln!(s, "disc_hidden = {}", self.disc_hidden).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        if let Some(out) = &self.out {
            writeln!(s, "out = {out}").unwrap();
        }
        s
    }
}

struct Fields<'a> {
    path: &'a str,
    // key -> (line number, raw value)
    map: BTreeMap<&'a str, (usize, &'a str)>,
}

impl<'a> Fields<'a> {
    fn err(&self, line: usize, msg: impl Into<String>) -> Error {
        Error::config(self.path, line, msg)
    }

    fn take(&mut self, key: &str) -> Option<(usize, &'a str)> {
        self.map.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<(usize, &'a str)> {
        self.take(key)
            .ok_or_else(|| Error::config(self.path, 0, format!("missing required key '{key}'")))
    }

    fn parse_with<T>(
        &self,
        key: &str,
        entry: (usize, &'a str),
        parse: impl FnOnce(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        let (line, raw) = entry;
        parse(raw).map_err(|m| self.err(line, format!("key '{key}': {m}")))
    }

    fn usize_at(&self, key: &str, entry: (usize, &'a str)) -> Result<usize> {
        self.parse_with(key, entry, |r| {
            r.parse::<usize>().map_err(|_| format!("expected a nonnegative integer, got '{r}'"))
        })
    }

    fn f64_at(&self, key: &str, entry: (usize, &'a str)) -> Result<f64> {
        self.parse_with(key, entry, |r| {
            r.parse::<f64>().map_err(|_| format!("expected a number, got '{r}'"))
        })
    }

    fn req_usize(&mut self, key: &str) -> Result<usize> {
        let e = self.required(key)?;
        self.usize_at(key, e)
    }

    fn opt_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            Some(e) => self.usize_at(key, e),
            None => Ok(default),
        }
    }

    fn opt_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            Some(e) => self.f64_at(key, e),
            None => Ok(default),
        }
    }

    fn opt_f64_maybe(&mut self, key: &str) -> Result<Option<f64>> {
        match self.take(key) {
            Some(e) => Ok(Some(self.f64_at(key, e)?)),
            None => Ok(None),
        }
    }

    fn opt_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            Some(e) => self.parse_with(key, e, |r| match r {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(format!("expected true or false, got '{other}'")),
            }),
            None => Ok(default),
        }
    }

    /// Comma list of numbers, or a single scalar broadcast to `len` entries.
    fn f64_list(&mut self, key: &str, len: usize, default: f64) -> Result<Vec<f64>> {
        let Some((line, raw)) = self.take(key) else {
            return Ok(vec![default; len]);
        };
        let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
        let mut vals = Vec::with_capacity(parts.len());
        for p in &parts {
            let v = p.parse::<f64>().map_err(|_| {
                self.err(line, format!("key '{key}': expected a number, got '{p}'"))
            })?;
            vals.push(v);
        }
        if vals.len() == 1 {
            return Ok(vec![vals[0]; len]);
        }
        if vals.len() != len {
            return Err(self.err(
                line,
                format!("key '{key}': expected 1 or {len} entries, got {}", vals.len()),
            ));
        }
        Ok(vals)
    }

    fn usize_list(&mut self, key: &str, entry: (usize, &'a str)) -> Result<Vec<usize>> {
        let (line, raw) = entry;
        let mut vals = Vec::new();
        for p in raw.split(',').map(str::trim) {
            let v = p.parse::<usize>().map_err(|_| {
                self.err(line, format!("key '{key}': expected an integer, got '{p}'"))
            })?;
            vals.push(v);
        }
        Ok(vals)
    }
}

/// Parse the flat config text. `path` labels diagnostics only.
pub fn parse(text: &str, path: &str) -> Result<ExperimentConfig> {
    let mut map: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(path, line_no, "expected 'key = value'"));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::config(path, line_no, "empty key"));
        }
        if let Some((first_line, _)) = map.get(key) {
            return Err(Error::config(
                path,
                line_no,
                format!("duplicate key '{key}' (first set on line {first_line})"),
            ));
        }
        map.insert(key, (line_no, value));
    }
    let mut f = Fields { path, map };

    let (task_line, task_name) = f.required("task")?;
    let task = match task_name {
        "shifted_gaussians" => {
            let classes = f.req_usize("classes")?;
            let features = f.req_usize("features")?;
            let per_class = f.req_usize("per_class")?;
            let shift = f.f64_list("shift", features, 0.0)?;
            let scale = f.f64_list("scale", features, 1.0)?;
            TaskSpec::ShiftedGaussians { classes, features, per_class, shift, scale }
        }
        "channel_permuted" => {
            let classes = f.req_usize("classes")?;
            let features = f.req_usize("features")?;
            let per_class = f.req_usize("per_class")?;
            let entry = f.required("permutation")?;
            let permutation = f.usize_list("permutation", entry)?;
            let shift = f.f64_list("shift", features, 0.0)?;
            TaskSpec::ChannelPermuted { classes, features, per_class, permutation, shift }
        }
        "two_moons" => {
            let per_class = f.req_usize("per_class")?;
            let angle = f.opt_f64("angle", 30.0)?;
            let noise = f.opt_f64("noise", 0.1)?;
            TaskSpec::TwoMoons { per_class, angle, noise }
        }
        other => {
            return Err(f.err(
                task_line,
                format!(
                    "unknown task '{other}' (expected shifted_gaussians, channel_permuted, or two_moons)"
                ),
            ));
        }
    };

    let hidden = match f.take("hidden") {
        Some(e) => f.usize_list("hidden", e)?,
        None => vec![32],
    };

    let (norm_line, norm_name) = f.required("normalizer")?;
    let normalizer = NormKind::parse(norm_name).map_err(|e| f.err(norm_line, e.to_string()))?;

    let defaults = NormOptions::default();
    let measure = match f.take("measure") {
        Some((line, raw)) => Measure::parse(raw).map_err(|e| f.err(line, e.to_string()))?,
        None => defaults.measure,
    };
    let norm_opts = NormOptions {
        epsilon: f.opt_f64("epsilon", defaults.epsilon)?,
        alpha: f.opt_f64("alpha", defaults.alpha)?,
        group_size: f.opt_usize("group_size", defaults.group_size)?,
        measure,
        fixed_gate: f.opt_f64_maybe("fixed_gate")?,
    };

    let optim_defaults = OptimConfig::default();
    let optim = OptimConfig {
        lr: f.opt_f64("lr", optim_defaults.lr)?,
        momentum: f.opt_f64("momentum", optim_defaults.momentum)?,
        weight_decay: f.opt_f64("weight_decay", optim_defaults.weight_decay)?,
        affine_lr: f.opt_f64_maybe("affine_lr")?,
        affine_weight_decay: f.opt_f64_maybe("affine_weight_decay")?,
    };

    let epochs = f.opt_usize("epochs", 20)?;
    let batch_size = f.opt_usize("batch_size", 64)?;
    let lambda = f.opt_f64("lambda", 0.0)?;
    let anneal = f.opt_bool("anneal", true)?;
    let disc_hidden = f.opt_usize("disc_hidden", 32)?;
    let seed = {
        let e = f.required("seed")?;
        f.parse_with("seed", e, |r| {
            r.parse::<u64>().map_err(|_| format!("expected a nonnegative integer, got '{r}'"))
        })?
    };
    let out = f.take("out").map(|(_, v)| v.to_string());

    if let Some((key, (line, _))) = f.map.iter().next() {
        return Err(Error::config(path, *line, format!("unknown key '{key}'")));
    }

    let cfg = ExperimentConfig {
        task,
        hidden,
        normalizer,
        norm_opts,
        optim,
        epochs,
        batch_size,
        lambda,
        anneal,
        disc_hidden,
        seed,
        out,
    };
    cfg.train_config().validate()?;
    if let Some(g) = cfg.norm_opts.fixed_gate {
        if !(0.5..=1.0).contains(&g) {
            return Err(Error::invalid("fixed_gate must lie in [0.5, 1]"));
        }
    }
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
    parse(&text, &path.display().to_string())
}
