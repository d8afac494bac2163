//! Seeded synthetic two-domain datasets and paired batching.
//!
//! All generators are pure functions of (config, seed). Target labels exist
//! on the dataset for evaluation, but the batch stream hands the trainer
//! source labels only.

use crate::error::{Error, Result};
use crate::norm::Domain;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;
use std::path::Path;

#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub domain: Domain,
}

impl DomainDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, domain: Domain) -> Result<Self> {
        let shape = features.shape();
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "dataset features must be [M, F], got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows vs {} labels",
                shape[0],
                labels.len()
            )));
        }
        if shape[0] == 0 {
            return Err(Error::invalid("dataset must have at least one row"));
        }
        Ok(DomainDataset { features, labels, domain })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.feature_dim();
        &self.features.data()[i * f..(i + 1) * f]
    }

    /// Rows gathered by index into a fresh [len, F] tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        let f = self.feature_dim();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![idx.len(), f], data).unwrap()
    }
}

fn draw_standard(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Gaussian classes shared across domains; the target applies a per-feature
/// affine map `x -> scale*x + shift` to fresh draws from the same process.
pub fn make_shifted_gaussians(
    classes: usize,
    features: usize,
    shift: &[f64],
    scale: &[f64],
    per_class: usize,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if classes < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    if features < 2 {
        return Err(Error::invalid("need at least two features"));
    }
    if per_class == 0 {
        return Err(Error::invalid("need at least one sample per class"));
    }
    if shift.len() != features || scale.len() != features {
        return Err(Error::invalid(format!(
            "shift/scale must have length {features}, got {}/{}",
            shift.len(),
            scale.len()
        )));
    }
    if scale.iter().any(|&s| s == 0.0) {
        return Err(Error::invalid("scale entries must be nonzero"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = draw_standard(&mut rng, classes * features)
        .into_iter()
        .map(|v| 2.0 * v)
        .collect();

    let m = classes * per_class;
    let mut draw_domain = |affine: bool| {
        let mut data = Vec::with_capacity(m * features);
        let mut labels = Vec::with_capacity(m);
        for k in 0..classes {
            for _ in 0..per_class {
                for j in 0..features {
                    let x: f64 = rng.sample(StandardNormal);
                    let v = centers[k * features + j] + x;
                    data.push(if affine { scale[j] * v + shift[j] } else { v });
                }
                labels.push(k);
            }
        }
        (data, labels)
    };

    let (src_data, src_labels) = draw_domain(false);
    let (tgt_data, tgt_labels) = draw_domain(true);
    Ok((
        DomainDataset::new(
            Tensor::new(vec![m, features], src_data)?,
            src_labels,
            Domain::Source,
        )?,
        DomainDataset::new(
            Tensor::new(vec![m, features], tgt_data)?,
            tgt_labels,
            Domain::Target,
        )?,
    ))
}

fn validate_permutation(perm: &[usize], features: usize) -> Result<()> {
    if perm.len() != features {
        return Err(Error::invalid(format!(
            "permutation must have length {features}, got {}",
            perm.len()
        )));
    }
    let mut seen = vec![false; features];
    for &p in perm {
        if p >= features || seen[p] {
            return Err(Error::invalid("permutation must be a bijection"));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Same generating process as the shifted Gaussians, but the target's
/// feature axes are permuted before the shift. Corresponding channels no
/// longer correspond; the permuted partner does.
pub fn make_channel_permuted(
    classes: usize,
    features: usize,
    permutation: &[usize],
    shift: &[f64],
    per_class: usize,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    validate_permutation(permutation, features)?;
    if shift.len() != features {
        return Err(Error::invalid(format!(
            "shift must have length {features}, got {}",
            shift.len()
        )));
    }
    let zeros = vec![0.0; features];
    let ones = vec![1.0; features];
    let (source, base) =
        make_shifted_gaussians(classes, features, &zeros, &ones, per_class, seed)?;

    let m = base.len();
    let mut data = Vec::with_capacity(m * features);
    for r in 0..m {
        let row = base.row(r);
        for j in 0..features {
            data.push(row[permutation[j]] + shift[j]);
        }
    }
    let target = DomainDataset::new(
        Tensor::new(vec![m, features], data)?,
        base.labels,
        Domain::Target,
    )?;
    Ok((source, target))
}

const MOON_PIVOT: (f64, f64) = (0.5, 0.25);

/// Two interleaved half-circles; the target process is the source process
/// rotated about the figure's center of symmetry. At 180 degrees the
/// rotation maps each moon onto the other exactly.
pub fn make_two_moons_shift(
    per_class: usize,
    angle_degrees: f64,
    noise: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if per_class == 0 {
        return Err(Error::invalid("need at least one sample per class"));
    }
    if noise < 0.0 {
        return Err(Error::invalid("noise must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = angle_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();

    let mut draw_domain = |rotate: bool| {
        let m = 2 * per_class;
        let mut data = Vec::with_capacity(m * 2);
        let mut labels = Vec::with_capacity(m);
        for class in 0..2usize {
            for _ in 0..per_class {
                let t = rng.gen_range(0.0..PI);
                let (mut x, mut y) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                x += noise * nx;
                y += noise * ny;
                if rotate {
                    let dx = x - MOON_PIVOT.0;
                    let dy = y - MOON_PIVOT.1;
                    x = MOON_PIVOT.0 + cos * dx - sin * dy;
                    y = MOON_PIVOT.1 + sin * dx + cos * dy;
                }
                data.push(x);
                data.push(y);
                labels.push(class);
            }
        }
        (Tensor::new(vec![m, 2], data).unwrap(), labels)
    };

    let (src_feat, src_labels) = draw_domain(false);
    let (tgt_feat, tgt_labels) = draw_domain(true);
    Ok((
        DomainDataset::new(src_feat, src_labels, Domain::Source)?,
        DomainDataset::new(tgt_feat, tgt_labels, Domain::Target)?,
    ))
}

/// One training step's data: a source batch with labels and an equally
/// sized target batch without them.
pub struct BatchPair {
    pub x_s: Tensor,
    pub y_s: Vec<usize>,
    pub x_t: Tensor,
}

/// Paired batch stream. Each domain is shuffled independently; whenever a
/// domain runs out of unseen rows it is reshuffled and restarted, so the
/// shorter dataset recycles while the longer one paces the epoch.
pub struct BatchIter<'a> {
    source: &'a DomainDataset,
    target: &'a DomainDataset,
    batch: usize,
    rng: ChaCha8Rng,
    order_s: Vec<usize>,
    order_t: Vec<usize>,
    cur_s: usize,
    cur_t: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(
        source: &'a DomainDataset,
        target: &'a DomainDataset,
        batch: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if batch > source.len().min(target.len()) {
            return Err(Error::invalid(format!(
                "batch size {batch} exceeds the smaller dataset ({} source, {} target rows)",
                source.len(),
                target.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order_s: Vec<usize> = (0..source.len()).collect();
        let mut order_t: Vec<usize> = (0..target.len()).collect();
        order_s.shuffle(&mut rng);
        order_t.shuffle(&mut rng);
        Ok(BatchIter {
            source,
            target,
            batch,
            rng,
            order_s,
            order_t,
            cur_s: 0,
            cur_t: 0,
        })
    }

    /// Full batches per epoch under the drop-last rule, paced by the larger
    /// dataset.
    pub fn steps_per_epoch(&self) -> usize {
        self.source.len().max(self.target.len()) / self.batch
    }

    pub fn next_batch(&mut self) -> BatchPair {
        if self.cur_s + self.batch > self.order_s.len() {
            self.order_s.shuffle(&mut self.rng);
            self.cur_s = 0;
        }
        if self.cur_t + self.batch > self.order_t.len() {
            self.order_t.shuffle(&mut self.rng);
            self.cur_t = 0;
        }
        let idx_s = &self.order_s[self.cur_s..self.cur_s + self.batch];
        let idx_t = &self.order_t[self.cur_t..self.cur_t + self.batch];
        let pair = BatchPair {
            x_s: self.source.gather(idx_s),
            y_s: idx_s.iter().map(|&i| self.source.labels[i]).collect(),
            x_t: self.target.gather(idx_t),
        };
        self.cur_s += self.batch;
        self.cur_t += self.batch;
        pair
    }

    pub fn epoch(&mut self) -> Vec<BatchPair> {
        (0..self.steps_per_epoch()).map(|_| self.next_batch()).collect()
    }
}

/// Write both domains into one CSV file: `f0,...,f{F-1},label,domain`.
pub fn write_csv(path: &Path, source: &DomainDataset, target: &DomainDataset) -> Result<()> {
    if source.feature_dim() != target.feature_dim() {
        return Err(Error::invalid("domains must share a feature dimension"));
    }
    let f = source.feature_dim();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
    let mut header: Vec<String> = (0..f).map(|j| format!("f{j}")).collect();
    header.push("label".to_string());
    header.push("domain".to_string());
    w.write_record(&header)
        .map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
    for ds in [source, target] {
        let tag = ds.domain.tag().to_string();
        for i in 0..ds.len() {
            let mut rec: Vec<String> = ds.row(i).iter().map(|v| format!("{v}")).collect();
            rec.push(format!("{}", ds.labels[i]));
            rec.push(tag.clone());
            w.write_record(&rec)
                .map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e.to_string()))?;
    Ok(())
}

/// Read a two-domain CSV produced by `write_csv` (or hand-authored with the
/// same schema). Row order within each domain is preserved.
pub fn read_csv(path: &Path) -> Result<(DomainDataset, DomainDataset)> {
    let p = path.display().to_string();
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::io(p.clone(), e.to_string()))?;
    let headers = r
        .headers()
        .map_err(|e| Error::io(p.clone(), e.to_string()))?
        .clone();
    let cols = headers.len();
    if cols < 4 {
        return Err(Error::config(&p, 1, "need f0.., label, domain columns"));
    }
    let f = cols - 2;
    for j in 0..f {
        if headers.get(j) != Some(format!("f{j}").as_str()) {
            return Err(Error::config(&p, 1, format!("column {j} must be f{j}")));
        }
    }
    if headers.get(f) != Some("label") || headers.get(f + 1) != Some("domain") {
        return Err(Error::config(&p, 1, "last columns must be label, domain"));
    }

    let mut rows_s: Vec<f64> = Vec::new();
    let mut rows_t: Vec<f64> = Vec::new();
    let mut labels_s = Vec::new();
    let mut labels_t = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::config(&p, line, e.to_string()))?;
        if rec.len() != cols {
            return Err(Error::config(
                &p,
                line,
                format!("expected {cols} fields, got {}", rec.len()),
            ));
        }
        let mut feat = Vec::with_capacity(f);
        for j in 0..f {
            let v: f64 = rec[j]
                .trim()
                .parse()
                .map_err(|_| Error::config(&p, line, format!("bad float in f{j}: {:?}", &rec[j])))?;
            if !v.is_finite() {
                return Err(Error::config(&p, line, format!("non-finite value in f{j}")));
            }
            feat.push(v);
        }
        let label: usize = rec[f]
            .trim()
            .parse()
            .map_err(|_| Error::config(&p, line, format!("bad label: {:?}", &rec[f])))?;
        match rec[f + 1].trim() {
            "s" => {
                rows_s.extend(feat);
                labels_s.push(label);
            }
            "t" => {
                rows_t.extend(feat);
                labels_t.push(label);
            }
            other => {
                return Err(Error::config(&p, line, format!("domain must be s or t, got {other:?}")))
            }
        }
    }
    if labels_s.is_empty() || labels_t.is_empty() {
        return Err(Error::config(&p, 1, "file must contain both domains"));
    }
    Ok((
        DomainDataset::new(
            Tensor::new(vec![labels_s.len(), f], rows_s)?,
            labels_s,
            Domain::Source,
        )?,
        DomainDataset::new(
            Tensor::new(vec![labels_t.len(), f], rows_t)?,
            labels_t,
            Domain::Target,
        )?,
    ))
}
