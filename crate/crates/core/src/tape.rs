//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its output value, its parent node
//! ids, and a closure that maps the upstream gradient to per-parent
//! gradients. Nodes are created in evaluation order, so walking ids in
//! reverse is already a reverse-topological traversal.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackFn>,
}

/// Gradients of one scalar loss with respect to every tape node.
///
/// Nodes the loss does not depend on hold `None`, which reads as zero.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient as a dense tensor, zeros when the node is unreachable.
    pub fn dense(&self, v: Var, shape: &[usize]) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an input node. Leaves receive gradients but propagate nothing.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Copies a node's value onto a fresh leaf, severing gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, vec![], None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.scale(-1.0)])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![g.mul(p[1]).unwrap(), g.mul(p[0]).unwrap()]
            })),
        ))
    }

    /// Elementwise `k*x + c` with scalar constants.
    pub fn affine(&mut self, x: Var, k: f64, c: f64) -> Var {
        let value = self.value(x).map(|v| k * v + c);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _, _| vec![g.scale(k)])),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, p, _| {
                let mut out = g.clone();
                for (o, &xi) in out.data_mut().iter_mut().zip(p[0].data()) {
                    if xi <= 0.0 {
                        *o = 0.0;
                    }
                }
                vec![out]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(
            value,
            vec![x],
            Some(Box::new(|g, p, _| {
                vec![Tensor::full(p[0].shape(), g.item())]
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(
            value,
            vec![x],
            Some(Box::new(|g, p, _| {
                vec![g.reshaped(p[0].shape().to_vec()).unwrap()]
            })),
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(
            value,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                let bt = tensor::transpose(p[1]).unwrap();
                let at = tensor::transpose(p[0]).unwrap();
                vec![
                    tensor::matmul(g, &bt).unwrap(),
                    tensor::matmul(&at, g).unwrap(),
                ]
            })),
        ))
    }

    /// Adds a `[D]` bias to every row of a `[N, D]` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = match self.value(x).shape() {
            [n, d] => (*n, *d),
            other => {
                return Err(Error::invalid(format!(
                    "add_row_bias: expected rank-2 input, got {other:?}"
                )))
            }
        };
        if self.value(b).shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: self.value(x).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = self.value(x).clone();
        for r in 0..n {
            for c in 0..d {
                out.data_mut()[r * d + c] += self.value(b).data()[c];
            }
        }
        Ok(self.push(
            out,
            vec![x, b],
            Some(Box::new(move |g, _, _| {
                let mut gb = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        gb[c] += g.data()[r * d + c];
                    }
                }
                vec![g.clone(), Tensor::from_vec(gb)]
            })),
        ))
    }

    /// Concatenates along axis 0. All parents must agree on the trailing axes.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat0: no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.is_empty() {
            return Err(Error::invalid("concat0: scalars have no axis 0"));
        }
        let tail = &first[1..];
        let mut rows = 0usize;
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || &s[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat0",
                    left: first.clone(),
                    right: s.to_vec(),
                });
            }
            rows += s[0];
            lens.push(self.value(p).numel());
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(tail);
        let value = Tensor::new(shape, data)?;
        let pshapes: Vec<Vec<usize>> = parts.iter().map(|p| self.value(*p).shape().to_vec()).collect();
        Ok(self.push(
            value,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(lens.len());
                let mut off = 0;
                for (len, shape) in lens.iter().zip(&pshapes) {
                    let chunk = g.data()[off..off + len].to_vec();
                    out.push(Tensor::new(shape.clone(), chunk).unwrap());
                    off += len;
                }
                out
            })),
        ))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("narrow0: scalars have no axis 0"));
        }
        if start + len > shape[0] {
            return Err(Error::invalid(format!(
                "narrow0: rows {start}..{} out of bounds for axis length {}",
                start + len,
                shape[0]
            )));
        }
        let stride: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * stride..(start + len) * stride].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            vec![x],
            Some(Box::new(move |g, p, _| {
                let mut full = Tensor::zeros(p[0].shape());
                full.data_mut()[start * stride..(start + len) * stride]
                    .copy_from_slice(g.data());
                vec![full]
            })),
        ))
    }

    /// Per-channel mean of a `[N, C, H, W]` tensor over the N, H, W axes.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (mu, _) = tensor::channel_moments(self.value(x))?;
        Ok(self.push(
            mu,
            vec![x],
            Some(Box::new(|g, p, _| {
                let (n, c, h, w) = tensor::dims4(p[0]).unwrap();
                let m = (n * h * w) as f64;
                let plane = h * w;
                let mut out = Tensor::zeros(p[0].shape());
                for ni in 0..n {
                    for ci in 0..c {
                        let gv = g.data()[ci] / m;
                        let base = (ni * c + ci) * plane;
                        for k in 0..plane {
                            out.data_mut()[base + k] = gv;
                        }
                    }
                }
                vec![out]
            })),
        ))
    }

    /// Per-channel `mean((x - mu)^2)` treating `mu` as its own input.
    pub fn channel_var(&mut self, x: Var, mu: Var) -> Result<Var> {
        let (n, c, h, w) = tensor::dims4(self.value(x))?;
        if self.value(mu).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "channel_var",
                left: self.value(x).shape().to_vec(),
                right: self.value(mu).shape().to_vec(),
            });
        }
        let m = (n * h * w) as f64;
        let plane = h * w;
        let xd = self.value(x).data();
        let mud = self.value(mu).data();
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for k in 0..plane {
                    let d = xd[base + k] - mud[ci];
                    var[ci] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }
        Ok(self.push(
            Tensor::from_vec(var),
            vec![x, mu],
            Some(Box::new(move |g, p, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                let mut gmu = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        let k2 = 2.0 * g.data()[ci] / m;
                        for k in 0..plane {
                            let d = p[0].data()[base + k] - p[1].data()[ci];
                            gx.data_mut()[base + k] = k2 * d;
                            gmu[ci] -= k2 * d;
                        }
                    }
                }
                vec![gx, Tensor::from_vec(gmu)]
            })),
        ))
    }

    /// Fused standardize-and-affine: `gamma*(x - mu)/sqrt(var + eps) + beta`
    /// per channel, with `mu`, `var`, `gamma`, `beta` all rank-1 `[C]`.
    pub fn channel_norm_affine(
        &mut self,
        x: Var,
        mu: Var,
        var: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = tensor::dims4(self.value(x))?;
        for (name, v) in [("mu", mu), ("var", var), ("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::invalid(format!(
                    "channel_norm_affine: {name} must have shape [{c}], got {:?}",
                    self.value(v).shape()
                )));
            }
        }
        if eps <= 0.0 {
            return Err(Error::invalid("channel_norm_affine: eps must be positive"));
        }
        let plane = h * w;
        let mut out = Tensor::zeros(self.value(x).shape());
        {
            let xd = self.value(x).data();
            let mud = self.value(mu).data();
            let vard = self.value(var).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            for ni in 0..n {
                for ci in 0..c {
                    let istd = 1.0 / (vard[ci] + eps).sqrt();
                    let base = (ni * c + ci) * plane;
                    for k in 0..plane {
                        out.data_mut()[base + k] =
                            gd[ci] * (xd[base + k] - mud[ci]) * istd + bd[ci];
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![x, mu, var, gamma, beta],
            Some(Box::new(move |g, p, _| {
                let (xd, mud, vard, gd) = (p[0].data(), p[1].data(), p[2].data(), p[3].data());
                let mut gx = Tensor::zeros(p[0].shape());
                let mut gmu = vec![0.0; c];
                let mut gvar = vec![0.0; c];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let istd = 1.0 / (vard[ci] + eps).sqrt();
                        let base = (ni * c + ci) * plane;
                        for k in 0..plane {
                            let gv = g.data()[base + k];
                            let xc = xd[base + k] - mud[ci];
                            gx.data_mut()[base + k] = gv * gd[ci] * istd;
                            gmu[ci] -= gv * gd[ci] * istd;
                            gvar[ci] -= 0.5 * gv * gd[ci] * xc * istd * istd * istd;
                            ggamma[ci] += gv * xc * istd;
                            gbeta[ci] += gv;
                        }
                    }
                }
                vec![
                    gx,
                    Tensor::from_vec(gmu),
                    Tensor::from_vec(gvar),
                    Tensor::from_vec(ggamma),
                    Tensor::from_vec(gbeta),
                ]
            })),
        ))
    }

    /// Scales channel `c` of a `[N, C, H, W]` tensor by the constant `s[c]`.
    pub fn scale_channels_const(&mut self, x: Var, s: &Tensor) -> Result<Var> {
        let (n, c, h, w) = tensor::dims4(self.value(x))?;
        if s.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "scale_channels_const",
                left: self.value(x).shape().to_vec(),
                right: s.shape().to_vec(),
            });
        }
        let plane = h * w;
        let mut out = self.value(x).clone();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for k in 0..plane {
                    out.data_mut()[base + k] *= s.data()[ci];
                }
            }
        }
        let sc = s.clone();
        Ok(self.push(
            out,
            vec![x],
            Some(Box::new(move |g, _, _| {
                let mut gx = g.clone();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for k in 0..plane {
                            gx.data_mut()[base + k] *= sc.data()[ci];
                        }
                    }
                }
                vec![gx]
            })),
        ))
    }

    pub fn softmax_rows(&mut self, m: Var) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(m))?;
        Ok(self.push(
            value,
            vec![m],
            Some(Box::new(|g, _, out| {
                let (rows, cols) = (out.shape()[0], out.shape()[1]);
                let mut gin = Tensor::zeros(out.shape());
                for r in 0..rows {
                    let mut dot = 0.0;
                    for j in 0..cols {
                        dot += g.data()[r * cols + j] * out.data()[r * cols + j];
                    }
                    for j in 0..cols {
                        let s = out.data()[r * cols + j];
                        gin.data_mut()[r * cols + j] = s * (g.data()[r * cols + j] - dot);
                    }
                }
                vec![gin]
            })),
        ))
    }

    pub fn transpose(&mut self, m: Var) -> Result<Var> {
        let value = tensor::transpose(self.value(m))?;
        Ok(self.push(
            value,
            vec![m],
            Some(Box::new(|g, _, _| vec![tensor::transpose(g).unwrap()])),
        ))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let value = tensor::matvec(self.value(m), self.value(v))?;
        let (rows, cols) = (self.value(m).shape()[0], self.value(m).shape()[1]);
        Ok(self.push(
            value,
            vec![m, v],
            Some(Box::new(move |g, p, _| {
                let mut gm = Tensor::zeros(&[rows, cols]);
                let mut gv = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gm.data_mut()[r * cols + c] = g.data()[r] * p[1].data()[c];
                        gv[c] += g.data()[r] * p[0].data()[r * cols + c];
                    }
                }
                vec![gm, Tensor::from_vec(gv)]
            })),
        ))
    }

    /// `E[i,j] = -(a[i] - b[j])^2` for rank-1 `a`, `b` of equal length.
    pub fn pairwise_neg_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.check_pair("pairwise_neg_sq", a, b)?;
        let mut e = Tensor::zeros(&[c, c]);
        for i in 0..c {
            for j in 0..c {
                let d = self.value(a).data()[i] - self.value(b).data()[j];
                e.data_mut()[i * c + j] = -(d * d);
            }
        }
        Ok(self.push(
            e,
            vec![a, b],
            Some(Box::new(move |g, p, _| {
                let mut ga = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..c {
                    for j in 0..c {
                        let d = p[0].data()[i] - p[1].data()[j];
                        let gv = g.data()[i * c + j];
                        ga[i] -= 2.0 * gv * d;
                        gb[j] += 2.0 * gv * d;
                    }
                }
                vec![Tensor::from_vec(ga), Tensor::from_vec(gb)]
            })),
        ))
    }

    /// `E[i,j] = -|a[i] - b[j]|`, with the zero-crossing subgradient set to 0.
    pub fn pairwise_neg_abs(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.check_pair("pairwise_neg_abs", a, b)?;
        let mut e = Tensor::zeros(&[c, c]);
        for i in 0..c {
            for j in 0..c {
                e.data_mut()[i * c + j] = -(self.value(a).data()[i] - self.value(b).data()[j]).abs();
            }
        }
        Ok(self.push(
            e,
            vec![a, b],
            Some(Box::new(move |g, p, _| {
                let mut ga = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for i in 0..c {
                    for j in 0..c {
                        let d = p[0].data()[i] - p[1].data()[j];
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        let gv = g.data()[i * c + j];
                        ga[i] -= gv * s;
                        gb[j] += gv * s;
                    }
                }
                vec![Tensor::from_vec(ga), Tensor::from_vec(gb)]
            })),
        ))
    }

    /// Cosine similarity minus one between per-channel `(mean, variance)`
    /// pairs: row i uses `(ma[i], va[i])`, column j uses `(mb[j], vb[j])`.
    pub fn pairwise_neg_cosdist(&mut self, ma: Var, va: Var, mb: Var, vb: Var) -> Result<Var> {
        let c = self.check_pair("pairwise_neg_cosdist", ma, mb)?;
        if self.value(va).shape() != [c] || self.value(vb).shape() != [c] {
            return Err(Error::invalid(
                "pairwise_neg_cosdist: all four stat vectors must share one length",
            ));
        }
        const GUARD: f64 = 1e-12;
        let norm = |m: f64, v: f64| (m * m + v * v).sqrt().max(GUARD);
        let mut e = Tensor::zeros(&[c, c]);
        for i in 0..c {
            let (u0, u1) = (self.value(ma).data()[i], self.value(va).data()[i]);
            let nu = norm(u0, u1);
            for j in 0..c {
                let (v0, v1) = (self.value(mb).data()[j], self.value(vb).data()[j]);
                let nv = norm(v0, v1);
                e.data_mut()[i * c + j] = (u0 * v0 + u1 * v1) / (nu * nv) - 1.0;
            }
        }
        Ok(self.push(
            e,
            vec![ma, va, mb, vb],
            Some(Box::new(move |g, p, _| {
                let mut gma = vec![0.0; c];
                let mut gva = vec![0.0; c];
                let mut gmb = vec![0.0; c];
                let mut gvb = vec![0.0; c];
                for i in 0..c {
                    let (u0, u1) = (p[0].data()[i], p[1].data()[i]);
                    let nu = norm(u0, u1);
                    for j in 0..c {
                        let (v0, v1) = (p[2].data()[j], p[3].data()[j]);
                        let nv = norm(v0, v1);
                        let cos = (u0 * v0 + u1 * v1) / (nu * nv);
                        let gv = g.data()[i * c + j];
                        gma[i] += gv * (v0 / (nu * nv) - cos * u0 / (nu * nu));
                        gva[i] += gv * (v1 / (nu * nv) - cos * u1 / (nu * nu));
                        gmb[j] += gv * (u0 / (nu * nv) - cos * v0 / (nv * nv));
                        gvb[j] += gv * (u1 / (nu * nv) - cos * v1 / (nv * nv));
                    }
                }
                vec![
                    Tensor::from_vec(gma),
                    Tensor::from_vec(gva),
                    Tensor::from_vec(gmb),
                    Tensor::from_vec(gvb),
                ]
            })),
        ))
    }

    /// Identity forward; backward multiplies the gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        self.push(
            value,
            vec![x],
            Some(Box::new(move |g, _, _| vec![g.scale(-lambda)])),
        )
    }

    /// Mean cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = match self.value(logits).shape() {
            [n, k] => (*n, *k),
            other => {
                return Err(Error::invalid(format!(
                    "cross_entropy_logits: expected rank-2 logits, got {other:?}"
                )))
            }
        };
        if n == 0 {
            return Err(Error::invalid("cross_entropy_logits: empty batch"));
        }
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "cross_entropy_logits: {n} rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid(format!(
                "cross_entropy_logits: label {bad} out of range for {k} classes"
            )));
        }
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &self.value(logits).data()[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        Ok(self.push(
            Tensor::scalar(loss),
            vec![logits],
            Some(Box::new(move |g, p, _| {
                let gs = g.item() / n as f64;
                let mut gl = Tensor::zeros(p[0].shape());
                for (r, &y) in labels.iter().enumerate() {
                    let row = &p[0].data()[r * k..(r + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                    for j in 0..k {
                        let p_j = (row[j] - max).exp() / denom;
                        let ind = if j == y { 1.0 } else { 0.0 };
                        gl.data_mut()[r * k + j] = gs * (p_j - ind);
                    }
                }
                vec![gl]
            })),
        ))
    }

    /// Valid-padding stride-1 convolution of `[N, Cin, H, W]` with a
    /// `[Cout, Cin, KH, KW]` kernel, no bias.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (n, cin, h, w) = tensor::dims4(self.value(x))?;
        let (cout, cin2, kh, kw) = tensor::dims4(self.value(kernel))?;
        if cin != cin2 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: self.value(x).shape().to_vec(),
                right: self.value(kernel).shape().to_vec(),
            });
        }
        if kh > h || kw > w {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let idx_x = move |ni: usize, ci: usize, hi: usize, wi: usize| {
            ((ni * cin + ci) * h + hi) * w + wi
        };
        let idx_k = move |co: usize, ci: usize, hi: usize, wi: usize| {
            ((co * cin + ci) * kh + hi) * kw + wi
        };
        let idx_o = move |ni: usize, co: usize, hi: usize, wi: usize| {
            ((ni * cout + co) * oh + hi) * ow + wi
        };
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        {
            let xd = self.value(x).data();
            let kd = self.value(kernel).data();
            for ni in 0..n {
                for co in 0..cout {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut acc = 0.0;
                            for ci in 0..cin {
                                for khi in 0..kh {
                                    for kwi in 0..kw {
                                        acc += xd[idx_x(ni, ci, ohi + khi, owi + kwi)]
                                            * kd[idx_k(co, ci, khi, kwi)];
                                    }
                                }
                            }
                            out.data_mut()[idx_o(ni, co, ohi, owi)] = acc;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![x, kernel],
            Some(Box::new(move |g, p, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                let mut gk = Tensor::zeros(p[1].shape());
                for ni in 0..n {
                    for co in 0..cout {
                        for ohi in 0..oh {
                            for owi in 0..ow {
                                let gv = g.data()[idx_o(ni, co, ohi, owi)];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for khi in 0..kh {
                                        for kwi in 0..kw {
                                            gx.data_mut()[idx_x(ni, ci, ohi + khi, owi + kwi)] +=
                                                gv * p[1].data()[idx_k(co, ci, khi, kwi)];
                                            gk.data_mut()[idx_k(co, ci, khi, kwi)] +=
                                                gv * p[0].data()[idx_x(ni, ci, ohi + khi, owi + kwi)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gk]
            })),
        ))
    }

    fn check_pair(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let c = match self.value(a).shape() {
            [c] => *c,
            other => {
                return Err(Error::invalid(format!(
                    "{op}: expected rank-1 inputs, got {other:?}"
                )))
            }
        };
        if self.value(b).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(c)
    }

    /// Reverse-mode sweep from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]).unwrap());
        for id in (0..=loss.0).rev() {
            let upstream = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[id];
            let back = match &node.backward {
                Some(b) => b,
                None => continue,
            };
            let pvals: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = back(&upstream, &pvals, &node.value);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(pgrads) {
                debug_assert_eq!(pg.shape(), self.nodes[parent.0].value.shape());
                grads[parent.0] = Some(match grads[parent.0].take() {
                    Some(acc) => acc.add(&pg)?,
                    None => pg,
                });
            }
        }
        Ok(Gradients { grads })
    }
}
