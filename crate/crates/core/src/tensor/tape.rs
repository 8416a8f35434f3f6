//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output; [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients into every node that
//! (transitively) depends on a leaf created with `requires_grad`.
//!
//! A tape built with [`Tape::dry`] records shapes only: every primitive still
//! validates its inputs and appends a node, but no arithmetic is performed.
//! That mode backs the shape-only network build and the activation-count
//! memory proxy.

use super::conv::{self, ConvDims, ConvGeometry};
use super::norm::{self, BatchStats};
use super::pool::{self, PoolKind};
use super::{c, numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Zeros,
    Add(Var, Var),
    AddN(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, T),
    MaskMul(Var, Vec<T>),
    SampleScale(Var, Vec<T>),
    Relu(Var),
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        stride: usize,
        aux: Vec<usize>,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    Mix {
        weights: Var,
        terms: Vec<(usize, Var)>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    DotConst(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Normalization mode for [`Tape::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Normalize with batch statistics; the statistics are returned.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    dry: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            dry: false,
        }
    }

    /// A shape-only tape.
    pub fn dry() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            dry: true,
        }
    }

    pub fn is_dry(&self) -> bool {
        self.dry
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Node value; empty on a dry tape.
    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    /// Gradient of the last backward pass w.r.t. `v`, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Total scalar count of all non-leaf nodes: the activations a backward
    /// pass would retain.
    pub fn activation_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| numel(&n.shape))
            .sum()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(self.dry || value.len() == numel(&shape));
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let shape = self.shape(x).to_vec();
        let value = if self.dry {
            Vec::new()
        } else {
            self.value(x).iter().map(|&v| f(v)).collect()
        };
        let rg = self.rg(&[x]);
        self.push(shape, value, op, rg)
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let value = if self.dry { Vec::new() } else { t.data().to_vec() };
        self.push(t.shape().to_vec(), value, Op::Leaf, t.requires_grad)
    }

    /// A leaf built from raw parts. On a dry tape `data` may be empty.
    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if !self.dry && numel(&shape) != data.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        let data = if self.dry { Vec::new() } else { data };
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.leaf_from(shape, data, false)
    }

    /// An all-zero activation of the given shape. It carries no gradient.
    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let value = if self.dry {
            Vec::new()
        } else {
            vec![T::zero(); numel(&shape)]
        };
        self.push(shape, value, Op::Zeros, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = if self.dry {
            Vec::new()
        } else {
            self.value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| x + y)
                .collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("add_n", "no operands"))?;
        for &x in &xs[1..] {
            self.same_shape("add_n", first, x)?;
        }
        if xs.len() == 1 {
            return Ok(first);
        }
        let value = if self.dry {
            Vec::new()
        } else {
            let mut acc = self.value(first).to_vec();
            for &x in &xs[1..] {
                for (a, &v) in acc.iter_mut().zip(self.value(x)) {
                    *a = *a + v;
                }
            }
            acc
        };
        let rg = self.rg(xs);
        Ok(self.push(self.shape(first).to_vec(), value, Op::AddN(xs.to_vec()), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = if self.dry {
            Vec::new()
        } else {
            self.value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| x * y)
                .collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if !self.dry && mask.len() != numel(self.shape(x)) {
            return Err(Error::shape(
                "mask_mul",
                format!("mask of {} for input {:?}", mask.len(), self.shape(x)),
            ));
        }
        let value = if self.dry {
            Vec::new()
        } else {
            self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect()
        };
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::MaskMul(x, mask), rg))
    }

    /// Multiplies each sample (leading axis) by its own constant factor.
    pub fn sample_scale(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || factors.len() != shape[0] {
            return Err(Error::shape(
                "sample_scale",
                format!("{} factors for input {:?}", factors.len(), shape),
            ));
        }
        let per = numel(&shape[1..]);
        let value = if self.dry {
            Vec::new()
        } else {
            self.value(x)
                .iter()
                .enumerate()
                .map(|(i, &v)| v * factors[i / per])
                .collect()
        };
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::SampleScale(x, factors), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let dims = conv::conv_dims(self.shape(x), self.shape(w), &geom)?;
        let value = if self.dry {
            Vec::new()
        } else {
            conv::forward(self.value(x), self.value(w), &dims, &geom)
        };
        let rg = self.rg(&[x, w]);
        Ok(self.push(dims.out_shape(), value, Op::Conv { x, w, geom, dims }, rg))
    }

    /// Batch normalization over NCHW (or NC) input with optional per-channel
    /// scale `gamma` and shift `beta`. In training mode the batch statistics
    /// are returned so the caller can fold them into running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::InvalidArgument(format!("batch_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let (_, ch, _) = norm::check_shape(&shape)?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [ch] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("affine parameter shape {:?} for {ch} channels", self.shape(p)),
                ));
            }
        }
        let mut inputs = vec![x];
        inputs.extend(gamma);
        inputs.extend(beta);
        let rg = self.rg(&inputs);
        if self.dry {
            let op = Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Vec::new(),
                inv_std: Vec::new(),
                train: matches!(mode, NormMode::Train),
            };
            return Ok((self.push(shape, Vec::new(), op, rg), None));
        }
        let (xhat, inv_std, stats, train) = match mode {
            NormMode::Train => {
                let out = norm::forward_train(self.value(x), &shape, eps)?;
                (out.xhat, out.inv_std, Some(out.stats), true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics of length {} for {ch} channels", mean.len()),
                    ));
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + c(eps)).sqrt()).collect();
                let xhat = norm::map_channels(self.value(x), &shape, |ci, v| (v - mean[ci]) * inv_std[ci]);
                (xhat, inv_std, None, false)
            }
        };
        let value = match (gamma, beta) {
            (None, None) => xhat.clone(),
            _ => {
                let g = gamma.map(|g| self.value(g).to_vec());
                let b = beta.map(|b| self.value(b).to_vec());
                norm::map_channels(&xhat, &shape, |ci, v| {
                    let v = match &g {
                        Some(g) => v * g[ci],
                        None => v,
                    };
                    match &b {
                        Some(b) => v + b[ci],
                        None => v,
                    }
                })
            }
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        };
        Ok((self.push(shape, value, op, rg), stats))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let os = pool::out_shape(&xs, kernel, stride)?;
        let (value, aux) = if self.dry {
            (Vec::new(), Vec::new())
        } else {
            pool::forward(self.value(x), &xs, &os, kind, stride)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            os,
            value,
            Op::Pool {
                x,
                kind,
                stride,
                aux,
            },
            rg,
        ))
    }

    /// Drops the first `top` rows and `left` columns of every NCHW plane.
    pub fn crop(&mut self, x: Var, top: usize, left: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] <= top || xs[3] <= left {
            return Err(Error::shape("crop", format!("cannot crop ({top},{left}) from {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (h - top, w - left);
        let value = if self.dry {
            Vec::new()
        } else {
            let src = self.value(x);
            let mut out = Vec::with_capacity(xs[0] * xs[1] * ho * wo);
            for p in 0..xs[0] * xs[1] {
                for r in top..h {
                    let off = p * h * w + r * w;
                    out.extend_from_slice(&src[off + left..off + w]);
                }
            }
            out
        };
        let rg = self.rg(&[x]);
        Ok(self.push(vec![xs[0], xs[1], ho, wo], value, Op::Crop { x, top, left }, rg))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(Error::shape("concat", format!("rank too small: {base:?}")));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible operand shapes {:?} and {:?}", base, s),
                ));
            }
            channels += s[1];
        }
        let mut shape = base.clone();
        shape[1] = channels;
        let value = if self.dry {
            Vec::new()
        } else {
            let plane = numel(&base[2..]);
            let mut out = Vec::with_capacity(numel(&shape));
            for b in 0..base[0] {
                for &p in parts {
                    let ch = self.shape(p)[1];
                    let off = b * ch * plane;
                    out.extend_from_slice(&self.value(p)[off..off + ch * plane]);
                }
            }
            out
        };
        let rg = self.rg(parts);
        Ok(self.push(shape, value, Op::Concat(parts.to_vec()), rg))
    }

    /// Mean over spatial axes: [N, C, H, W] → [N, C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] * xs[3] == 0 {
            return Err(Error::shape("global_avg_pool", format!("expected NCHW, got {xs:?}")));
        }
        let plane = xs[2] * xs[3];
        let value = if self.dry {
            Vec::new()
        } else {
            self.value(x)
                .chunks(plane)
                .map(|ch| ch.iter().copied().sum::<T>() / c(plane as f64))
                .collect()
        };
        let rg = self.rg(&[x]);
        Ok(self.push(vec![xs[0], xs[1]], value, Op::GlobalAvgPool(x), rg))
    }

    /// Affine map `x · wᵀ + b` with `x: [N, D]`, `w: [K, D]`, `b: [K]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(
                "dense",
                format!("input {xs:?} incompatible with weight {ws:?}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "dense",
                    format!("bias {:?} for {} outputs", self.shape(b), ws[0]),
                ));
            }
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        let value = if self.dry {
            Vec::new()
        } else {
            let (xv, wv) = (self.value(x), self.value(w));
            let bv = b.map(|b| self.value(b));
            let mut out = vec![T::zero(); n * k];
            for i in 0..n {
                let xr = &xv[i * d..(i + 1) * d];
                for j in 0..k {
                    let wr = &wv[j * d..(j + 1) * d];
                    let mut acc = bv.map_or(T::zero(), |b| b[j]);
                    for (&a, &bb) in xr.iter().zip(wr) {
                        acc = acc + a * bb;
                    }
                    out[i * k + j] = acc;
                }
            }
            out
        };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(vec![n, k], value, Op::Dense { x, w, b }, rg))
    }

    /// Softmax of a 1-D vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 1 || xs[0] == 0 {
            return Err(Error::shape("softmax", format!("expected a non-empty vector, got {xs:?}")));
        }
        let value = if self.dry {
            Vec::new()
        } else {
            softmax_slice(self.value(x))
        };
        let rg = self.rg(&[x]);
        Ok(self.push(xs, value, Op::Softmax(x), rg))
    }

    /// `Σ weights[i] · v` over `(i, v)` terms; every term shares one shape.
    pub fn mix(&mut self, weights: Var, terms: &[(usize, Var)]) -> Result<Var> {
        let (_, first) = *terms
            .first()
            .ok_or_else(|| Error::shape("mix", "no terms"))?;
        let wlen = numel(self.shape(weights));
        for &(i, v) in terms {
            self.same_shape("mix", first, v)?;
            if i >= wlen {
                return Err(Error::shape("mix", format!("weight index {i} out of {wlen}")));
            }
        }
        let shape = self.shape(first).to_vec();
        let value = if self.dry {
            Vec::new()
        } else {
            let w = self.value(weights);
            let mut out = vec![T::zero(); numel(&shape)];
            for &(i, v) in terms {
                let wi = w[i];
                for (o, &x) in out.iter_mut().zip(self.value(v)) {
                    *o = *o + wi * x;
                }
            }
            out
        };
        let mut inputs = vec![weights];
        inputs.extend(terms.iter().map(|t| t.1));
        let rg = self.rg(&inputs);
        Ok(self.push(
            shape,
            value,
            Op::Mix {
                weights,
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {ls:?} for {} labels", labels.len()),
            ));
        }
        let k = ls[1];
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: label {l} at position {i} out of range for {k} classes"
            )));
        }
        let (value, probs) = if self.dry {
            (Vec::new(), Vec::new())
        } else {
            let lv = self.value(logits);
            let mut probs = Vec::with_capacity(lv.len());
            let mut loss = T::zero();
            for (row, &label) in lv.chunks(k).zip(labels) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = row.iter().map(|&v| (v - m).exp()).sum();
                let lz = z.ln() + m;
                loss = loss + (lz - row[label]);
                probs.extend(row.iter().map(|&v| (v - lz).exp()));
            }
            (vec![loss / c(labels.len() as f64)], probs)
        };
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = if self.dry {
            Vec::new()
        } else {
            vec![self.value(x).iter().copied().sum()]
        };
        let rg = self.rg(&[x]);
        self.push(vec![], value, Op::Sum(x), rg)
    }

    /// Scalar `Σ x ⊙ k` for a constant `k` of matching size.
    pub fn dot_const(&mut self, x: Var, k: Vec<T>) -> Result<Var> {
        if !self.dry && k.len() != self.value(x).len() {
            return Err(Error::shape(
                "dot_const",
                format!("{} coefficients for input {:?}", k.len(), self.shape(x)),
            ));
        }
        let value = if self.dry {
            Vec::new()
        } else {
            vec![self.value(x).iter().zip(&k).map(|(&a, &b)| a * b).sum()]
        };
        let rg = self.rg(&[x]);
        Ok(self.push(vec![], value, Op::DotConst(x, k), rg))
    }

    /// Populates gradients of the scalar `loss` w.r.t. every node that
    /// requires one. Each call recomputes from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.dry {
            return Err(Error::InvalidArgument("backward on a shape-only tape".into()));
        }
        if numel(self.shape(loss)) != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            // Keep intermediate gradients available for inspection.
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Zeros => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::AddN(xs) => {
                for &v in xs {
                    if self.wants(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = g.iter().zip(self.value(*b)).map(|(&g, &y)| g * y).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.iter().zip(self.value(*a)).map(|(&g, &x)| g * x).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(x, k) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().map(|&v| v * *k).collect());
                }
            }
            Op::MaskMul(x, m) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.iter().zip(m).map(|(&v, &m)| v * m).collect());
                }
            }
            Op::SampleScale(x, f) => {
                if self.wants(*x) {
                    let per = numel(&node.shape[1..]);
                    accumulate(
                        grads,
                        *x,
                        g.iter().enumerate().map(|(j, &v)| v * f[j / per]).collect(),
                    );
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let d = g
                        .iter()
                        .zip(self.value(*x))
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::Conv { x, w, geom, dims } => {
                let (dx, dw) = conv::backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    dims,
                    geom,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = &node.shape;
                if let Some(gm) = gamma.filter(|v| self.wants(*v)) {
                    accumulate(grads, gm, norm::channel_sum_prod(g, xhat, shape));
                }
                if let Some(bt) = beta.filter(|v| self.wants(*v)) {
                    accumulate(grads, bt, norm::channel_sum(g, shape));
                }
                if self.wants(*x) {
                    let g_xhat = match gamma {
                        Some(gm) => {
                            let gv = self.value(*gm);
                            norm::map_channels(g, shape, |ci, v| v * gv[ci])
                        }
                        None => g.to_vec(),
                    };
                    let dx = if *train {
                        norm::backward_train(&g_xhat, xhat, inv_std, shape)
                    } else {
                        norm::map_channels(&g_xhat, shape, |ci, v| v * inv_std[ci])
                    };
                    accumulate(grads, *x, dx);
                }
            }
            Op::Pool {
                x,
                kind,
                stride,
                aux,
            } => {
                if self.wants(*x) {
                    let dx = pool::backward(g, aux, self.shape(*x), &node.shape, *kind, *stride);
                    accumulate(grads, *x, dx);
                }
            }
            Op::Crop { x, top, left } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (h, w) = (xs[2], xs[3]);
                    let wo = w - left;
                    let mut dx = vec![T::zero(); numel(xs)];
                    for p in 0..xs[0] * xs[1] {
                        for r in *top..h {
                            let src = (p * (h - top) + (r - top)) * wo;
                            let dst = p * h * w + r * w + left;
                            dx[dst..dst + wo].copy_from_slice(&g[src..src + wo]);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Concat(parts) => {
                let plane = numel(&node.shape[2..]);
                let total = node.shape[1];
                let mut ch0 = 0;
                for &p in parts {
                    let ch = self.shape(p)[1];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(numel(self.shape(p)));
                        for b in 0..node.shape[0] {
                            let off = (b * total + ch0) * plane;
                            d.extend_from_slice(&g[off..off + ch * plane]);
                        }
                        accumulate(grads, p, d);
                    }
                    ch0 += ch;
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let plane = xs[2] * xs[3];
                    let k: T = c(1.0 / plane as f64);
                    let d = (0..numel(xs)).map(|j| g[j / plane] * k).collect();
                    accumulate(grads, *x, d);
                }
            }
            Op::Dense { x, w, b } => {
                let (n, k) = (node.shape[0], node.shape[1]);
                let d = self.shape(*x)[1];
                if self.wants(*x) {
                    let wv = self.value(*w);
                    let mut dx = vec![T::zero(); n * d];
                    for i in 0..n {
                        for j in 0..k {
                            let gv = g[i * k + j];
                            for (o, &wv) in dx[i * d..(i + 1) * d].iter_mut().zip(&wv[j * d..(j + 1) * d]) {
                                *o = *o + gv * wv;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let xv = self.value(*x);
                    let mut dw = vec![T::zero(); k * d];
                    for i in 0..n {
                        for j in 0..k {
                            let gv = g[i * k + j];
                            for (o, &xv) in dw[j * d..(j + 1) * d].iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                                *o = *o + gv * xv;
                            }
                        }
                    }
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|v| self.wants(*v)) {
                    let mut db = vec![T::zero(); k];
                    for row in g.chunks(k) {
                        for (o, &v) in db.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = &node.value;
                    let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
                    accumulate(grads, *x, y.iter().zip(g).map(|(&y, &g)| y * (g - dot)).collect());
                }
            }
            Op::Mix { weights, terms } => {
                let wv = self.value(*weights);
                if self.wants(*weights) {
                    let mut dw = vec![T::zero(); wv.len()];
                    for &(idx, v) in terms {
                        let s: T = g.iter().zip(self.value(v)).map(|(&a, &b)| a * b).sum();
                        dw[idx] = dw[idx] + s;
                    }
                    accumulate(grads, *weights, dw);
                }
                for &(idx, v) in terms {
                    if self.wants(v) {
                        let k = wv[idx];
                        accumulate(grads, v, g.iter().map(|&x| x * k).collect());
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.wants(*logits) {
                    let k = self.shape(*logits)[1];
                    let scale = g[0] / c(labels.len() as f64);
                    let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * k + l] = d[i * k + l] - scale;
                    }
                    accumulate(grads, *logits, d);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, vec![g[0]; numel(self.shape(*x))]);
                }
            }
            Op::DotConst(x, k) => {
                if self.wants(*x) {
                    accumulate(grads, *x, k.iter().map(|&v| v * g[0]).collect());
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a = *a + b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Numerically stable softmax.
pub fn softmax_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        t.leaf_from(shape, data, true).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let w = leaf(&mut t, vec![1, 1, 1, 1], vec![1.0]);
        let y = t.conv2d(x, w, ConvGeometry::pointwise()).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![2, 2, 4, 4], (0..64).map(|v| v as f64 - 7.0).collect());
        let w = leaf(&mut t, vec![3, 2, 3, 3], vec![0.0; 54]);
        let y = t.conv2d(x, w, ConvGeometry::new(1, 1, 1, 1)).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_kernel_counts_window_coverage() {
        // Sliding a 3×3 ones kernel over a padded 3×3 ones image counts how
        // many taps fall inside the image: 9 at the centre, 4 at a corner.
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![1, 1, 3, 3], vec![1.0; 9]);
        let w = leaf(&mut t, vec![1, 1, 3, 3], vec![1.0; 9]);
        let y = t.conv2d(x, w, ConvGeometry::new(1, 1, 1, 1)).unwrap();
        let v = t.value(y);
        assert_eq!(v[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(v[corner], 4.0);
        }
        assert_eq!(v[1], 6.0);
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_dimension() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![1, 3, 4, 4], vec![0.0; 48]);
        let w = leaf(&mut t, vec![2, 2, 3, 3], vec![0.0; 36]);
        let err = t.conv2d(x, w, ConvGeometry::new(1, 1, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("in-channel"), "{err}");
    }

    #[test]
    fn pooling_examples() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![1, 1, 3, 3], (0..9).map(f64::from).collect());
        let y = t.pool2d(x, PoolKind::Max, 3, 2).unwrap();
        // Stride 2 with padding 1 on a 3×3 input: the [0,0] window covers rows 0..1.
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        let mx = t.pool2d(x, PoolKind::Max, 3, 1).unwrap();
        assert_eq!(t.value(mx)[4], 8.0);
        let avg = t.pool2d(x, PoolKind::Avg, 3, 1).unwrap();
        assert_eq!(t.value(avg)[4], 4.0);
        // Corner window averages only in-bounds values {0,1,3,4}.
        assert_eq!(t.value(avg)[0], 2.0);

        let k = leaf(&mut t, vec![1, 2, 2, 2], vec![5.0; 8]);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let y = t.pool2d(k, kind, 3, 1).unwrap();
            assert!(t.value(y).iter().all(|&v| v == 5.0));
        }
        assert!(t.pool2d(x, PoolKind::Avg, 5, 1).is_err());
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![1, 1, 2, 2], vec![1.0; 4]);
        let y = t.pool2d(x, PoolKind::Max, 3, 2).unwrap();
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::<f64>::new();
        let l = t.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let ce = t.cross_entropy(l, &[1]).unwrap();
        assert!((t.value(ce)[0] - 0.693147).abs() < 1e-6);
        let l = t.constant(vec![1, 2], vec![10.0, 0.0]).unwrap();
        let ce = t.cross_entropy(l, &[0]).unwrap();
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((t.value(ce)[0] - expected).abs() < 1e-15);
        assert!((t.value(ce)[0] - 4.5398e-5).abs() < 1e-8);
        assert!(t.cross_entropy(l, &[2]).is_err());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![2, 3], vec![0.5; 6]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![3], vec![1.0; 3]);
        let y = t.relu(x);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn batch_norm_normalizes_constant_and_standard_inputs() {
        let mut t = Tape::<f64>::new();
        let x = leaf(&mut t, vec![2, 2, 2, 2], vec![3.0; 16]);
        let (y, stats) = t.batch_norm(x, None, None, 1e-5, NormMode::Train).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().mean, vec![3.0, 3.0]);

        // Each channel already has mean 0 and population variance 1.
        let v = vec![1.0, -1.0, 1.0, -1.0];
        let x = leaf(&mut t, vec![4, 1, 1, 1], v.clone());
        let (y, _) = t.batch_norm(x, None, None, 1e-5, NormMode::Train).unwrap();
        for (a, b) in t.value(y).iter().zip(&v) {
            assert!((a - b).abs() < 1e-3);
        }
        assert!(t.batch_norm(x, None, None, 0.0, NormMode::Train).is_err());
    }

    #[test]
    fn dry_tape_tracks_shapes_only() {
        let mut t = Tape::<f32>::dry();
        let x = t.leaf_from(vec![2, 4, 8, 8], vec![], false).unwrap();
        let w = t.leaf_from(vec![4, 1, 3, 3], vec![], true).unwrap();
        let y = t.conv2d(x, w, ConvGeometry::new(2, 1, 1, 4)).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 4, 4]);
        assert!(t.value(y).is_empty());
        assert_eq!(t.activation_count(), 2 * 4 * 4 * 4);
        let s = t.sum(y);
        assert!(t.backward(s).is_err());
    }
}
