//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node holding its forward value and, when any input
//! requires a gradient, a backward closure. Nodes are created in topological
//! order, so `backward` walks the tape in reverse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Values visible to a backward rule.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
}

/// Returns one gradient per input; `None` for inputs that receive nothing.
pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Gradients are kept iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            inputs: Vec::new(),
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Records an op whose output was already computed.
    pub fn record<F>(&mut self, inputs: &[Var], output: Tensor, backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let needs = inputs.iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node {
            value: output.with_requires_grad(needs),
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: if needs { Some(Box::new(backward)) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable op with a caller-supplied gradient rule. The forward
    /// value is exactly `forward(inputs)`; the backward pass uses `backward`
    /// whatever the true derivative of `forward` is.
    pub fn custom_grad<Fw, Bw>(&mut self, inputs: &[Var], forward: Fw, backward: Bw) -> Var
    where
        Fw: FnOnce(&[&Tensor]) -> Tensor,
        Bw: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let out = {
            let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
            forward(&ins)
        };
        self.record(inputs, out, backward)
    }

    /// Back-propagates from a scalar `loss`. Each node that influences the
    /// loss is visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut reachable = vec![false; loss.0 + 1];
        let mut stack = vec![loss.0];
        while let Some(i) = stack.pop() {
            if reachable[i] {
                continue;
            }
            reachable[i] = true;
            stack.extend(self.nodes[i].inputs.iter().copied());
        }

        self.nodes[loss.0].value.accumulate_grad(&[1.0]);
        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let (Some(bw), Some(g)) = (&node.backward, node.value.grad()) else {
                continue;
            };
            let grads = {
                let ctx = BackwardCtx {
                    inputs: node.inputs.iter().map(|&j| &before[j].value).collect(),
                    output: &node.value,
                    grad: g,
                };
                bw(&ctx)
            };
            debug_assert_eq!(grads.len(), node.inputs.len());
            for (&j, gj) in node.inputs.iter().zip(grads) {
                if let Some(gj) = gj {
                    if before[j].value.requires_grad() {
                        before[j].value.accumulate_grad(&gj);
                    }
                }
            }
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // Elementwise and shape ops
    // ---------------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.record(&[a, b], out, |ctx| {
            vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.record(&[x], out, |ctx| {
            let g = ctx.inputs[0]
                .data()
                .iter()
                .zip(ctx.grad)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(g)]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = Tensor::new(shape, self.value(x).data().to_vec())?;
        Ok(self.record(&[x], out, |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// `sum_i x_i * w_i` with constant weights `w`.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var> {
        if self.value(x).len() != w.len() {
            return Err(Error::Dimension("weighted_sum: length mismatch".into()));
        }
        let s = self.value(x).data().iter().zip(w).map(|(a, b)| a * b).sum();
        let w = w.to_vec();
        Ok(self.record(&[x], Tensor::scalar(s), move |ctx| {
            vec![Some(w.iter().map(|wi| wi * ctx.grad[0]).collect())]
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.record(&[x], Tensor::scalar(s), |ctx| {
            vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]
        })
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        self.record(&[x], out, move |ctx| {
            vec![Some(ctx.grad.iter().zip(&mask).map(|(g, m)| g * m).collect())]
        })
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(Error::Dimension(format!("matmul: {sa:?} x {sb:?}")));
            }
        };
        let out = Tensor::new(&[m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.record(&[a, b], out, move |ctx| {
            let (a, b, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            // dA = G B^T, dB = A^T G
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g[i * n + j] * b[p * n + j];
                    }
                    da[i * k + p] = acc;
                }
            }
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    let row = &g[i * n..(i + 1) * n];
                    for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(row) {
                        *d += av * gv;
                    }
                }
            }
            vec![Some(da), Some(db)]
        }))
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` -> `[N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, fin, fout) = match (tx.shape(), tw.shape(), tb.shape()) {
            ([n, i], [o, i2], [o2]) if i == i2 && o == o2 => (*n, *i, *o),
            (sx, sw, sb) => {
                return Err(Error::Dimension(format!("linear: x {sx:?}, w {sw:?}, b {sb:?}")));
            }
        };
        let out = Tensor::new(
            &[n, fout],
            linear_forward(tx.data(), tw.data(), tb.data(), n, fin, fout),
        )?;
        Ok(self.record(&[x, w, b], out, move |ctx| {
            let (x, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut dx = vec![0.0; n * fin];
            let mut dw = vec![0.0; fout * fin];
            let mut db = vec![0.0; fout];
            for s in 0..n {
                for o in 0..fout {
                    let gv = g[s * fout + o];
                    db[o] += gv;
                    let wrow = &w[o * fin..(o + 1) * fin];
                    let xrow = &x[s * fin..(s + 1) * fin];
                    for ((dxi, dwi), (wi, xi)) in dx[s * fin..(s + 1) * fin]
                        .iter_mut()
                        .zip(dw[o * fin..(o + 1) * fin].iter_mut())
                        .zip(wrow.iter().zip(xrow))
                    {
                        *dxi += gv * wi;
                        *dwi += gv * xi;
                    }
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        }))
    }

    /// Cross-correlation of NCHW input with OIHW kernel plus per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
            stride,
            padding,
        )?;
        let data = conv2d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &geom);
        let out = Tensor::new(&[geom.n, geom.o, geom.oh, geom.ow], data)?;
        Ok(self.record(&[x, w, b], out, move |ctx| {
            let (dx, dw, db) =
                conv2d_backward(ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad, &geom);
            vec![Some(dx), Some(dw), Some(db)]
        }))
    }

    // ---------------------------------------------------------------------
    // Pooling and normalization
    // ---------------------------------------------------------------------

    /// Non-overlapping `k x k` max pooling. Ties route the gradient to the
    /// first maximum in scan order.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = dims4(t.shape(), "max_pool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Dimension(format!("max_pool2d: {h}x{w} not divisible by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let (out, argmax) = max_pool_forward(t.data(), n * c, h, w, k);
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        let len = t.len();
        Ok(self.record(&[x], out, move |ctx| {
            let mut dx = vec![0.0; len];
            for (g, &i) in ctx.grad.iter().zip(&argmax) {
                dx[i] += g;
            }
            vec![Some(dx)]
        }))
    }

    /// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = dims4(t.shape(), "global_avg_pool")?;
        let hw = h * w;
        let out = Tensor::new(&[n, c], global_avg_pool_forward(t.data(), n * c, hw))?;
        Ok(self.record(&[x], out, move |ctx| {
            let mut dx = vec![0.0; n * c * hw];
            for (i, g) in ctx.grad.iter().enumerate() {
                dx[i * hw..(i + 1) * hw].fill(g / hw as f64);
            }
            vec![Some(dx)]
        }))
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// per-channel batch mean and (biased) variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let t = self.value(x);
        let [n, c, h, w] = dims4(t.shape(), "batch_norm")?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let (xd, gd, bd) = (t.data(), self.value(gamma).data(), self.value(beta).data());
        if gd.len() != c || bd.len() != c {
            return Err(Error::Dimension("batch_norm: gamma/beta length".into()));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for (ch, mu) in mean.iter_mut().enumerate() {
                let off = (s * c + ch) * hw;
                *mu += xd[off..off + hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                var[ch] += xd[off..off + hw]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let v = self.record(&[x, gamma, beta], out, move |ctx| {
            let g = ctx.grad;
            let gamma = ctx.inputs[1].data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    for i in off..off + hw {
                        dgamma[ch] += g[i] * xhat[i];
                        dbeta[ch] += g[i];
                    }
                }
            }
            let mut dx = vec![0.0; g.len()];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    let k = gamma[ch] * inv_std[ch] / m;
                    for i in off..off + hw {
                        dx[i] = k * (m * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        });
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed statistics (inference form).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let t = self.value(x);
        let [n, c, h, w] = dims4(t.shape(), "batch_norm")?;
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let (xd, gd, bd) = (t.data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = gd[ch] * (xd[i] - mean[ch]) * inv_std[ch] + bd[ch];
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.record(&[x, gamma, beta], out, move |ctx| {
            let (g, xd, gamma) = (ctx.grad, ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut dx = vec![0.0; g.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * hw;
                    for i in off..off + hw {
                        let xh = (xd[i] - mean[ch]) * inv_std[ch];
                        dx[i] = g[i] * gamma[ch] * inv_std[ch];
                        dgamma[ch] += g[i] * xh;
                        dbeta[ch] += g[i];
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }))
    }

    // ---------------------------------------------------------------------
    // Losses
    // ---------------------------------------------------------------------

    /// Mean softmax cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = match t.shape() {
            [n, k] if *n == labels.len() => (*n, *k),
            s => {
                return Err(Error::Dimension(format!(
                    "cross-entropy: logits {s:?} with {} labels",
                    labels.len()
                )))
            }
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Dimension(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for s in 0..n {
            let row = &t.data()[s * k..(s + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[s * k + j] = (row[j] - mx).exp() / z;
            }
            loss -= row[labels[s]] - mx - z.ln();
        }
        loss /= n as f64;
        let labels = labels.to_vec();
        Ok(self.record(&[logits], Tensor::scalar(loss), move |ctx| {
            let scale = ctx.grad[0] / n as f64;
            let mut d = probs.clone();
            for (s, &l) in labels.iter().enumerate() {
                d[s * k + l] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(d)]
        }))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let t = self.value(pred);
        if t.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "mse: {:?} vs {:?}",
                t.shape(),
                target.shape()
            )));
        }
        let n = t.len() as f64;
        let diff: Vec<f64> = t.data().iter().zip(target.data()).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
        Ok(self.record(&[pred], Tensor::scalar(loss), move |ctx| {
            let k = 2.0 * ctx.grad[0] / n;
            vec![Some(diff.iter().map(|d| d * k).collect())]
        }))
    }
}

fn dims4(shape: &[usize], op: &str) -> Result<[usize; 4]> {
    match shape {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(Error::Dimension(format!("{op}: expected NCHW, got {s:?}"))),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn linear_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    n: usize,
    fin: usize,
    fout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * fout];
    for s in 0..n {
        let xrow = &x[s * fin..(s + 1) * fin];
        for o in 0..fout {
            let mut acc = b[o];
            for (xi, wi) in xrow.iter().zip(&w[o * fin..(o + 1) * fin]) {
                acc += xi * wi;
            }
            out[s * fout + o] = acc;
        }
    }
    out
}

pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * k * w + j * k;
                for di in 0..k {
                    for dj in 0..k {
                        let idx = base + (i * k + di) * w + j * k + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn global_avg_pool_forward(x: &[f64], planes: usize, hw: usize) -> Vec<f64> {
    (0..planes)
        .map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect()
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        w: &[usize],
        b: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [n, c, h, wd] = dims4(x, "conv2d input")?;
        let [o, c2, kh, kw] = dims4(w, "conv2d kernel")?;
        if c != c2 {
            return Err(Error::Dimension(format!(
                "conv2d: input has {c} channels, kernel expects {c2}"
            )));
        }
        if b != [o] {
            return Err(Error::Dimension(format!("conv2d: bias {b:?} for {o} filters")));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::Dimension("conv2d: kernel larger than padded input".into()));
        }
        Ok(Self {
            n,
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one sample into `[c*kh*kw, oh*ow]` columns; padding reads zero.
    pub(crate) fn im2col<T: Copy + Default>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        let mut row = 0;
        for ch in 0..self.c {
            let xc = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            dst[oi * self.ow + oj] = if ii >= 0
                                && jj >= 0
                                && (ii as usize) < self.h
                                && (jj as usize) < self.w
                            {
                                xc[ii as usize * self.w + jj as usize]
                            } else {
                                T::default()
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        let mut row = 0;
        for ch in 0..self.c {
            let dxc = &mut dx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oi in 0..self.oh {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.ow {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && (jj as usize) < self.w {
                                dxc[ii as usize * self.w + jj as usize] += src[oi * self.ow + oj];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Forward convolution. Each output starts at its bias and accumulates
/// `x * w` in (channel, kernel row, kernel column) order.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (k, plane) = (g.patch_len(), g.out_plane());
    let in_len = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * g.o * plane];
    let mut cols = vec![0.0; k * plane];
    for s in 0..g.n {
        g.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols);
        for o in 0..g.o {
            let orow = &mut out[(s * g.o + o) * plane..(s * g.o + o + 1) * plane];
            orow.fill(b[o]);
            for r in 0..k {
                let wv = w[o * k + r];
                for (ov, cv) in orow.iter_mut().zip(&cols[r * plane..(r + 1) * plane]) {
                    *ov += cv * wv;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: &ConvGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (k, plane) = (g.patch_len(), g.out_plane());
    let in_len = g.c * g.h * g.w;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.o];
    let mut cols = vec![0.0; k * plane];
    let mut dcols = vec![0.0; k * plane];
    for s in 0..g.n {
        g.im2col(&x[s * in_len..(s + 1) * in_len], &mut cols);
        dcols.fill(0.0);
        for o in 0..g.o {
            let grow = &grad[(s * g.o + o) * plane..(s * g.o + o + 1) * plane];
            db[o] += grow.iter().sum::<f64>();
            for r in 0..k {
                let crow = &cols[r * plane..(r + 1) * plane];
                dw[o * k + r] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                let wv = w[o * k + r];
                for (d, gv) in dcols[r * plane..(r + 1) * plane].iter_mut().zip(grow) {
                    *d += wv * gv;
                }
            }
        }
        g.col2im(&dcols, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    (dx, dw, db)
}
