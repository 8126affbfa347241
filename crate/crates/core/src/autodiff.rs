//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! after their inputs, so the node vector is already in topological order and
//! [`Graph::backward`] walks it once in reverse. Activation tensors are laid
//! out `[n, c, h, w]`; rank-3 `[c, h, w]` inputs are accepted as a batch of one.

use std::collections::HashSet;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::{mix64, Module, ParamStore, StatUpdate};
use crate::tensor::{nchw, rows_cols, Tensor};

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Smallest feature norm accepted by [`Graph::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;
/// Probability clamp used by the sigmoid cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        offset: usize,
    },
    ConcatChannels(Var, Var),
    RepeatSpatial(Var),
    Reshape(Var),
    SoftmaxSpatial(Var),
    MaskedSum {
        x: Var,
        m: Var,
    },
    SpatialScale {
        x: Var,
        m: Var,
    },
    GlobalAvgPool(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    SigmoidCe {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    bindings: IndexMap<String, Var>,
    stat_updates: Vec<StatUpdate>,
    track_kinks: bool,
    kinks: u64,
    warned_stats: HashSet<String>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a fingerprint of every non-differentiable branch taken
    /// (relu signs, pooling argmax, probability clamps) for use by gradient
    /// checks, which must not difference across a kink.
    pub fn with_kink_tracking() -> Self {
        Self {
            track_kinks: true,
            ..Self::default()
        }
    }

    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn mark(&mut self, bits: impl Iterator<Item = bool>) {
        if !self.track_kinks {
            return;
        }
        let mut word = 0u64;
        let mut n = 0;
        for b in bits {
            word = (word << 1) | u64::from(b);
            n += 1;
            if n == 64 {
                self.kinks = mix64(self.kinks ^ word);
                word = 0;
                n = 0;
            }
        }
        self.kinks = mix64(self.kinks ^ word ^ ((n as u64) << 56));
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// A constant leaf; no gradient is computed for it.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Binds the named parameter from `store`. Binding the same name twice
    /// returns the same node, so every use of a parameter in one graph shares
    /// a single leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bindings.get(name) {
            return Ok(v);
        }
        let entry = store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?;
        let v = self.push(
            entry.tensor.shape().to_vec(),
            entry.tensor.data().to_vec(),
            Op::Leaf,
            entry.trainable,
        );
        self.bindings.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn binding(&self, name: &str) -> Option<Var> {
        self.bindings.get(name).copied()
    }

    // ── inspection ──────────────────────────────────────────────────────

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
            .expect("node shape is consistent")
    }

    /// Accumulated gradient of a differentiable leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Adds the gradients of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (name, v) in &self.bindings {
            if let (Some(g), Some(entry)) = (self.grad(*v), store.get_mut(name)) {
                if entry.trainable {
                    entry.tensor.accumulate_grad(g);
                }
            }
        }
    }

    pub fn accumulate_module_grads<M: Module + ?Sized>(&self, module: &mut M) {
        for store in module.stores_mut() {
            self.accumulate_param_grads(store);
        }
    }

    // ── convolution and pooling ─────────────────────────────────────────

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, ci, h, wd) = nchw("conv2d", &xs)?;
        let (co, kci, kh, kw) = match *self.shape(w) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {s:?}"))),
        };
        if kci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {ci} channels, kernel expects {kci} (input {xs:?}, kernel {:?})", self.shape(w)),
            ));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be >= 1".into()));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape("conv2d", format!("bias must be [{co}], got {:?}", self.shape(b))));
            }
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom { n, ci, h, w: wd, kh, kw, stride, pad, oh, ow };
        let col = geom.im2col(&self.nodes[x.0].value);
        let (k, np) = (ci * kh * kw, n * oh * ow);
        let mut tmp = vec![0.0; co * np];
        gemm(co, k, np, &self.nodes[w.0].value, false, &col, false, &mut tmp);
        let bias = b.map(|b| &self.nodes[b.0].value);
        let p = oh * ow;
        let mut out = vec![0.0; n * co * p];
        for ni in 0..n {
            for o in 0..co {
                let add = bias.map_or(0.0, |b| b[o]);
                let src = &tmp[o * np + ni * p..o * np + (ni + 1) * p];
                for (d, s) in out[(ni * co + o) * p..(ni * co + o + 1) * p].iter_mut().zip(src) {
                    *d = s + add;
                }
            }
        }
        let shape = if xs.len() == 3 { vec![co, oh, ow] } else { vec![n, co, oh, ow] };
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(shape, out, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Max pooling; padded positions never win.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = nchw("max_pool2d", &xs)?;
        if stride == 0 || k == 0 || pad >= k || k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::shape("max_pool2d", format!("window {k}/{stride}/{pad} on {xs:?}")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if best_i == usize::MAX || xv[idx] > best {
                                best = xv[idx];
                                best_i = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        if self.track_kinks {
            let a = argmax.clone();
            self.mark(a.iter().flat_map(|&i| (0..16).map(move |bit| (i >> bit) & 1 == 1)));
        }
        let shape = if xs.len() == 3 { vec![c, oh, ow] } else { vec![n, c, oh, ow] };
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::MaxPool { x, argmax }, needs))
    }

    /// Per-channel batch normalization. Channels are axis 1 of `[n,c,h,w]`
    /// and `[n,c]` inputs, axis 0 of `[c,h,w]`. Train mode normalizes by the
    /// biased batch variance and records the batch statistics (unbiased
    /// variance) for the caller to fold into the running estimates.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        mode: Mode,
        layer: &str,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = match *xs.as_slice() {
            [n, c, h, w] => (n, c, h * w),
            [c, h, w] => (1, c, h * w),
            [n, c] => (n, c, 1),
            _ => return Err(Error::shape("batch_norm", format!("unsupported input {xs:?}"))),
        };
        for (what, len) in [
            ("gamma", self.shape(gamma).iter().product::<usize>()),
            ("beta", self.shape(beta).iter().product()),
            ("running_mean", running_mean.len()),
            ("running_var", running_var.len()),
        ] {
            if len != c {
                return Err(Error::shape("batch_norm", format!("{what} has {len} entries for {c} channels")));
            }
        }
        let count = n * hw;
        let xv = &self.nodes[x.0].value;
        let idx = |ni: usize, ci: usize, j: usize| (ni * c + ci) * hw + j;
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("train mode needs >= 2 values per channel, got {count} for {layer}"),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut s = 0.0;
                    for ni in 0..n {
                        for j in 0..hw {
                            s += xv[idx(ni, ci, j)];
                        }
                    }
                    let mu = s / count as f64;
                    let mut q = 0.0;
                    for ni in 0..n {
                        for j in 0..hw {
                            let d = xv[idx(ni, ci, j)] - mu;
                            q += d * d;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = q / count as f64;
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                for j in 0..hw {
                    let i = idx(ni, ci, j);
                    let z = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = z;
                    out[i] = gv[ci] * z + bv[ci];
                }
            }
        }
        let train = mode == Mode::Train;
        if train {
            let unbias = count as f64 / (count - 1) as f64;
            self.stat_updates.push(StatUpdate {
                layer: layer.to_owned(),
                mean,
                var: var.iter().map(|v| v * unbias).collect(),
            });
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            xs,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            needs,
        ))
    }

    /// Logs once per graph that `layer` runs in eval mode on untouched
    /// running statistics.
    pub(crate) fn warn_untrained_stats(&mut self, layer: &str) {
        if self.warned_stats.insert(layer.to_owned()) {
            log::warn!("batch norm `{layer}` evaluated before any training step; using mean 0, var 1");
        }
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value: Vec<f64> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(shape, value, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if self.track_kinks {
            let bits: Vec<bool> = self.nodes[x.0].value.iter().map(|&v| v > 0.0).collect();
            self.mark(bits.into_iter());
        }
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    // ── dense layers and reshaping ──────────────────────────────────────

    /// `x[n, i] -> x W^T + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, din) = rows_cols("linear", &xs)?;
        let (dout, wdin) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return Err(Error::shape("linear", format!("weight must be rank 2, got {s:?}"))),
        };
        if wdin != din {
            return Err(Error::shape("linear", format!("input width {din}, weight {:?}", self.shape(w))));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("linear", format!("bias must be [{dout}], got {:?}", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(&self.nodes[b.0].value);
            }
        }
        gemm_acc(n, din, dout, &self.nodes[x.0].value, false, &self.nodes[w.0].value, true, &mut out);
        let shape = if xs.len() == 1 { vec![dout] } else { vec![n, dout] };
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(shape, out, Op::Linear { x, w, b }, needs))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, da) = rows_cols("concat_cols", self.shape(a))?;
        let (nb, db) = rows_cols("concat_cols", self.shape(b))?;
        if na != nb || self.shape(a).len() != self.shape(b).len() {
            return Err(Error::shape("concat_cols", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(na * (da + db));
        for r in 0..na {
            out.extend_from_slice(&av[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let shape = if self.shape(a).len() == 1 { vec![da + db] } else { vec![na, da + db] };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::ConcatCols(a, b), needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, d) = rows_cols("slice_cols", &xs)?;
        if start >= end || end > d {
            return Err(Error::shape("slice_cols", format!("[{start},{end}) of width {d}")));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            out.extend_from_slice(&xv[r * d + start..r * d + end]);
        }
        let shape = if xs.len() == 1 { vec![end - start] } else { vec![n, end - start] };
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::SliceCols { x, start }, needs))
    }

    /// Rows `[start, end)` along axis 0, any rank.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || start >= end || end > xs[0] {
            return Err(Error::shape("slice_rows", format!("[{start},{end}) of {xs:?}")));
        }
        let stride: usize = xs[1..].iter().product();
        let out = self.nodes[x.0].value[start * stride..end * stride].to_vec();
        let mut shape = xs;
        shape[0] = end - start;
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::SliceRows { x, offset: start * stride }, needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (na, ca, ha, wa) = nchw("concat_channels", &sa)?;
        let (nb, cb, hb, wb) = nchw("concat_channels", &sb)?;
        if na != nb || ha != hb || wa != wb || sa.len() != sb.len() {
            return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
        }
        let hw = ha * wa;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        for ni in 0..na {
            out.extend_from_slice(&av[ni * ca * hw..(ni + 1) * ca * hw]);
            out.extend_from_slice(&bv[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let shape = if sa.len() == 3 { vec![ca + cb, ha, wa] } else { vec![na, ca + cb, ha, wa] };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::ConcatChannels(a, b), needs))
    }

    /// Tiles a `[n, r]` vector over an `h x w` grid: `[n, r, h, w]`.
    pub fn repeat_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, r) = rows_cols("repeat_spatial", &xs)?;
        let hw = h * w;
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(n * r * hw);
        for &v in xv.iter() {
            out.extend(std::iter::repeat_n(v, hw));
        }
        let shape = if xs.len() == 1 { vec![r, h, w] } else { vec![n, r, h, w] };
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::RepeatSpatial(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.nodes[x.0].value.len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.nodes[x.0].value.clone();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), needs))
    }

    // ── spatial attention ───────────────────────────────────────────────

    /// Softmax over the last two axes, independently for every leading index.
    /// Uses max subtraction; non-finite scores are rejected.
    pub fn softmax_spatial(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape("softmax_spatial", format!("need rank >= 2, got {xs:?}")));
        }
        let size = xs[xs.len() - 2] * xs[xs.len() - 1];
        let xv = &self.nodes[x.0].value;
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_spatial scores".into()));
        }
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(size).zip(out.chunks_mut(size)) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum += *d;
            }
            dst.iter_mut().for_each(|d| *d /= sum);
        }
        let needs = self.needs(x);
        Ok(self.push(xs, out, Op::SoftmaxSpatial(x), needs))
    }

    fn map_and_mask(&self, op: &'static str, x: Var, m: Var) -> Result<(usize, usize, usize, bool)> {
        let xs = self.shape(x);
        let (n, c, h, w) = nchw(op, xs)?;
        let ms = self.shape(m);
        let ok = match *ms {
            [mn, mh, mw] => xs.len() == 4 && mn == n && mh == h && mw == w,
            [mh, mw] => xs.len() == 3 && mh == h && mw == w,
            _ => false,
        };
        if !ok {
            return Err(Error::shape(op, format!("feature map {xs:?} vs mask {ms:?}")));
        }
        Ok((n, c, h * w, xs.len() == 3))
    }

    /// `y[n, c] = sum_{ij} m[n, i, j] * x[n, c, i, j]`.
    pub fn masked_sum(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, hw, single) = self.map_and_mask("masked_sum", x, m)?;
        let xv = &self.nodes[x.0].value;
        let mv = &self.nodes[m.0].value;
        let mut out = vec![0.0; n * c];
        for ni in 0..n {
            let mrow = &mv[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let xr = &xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                out[ni * c + ci] = xr.iter().zip(mrow).map(|(a, b)| a * b).sum();
            }
        }
        let shape = if single { vec![c] } else { vec![n, c] };
        let needs = self.needs(x) || self.needs(m);
        Ok(self.push(shape, out, Op::MaskedSum { x, m }, needs))
    }

    /// `y[n, c, i, j] = m[n, i, j] * x[n, c, i, j]`.
    pub fn spatial_scale(&mut self, x: Var, m: Var) -> Result<Var> {
        let (n, c, hw, _) = self.map_and_mask("spatial_scale", x, m)?;
        let xv = &self.nodes[x.0].value;
        let mv = &self.nodes[m.0].value;
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            let mrow = &mv[ni * hw..(ni + 1) * hw];
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for j in 0..hw {
                    out[base + j] = xv[base + j] * mrow[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(m);
        Ok(self.push(shape, out, Op::SpatialScale { x, m }, needs))
    }

    /// Per-channel spatial mean: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, h, w) = nchw("global_avg_pool", &xs)?;
        let hw = h * w;
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let shape = if xs.len() == 3 { vec![c] } else { vec![n, c] };
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::GlobalAvgPool(x), needs))
    }

    // ── normalization and reductions ────────────────────────────────────

    /// Scales every row of `[n, d]` (or a single `[d]`) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (_, d) = rows_cols("l2_normalize", &xs)?;
        let xv = &self.nodes[x.0].value;
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > NORM_EPS) {
                return Err(Error::DegenerateFeature { norm, eps: NORM_EPS });
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let needs = self.needs(x);
        Ok(self.push(xs, out, Op::L2Normalize { x, norms }, needs))
    }

    /// `[n, d] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = rows_cols("sum_rows", self.shape(x))?;
        let out: Vec<f64> = self.nodes[x.0].value.chunks(d).map(|r| r.iter().sum()).collect();
        let needs = self.needs(x);
        Ok(self.push(vec![n], out, Op::SumRows(x), needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let needs = self.needs(x);
        self.push(vec![], vec![s], Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(x);
        self.push(vec![], vec![m], Op::Mean(x), needs)
    }

    // ── losses ──────────────────────────────────────────────────────────

    /// Per-row `-log softmax(logits)[label]`, stabilized by max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, classes) = rows_cols("softmax_cross_entropy", self.shape(logits))?;
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", format!("{n} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; lv.len()];
        let mut out = Vec::with_capacity(n);
        for (r, row) in lv.chunks(classes).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for (k, v) in row.iter().enumerate() {
                probs[r * classes + k] = (v - lse).exp();
            }
            out.push(lse - row[labels[r]]);
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_cross_entropy".into()));
        }
        let needs = self.needs(logits);
        Ok(self.push(
            vec![n],
            out,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Per-row `-sum_k (a_k log p_k + (1 - a_k) log(1 - p_k))` with
    /// `p = clamp(sigmoid(z), eps, 1 - eps)`.
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (n, k) = rows_cols("sigmoid_cross_entropy", self.shape(logits))?;
        if targets.len() != n * k {
            return Err(Error::shape(
                "sigmoid_cross_entropy",
                format!("{} logits, {} targets", n * k, targets.len()),
            ));
        }
        let lv = &self.nodes[logits.0].value;
        let probs: Vec<f64> = lv.iter().map(|&z| sigmoid(z)).collect();
        let clamped: Vec<bool> = probs.iter().map(|&p| !(PROB_EPS..=1.0 - PROB_EPS).contains(&p)).collect();
        let probs: Vec<f64> = probs.iter().map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect();
        let out: Vec<f64> = probs
            .chunks(k)
            .zip(targets.chunks(k))
            .map(|(p, a)| {
                -p.iter()
                    .zip(a)
                    .map(|(p, a)| a * p.ln() + (1.0 - a) * (1.0 - p).ln())
                    .sum::<f64>()
            })
            .collect();
        self.mark(clamped.into_iter());
        let needs = self.needs(logits);
        Ok(self.push(
            vec![n],
            out,
            Op::SigmoidCe {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) to every differentiable leaf. Leaf
    /// gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n_el = self.nodes[loss.0].value.len();
        if n_el != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    let acc = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; gout.len()]);
                    for (a, g) in acc.iter_mut().zip(&gout) {
                        *a += g;
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let (n, ci, h, wd) = nchw("conv2d", &self.nodes[x.0].shape).expect("checked");
                    let ws = &self.nodes[w.0].shape;
                    let (co, kh, kw) = (ws[0], ws[2], ws[3]);
                    let (oh, ow) = {
                        let s = &node.shape;
                        (s[s.len() - 2], s[s.len() - 1])
                    };
                    let need_x = self.needs(x);
                    let need_w = self.needs(w);
                    let geom = ConvGeom { n, ci, h, w: wd, kh, kw, stride, pad, oh, ow };
                    let (k, p) = (ci * kh * kw, oh * ow);
                    let np = n * p;
                    let mut gmat = vec![0.0; co * np];
                    for ni in 0..n {
                        for o in 0..co {
                            gmat[o * np + ni * p..o * np + (ni + 1) * p]
                                .copy_from_slice(&gout[(ni * co + o) * p..(ni * co + o + 1) * p]);
                        }
                    }
                    let mut dx = Vec::new();
                    let mut dw = Vec::new();
                    if need_w {
                        let col = geom.im2col(&self.nodes[x.0].value);
                        dw = vec![0.0; co * k];
                        gemm(co, np, k, &gmat, false, &col, true, &mut dw);
                    }
                    if need_x {
                        let mut dcol = vec![0.0; k * np];
                        gemm(k, co, np, &self.nodes[w.0].value, true, &gmat, false, &mut dcol);
                        dx = geom.col2im(&dcol);
                    }
                    let db = b.filter(|b| self.needs(*b)).map(|_| {
                        let mut db = vec![0.0; co];
                        for ni in 0..n {
                            for (o, d) in db.iter_mut().enumerate() {
                                let base = (ni * co + o) * oh * ow;
                                *d += gout[base..base + oh * ow].iter().sum::<f64>();
                            }
                        }
                        db
                    });
                    if need_x {
                        add_into(&mut grads, x, &dx);
                    }
                    if need_w {
                        add_into(&mut grads, w, &dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        add_into(&mut grads, b, &db);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let x = *x;
                    let len = self.nodes[x.0].value.len();
                    let dx = acc_slot(&mut grads, x, len);
                    for (g, &src) in gout.iter().zip(argmax) {
                        dx[src] += g;
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
                    let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                    let c = inv_std.len();
                    let total = xhat.len();
                    let (n, hw) = match *self.nodes[x.0].shape.as_slice() {
                        [n, _, h, w] => (n, h * w),
                        [_, h, w] => (1, h * w),
                        [n, _] => (n, 1),
                        _ => unreachable!(),
                    };
                    debug_assert_eq!(n * c * hw, total);
                    let gv = &self.nodes[gamma.0].value;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for j in 0..hw {
                                dgamma[ci] += gout[base + j] * xhat[base + j];
                                dbeta[ci] += gout[base + j];
                            }
                        }
                    }
                    let need_x = self.needs(x);
                    let mut dx = Vec::new();
                    if need_x {
                        dx = vec![0.0; total];
                        let count = (n * hw) as f64;
                        for ci in 0..c {
                            let scale = gv[ci] * inv_std[ci];
                            // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                            let s1 = dbeta[ci];
                            let s2 = dgamma[ci];
                            for ni in 0..n {
                                let base = (ni * c + ci) * hw;
                                for j in 0..hw {
                                    let i = base + j;
                                    dx[i] = if train {
                                        scale * (gout[i] - s1 / count - xhat[i] * s2 / count)
                                    } else {
                                        scale * gout[i]
                                    };
                                }
                            }
                        }
                    }
                    if need_x {
                        add_into(&mut grads, x, &dx);
                    }
                    if self.needs(gamma) {
                        add_into(&mut grads, gamma, &dgamma);
                    }
                    if self.needs(beta) {
                        add_into(&mut grads, beta, &dbeta);
                    }
                }
                Op::Relu(x) => {
                    let x = *x;
                    let xv = &self.nodes[x.0].value;
                    let d: Vec<f64> = gout.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    add_into(&mut grads, x, &d);
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let d: Vec<f64> = gout.iter().zip(&node.value).map(|(g, y)| g * y * (1.0 - y)).collect();
                    add_into(&mut grads, x, &d);
                }
                Op::Tanh(x) => {
                    let x = *x;
                    let d: Vec<f64> = gout.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect();
                    add_into(&mut grads, x, &d);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        add_into(&mut grads, a, &gout);
                    }
                    if self.needs(b) {
                        add_into(&mut grads, b, &gout);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        add_into(&mut grads, a, &gout);
                    }
                    if self.needs(b) {
                        let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                        add_into(&mut grads, b, &neg);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let d: Vec<f64> = gout.iter().zip(&self.nodes[b.0].value).map(|(g, v)| g * v).collect();
                        add_into(&mut grads, a, &d);
                    }
                    if self.needs(b) {
                        let d: Vec<f64> = gout.iter().zip(&self.nodes[a.0].value).map(|(g, v)| g * v).collect();
                        add_into(&mut grads, b, &d);
                    }
                }
                Op::Scale(x, s) => {
                    let (x, s) = (*x, *s);
                    let d: Vec<f64> = gout.iter().map(|g| g * s).collect();
                    add_into(&mut grads, x, &d);
                }
                Op::AddScalar(x) | Op::Reshape(x) => {
                    let x = *x;
                    add_into(&mut grads, x, &gout);
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (n, din) = rows_cols("linear", &self.nodes[x.0].shape).expect("checked");
                    let dout = self.nodes[w.0].shape[0];
                    if self.needs(x) {
                        let mut dx = vec![0.0; n * din];
                        gemm(n, dout, din, &gout, false, &self.nodes[w.0].value, false, &mut dx);
                        add_into(&mut grads, x, &dx);
                    }
                    if self.needs(w) {
                        let mut dw = vec![0.0; dout * din];
                        gemm(dout, n, din, &gout, true, &self.nodes[x.0].value, false, &mut dw);
                        add_into(&mut grads, w, &dw);
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let mut db = vec![0.0; dout];
                        for r in 0..n {
                            for o in 0..dout {
                                db[o] += gout[r * dout + o];
                            }
                        }
                        add_into(&mut grads, b, &db);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let (n, da) = rows_cols("concat_cols", &self.nodes[a.0].shape).expect("checked");
                    let db = self.nodes[b.0].value.len() / n;
                    let w = da + db;
                    if self.needs(a) {
                        let d: Vec<f64> = (0..n).flat_map(|r| gout[r * w..r * w + da].iter().copied()).collect();
                        add_into(&mut grads, a, &d);
                    }
                    if self.needs(b) {
                        let d: Vec<f64> = (0..n).flat_map(|r| gout[r * w + da..(r + 1) * w].iter().copied()).collect();
                        add_into(&mut grads, b, &d);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (x, start) = (*x, *start);
                    let (n, d) = rows_cols("slice_cols", &self.nodes[x.0].shape).expect("checked");
                    let width = gout.len() / n;
                    let dx = acc_slot(&mut grads, x, n * d);
                    for r in 0..n {
                        for j in 0..width {
                            dx[r * d + start + j] += gout[r * width + j];
                        }
                    }
                }
                Op::SliceRows { x, offset } => {
                    let (x, offset) = (*x, *offset);
                    let len = self.nodes[x.0].value.len();
                    let dx = acc_slot(&mut grads, x, len);
                    for (d, g) in dx[offset..offset + gout.len()].iter_mut().zip(&gout) {
                        *d += g;
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let (a, b) = (*a, *b);
                    let (n, ca, h, w) = nchw("concat_channels", &self.nodes[a.0].shape).expect("checked");
                    let hw = h * w;
                    let cb = self.nodes[b.0].value.len() / (n * hw);
                    let per = (ca + cb) * hw;
                    if self.needs(a) {
                        let d: Vec<f64> =
                            (0..n).flat_map(|i| gout[i * per..i * per + ca * hw].iter().copied()).collect();
                        add_into(&mut grads, a, &d);
                    }
                    if self.needs(b) {
                        let d: Vec<f64> =
                            (0..n).flat_map(|i| gout[i * per + ca * hw..(i + 1) * per].iter().copied()).collect();
                        add_into(&mut grads, b, &d);
                    }
                }
                Op::RepeatSpatial(x) => {
                    let x = *x;
                    let len = self.nodes[x.0].value.len();
                    let hw = gout.len() / len;
                    let d: Vec<f64> = gout.chunks(hw).map(|c| c.iter().sum()).collect();
                    add_into(&mut grads, x, &d);
                }
                Op::SoftmaxSpatial(x) => {
                    let x = *x;
                    let s = &node.shape;
                    let size = s[s.len() - 2] * s[s.len() - 1];
                    let mut d = vec![0.0; gout.len()];
                    for ((p, g), dd) in node.value.chunks(size).zip(gout.chunks(size)).zip(d.chunks_mut(size)) {
                        let dot: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
                        for ((dd, p), g) in dd.iter_mut().zip(p).zip(g) {
                            *dd = p * (g - dot);
                        }
                    }
                    add_into(&mut grads, x, &d);
                }
                Op::MaskedSum { x, m } => {
                    let (x, m) = (*x, *m);
                    let (n, c, h, w) = nchw("masked_sum", &self.nodes[x.0].shape).expect("checked");
                    let hw = h * w;
                    let xv = &self.nodes[x.0].value;
                    let mv = &self.nodes[m.0].value;
                    if self.needs(x) {
                        let mut dx = vec![0.0; xv.len()];
                        for ni in 0..n {
                            for ci in 0..c {
                                let g = gout[ni * c + ci];
                                let base = (ni * c + ci) * hw;
                                for j in 0..hw {
                                    dx[base + j] = g * mv[ni * hw + j];
                                }
                            }
                        }
                        add_into(&mut grads, x, &dx);
                    }
                    if self.needs(m) {
                        let mut dm = vec![0.0; mv.len()];
                        for ni in 0..n {
                            for ci in 0..c {
                                let g = gout[ni * c + ci];
                                let base = (ni * c + ci) * hw;
                                for j in 0..hw {
                                    dm[ni * hw + j] += g * xv[base + j];
                                }
                            }
                        }
                        add_into(&mut grads, m, &dm);
                    }
                }
                Op::SpatialScale { x, m } => {
                    let (x, m) = (*x, *m);
                    let (n, c, h, w) = nchw("spatial_scale", &self.nodes[x.0].shape).expect("checked");
                    let hw = h * w;
                    let xv = &self.nodes[x.0].value;
                    let mv = &self.nodes[m.0].value;
                    if self.needs(x) {
                        let mut dx = vec![0.0; xv.len()];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                for j in 0..hw {
                                    dx[base + j] = gout[base + j] * mv[ni * hw + j];
                                }
                            }
                        }
                        add_into(&mut grads, x, &dx);
                    }
                    if self.needs(m) {
                        let mut dm = vec![0.0; mv.len()];
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = (ni * c + ci) * hw;
                                for j in 0..hw {
                                    dm[ni * hw + j] += gout[base + j] * xv[base + j];
                                }
                            }
                        }
                        add_into(&mut grads, m, &dm);
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let x = *x;
                    let len = self.nodes[x.0].value.len();
                    let hw = len / gout.len();
                    let d: Vec<f64> = gout
                        .iter()
                        .flat_map(|g| std::iter::repeat_n(g / hw as f64, hw))
                        .collect();
                    add_into(&mut grads, x, &d);
                }
                Op::L2Normalize { x, norms } => {
                    let x = *x;
                    let d = gout.len() / norms.len();
                    let mut dx = vec![0.0; gout.len()];
                    for (r, norm) in norms.iter().enumerate() {
                        let y = &node.value[r * d..(r + 1) * d];
                        let g = &gout[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[r * d + j] = (g[j] - y[j] * dot) / norm;
                        }
                    }
                    add_into(&mut grads, x, &dx);
                }
                Op::SumRows(x) => {
                    let x = *x;
                    let len = self.nodes[x.0].value.len();
                    let d = len / gout.len();
                    let dx: Vec<f64> = gout.iter().flat_map(|&g| std::iter::repeat_n(g, d)).collect();
                    add_into(&mut grads, x, &dx);
                }
                Op::Sum(x) => {
                    let x = *x;
                    let len = self.nodes[x.0].value.len();
                    add_into(&mut grads, x, &vec![gout[0]; len]);
                }
                Op::Mean(x) => {
                    let x = *x;
                    let len = self.nodes[x.0].value.len();
                    add_into(&mut grads, x, &vec![gout[0] / len as f64; len]);
                }
                Op::SoftmaxCe { logits, probs, labels } => {
                    let logits = *logits;
                    let classes = probs.len() / labels.len();
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * classes + l] -= 1.0;
                        for v in &mut d[r * classes..(r + 1) * classes] {
                            *v *= gout[r];
                        }
                    }
                    add_into(&mut grads, logits, &d);
                }
                Op::SigmoidCe { logits, probs, targets } => {
                    let logits = *logits;
                    let k = probs.len() / gout.len();
                    let lv = &self.nodes[logits.0].value;
                    let d: Vec<f64> = probs
                        .iter()
                        .zip(targets)
                        .zip(lv)
                        .enumerate()
                        .map(|(i, ((p, a), &z))| {
                            let raw = sigmoid(z);
                            if (PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
                                gout[i / k] * (p - a)
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    add_into(&mut grads, logits, &d);
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Output positions `[lo, hi)` whose input index `o * stride + k - pad`
/// lies inside `[0, extent)`.
/// Row-major `c = a * b` (overwriting) where `a` is `m x k` and `b` is
/// `k x n`, either stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, c: &mut [f64]) {
    c.iter_mut().for_each(|v| *v = 0.0);
    gemm_acc(m, k, n, a, at, b, bt, c);
}

/// Row-major `c += a * b`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], at: bool, b: &[f64], bt: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // row-major extents checked by the assertion.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Shapes of one convolution, for the im2col lowering.
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// `[ci * kh * kw, n * oh * ow]` patch matrix; padding reads as zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let ConvGeom { n, ci, h, w, kh, kw, stride, pad, oh, ow } = *self;
        let np = n * oh * ow;
        let mut col = vec![0.0; ci * kh * kw * np];
        for c in 0..ci {
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ky, stride, pad, h, oh);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(kx, stride, pad, w, ow);
                    let row = ((c * kh + ky) * kw + kx) * np;
                    for ni in 0..n {
                        let xbase = (ni * ci + c) * h * w;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let dst = row + (ni * oh + oy) * ow;
                            let src = xbase + iy * w + kx;
                            for ox in ox0..ox1 {
                                col[dst + ox] = x[src + ox * stride - pad];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adjoint of [`ConvGeom::im2col`].
    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let ConvGeom { n, ci, h, w, kh, kw, stride, pad, oh, ow } = *self;
        let np = n * oh * ow;
        let mut x = vec![0.0; n * ci * h * w];
        for c in 0..ci {
            for ky in 0..kh {
                let (oy0, oy1) = valid_range(ky, stride, pad, h, oh);
                for kx in 0..kw {
                    let (ox0, ox1) = valid_range(kx, stride, pad, w, ow);
                    let row = ((c * kh + ky) * kw + kx) * np;
                    for ni in 0..n {
                        let xbase = (ni * ci + c) * h * w;
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let src = row + (ni * oh + oy) * ow;
                            let dst = xbase + iy * w + kx;
                            for ox in ox0..ox1 {
                                x[dst + ox * stride - pad] += col[src + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn valid_range(k: usize, stride: usize, pad: usize, extent: usize, out_extent: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    if extent + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((extent - 1 + pad - k) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

fn acc_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, d) in g.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution with explicit zero padding.
    fn conv_oracle(x: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let at = |c: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x.data()[(c * h + y as usize) * w + xx as usize]
            }
        };
        let mut out = Vec::new();
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                s += k.data()[((o * ci + c) * kh + ky) * kw + kx] * at(c, y, xx);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&[3, 4, 5], &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.data_mut()[c * 3 + c] = 1.0;
        }
        let mut g = Graph::new();
        let xv = g.input(&x);
        let kv = g.input(&k);
        let b = g.input(&Tensor::zeros(&[3]));
        let y = g.conv2d(xv, kv, Some(b), 1, 0).unwrap();
        assert_eq!(g.shape(y), x.shape());
        assert_eq!(g.value(y), x.data());
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 5, 5], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let kv = g.input(&Tensor::zeros(&[4, 2, 3, 3]));
        let b = g.input(&Tensor::zeros(&[4]));
        let y = g.conv2d(xv, kv, Some(b), 1, 1).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let x = rand_tensor(&[2, 5, 5], &mut rng);
            let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let xv = g.input(&x);
            let kv = g.input(&k);
            let bv = g.input(&Tensor::new(&[3], b.clone()).unwrap());
            let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
            let want = conv_oracle(&x, &k, &b, stride, pad);
            let oh = (5 + 2 * pad - 3) / stride + 1;
            assert_eq!(g.shape(y), &[3, oh, oh]);
            for (a, e) in g.value(y).iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[2, 4, 4]));
        let k = g.input(&Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, k, None, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }), "{err}");
        let k = g.input(&Tensor::zeros(&[1, 2, 7, 7]));
        assert!(g.conv2d(x, k, None, 1, 1).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::full(&[2, 2], 1.7));
        let p = g.softmax_spatial(x).unwrap();
        assert!(g.value(p).iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = g.input(&Tensor::new(&[2, 2], vec![100.0, 0.0, 0.0, 0.0]).unwrap());
        let p = g.softmax_spatial(x).unwrap();
        assert!(g.value(p)[0] > 1.0 - 1e-9);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Tensor::from_fn(&[8, 4], |_| rng.gen_range(-5.0..5.0));
        let x = g.input(&s);
        let p = g.softmax_spatial(x).unwrap();
        let z: f64 = s.data().iter().map(|v| v.exp()).sum();
        for (a, v) in g.value(p).iter().zip(s.data()) {
            assert!((a - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[1, 2], vec![0.0, f64::NAN]).unwrap());
        assert!(matches!(g.softmax_spatial(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn batch_norm_constant_channel_is_zero() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::full(&[2, 3, 3], 4.2));
        let gamma = g.input(&Tensor::full(&[2], 1.0));
        let beta = g.input(&Tensor::zeros(&[2]));
        let y = g
            .batch_norm(x, gamma, beta, &[0.0; 2], &[1.0; 2], Mode::Train, "bn")
            .unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        let ups = g.take_stat_updates();
        assert_eq!(ups.len(), 1);
        assert!((ups[0].mean[0] - 4.2).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_eval_identity_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_tensor(&[2, 3, 4, 4], &mut rng);
        let mut g = Graph::new();
        let x = g.input(&t);
        let gamma = g.input(&Tensor::full(&[3], 1.0));
        let beta = g.input(&Tensor::zeros(&[3]));
        let y = g
            .batch_norm(x, gamma, beta, &[0.0; 3], &[1.0; 3], Mode::Eval, "bn")
            .unwrap();
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in g.value(y).iter().zip(t.data()) {
            assert!((a - b * s).abs() < 1e-15);
            assert!((a - b).abs() <= 1e-5 * b.abs());
        }
        assert!(g.take_stat_updates().is_empty());
    }

    #[test]
    fn batch_norm_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = rand_tensor(&[3, 2, 2, 3], &mut rng);
        let mut g = Graph::new();
        let x = g.input(&t);
        let gamma = g.input(&Tensor::full(&[2], 1.0));
        let beta = g.input(&Tensor::zeros(&[2]));
        let y = g
            .batch_norm(x, gamma, beta, &[0.0; 2], &[1.0; 2], Mode::Train, "bn")
            .unwrap();
        for c in 0..2 {
            let vals: Vec<(usize, f64)> = (0..3)
                .flat_map(|n| (0..6).map(move |j| n * 12 + c * 6 + j))
                .map(|i| (i, t.data()[i]))
                .collect();
            let mu = vals.iter().map(|v| v.1).sum::<f64>() / 18.0;
            let var = vals.iter().map(|v| (v.1 - mu).powi(2)).sum::<f64>() / 18.0;
            for (i, v) in vals {
                let want = (v - mu) / (var + BN_EPS).sqrt();
                assert!((g.value(y)[i] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn batch_norm_train_needs_two_values() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[1, 2, 1, 1]));
        let gamma = g.input(&Tensor::full(&[2], 1.0));
        let beta = g.input(&Tensor::zeros(&[2]));
        assert!(g
            .batch_norm(x, gamma, beta, &[0.0; 2], &[1.0; 2], Mode::Train, "bn")
            .is_err());
    }

    #[test]
    fn l2_examples() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let y = g.l2_normalize(x).unwrap();
        assert!((g.value(y)[0] - 0.6).abs() < 1e-15 && (g.value(y)[1] - 0.8).abs() < 1e-15);

        let u = Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap();
        let x = g.input(&u);
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y), u.data());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = g.input(&rand_tensor(&[128], &mut rng));
        let y = g.l2_normalize(x).unwrap();
        let n: f64 = g.value(y).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);

        let x = g.input(&Tensor::full(&[4], 1e-14));
        assert!(matches!(g.l2_normalize(x), Err(Error::DegenerateFeature { .. })));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // a second pass accumulates
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn unreachable_leaf_gets_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::scalar(2.0));
        let p = g.variable(&Tensor::full(&[3], 1.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(p).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.variable(&Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn fan_out_sums_paths() {
        // f = x*a + x*b  => df/dx = a + b
        let mut g = Graph::new();
        let x = g.variable(&Tensor::scalar(1.5));
        let a = g.input(&Tensor::scalar(2.0));
        let b = g.input(&Tensor::scalar(-0.5));
        let p1 = g.mul(x, a).unwrap();
        let p2 = g.mul(x, b).unwrap();
        let s = g.add(p1, p2).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.5]);
    }

    #[test]
    fn param_binding_is_shared() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(&[2], 1.0), true).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.get("w").unwrap().tensor.grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn valid_range_covers_padding() {
        // extent 5, k=3 centred (pad 1): kx=0 skips ox=0, kx=2 skips the last
        assert_eq!(valid_range(0, 1, 1, 5, 5), (1, 5));
        assert_eq!(valid_range(2, 1, 1, 5, 5), (0, 4));
        assert_eq!(valid_range(1, 2, 1, 5, 3), (0, 3));
    }
}
