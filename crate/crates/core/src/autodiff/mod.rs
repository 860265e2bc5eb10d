//! Minimal reverse-mode differentiation over dense `f64` grids.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so every
//! parent has a lower index than its child and the reverse index order is a
//! valid reverse topological order. Values are computed eagerly when a node
//! is created; [`Graph::backward`] accumulates gradients from a scalar root.
//!
//! Conventions: ReLU has subgradient 0 at 0, top-k/bottom-k selections break
//! ties by lowest flat index, and min-max normalization of a constant input
//! yields 0.5 everywhere with zero gradient.

pub mod gradcheck;
pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Log(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    ScaledSigmoid(Var, f64),
    Relu(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        kernel: usize,
        cols: Vec<f64>,
    },
    MeanPool2(Var),
    SpatialMean(Var),
    ChannelSum(Var),
    GroupMean(Var, usize),
    WeightedChannelSum(Var, Var),
    MinMaxNorm {
        input: Var,
        lo: usize,
        hi: usize,
    },
    Upsample(Var),
    MulChannels(Var, Var),
    Sum(Var),
    SelectMean {
        input: Var,
        rows: Vec<Vec<usize>>,
    },
    Softmax(Var),
    Index(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` is reachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Clamp into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// `1 / (1 + exp(−ω (x − σ)))`.
    pub fn scaled_sigmoid(&mut self, a: Var, omega: f64, sigma: f64) -> Var {
        self.unary(a, Op::ScaledSigmoid(a, omega), |x| {
            1.0 / (1.0 + (-omega * (x - sigma)).exp())
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Stride-1 convolution with an odd square kernel and zero "same" padding.
    /// `input: C×H×W`, `weight: O×C×k×k`, `bias: O` → `O×H×W`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(Error::Shape(format!(
                "conv2d expects C×H×W, O×C×k×k and O; got {si:?}, {sw:?}, {sb:?}"
            )));
        }
        let (c, h, w) = (si[0], si[1], si[2]);
        let (o, k) = (sw[0], sw[2]);
        if sw[1] != c || sw[3] != k || k % 2 == 0 || sb[0] != o {
            return Err(Error::Shape(format!(
                "conv2d kernel {sw:?} / bias {sb:?} incompatible with input {si:?}"
            )));
        }
        let hw = h * w;
        let cols = if k == 1 {
            self.value(input).data().to_vec()
        } else {
            kernels::im2col(self.value(input).data(), c, h, w, k)
        };
        let mut out = vec![0.0; o * hw];
        for (oc, &b) in self.value(bias).data().iter().enumerate() {
            out[oc * hw..(oc + 1) * hw].fill(b);
        }
        kernels::gemm(o, c * k * k, hw, self.value(weight).data(), false, &cols, false, 1.0, &mut out);
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(vec![o, h, w], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel: k,
                cols,
            },
            rg,
        ))
    }

    /// 2×2 mean pooling, stride 2, over `C×H×W` with even `H`, `W`.
    pub fn mean_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::Shape(format!("mean_pool2 needs C×even×even, got {s:?}")));
        }
        let out = kernels::mean_pool2(self.value(a).data(), s[0], s[1], s[2]);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![s[0], s[1] / 2, s[2] / 2], out)?, Op::MeanPool2(a), rg))
    }

    /// Mean over all trailing axes of a `C×…` grid → `C`.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("spatial_mean needs rank ≥ 2, got {s:?}")));
        }
        let n: usize = s[1..].iter().product();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .map(|row| row.iter().sum::<f64>() / n as f64)
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(out), Op::SpatialMean(a), rg))
    }

    /// Sum over the leading (channel) axis of `C×H×W` → `H×W`.
    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("channel_sum needs C×H×W, got {s:?}")));
        }
        let hw = s[1] * s[2];
        let mut out = vec![0.0; hw];
        for plane in self.value(a).data().chunks(hw) {
            for (o, v) in out.iter_mut().zip(plane) {
                *o += v;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![s[1], s[2]], out)?, Op::ChannelSum(a), rg))
    }

    /// Averages consecutive groups of `group` channels: `(C·m)×H×W` → `C×H×W`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || group == 0 || !s[0].is_multiple_of(group) {
            return Err(Error::Shape(format!(
                "group_mean: {s:?} not divisible into groups of {group}"
            )));
        }
        let hw = s[1] * s[2];
        let groups = s[0] / group;
        let src = self.value(a).data();
        let mut out = vec![0.0; groups * hw];
        for gi in 0..groups {
            let dst = &mut out[gi * hw..(gi + 1) * hw];
            for m in 0..group {
                let plane = &src[(gi * group + m) * hw..(gi * group + m + 1) * hw];
                for (o, v) in dst.iter_mut().zip(plane) {
                    *o += v;
                }
            }
            dst.iter_mut().for_each(|v| *v /= group as f64);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![groups, s[1], s[2]], out)?, Op::GroupMean(a, group), rg))
    }

    /// `Σ_c weights[c] · maps[c]`: `C×H×W`, `C` → `H×W`.
    pub fn weighted_channel_sum(&mut self, maps: Var, weights: Var) -> Result<Var> {
        let (sm, sw) = (self.shape(maps).to_vec(), self.shape(weights).to_vec());
        if sm.len() != 3 || sw != [sm[0]] {
            return Err(shape_err("weighted_channel_sum", &sm, &sw));
        }
        let hw = sm[1] * sm[2];
        let mut out = vec![0.0; hw];
        for (plane, &wc) in self.value(maps).data().chunks(hw).zip(self.value(weights).data()) {
            for (o, v) in out.iter_mut().zip(plane) {
                *o += wc * v;
            }
        }
        let rg = self.rg(maps) || self.rg(weights);
        Ok(self.push(Tensor::new(vec![sm[1], sm[2]], out)?, Op::WeightedChannelSum(maps, weights), rg))
    }

    /// `(x − min x) / (max x − min x)` over the whole grid; constant input → 0.5.
    pub fn min_max_normalize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (lo, hi) = kernels::argmin_argmax(t.data());
        let (min, max) = (t.data()[lo], t.data()[hi]);
        let range = max - min;
        let value = if range > 0.0 {
            t.map(|x| (x - min) / range)
        } else {
            t.map(|_| 0.5)
        };
        let rg = self.rg(a);
        self.push(value, Op::MinMaxNorm { input: a, lo, hi }, rg)
    }

    /// Corner-aligned bilinear resampling of an `h×w` map to `out_h×out_w`.
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || out_h < s[0] || out_w < s[1] {
            return Err(Error::Shape(format!(
                "upsample_bilinear: cannot resample {s:?} to {out_h}×{out_w}"
            )));
        }
        let out = kernels::bilinear(self.value(a).data(), s[0], s[1], out_h, out_w);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![out_h, out_w], out)?, Op::Upsample(a), rg))
    }

    /// `x: C×H×W` multiplied by `mask: H×W` broadcast over channels.
    pub fn mul_channels(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (sx, sm) = (self.shape(x).to_vec(), self.shape(mask).to_vec());
        if sx.len() != 3 || sm != sx[1..] {
            return Err(shape_err("mul_channels", &sx, &sm));
        }
        let hw = sm[0] * sm[1];
        let m = self.value(mask).data();
        let mut out = self.value(x).data().to_vec();
        for plane in out.chunks_mut(hw) {
            for (o, mv) in plane.iter_mut().zip(m) {
                *o *= mv;
            }
        }
        let rg = self.rg(x) || self.rg(mask);
        Ok(self.push(Tensor::new(sx, out)?, Op::MulChannels(x, mask), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    fn select_mean(&mut self, a: Var, k: usize, top: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("selection needs rank ≥ 2, got {s:?}")));
        }
        let n: usize = s[1..].iter().product();
        if k == 0 || k > n {
            return Err(Error::InvalidInput(format!(
                "selection size {k} outside 1..={n}"
            )));
        }
        let mut rows = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(s[0]);
        for row in self.value(a).data().chunks(n) {
            let idx = kernels::select_indices(row, k, top);
            out.push(idx.iter().map(|&i| row[i]).sum::<f64>() / k as f64);
            rows.push(idx);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(out), Op::SelectMean { input: a, rows }, rg))
    }

    /// Per leading-axis row, the mean of the `k` largest entries.
    pub fn top_k_mean(&mut self, a: Var, k: usize) -> Result<Var> {
        self.select_mean(a, k, true)
    }

    /// Per leading-axis row, the mean of the `k` smallest entries.
    pub fn bottom_k_mean(&mut self, a: Var, k: usize) -> Result<Var> {
        self.select_mean(a, k, false)
    }

    /// Max-subtracted softmax of a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 1 {
            return Err(Error::Shape(format!("softmax needs a vector, got {s:?}")));
        }
        let z = self.value(a).data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        let out = e.into_iter().map(|v| v / total).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_vec(out), Op::Softmax(a), rg))
    }

    /// The `i`-th flat element as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = *self
            .value(a)
            .data()
            .get(i)
            .ok_or_else(|| Error::Shape(format!("index {i} out of bounds")))?;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::Index(a, i), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Smallest distance of any non-smooth op from its kink in this graph:
    /// ReLU inputs from zero, selection boundaries from the next candidate,
    /// min-max extremes from the runner-up, clamps from their bounds.
    pub fn nonsmooth_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        margin = margin.min(x.abs());
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    for &x in self.value(*a).data() {
                        margin = margin.min((x - lo).abs()).min((x - hi).abs());
                    }
                }
                Op::SelectMean { input, rows } => {
                    let data = self.value(*input).data();
                    let n = data.len() / rows.len();
                    for (r, idx) in rows.iter().enumerate() {
                        let row = &data[r * n..(r + 1) * n];
                        let boundary = row[*idx.last().expect("k ≥ 1")];
                        for (i, &x) in row.iter().enumerate() {
                            if !idx.contains(&i) {
                                margin = margin.min((x - boundary).abs());
                            }
                        }
                    }
                }
                Op::MinMaxNorm { input, lo, hi } => {
                    let data = self.value(*input).data();
                    for (i, &x) in data.iter().enumerate() {
                        if i != *lo {
                            margin = margin.min(x - data[*lo]);
                        }
                        if i != *hi {
                            margin = margin.min(data[*hi] - x);
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Reverse-mode accumulation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient matches value shape")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    let d = gd.iter().zip(bv).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *a, self.like(*a, d))?;
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    let d = gd.iter().zip(av).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, self.like(*b, d))?;
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|v| k * v))?,
            Op::AddScalar(a) | Op::Reshape(a) => {
                let d = gd.to_vec();
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::ScaledSigmoid(a, omega) => {
                let d = gd.iter().zip(y).map(|(g, y)| g * omega * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let mut d = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gd, false, self.value(*b).data(), true, 0.0, &mut d);
                    self.accumulate(grads, *a, self.like(*a, d))?;
                }
                if self.rg(*b) {
                    let mut d = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.value(*a).data(), true, gd, false, 0.0, &mut d);
                    self.accumulate(grads, *b, self.like(*b, d))?;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel,
                cols,
            } => {
                let si = self.shape(*input);
                let (c, h, w) = (si[0], si[1], si[2]);
                let o = self.shape(*weight)[0];
                let (hw, ckk) = (h * w, c * kernel * kernel);
                if self.rg(*bias) {
                    let d = gd.chunks(hw).map(|row| row.iter().sum()).collect();
                    self.accumulate(grads, *bias, self.like(*bias, d))?;
                }
                if self.rg(*weight) {
                    let mut d = vec![0.0; o * ckk];
                    kernels::gemm(o, hw, ckk, gd, false, cols, true, 0.0, &mut d);
                    self.accumulate(grads, *weight, self.like(*weight, d))?;
                }
                if self.rg(*input) {
                    let mut dcols = vec![0.0; ckk * hw];
                    kernels::gemm(ckk, o, hw, self.value(*weight).data(), true, gd, false, 0.0, &mut dcols);
                    let d = if *kernel == 1 {
                        dcols
                    } else {
                        kernels::col2im(&dcols, c, h, w, *kernel)
                    };
                    self.accumulate(grads, *input, self.like(*input, d))?;
                }
            }
            Op::MeanPool2(a) => {
                let s = self.shape(*a);
                let d = kernels::mean_pool2_backward(gd, s[0], s[1], s[2]);
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::SpatialMean(a) => {
                let n = self.value(*a).len() / gd.len();
                let d = gd
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / n as f64, n))
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::ChannelSum(a) => {
                let c = self.shape(*a)[0];
                let d = (0..c).flat_map(|_| gd.iter().copied()).collect();
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::GroupMean(a, group) => {
                let s = self.shape(*a);
                let hw = s[1] * s[2];
                let scale = 1.0 / *group as f64;
                let d = gd
                    .chunks(hw)
                    .flat_map(|plane| {
                        (0..*group).flat_map(move |_| plane.iter().map(move |&g| g * scale))
                    })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::WeightedChannelSum(maps, weights) => {
                let hw = gd.len();
                if self.rg(*maps) {
                    let d = self
                        .value(*weights)
                        .data()
                        .iter()
                        .flat_map(|&wc| gd.iter().map(move |&g| g * wc))
                        .collect();
                    self.accumulate(grads, *maps, self.like(*maps, d))?;
                }
                if self.rg(*weights) {
                    let d = self
                        .value(*maps)
                        .data()
                        .chunks(hw)
                        .map(|plane| plane.iter().zip(gd).map(|(m, g)| m * g).sum())
                        .collect();
                    self.accumulate(grads, *weights, self.like(*weights, d))?;
                }
            }
            Op::MinMaxNorm { input, lo, hi } => {
                let x = self.value(*input).data();
                let range = x[*hi] - x[*lo];
                let mut d = vec![0.0; x.len()];
                if range > 0.0 {
                    let mut to_lo = 0.0;
                    let mut to_hi = 0.0;
                    for ((di, &g), &yi) in d.iter_mut().zip(gd).zip(y) {
                        *di = g / range;
                        to_lo += g * (yi - 1.0);
                        to_hi -= g * yi;
                    }
                    d[*lo] += to_lo / range;
                    d[*hi] += to_hi / range;
                }
                self.accumulate(grads, *input, self.like(*input, d))?;
            }
            Op::Upsample(a) => {
                let s = self.shape(*a);
                let so = node.value.shape();
                let d = kernels::bilinear_backward(gd, s[0], s[1], so[0], so[1]);
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::MulChannels(x, mask) => {
                let sm = self.shape(*mask);
                let hw = sm[0] * sm[1];
                let mv = self.value(*mask).data();
                if self.rg(*x) {
                    let d = gd
                        .chunks(hw)
                        .flat_map(|plane| plane.iter().zip(mv).map(|(g, m)| g * m))
                        .collect();
                    self.accumulate(grads, *x, self.like(*x, d))?;
                }
                if self.rg(*mask) {
                    let xv = self.value(*x).data();
                    let mut d = vec![0.0; hw];
                    for (gp, xp) in gd.chunks(hw).zip(xv.chunks(hw)) {
                        for ((di, g), xi) in d.iter_mut().zip(gp).zip(xp) {
                            *di += g * xi;
                        }
                    }
                    self.accumulate(grads, *mask, self.like(*mask, d))?;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![gd[0]; n]))?;
            }
            Op::SelectMean { input, rows } => {
                let n = self.value(*input).len() / rows.len();
                let mut d = vec![0.0; n * rows.len()];
                for (r, idx) in rows.iter().enumerate() {
                    let share = gd[r] / idx.len() as f64;
                    for &i in idx {
                        d[r * n + i] += share;
                    }
                }
                self.accumulate(grads, *input, self.like(*input, d))?;
            }
            Op::Softmax(a) => {
                let dot: f64 = gd.iter().zip(y).map(|(g, p)| g * p).sum();
                let d = gd.iter().zip(y).map(|(g, p)| p * (g - dot)).collect();
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
            Op::Index(a, i) => {
                let mut d = vec![0.0; self.value(*a).len()];
                d[*i] = gd[0];
                self.accumulate(grads, *a, self.like(*a, d))?;
            }
        }
        Ok(())
    }
}
