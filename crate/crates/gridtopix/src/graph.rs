//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! execution order, so every input id of a node is smaller than the node's
//! own id and `backward` can simply walk the list in reverse. Parameter
//! leaves remember their [`ParamSet`] slot; backward accumulates into the
//! parameter's grad buffer, additively across passes, until the caller
//! resets with `ParamSet::zero_grad`.

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Input,
    Param { slot: usize },
    Matmul { a: NodeId, b: NodeId },
    BiasAdd { a: NodeId, bias: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    EMin { a: NodeId, b: NodeId },
    EMax { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: S },
    Relu { a: NodeId },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Exp { a: NodeId },
    LnClamped { a: NodeId, floor: S },
    Square { a: NodeId },
    Clamp { a: NodeId, lo: S, hi: S },
    Conv2d { input: NodeId, weight: NodeId, bias: NodeId, stride: usize, pad: usize },
    Reshape { a: NodeId },
    SliceCols { a: NodeId, from: usize, to: usize },
    SliceRows { a: NodeId, from: usize, to: usize },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    GatherCols { a: NodeId, idx: Vec<usize> },
    LogSoftmax { a: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, target: NodeId },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    RowSum { a: NodeId },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter node handles for one GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruNodes {
    pub w_ih: NodeId,
    pub w_hh: NodeId,
    pub b_ih: NodeId,
    pub b_hh: NodeId,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Input, value, false)
    }

    /// Parameter leaf: copies the current value and records the slot for
    /// gradient accumulation.
    pub fn param(&mut self, params: &ParamSet<S>, slot: usize) -> NodeId {
        self.push(Op::Param { slot }, params.get(slot).clone(), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(&[m, n], data).unwrap(), rg))
    }

    /// `[B,N] + [N]` broadcast over the leading batch dimension.
    pub fn bias_add(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::dim("bias_add", sa, sb));
        }
        let (b, n) = (sa[0], sa[1]);
        let mut data = self.value(a).data().to_vec();
        let bd = self.value(bias).data();
        for row in 0..b {
            for j in 0..n {
                data[row * n + j] += bd[j];
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::BiasAdd { a, bias }, Tensor::new(sa, data).unwrap(), rg))
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(name, sa, sb));
        }
        let shape = sa.to_vec();
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, Tensor::new(&shape, data).unwrap(), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn emin(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("emin", a, b, |x, y| if y < x { y } else { x }, Op::EMin { a, b })
    }

    pub fn emax(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("emax", a, b, |x, y| if y > x { y } else { x }, Op::EMax { a, b })
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(S) -> S, op: Op<S>) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        let data: Vec<S> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(op, Tensor::new(&shape, data).unwrap(), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -S::one())
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > S::zero() { x } else { S::zero() }, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| S::one() / (S::one() + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), Op::Exp { a })
    }

    /// `ln(max(x, floor))`; the floor keeps near-deterministic policies from
    /// overflowing entropy terms.
    pub fn ln_clamped(&mut self, a: NodeId, floor: S) -> NodeId {
        self.unary(
            a,
            |x| if x > floor { x.ln() } else { floor.ln() },
            Op::LnClamped { a, floor },
        )
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square { a })
    }

    pub fn clamp(&mut self, a: NodeId, lo: S, hi: S) -> NodeId {
        self.unary(
            a,
            |x| {
                if x < lo {
                    lo
                } else if x > hi {
                    hi
                } else {
                    x
                }
            },
            Op::Clamp { a, lo, hi },
        )
    }

    /// Cross-correlation of `[B,C,H,W]` (or `[C,H,W]`, treated as batch 1)
    /// with kernels `[O,C,kh,kw]` plus per-channel bias `[O]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let si = self.value(input).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        let (bsz, c, h, w) = match si.len() {
            3 => (1, si[0], si[1], si[2]),
            4 => (si[0], si[1], si[2], si[3]),
            _ => return Err(Error::dim("conv2d", &si, &sw)),
        };
        if sw.len() != 4 || sw[1] != c {
            return Err(Error::dim("conv2d", &si, &sw));
        }
        let (o, kh, kw) = (sw[0], sw[2], sw[3]);
        let sb = self.value(bias).shape();
        if sb != [o] {
            return Err(Error::dim("conv2d bias", sb, &sw));
        }
        let oh = kernels::conv_out_dim(h, kh, stride, pad)
            .ok_or_else(|| Error::dim("conv2d: kernel exceeds padded input", &si, &sw))?;
        let ow = kernels::conv_out_dim(w, kw, stride, pad)
            .ok_or_else(|| Error::dim("conv2d: kernel exceeds padded input", &si, &sw))?;

        let mut out = vec![S::zero(); bsz * o * oh * ow];
        {
            let x = self.value(input).data();
            let wd = self.value(weight).data();
            let bd = self.value(bias).data();
            for s in 0..bsz {
                let cols = kernels::im2col(
                    &x[s * c * h * w..(s + 1) * c * h * w],
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                );
                let dst = &mut out[s * o * oh * ow..(s + 1) * o * oh * ow];
                kernels::matmul_acc(wd, &cols, dst, o, c * kh * kw, oh * ow);
                for oc in 0..o {
                    let plane = &mut dst[oc * oh * ow..(oc + 1) * oh * ow];
                    for v in plane.iter_mut() {
                        *v += bd[oc];
                    }
                }
            }
        }
        let out_shape: Vec<usize> = if si.len() == 3 {
            vec![o, oh, ow]
        } else {
            vec![bsz, o, oh, ow]
        };
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            Tensor::new(&out_shape, out).unwrap(),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape { a }, t, rg))
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if sa.len() != 2 || to > sa[1] || from >= to {
            return Err(Error::dim("slice_cols", sa, &[from, to]));
        }
        let (b, n) = (sa[0], sa[1]);
        let width = to - from;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(b * width);
        for row in 0..b {
            data.extend_from_slice(&src[row * n + from..row * n + to]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Op::SliceCols { a, from, to },
            Tensor::new(&[b, width], data).unwrap(),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if sa.len() < 2 || to > sa[0] || from >= to {
            return Err(Error::dim("slice_rows", sa, &[from, to]));
        }
        let row_elems: usize = sa[1..].iter().product();
        let src = self.value(a).data();
        let data = src[from * row_elems..to * row_elems].to_vec();
        let mut shape = sa.to_vec();
        shape[0] = to - from;
        let rg = self.rg(a);
        Ok(self.push(
            Op::SliceRows { a, from, to },
            Tensor::new(&shape, data).unwrap(),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero parts".into()));
        }
        let b = self.value(parts[0]).shape()[0];
        let mut total = 0usize;
        for &p in parts {
            let sp = self.value(p).shape();
            if sp.len() != 2 || sp[0] != b {
                return Err(Error::dim("concat_cols", self.value(parts[0]).shape(), sp));
            }
            total += sp[1];
        }
        let mut data = Vec::with_capacity(b * total);
        for row in 0..b {
            for &p in parts {
                let n = self.value(p).shape()[1];
                data.extend_from_slice(&self.value(p).data()[row * n..(row + 1) * n]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols { parts: parts.to_vec() },
            Tensor::new(&[b, total], data).unwrap(),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero parts".into()));
        }
        let tail: Vec<usize> = self.value(parts[0]).shape()[1..].to_vec();
        let mut rows = 0usize;
        for &p in parts {
            let sp = self.value(p).shape();
            if sp.len() < 2 || sp[1..] != tail[..] {
                return Err(Error::dim("concat_rows", self.value(parts[0]).shape(), sp));
            }
            rows += sp[0];
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatRows { parts: parts.to_vec() },
            Tensor::new(&shape, data).unwrap(),
            rg,
        ))
    }

    /// Pick one column per row: `[B,N]` with `idx: [B]` -> `[B]`.
    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if sa.len() != 2 || idx.len() != sa[0] {
            return Err(Error::dim("gather_cols", sa, &[idx.len()]));
        }
        let n = sa[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather_cols index", sa, &[bad]));
        }
        let src = self.value(a).data();
        let data: Vec<S> = idx
            .iter()
            .enumerate()
            .map(|(row, &i)| src[row * n + i])
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Op::GatherCols { a, idx: idx.to_vec() },
            Tensor::from_vec(data),
            rg,
        ))
    }

    /// Row-wise log-softmax over the last dimension of `[B,N]` (max-subtracted).
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(Error::dim("log_softmax", sa, &[]));
        }
        let (b, n) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut data = vec![S::zero(); b * n];
        for row in 0..b {
            let x = &src[row * n..(row + 1) * n];
            let m = x.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = x.iter().map(|&v| (v - m).exp()).fold(S::zero(), |s, v| s + v).ln() + m;
            for j in 0..n {
                data[row * n + j] = x[j] - lse;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::LogSoftmax { a }, Tensor::new(sa, data).unwrap(), rg))
    }

    /// Per-row cross-entropy `-sum(target * log_softmax(logits))`: `[B,N]` -> `[B]`.
    ///
    /// Targets must be probability vectors (entries >= 0, rows summing to 1
    /// within 1e-6).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (sl, st) = (self.value(logits).shape(), self.value(target).shape());
        if sl != st || sl.len() != 2 {
            return Err(Error::dim("softmax_cross_entropy", sl, st));
        }
        let (b, n) = (sl[0], sl[1]);
        let tol = S::from_f64_lossy(1e-6);
        for row in 0..b {
            let t = &self.value(target).data()[row * n..(row + 1) * n];
            let mut sum = S::zero();
            for &v in t {
                if v < S::zero() {
                    return Err(Error::Validation(format!(
                        "cross-entropy target has negative entry {v} in row {row}"
                    )));
                }
                sum += v;
            }
            if (sum - S::one()).abs() > tol {
                return Err(Error::Validation(format!(
                    "cross-entropy target row {row} sums to {sum}, expected 1"
                )));
            }
        }
        let ls = self.log_softmax(logits)?;
        let lsd = self.value(ls).data().to_vec();
        let td = self.value(target).data();
        let mut out = vec![S::zero(); b];
        for row in 0..b {
            let mut acc = S::zero();
            for j in 0..n {
                acc += td[row * n + j] * lsd[row * n + j];
            }
            out[row] = -acc;
        }
        let rg = self.rg(logits) || self.rg(target);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, target },
            Tensor::from_vec(out),
            rg,
        ))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let numel = self.value(a).numel();
        let inv = S::one() / S::from_f64_lossy(numel as f64);
        let sum = self.value(a).data().iter().fold(S::zero(), |s, &v| s + v);
        let rg = self.rg(a);
        self.push(Op::MeanAll { a }, Tensor::scalar(sum * inv), rg)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let sum = self.value(a).data().iter().fold(S::zero(), |s, &v| s + v);
        let rg = self.rg(a);
        self.push(Op::SumAll { a }, Tensor::scalar(sum), rg)
    }

    /// `[B,N]` -> `[B]` summing each row.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(Error::dim("row_sum", sa, &[]));
        }
        let (b, n) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let data: Vec<S> = (0..b)
            .map(|row| src[row * n..(row + 1) * n].iter().fold(S::zero(), |s, &v| s + v))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Op::RowSum { a }, Tensor::from_vec(data), rg))
    }

    /// `x @ w + b` for `x: [B,I]`, `w: [I,O]`, `b: [O]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let mm = self.matmul(x, w)?;
        self.bias_add(mm, b)
    }

    /// Standard GRU cell. `x: [B,I]`, `h_prev: [B,H]`; weights are laid out
    /// gate-major as `[I,3H]` / `[H,3H]` with gate order (reset, update,
    /// candidate). Returns the new hidden state `[B,H]`:
    ///
    /// r = sigmoid(x Wr + h Ur + br), z = sigmoid(x Wz + h Uz + bz),
    /// n = tanh(x Wn + r * (h Un + bn_h) + bn_i), h' = (1-z)*n + z*h
    pub fn gru_cell(&mut self, x: NodeId, h_prev: NodeId, p: GruNodes) -> Result<NodeId> {
        let sh = self.value(h_prev).shape();
        if sh.len() != 2 {
            return Err(Error::dim("gru_cell", sh, &[]));
        }
        let d_h = sh[1];
        let gi = self.matmul(x, p.w_ih)?;
        let gi = self.bias_add(gi, p.b_ih)?;
        let gh = self.matmul(h_prev, p.w_hh)?;
        let gh = self.bias_add(gh, p.b_hh)?;

        let gi_r = self.slice_cols(gi, 0, d_h)?;
        let gi_z = self.slice_cols(gi, d_h, 2 * d_h)?;
        let gi_n = self.slice_cols(gi, 2 * d_h, 3 * d_h)?;
        let gh_r = self.slice_cols(gh, 0, d_h)?;
        let gh_z = self.slice_cols(gh, d_h, 2 * d_h)?;
        let gh_n = self.slice_cols(gh, 2 * d_h, 3 * d_h)?;

        let r_pre = self.add(gi_r, gh_r)?;
        let r = self.sigmoid(r_pre);
        let z_pre = self.add(gi_z, gh_z)?;
        let z = self.sigmoid(z_pre);
        let rn = self.mul(r, gh_n)?;
        let n_pre = self.add(gi_n, rn)?;
        let n = self.tanh(n_pre);

        // h' = n + z*(h - n)
        let h_minus_n = self.sub(h_prev, n)?;
        let zh = self.mul(z, h_minus_n)?;
        self.add(n, zh)
    }

    /// Reverse pass from a scalar loss node. Accumulates parameter gradients
    /// into `params`. Calling twice on the same graph is an error.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet<S>) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward() called twice on the same graph".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;

        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for k in (0..n_nodes).rev() {
            if !self.nodes[k].requires_grad {
                continue;
            }
            let g = match grads[k].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(k, &g, &mut grads, params);
        }
        Ok(())
    }

    fn add_grad(&self, grads: &mut [Option<Vec<S>>], id: NodeId, contrib: &[S]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gv, &cv) in g.iter_mut().zip(contrib) {
                    *gv += cv;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn accumulate(
        &self,
        k: usize,
        g: &[S],
        grads: &mut [Option<Vec<S>>],
        params: &mut ParamSet<S>,
    ) {
        // Clone op metadata cheaply; tensors are read through self.value().
        let op = self.nodes[k].op.clone();
        match op {
            Op::Input => {}
            Op::Param { slot } => {
                let buf = params.get_mut(slot).grad_mut();
                for (b, &gv) in buf.iter_mut().zip(g) {
                    *b += gv;
                }
            }
            Op::Matmul { a, b } => {
                let sa = self.value(a).shape();
                let sb = self.value(b).shape();
                let (m, kk, n) = (sa[0], sa[1], sb[1]);
                if self.rg(a) {
                    // gA = gO . B^T
                    let bt = kernels::transpose(self.value(b).data(), kk, n);
                    let ga = kernels::matmul(g, &bt, m, n, kk);
                    self.add_grad(grads, a, &ga);
                }
                if self.rg(b) {
                    // gB = A^T . gO
                    let at = kernels::transpose(self.value(a).data(), m, kk);
                    let gb = kernels::matmul(&at, g, kk, m, n);
                    self.add_grad(grads, b, &gb);
                }
            }
            Op::BiasAdd { a, bias } => {
                if self.rg(a) {
                    self.add_grad(grads, a, g);
                }
                if self.rg(bias) {
                    let n = self.value(bias).numel();
                    let rows = self.value(a).shape()[0];
                    let mut gb = vec![S::zero(); n];
                    for row in 0..rows {
                        for j in 0..n {
                            gb[j] += g[row * n + j];
                        }
                    }
                    self.add_grad(grads, bias, &gb);
                }
            }
            Op::Add { a, b } => {
                self.add_grad(grads, a, g);
                self.add_grad(grads, b, g);
            }
            Op::Sub { a, b } => {
                self.add_grad(grads, a, g);
                if self.rg(b) {
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    self.add_grad(grads, b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(a) {
                    let ga: Vec<S> = g
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.add_grad(grads, a, &ga);
                }
                if self.rg(b) {
                    let gb: Vec<S> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.add_grad(grads, b, &gb);
                }
            }
            Op::EMin { a, b } | Op::EMax { a, b } => {
                let is_min = matches!(self.nodes[k].op, Op::EMin { .. });
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.rg(a) {
                    let ga: Vec<S> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gv, (&x, &y))| {
                            let a_wins = if is_min { !(y < x) } else { !(y > x) };
                            if a_wins {
                                gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    self.add_grad(grads, a, &ga);
                }
                if self.rg(b) {
                    let gb: Vec<S> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&gv, (&x, &y))| {
                            let b_wins = if is_min { y < x } else { y > x };
                            if b_wins {
                                gv
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    self.add_grad(grads, b, &gb);
                }
            }
            Op::Scale { a, c } => {
                let ga: Vec<S> = g.iter().map(|&v| v * c).collect();
                self.add_grad(grads, a, &ga);
            }
            Op::Relu { a } => {
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&gv, &x)| if x > S::zero() { gv } else { S::zero() })
                    .collect();
                self.add_grad(grads, a, &ga);
            }
            Op::Sigmoid { a } => {
                let y = self.value(NodeId(k)).data();
                let ga: Vec<S> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                    .collect();
                self.add_grad(grads, a, &ga);
            }
            Op::Tanh { a } => {
                let y = self.value(NodeId(k)).data();
                let ga: Vec<S> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                    .collect();
                self.add_grad(grads, a, &ga);
            }
            Op::Exp { a } => {
                let y = self.value(NodeId(k)).data();
                let ga: Vec<S> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                self.add_grad(grads, a, &ga);
            }
            Op::LnClamped { a, floor } => {
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&gv, &x)| if x > floor { gv / x } else { S::zero() })
                    .collect();
                self.add_grad(grads, a, &ga);
            }
            Op::Square { a } => {
                let two = S::from_f64_lossy(2.0);
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&gv, &x)| gv * two * x)
                    .collect();
                self.add_grad(grads, a, &ga);
            }
            Op::Clamp { a, lo, hi } => {
                let ga: Vec<S> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(&gv, &x)| if x >= lo && x <= hi { gv } else { S::zero() })
                    .collect();
                self.add_grad(grads, a, &ga);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let si = self.value(input).shape().to_vec();
                let sw = self.value(weight).shape().to_vec();
                let (bsz, c, h, w) = match si.len() {
                    3 => (1, si[0], si[1], si[2]),
                    _ => (si[0], si[1], si[2], si[3]),
                };
                let (o, kh, kw) = (sw[0], sw[2], sw[3]);
                let oh = kernels::conv_out_dim(h, kh, stride, pad).unwrap();
                let ow = kernels::conv_out_dim(w, kw, stride, pad).unwrap();
                let ckk = c * kh * kw;
                let x = self.value(input).data();
                let wd = self.value(weight).data();

                let mut g_input = if self.rg(input) {
                    Some(vec![S::zero(); x.len()])
                } else {
                    None
                };
                let mut g_weight = if self.rg(weight) {
                    Some(vec![S::zero(); wd.len()])
                } else {
                    None
                };
                let mut g_bias = if self.rg(bias) {
                    Some(vec![S::zero(); o])
                } else {
                    None
                };
                let wt = kernels::transpose(wd, o, ckk);

                for s in 0..bsz {
                    let go = &g[s * o * oh * ow..(s + 1) * o * oh * ow];
                    if let Some(gb) = &mut g_bias {
                        for oc in 0..o {
                            for v in &go[oc * oh * ow..(oc + 1) * oh * ow] {
                                gb[oc] += *v;
                            }
                        }
                    }
                    if g_weight.is_some() || g_input.is_some() {
                        if let Some(gw) = &mut g_weight {
                            // gW += gO . cols^T   (O x ohow) . (ohow x CKK)
                            let cols = kernels::im2col(
                                &x[s * c * h * w..(s + 1) * c * h * w],
                                c,
                                h,
                                w,
                                kh,
                                kw,
                                stride,
                                pad,
                                oh,
                                ow,
                            );
                            let colst = kernels::transpose(&cols, ckk, oh * ow);
                            kernels::matmul_acc(go, &colst, gw, o, oh * ow, ckk);
                        }
                        if let Some(gi) = &mut g_input {
                            // gCols = W^T . gO, scattered back to input
                            let gcols = kernels::matmul(&wt, go, ckk, o, oh * ow);
                            kernels::col2im_acc(
                                &gcols,
                                c,
                                h,
                                w,
                                kh,
                                kw,
                                stride,
                                pad,
                                oh,
                                ow,
                                &mut gi[s * c * h * w..(s + 1) * c * h * w],
                            );
                        }
                    }
                }
                if let Some(gi) = g_input {
                    self.add_grad(grads, input, &gi);
                }
                if let Some(gw) = g_weight {
                    self.add_grad(grads, weight, &gw);
                }
                if let Some(gb) = g_bias {
                    self.add_grad(grads, bias, &gb);
                }
            }
            Op::Reshape { a } => {
                self.add_grad(grads, a, g);
            }
            Op::SliceCols { a, from, to } => {
                let sa = self.value(a).shape();
                let (b, n) = (sa[0], sa[1]);
                let width = to - from;
                let mut ga = vec![S::zero(); b * n];
                for row in 0..b {
                    for j in 0..width {
                        ga[row * n + from + j] = g[row * width + j];
                    }
                }
                self.add_grad(grads, a, &ga);
            }
            Op::SliceRows { a, from, to } => {
                let sa = self.value(a).shape();
                let row_elems: usize = sa[1..].iter().product();
                let mut ga = vec![S::zero(); self.value(a).numel()];
                ga[from * row_elems..to * row_elems].copy_from_slice(g);
                self.add_grad(grads, a, &ga);
            }
            Op::ConcatCols { parts } => {
                let b = self.value(NodeId(k)).shape()[0];
                let total = self.value(NodeId(k)).shape()[1];
                let mut offset = 0usize;
                for &p in &parts {
                    let n = self.value(p).shape()[1];
                    if self.rg(p) {
                        let mut gp = vec![S::zero(); b * n];
                        for row in 0..b {
                            gp[row * n..(row + 1) * n]
                                .copy_from_slice(&g[row * total + offset..row * total + offset + n]);
                        }
                        self.add_grad(grads, p, &gp);
                    }
                    offset += n;
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0usize;
                for &p in &parts {
                    let numel = self.value(p).numel();
                    if self.rg(p) {
                        self.add_grad(grads, p, &g[offset..offset + numel]);
                    }
                    offset += numel;
                }
            }
            Op::GatherCols { a, idx } => {
                let n = self.value(a).shape()[1];
                let mut ga = vec![S::zero(); self.value(a).numel()];
                for (row, &i) in idx.iter().enumerate() {
                    ga[row * n + i] = g[row];
                }
                self.add_grad(grads, a, &ga);
            }
            Op::LogSoftmax { a } => {
                let sa = self.value(a).shape();
                let (b, n) = (sa[0], sa[1]);
                let y = self.value(NodeId(k)).data();
                let mut ga = vec![S::zero(); b * n];
                for row in 0..b {
                    let gr = &g[row * n..(row + 1) * n];
                    let yr = &y[row * n..(row + 1) * n];
                    let gsum = gr.iter().fold(S::zero(), |s, &v| s + v);
                    for j in 0..n {
                        ga[row * n + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.add_grad(grads, a, &ga);
            }
            Op::SoftmaxCrossEntropy { logits, target } => {
                let sl = self.value(logits).shape();
                let (b, n) = (sl[0], sl[1]);
                let ld = self.value(logits).data();
                let td = self.value(target).data();
                if self.rg(logits) {
                    let mut gl = vec![S::zero(); b * n];
                    for row in 0..b {
                        let x = &ld[row * n..(row + 1) * n];
                        let m = x.iter().cloned().fold(S::neg_infinity(), S::max);
                        let z = x.iter().map(|&v| (v - m).exp()).fold(S::zero(), |s, v| s + v);
                        for j in 0..n {
                            let p = (x[j] - m).exp() / z;
                            gl[row * n + j] = g[row] * (p - td[row * n + j]);
                        }
                    }
                    self.add_grad(grads, logits, &gl);
                }
                if self.rg(target) {
                    let mut gt = vec![S::zero(); b * n];
                    for row in 0..b {
                        let x = &ld[row * n..(row + 1) * n];
                        let m = x.iter().cloned().fold(S::neg_infinity(), S::max);
                        let lse = x.iter().map(|&v| (v - m).exp()).fold(S::zero(), |s, v| s + v).ln() + m;
                        for j in 0..n {
                            gt[row * n + j] = g[row] * (lse - x[j]);
                        }
                    }
                    self.add_grad(grads, target, &gt);
                }
            }
            Op::MeanAll { a } => {
                let numel = self.value(a).numel();
                let c = g[0] / S::from_f64_lossy(numel as f64);
                let ga = vec![c; numel];
                self.add_grad(grads, a, &ga);
            }
            Op::SumAll { a } => {
                let ga = vec![g[0]; self.value(a).numel()];
                self.add_grad(grads, a, &ga);
            }
            Op::RowSum { a } => {
                let sa = self.value(a).shape();
                let (b, n) = (sa[0], sa[1]);
                let mut ga = vec![S::zero(); b * n];
                for row in 0..b {
                    for j in 0..n {
                        ga[row * n + j] = g[row];
                    }
                }
                self.add_grad(grads, a, &ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_from<S: Scalar>(params: &mut ParamSet<S>, name: &str, t: Tensor<S>) -> usize {
        params.add(name, t)
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.input(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv2d_ones_sum() {
        // 1x3x3 ones through a single 1x1x3x3 ones kernel, stride 1 -> [9].
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1, 3, 3], 1.0));
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv2d_shape_arithmetic() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 4, 4]));
        let w = g.input(Tensor::zeros(&[1, 1, 4, 4]));
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 2, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    }

    #[test]
    fn conv2d_kernel_too_large_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 3, 3]));
        let w = g.input(Tensor::zeros(&[1, 1, 5, 5]));
        let b = g.input(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gru_zero_everything_is_fixed_point() {
        let d_in = 3;
        let d_h = 4;
        let mut params = ParamSet::<f32>::new();
        let w_ih = param_from(&mut params, "w_ih", Tensor::zeros(&[d_in, 3 * d_h]));
        let w_hh = param_from(&mut params, "w_hh", Tensor::zeros(&[d_h, 3 * d_h]));
        let b_ih = param_from(&mut params, "b_ih", Tensor::zeros(&[3 * d_h]));
        let b_hh = param_from(&mut params, "b_hh", Tensor::zeros(&[3 * d_h]));
        let mut g = Graph::new();
        let gp = GruNodes {
            w_ih: g.param(&params, w_ih),
            w_hh: g.param(&params, w_hh),
            b_ih: g.param(&params, b_ih),
            b_hh: g.param(&params, b_hh),
        };
        let x = g.input(Tensor::zeros(&[1, d_in]));
        let h = g.input(Tensor::zeros(&[1, d_h]));
        let h_new = g.gru_cell(x, h, gp).unwrap();
        assert!(g.value(h_new).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_saturated_update_gate_keeps_hidden_state() {
        // Large update-gate bias forces z ~= 1 so h' ~= h_prev.
        let d_in = 2;
        let d_h = 3;
        let mut params = ParamSet::<f32>::new();
        let mut b_ih_t = Tensor::zeros(&[3 * d_h]);
        for j in d_h..2 * d_h {
            b_ih_t.data_mut()[j] = 1e3;
        }
        let w_ih = param_from(&mut params, "w_ih", Tensor::zeros(&[d_in, 3 * d_h]));
        let w_hh = param_from(&mut params, "w_hh", Tensor::zeros(&[d_h, 3 * d_h]));
        let b_ih = param_from(&mut params, "b_ih", b_ih_t);
        let b_hh = param_from(&mut params, "b_hh", Tensor::zeros(&[3 * d_h]));
        let mut g = Graph::new();
        let gp = GruNodes {
            w_ih: g.param(&params, w_ih),
            w_hh: g.param(&params, w_hh),
            b_ih: g.param(&params, b_ih),
            b_hh: g.param(&params, b_hh),
        };
        let x = g.input(Tensor::new(&[1, d_in], vec![0.3, -0.7]).unwrap());
        let h_prev_vals = [0.5f32, -0.25, 0.125];
        let h = g.input(Tensor::new(&[1, d_h], h_prev_vals.to_vec()).unwrap());
        let h_new = g.gru_cell(x, h, gp).unwrap();
        for (got, want) in g.value(h_new).data().iter().zip(&h_prev_vals) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_cross_entropy_uniform_case() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let target = g.input(Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap());
        let loss = g.softmax_cross_entropy(logits, target).unwrap();
        assert!((g.value(loss).data()[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_saturated_correct() {
        let mut g = Graph::<f64>::new();
        let logits = g.input(Tensor::new(&[1, 2], vec![10.0, -10.0]).unwrap());
        let target = g.input(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let loss = g.softmax_cross_entropy(logits, target).unwrap();
        assert!(g.value(loss).data()[0] < 1e-8);
    }

    #[test]
    fn softmax_cross_entropy_rejects_unnormalized_target() {
        let mut g = Graph::<f32>::new();
        let logits = g.input(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let target = g.input(Tensor::new(&[1, 2], vec![0.7, 0.7]).unwrap());
        assert!(matches!(
            g.softmax_cross_entropy(logits, target),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_softmax_minus_target() {
        let mut params = ParamSet::<f64>::new();
        let slot = params.add(
            "logits",
            Tensor::new(&[1, 5], vec![0.3, -1.2, 2.0, 0.0, -0.5]).unwrap(),
        );
        let mut g = Graph::new();
        let logits = g.param(&params, slot);
        let tvals = vec![0.1, 0.2, 0.3, 0.25, 0.15];
        let target = g.input(Tensor::new(&[1, 5], tvals.clone()).unwrap());
        let ce = g.softmax_cross_entropy(logits, target).unwrap();
        let loss = g.sum_all(ce);
        g.backward(loss, &mut params).unwrap();

        let x = params.get(slot).data().to_vec();
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
        for j in 0..5 {
            let p = (x[j] - m).exp() / z;
            let want = p - tvals[j];
            let got = params.get(slot).grad().unwrap()[j];
            assert!((got - want).abs() < 1e-12, "grad[{j}] {got} vs {want}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_for_bounded_logits() {
        // |logit| <= 30 must keep softmax normalized within 1e-6.
        let mut g = Graph::<f32>::new();
        let logits = g.input(Tensor::new(&[1, 4], vec![30.0, -30.0, 12.5, -0.01]).unwrap());
        let ls = g.log_softmax(logits).unwrap();
        let total: f32 = g.value(ls).data().iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn double_backward_is_checked() {
        let mut params = ParamSet::<f32>::new();
        let slot = params.add("w", Tensor::new(&[1, 1], vec![2.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&params, slot);
        let loss = g.mean_all(w);
        g.backward(loss, &mut params).unwrap();
        assert!(matches!(
            g.backward(loss, &mut params),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn grads_accumulate_across_graphs_until_reset() {
        let mut params = ParamSet::<f32>::new();
        let slot = params.add("w", Tensor::new(&[1, 1], vec![2.0]).unwrap());
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&params, slot);
            let loss = g.sum_all(w);
            g.backward(loss, &mut params).unwrap();
        }
        assert_eq!(params.get(slot).grad().unwrap()[0], 2.0);
        params.zero_grad();
        assert_eq!(params.get(slot).grad().unwrap()[0], 0.0);
    }
}
