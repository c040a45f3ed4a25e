//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward calls append nodes in topological order (an op's inputs always
//! precede it), so one reverse sweep propagates cotangents to every leaf
//! that influenced the output. Tapes are cheap, single-use objects: build
//! one per forward pass, run `backward`, drop it.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Conv2d { x: TensorId, w: TensorId, stride: usize, pad: usize },
    AddChanBias { x: TensorId, b: TensorId },
    AddRowBias { x: TensorId, b: TensorId },
    MaxPool2 { x: TensorId, argmax: Vec<u32> },
    LeakyRelu { x: TensorId, leak: f64 },
    Tanh { x: TensorId },
    Exp { x: TensorId },
    Ln { x: TensorId },
    Neg { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddScalar { x: TensorId },
    MulScalar { x: TensorId, c: f64 },
    /// max(x, c) elementwise; gradient passes only where x > c.
    MaxScalar { x: TensorId, c: f64 },
    /// max(x, c) elementwise; gradient passes only where x > c.
    ClampMin { x: TensorId, c: f64 },
    Softmax { x: TensorId, l: usize },
    Sum { x: TensorId },
    Mean { x: TensorId },
    Reshape { x: TensorId },
    Select { x: TensorId, idx: usize },
    /// Max over a 1-D tensor excluding one index; lowest index wins ties.
    MaxExcept { x: TensorId, arg: usize },
    /// Mean Gaussian kernel between a 1-D query and a frozen bank.
    Kdensity { z: TensorId, bank: Arc<Vec<f64>>, sigma2: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by a backward sweep, indexed by `TensorId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
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

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> TensorId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(Op::Leaf, t)
    }

    /// a[m,k] * b[k,n]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = ops::matmul(ta.data(), tb.data(), m, k, n);
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(vec![m, n], out)?))
    }

    /// x[N,C,H,W] cross-correlated with w[K,C,kh,kw].
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (tx, tw) = (&self.nodes[x].value, &self.nodes[w].value);
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape("conv2d", format!("input {sx:?}, kernels {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (k, kh, kw) = (sw[0], sw[2], sw[3]);
        let oh = ops::conv_out_extent(h, kh, stride, pad)?;
        let ow = ops::conv_out_extent(wd, kw, stride, pad)?;
        let out = ops::conv2d(tx.data(), tw.data(), n, c, h, wd, k, kh, kw, stride, pad)?;
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, Tensor::new(vec![n, k, oh, ow], out)?))
    }

    /// Adds a per-channel bias b[K] to x[N,K,H,W].
    pub fn add_chan_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (tx, tb) = (&self.nodes[x].value, &self.nodes[b].value);
        let sx = tx.shape().to_vec();
        if sx.len() != 4 || tb.shape() != [sx[1]] {
            return Err(Error::shape("add_chan_bias", format!("{sx:?} + {:?}", tb.shape())));
        }
        let plane = sx[2] * sx[3];
        let mut out = tx.data().to_vec();
        for item in 0..sx[0] {
            for ch in 0..sx[1] {
                let bv = tb.data()[ch];
                for v in &mut out[(item * sx[1] + ch) * plane..][..plane] {
                    *v += bv;
                }
            }
        }
        Ok(self.push(Op::AddChanBias { x, b }, Tensor::new(sx, out)?))
    }

    /// Adds a bias row b[D] to every row of x[N,D].
    pub fn add_row_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (tx, tb) = (&self.nodes[x].value, &self.nodes[b].value);
        let sx = tx.shape().to_vec();
        if sx.len() != 2 || tb.shape() != [sx[1]] {
            return Err(Error::shape("add_row_bias", format!("{sx:?} + {:?}", tb.shape())));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(sx[1]) {
            for (v, &bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        Ok(self.push(Op::AddRowBias { x, b }, Tensor::new(sx, out)?))
    }

    pub fn maxpool2(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = &self.nodes[x].value;
        let s = tx.shape().to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("maxpool2", format!("{s:?}")));
        }
        let (out, argmax) = ops::maxpool2(tx.data(), s[0], s[1], s[2], s[3]);
        let shape = vec![s[0], s[1], s[2] / 2, s[3] / 2];
        Ok(self.push(Op::MaxPool2 { x, argmax }, Tensor::new(shape, out)?))
    }

    pub fn leaky_relu(&mut self, x: TensorId, leak: f64) -> Result<TensorId> {
        if !(0.0..1.0).contains(&leak) {
            return Err(Error::InvalidArgument(format!("leak must be in [0,1), got {leak}")));
        }
        let tx = &self.nodes[x].value;
        let out = Tensor::new(tx.shape().to_vec(), ops::leaky_relu(tx.data(), leak))?;
        Ok(self.push(Op::LeakyRelu { x, leak }, out))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out = self.nodes[x].value.map(f64::tanh);
        self.push(Op::Tanh { x }, out)
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        let out = self.nodes[x].value.map(f64::exp);
        self.push(Op::Exp { x }, out)
    }

    pub fn ln(&mut self, x: TensorId) -> TensorId {
        let out = self.nodes[x].value.map(f64::ln);
        self.push(Op::Ln { x }, out)
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        let out = self.nodes[x].value.map(|v| -v);
        self.push(Op::Neg { x }, out)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = self.binary_elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub { a, b }, out))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let out = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul { a, b }, out))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let out = self.nodes[x].value.map(|v| v + c);
        self.push(Op::AddScalar { x }, out)
    }

    pub fn mul_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let out = self.nodes[x].value.map(|v| v * c);
        self.push(Op::MulScalar { x, c }, out)
    }

    pub fn max_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let out = self.nodes[x].value.map(|v| v.max(c));
        self.push(Op::MaxScalar { x, c }, out)
    }

    /// Elementwise max(x, c); used as the probability floor before logs.
    pub fn clamp_min(&mut self, x: TensorId, c: f64) -> TensorId {
        let out = self.nodes[x].value.map(|v| v.max(c));
        self.push(Op::ClampMin { x, c }, out)
    }

    /// Row-wise stable softmax over the last axis of a [rows, l] matrix
    /// (a 1-D tensor is treated as a single row).
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = &self.nodes[x].value;
        let s = tx.shape().to_vec();
        let l = *s.last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let rows = tx.numel() / l;
        let out = ops::softmax_rows(tx.data(), rows, l)?;
        Ok(self.push(Op::Softmax { x, l }, Tensor::new(s, out)?))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.nodes[x].value.data().iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let t = &self.nodes[x].value;
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean { x }, Tensor::scalar(s))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let out = self.nodes[x].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, out))
    }

    /// Picks one element of a tensor as a scalar.
    pub fn select(&mut self, x: TensorId, idx: usize) -> Result<TensorId> {
        let tx = &self.nodes[x].value;
        if idx >= tx.numel() {
            return Err(Error::InvalidArgument(format!(
                "select index {idx} out of range for {} elements",
                tx.numel()
            )));
        }
        let v = tx.data()[idx];
        Ok(self.push(Op::Select { x, idx }, Tensor::scalar(v)))
    }

    /// Max over a 1-D tensor skipping `skip`; gradient flows to the winner.
    pub fn max_except(&mut self, x: TensorId, skip: usize) -> Result<TensorId> {
        let tx = &self.nodes[x].value;
        if tx.rank() != 1 || tx.numel() < 2 || skip >= tx.numel() {
            return Err(Error::shape(
                "max_except",
                format!("need 1-D tensor with >= 2 elements, got {:?} skip {skip}", tx.shape()),
            ));
        }
        let mut arg = usize::MAX;
        for (i, &v) in tx.data().iter().enumerate() {
            if i == skip {
                continue;
            }
            if arg == usize::MAX || v > tx.data()[arg] {
                arg = i;
            }
        }
        let v = tx.data()[arg];
        Ok(self.push(Op::MaxExcept { x, arg }, Tensor::scalar(v)))
    }

    /// Mean Gaussian kernel between 1-D query `z` and a frozen bank of
    /// `bank.len()/d` vectors; the bank never receives gradients.
    pub fn kdensity(&mut self, z: TensorId, bank: Arc<Vec<f64>>, sigma2: f64) -> Result<TensorId> {
        let tz = &self.nodes[z].value;
        let d = tz.numel();
        if d == 0 || bank.is_empty() || bank.len() % d != 0 {
            return Err(Error::shape(
                "kdensity",
                format!("query dim {d} does not divide bank of {}", bank.len()),
            ));
        }
        if sigma2 <= 0.0 {
            return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
        }
        let v = ops::kernel_density(tz.data(), &bank, sigma2);
        Ok(self.push(Op::Kdensity { z, bank, sigma2 }, Tensor::scalar(v)))
    }

    /// Reverse sweep from a scalar output, seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        let t = &self.nodes[loss].value;
        if !t.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", t.shape()),
            ));
        }
        self.backward_seeded(loss, &Tensor::new(t.shape().to_vec(), vec![1.0])?)
    }

    /// Reverse sweep from any output with an explicit cotangent, used to
    /// extract one Jacobian row at a time.
    pub fn backward_seeded(&self, output: TensorId, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.nodes[output].value.shape() {
            return Err(Error::shape(
                "backward_seeded",
                format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    self.nodes[output].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output] = Some(seed.clone());

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: TensorId, shape: &[usize], add: impl FnOnce(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape));
        add(slot.data_mut());
    }

    fn propagate(&self, id: TensorId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                Self::accumulate(grads, *a, ta.shape(), |da| {
                    ops::matmul_nt_acc(g.data(), tb.data(), da, m, n, k);
                });
                Self::accumulate(grads, *b, tb.shape(), |db| {
                    ops::matmul_tn_acc(ta.data(), g.data(), db, m, k, n);
                });
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (tx, tw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (sx, sw) = (tx.shape().to_vec(), tw.shape().to_vec());
                // Split-borrow the two gradient slots around the kernel call.
                let mut dx = grads[*x].take().unwrap_or_else(|| Tensor::zeros(&sx));
                let mut dw = grads[*w].take().unwrap_or_else(|| Tensor::zeros(&sw));
                ops::conv2d_backward(
                    tx.data(),
                    tw.data(),
                    g.data(),
                    sx[0],
                    sx[1],
                    sx[2],
                    sx[3],
                    sw[0],
                    sw[2],
                    sw[3],
                    *stride,
                    *pad,
                    dx.data_mut(),
                    dw.data_mut(),
                );
                grads[*x] = Some(dx);
                grads[*w] = Some(dw);
            }
            Op::AddChanBias { x, b } => {
                let sx = self.nodes[*x].value.shape().to_vec();
                let plane = sx[2] * sx[3];
                Self::accumulate(grads, *x, &sx, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
                Self::accumulate(grads, *b, &[sx[1]], |db| {
                    for item in 0..sx[0] {
                        for ch in 0..sx[1] {
                            let s: f64 = g.data()[(item * sx[1] + ch) * plane..][..plane].iter().sum();
                            db[ch] += s;
                        }
                    }
                });
            }
            Op::AddRowBias { x, b } => {
                let sx = self.nodes[*x].value.shape().to_vec();
                Self::accumulate(grads, *x, &sx, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
                Self::accumulate(grads, *b, &[sx[1]], |db| {
                    for row in g.data().chunks_exact(sx[1]) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                let sx = self.nodes[*x].value.shape().to_vec();
                Self::accumulate(grads, *x, &sx, |dx| {
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx[src as usize] += gv;
                    }
                });
            }
            Op::LeakyRelu { x, leak } => {
                let tx = &self.nodes[*x].value;
                Self::accumulate(grads, *x, tx.shape(), |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(tx.data()).zip(g.data()) {
                        // subgradient at 0 is the leak slope
                        *d += if xv > 0.0 { gv } else { leak * gv };
                    }
                });
            }
            Op::Tanh { x } => {
                let ty = &self.nodes[id].value;
                Self::accumulate(grads, *x, ty.shape(), |dx| {
                    for ((d, &yv), &gv) in dx.iter_mut().zip(ty.data()).zip(g.data()) {
                        *d += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Exp { x } => {
                let ty = &self.nodes[id].value;
                Self::accumulate(grads, *x, ty.shape(), |dx| {
                    for ((d, &yv), &gv) in dx.iter_mut().zip(ty.data()).zip(g.data()) {
                        *d += gv * yv;
                    }
                });
            }
            Op::Ln { x } => {
                let tx = &self.nodes[*x].value;
                Self::accumulate(grads, *x, tx.shape(), |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(tx.data()).zip(g.data()) {
                        *d += gv / xv;
                    }
                });
            }
            Op::Neg { x } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                Self::accumulate(grads, *x, &shape, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g.data()) {
                        *d -= gv;
                    }
                });
            }
            Op::Add { a, b } => {
                for &t in &[*a, *b] {
                    let shape = self.nodes[t].value.shape().to_vec();
                    Self::accumulate(grads, t, &shape, |dt| {
                        for (d, &gv) in dt.iter_mut().zip(g.data()) {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                let sa = self.nodes[*a].value.shape().to_vec();
                Self::accumulate(grads, *a, &sa, |da| {
                    for (d, &gv) in da.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
                let sb = self.nodes[*b].value.shape().to_vec();
                Self::accumulate(grads, *b, &sb, |db| {
                    for (d, &gv) in db.iter_mut().zip(g.data()) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let tb = self.nodes[*b].value.data().to_vec();
                let sa = self.nodes[*a].value.shape().to_vec();
                Self::accumulate(grads, *a, &sa, |da| {
                    for ((d, &bv), &gv) in da.iter_mut().zip(&tb).zip(g.data()) {
                        *d += gv * bv;
                    }
                });
                let ta = self.nodes[*a].value.data().to_vec();
                let sb = self.nodes[*b].value.shape().to_vec();
                Self::accumulate(grads, *b, &sb, |db| {
                    for ((d, &av), &gv) in db.iter_mut().zip(&ta).zip(g.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                Self::accumulate(grads, *x, &shape, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                });
            }
            Op::MulScalar { x, c } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                Self::accumulate(grads, *x, &shape, |dx| {
                    for (d, &gv) in dx.iter_mut().zip(g.data()) {
                        *d += gv * c;
                    }
                });
            }
            Op::MaxScalar { x, c } | Op::ClampMin { x, c } => {
                let tx = &self.nodes[*x].value;
                Self::accumulate(grads, *x, tx.shape(), |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(tx.data()).zip(g.data()) {
                        if xv > *c {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Softmax { x, l } => {
                let p = &self.nodes[id].value;
                let shape = p.shape().to_vec();
                Self::accumulate(grads, *x, &shape, |dx| {
                    for ((drow, prow), grow) in dx
                        .chunks_exact_mut(*l)
                        .zip(p.data().chunks_exact(*l))
                        .zip(g.data().chunks_exact(*l))
                    {
                        let dot: f64 = prow.iter().zip(grow).map(|(&pv, &gv)| pv * gv).sum();
                        for ((d, &pv), &gv) in drow.iter_mut().zip(prow).zip(grow) {
                            *d += pv * (gv - dot);
                        }
                    }
                });
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                let shape = self.nodes[*x].value.shape().to_vec();
                Self::accumulate(grads, *x, &shape, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Mean { x } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                let gv = g.data()[0] / shape.iter().product::<usize>() as f64;
                Self::accumulate(grads, *x, &shape, |dx| {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Select { x, idx } => {
                let gv = g.data()[0];
                let shape = self.nodes[*x].value.shape().to_vec();
                Self::accumulate(grads, *x, &shape, |dx| dx[*idx] += gv);
            }
            Op::MaxExcept { x, arg } => {
                let gv = g.data()[0];
                let shape = self.nodes[*x].value.shape().to_vec();
                Self::accumulate(grads, *x, &shape, |dx| dx[*arg] += gv);
            }
            Op::Kdensity { z, bank, sigma2 } => {
                let tz = &self.nodes[*z].value;
                Self::accumulate(grads, *z, tz.shape(), |dz| {
                    ops::kernel_density_backward(tz.data(), bank, *sigma2, g.data()[0], dz);
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn leaky_relu_values_and_domain() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
        let y = tape.leaky_relu(x, 0.1).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.1, 2.0]);
        assert!(tape.leaky_relu(x, 1.0).is_err());
        assert!(tape.leaky_relu(x, -0.1).is_err());
    }

    #[test]
    fn leak_zero_equals_relu() {
        let mut tape = Tape::new();
        let vals = vec![-3.0, -0.5, 0.0, 0.5, 3.0];
        let x = tape.leaf(Tensor::from_vec(vals.clone()));
        let y = tape.leaky_relu(x, 0.0).unwrap();
        let expect: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
        assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn max_except_skips_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![5.0, 1.0, 3.0]));
        let m = tape.max_except(x, 0).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 3.0);
        let grads = tape.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn reused_input_accumulates_gradient() {
        // loss = x * x + x => dloss/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(4.0));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[9.0]);
    }
}
