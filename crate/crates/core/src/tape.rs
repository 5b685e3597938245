//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` records one forward computation as an arena of nodes; `backward`
//! walks it once in reverse and returns a gradient per requires-grad node.
//! Activation gradients keep the batch axis, which is what the per-unit
//! gradient statistics consume. A tape is single-use: after `backward` it is
//! consumed and a fresh forward must be recorded.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Neg(TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Mul(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    AddBiasRows(TensorId, TensorId),
    AddBiasChannels(TensorId, TensorId),
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
    },
    Relu(TensorId),
    MaxPool2 {
        x: TensorId,
        argmax: Vec<usize>,
    },
    AvgPool2(TensorId),
    GlobalAvgPool(TensorId),
    /// x: [B, rest...] times a per-unit tensor of shape [rest...], broadcast
    /// over the batch axis.
    MulBcastUnit(TensorId, TensorId),
    /// x times a scalar node, broadcast everywhere.
    MulScalarNode(TensorId, TensorId),
    Recip(TensorId),
    Sum(TensorId),
    Sqrt(TensorId),
    HardSigmoid(TensorId),
    BroadcastScalar(TensorId),
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by `TensorId`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, op_name: &str) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name.to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn rg2(&self, a: TensorId, b: TensorId) -> bool {
        self.rg(a) || self.rg(b)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = self.value(a).zip(self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b), self.rg2(a, b), "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = self.value(a).zip(self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), self.rg2(a, b), "sub")
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a), self.rg(a), "neg")
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), self.rg(a), "scale")
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), self.rg(a), "add_scalar")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let v = self.value(a).zip(self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), self.rg2(a, b), "mul")
    }

    /// 1 - x, elementwise.
    pub fn one_minus(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.neg(a)?;
        self.add_scalar(n, 1.0)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} not conformable", sa, sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        self.push(v, Op::Matmul(a, b), self.rg2(a, b), "matmul")
    }

    /// x: [B, F] plus bias [F] added to every row.
    pub fn add_bias_rows(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.value(x).shape().to_vec(), self.value(b).shape().to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape(
                "add_bias_rows",
                format!("x {:?}, bias {:?}", sx, sb),
            ));
        }
        let (bt, f) = (sx[0], sx[1]);
        let (dx, db) = (self.value(x).data(), self.value(b).data());
        let mut out = vec![0.0; bt * f];
        for i in 0..bt {
            for j in 0..f {
                out[i * f + j] = dx[i * f + j] + db[j];
            }
        }
        let v = Tensor::new(sx, out)?;
        self.push(v, Op::AddBiasRows(x, b), self.rg2(x, b), "add_bias_rows")
    }

    /// x: [B, C, H, W] plus bias [C] added per channel.
    pub fn add_bias_channels(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.value(x).shape().to_vec(), self.value(b).shape().to_vec());
        if sx.len() != 4 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape(
                "add_bias_channels",
                format!("x {:?}, bias {:?}", sx, sb),
            ));
        }
        let (bt, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (dx, db) = (self.value(x).data(), self.value(b).data());
        let mut out = Vec::with_capacity(dx.len());
        for bi in 0..bt {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let bias = db[ci];
                out.extend(dx[base..base + h * w].iter().map(|v| v + bias));
            }
        }
        let v = Tensor::new(sx, out)?;
        self.push(v, Op::AddBiasChannels(x, b), self.rg2(x, b), "add_bias_channels")
    }

    /// 2-d convolution, zero padding. x: [B, Ci, H, W], w: [Co, Ci, Kh, Kw].
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::shape(
                "conv2d",
                format!("x {:?}, w {:?}", sx, sw),
            ));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidArg(format!("conv2d stride {} unsupported", stride)));
        }
        let (bt, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("spatial dims {}x{} (+pad {}) smaller than kernel {}x{}", h, wd, pad, kh, kw),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; bt * co * oh * ow];
        for b in 0..bt {
            for o in 0..co {
                let obase = (b * co + o) * oh * ow;
                for c in 0..ci {
                    let xbase = (b * ci + c) * h * wd;
                    let wbase = (o * ci + c) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = dw[wbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy >= h + pad {
                                    continue;
                                }
                                let iy = iy - pad;
                                let orow = obase + oy * ow;
                                let xrow = xbase + iy * wd;
                                for ox in 0..ow {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix >= wd + pad {
                                        continue;
                                    }
                                    out[orow + ox] += wv * dx[xrow + ix - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
        let v = Tensor::new(vec![bt, co, oh, ow], out)?;
        self.push(
            v,
            Op::Conv2d { x, w, stride, pad },
            self.rg2(x, w),
            "conv2d",
        )
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), self.rg(a), "relu")
    }

    /// 2x2 max pool, stride 2; trailing row/column dropped for odd extents.
    pub fn max_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(Error::shape("max_pool2", format!("x {:?}", sx)));
        }
        let (bt, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let dx = self.value(x).data();
        let mut out = vec![0.0; bt * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..bt * c {
            let ibase = bc * h * w;
            let obase = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut bi = 0;
                    for dy in 0..2 {
                        for dxo in 0..2 {
                            let i = ibase + (oy * 2 + dy) * w + ox * 2 + dxo;
                            if dx[i] > best {
                                best = dx[i];
                                bi = i;
                            }
                        }
                    }
                    out[obase + oy * ow + ox] = best;
                    argmax[obase + oy * ow + ox] = bi;
                }
            }
        }
        let v = Tensor::new(vec![bt, c, oh, ow], out)?;
        let rg = self.rg(x);
        self.push(v, Op::MaxPool2 { x, argmax }, rg, "max_pool2")
    }

    /// 2x2 average pool, stride 2.
    pub fn avg_pool2(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(Error::shape("avg_pool2", format!("x {:?}", sx)));
        }
        let (bt, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let dx = self.value(x).data();
        let mut out = vec![0.0; bt * c * oh * ow];
        for bc in 0..bt * c {
            let ibase = bc * h * w;
            let obase = bc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..2 {
                        for dxo in 0..2 {
                            s += dx[ibase + (oy * 2 + dy) * w + ox * 2 + dxo];
                        }
                    }
                    out[obase + oy * ow + ox] = s * 0.25;
                }
            }
        }
        let v = Tensor::new(vec![bt, c, oh, ow], out)?;
        self.push(v, Op::AvgPool2(x), self.rg(x), "avg_pool2")
    }

    /// [B, C, H, W] -> [B, C], mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.value(x).shape().to_vec();
        if sx.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("x {:?}", sx)));
        }
        let (bt, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let dx = self.value(x).data();
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; bt * c];
        for bc in 0..bt * c {
            out[bc] = dx[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() * inv;
        }
        let v = Tensor::new(vec![bt, c], out)?;
        self.push(v, Op::GlobalAvgPool(x), self.rg(x), "global_avg_pool")
    }

    /// x: [B, rest...] times per-unit m: [rest...], broadcast over batch.
    pub fn mul_bcast_unit(&mut self, x: TensorId, m: TensorId) -> Result<TensorId> {
        let (sx, sm) = (self.value(x).shape().to_vec(), self.value(m).shape().to_vec());
        if sx.len() < 2 || sx[1..] != sm[..] {
            return Err(Error::shape(
                "mul_bcast_unit",
                format!("x {:?}, unit {:?}", sx, sm),
            ));
        }
        let per = self.value(m).numel();
        let (dx, dm) = (self.value(x).data(), self.value(m).data());
        let mut out = Vec::with_capacity(dx.len());
        for b in 0..sx[0] {
            let row = &dx[b * per..(b + 1) * per];
            out.extend(row.iter().zip(dm).map(|(&a, &m)| a * m));
        }
        let v = Tensor::new(sx, out)?;
        self.push(v, Op::MulBcastUnit(x, m), self.rg2(x, m), "mul_bcast_unit")
    }

    /// x times a scalar-valued node.
    pub fn mul_scalar_node(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape(
                "mul_scalar_node",
                format!("scalar operand has shape {:?}", self.value(s).shape()),
            ));
        }
        let sv = self.value(s).item();
        let v = self.value(x).map(|a| a * sv);
        self.push(v, Op::MulScalarNode(x, s), self.rg2(x, s), "mul_scalar_node")
    }

    pub fn recip(&mut self, a: TensorId) -> Result<TensorId> {
        if self.value(a).data().iter().any(|&v| v == 0.0) {
            return Err(Error::NonFinite { op: "recip".into() });
        }
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a), self.rg(a), "recip")
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), self.rg(a), "sum")
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite { op: "sqrt".into() });
        }
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a), self.rg(a), "sqrt")
    }

    /// Euclidean norm of all entries, as a scalar node.
    pub fn l2_norm(&mut self, a: TensorId) -> Result<TensorId> {
        let sq = self.mul(a, a)?;
        let s = self.sum(sq)?;
        self.sqrt(s)
    }

    /// Scaled hard sigmoid: 0 below -3, 1 above 3, x/6 + 1/2 between.
    pub fn hard_sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let v = self.value(a).map(hard_sigmoid);
        self.push(v, Op::HardSigmoid(a), self.rg(a), "hard_sigmoid")
    }

    /// Broadcast a scalar node to a full shape.
    pub fn broadcast_scalar(&mut self, s: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape(
                "broadcast_scalar",
                format!("operand has shape {:?}", self.value(s).shape()),
            ));
        }
        let v = Tensor::filled(shape, self.value(s).item());
        self.push(v, Op::BroadcastScalar(s), self.rg(s), "broadcast_scalar")
    }

    /// Mean softmax cross-entropy over the batch. logits: [B, K].
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let sl = self.value(logits).shape().to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?}, {} labels", sl, labels.len()),
            ));
        }
        let (bt, k) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArg(format!(
                "label {} out of range for {} classes",
                bad, k
            )));
        }
        let dl = self.value(logits).data();
        let mut probs = vec![0.0; bt * k];
        let mut loss = 0.0;
        for i in 0..bt {
            let row = &dl[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            // log softmax at the label, computed in log space
            loss -= row[labels[i]] - mx - z.ln();
        }
        loss /= bt as f64;
        let probs = Tensor::new(vec![bt, k], probs)?;
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            "softmax_cross_entropy",
        )
    }

    /// Reverse pass from a scalar loss. Consumes the tape's freshness: a
    /// second call without a new forward is an error.
    pub fn backward(&mut self, loss: TensorId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}, expected scalar", self.value(loss).shape()),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: "backward".into(),
                });
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let accum = |grads: &mut [Option<Tensor>], id: TensorId, add: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => {
                    let d = existing.data_mut();
                    for (e, a) in d.iter_mut().zip(add.data()) {
                        *e += a;
                    }
                }
                slot => *slot = Some(add),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accum(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accum(grads, *a, g.clone());
                }
                if self.rg(*b) {
                    accum(grads, *b, g.map(|v| -v));
                }
            }
            Op::Neg(a) => {
                if self.rg(*a) {
                    accum(grads, *a, g.map(|v| -v));
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    let c = *c;
                    accum(grads, *a, g.map(|v| v * c));
                }
            }
            Op::AddScalar(a) => {
                if self.rg(*a) {
                    accum(grads, *a, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accum(grads, *a, g.zip(self.value(*b), |gv, bv| gv * bv)?);
                }
                if self.rg(*b) {
                    accum(grads, *b, g.zip(self.value(*a), |gv, av| gv * av)?);
                }
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let gd = g.data();
                if self.rg(*a) {
                    // dA = G Bt
                    let mut da = vec![0.0; m * k];
                    let db = vb.data();
                    for i2 in 0..m {
                        for j in 0..n {
                            let gv = gd[i2 * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                da[i2 * k + p] += gv * db[p * n + j];
                            }
                        }
                    }
                    accum(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.rg(*b) {
                    // dB = At G
                    let mut dbg = vec![0.0; k * n];
                    let da = va.data();
                    for i2 in 0..m {
                        for p in 0..k {
                            let av = da[i2 * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                dbg[p * n + j] += av * gd[i2 * n + j];
                            }
                        }
                    }
                    accum(grads, *b, Tensor::new(vec![k, n], dbg)?);
                }
            }
            Op::AddBiasRows(x, b) => {
                if self.rg(*x) {
                    accum(grads, *x, g.clone());
                }
                if self.rg(*b) {
                    let f = self.value(*b).numel();
                    let bt = g.numel() / f;
                    let gd = g.data();
                    let mut db = vec![0.0; f];
                    for i2 in 0..bt {
                        for j in 0..f {
                            db[j] += gd[i2 * f + j];
                        }
                    }
                    accum(grads, *b, Tensor::new(vec![f], db)?);
                }
            }
            Op::AddBiasChannels(x, b) => {
                if self.rg(*x) {
                    accum(grads, *x, g.clone());
                }
                if self.rg(*b) {
                    let s = self.value(*x).shape();
                    let (bt, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let gd = g.data();
                    let mut db = vec![0.0; c];
                    for bi in 0..bt {
                        for ci in 0..c {
                            let base = (bi * c + ci) * hw;
                            db[ci] += gd[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    accum(grads, *b, Tensor::new(vec![c], db)?);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (sx, sw) = (self.value(*x).shape().to_vec(), self.value(*w).shape().to_vec());
                let (bt, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let (stride, pad) = (*stride, *pad);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wd + 2 * pad - kw) / stride + 1;
                let gd = g.data();
                if self.rg(*x) {
                    let dw = self.value(*w).data();
                    let mut dx = vec![0.0; bt * ci * h * wd];
                    for b in 0..bt {
                        for o in 0..co {
                            let obase = (b * co + o) * oh * ow;
                            for c in 0..ci {
                                let xbase = (b * ci + c) * h * wd;
                                let wbase = (o * ci + c) * kh * kw;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let wv = dw[wbase + ky * kw + kx];
                                        if wv == 0.0 {
                                            continue;
                                        }
                                        for oy in 0..oh {
                                            let iy = oy * stride + ky;
                                            if iy < pad || iy >= h + pad {
                                                continue;
                                            }
                                            let iy = iy - pad;
                                            for ox in 0..ow {
                                                let ix = ox * stride + kx;
                                                if ix < pad || ix >= wd + pad {
                                                    continue;
                                                }
                                                dx[xbase + iy * wd + ix - pad] +=
                                                    wv * gd[obase + oy * ow + ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accum(grads, *x, Tensor::new(sx.clone(), dx)?);
                }
                if self.rg(*w) {
                    let dxv = self.value(*x).data();
                    let mut dwg = vec![0.0; co * ci * kh * kw];
                    for b in 0..bt {
                        for o in 0..co {
                            let obase = (b * co + o) * oh * ow;
                            for c in 0..ci {
                                let xbase = (b * ci + c) * h * wd;
                                let wbase = (o * ci + c) * kh * kw;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let mut acc = 0.0;
                                        for oy in 0..oh {
                                            let iy = oy * stride + ky;
                                            if iy < pad || iy >= h + pad {
                                                continue;
                                            }
                                            let iy = iy - pad;
                                            for ox in 0..ow {
                                                let ix = ox * stride + kx;
                                                if ix < pad || ix >= wd + pad {
                                                    continue;
                                                }
                                                acc += dxv[xbase + iy * wd + ix - pad]
                                                    * gd[obase + oy * ow + ox];
                                            }
                                        }
                                        dwg[wbase + ky * kw + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                    accum(grads, *w, Tensor::new(sw, dwg)?);
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    accum(grads, *a, g.zip(self.value(*a), |gv, av| if av > 0.0 { gv } else { 0.0 })?);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.rg(*x) {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g.data()[o];
                    }
                    accum(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
            }
            Op::AvgPool2(x) => {
                if self.rg(*x) {
                    let s = self.value(*x).shape();
                    let (bt, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let gd = g.data();
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for bc in 0..bt * c {
                        let ibase = bc * h * w;
                        let obase = bc * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gd[obase + oy * ow + ox] * 0.25;
                                for dy in 0..2 {
                                    for dxo in 0..2 {
                                        dx[ibase + (oy * 2 + dy) * w + ox * 2 + dxo] += gv;
                                    }
                                }
                            }
                        }
                    }
                    accum(grads, *x, Tensor::new(s.to_vec(), dx)?);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.rg(*x) {
                    let s = self.value(*x).shape();
                    let (bt, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let inv = 1.0 / hw as f64;
                    let gd = g.data();
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for bc in 0..bt * c {
                        let gv = gd[bc] * inv;
                        for p in 0..hw {
                            dx[bc * hw + p] = gv;
                        }
                    }
                    accum(grads, *x, Tensor::new(s.to_vec(), dx)?);
                }
            }
            Op::MulBcastUnit(x, m) => {
                let per = self.value(*m).numel();
                let bt = self.value(*x).numel() / per;
                let gd = g.data();
                if self.rg(*x) {
                    let dm = self.value(*m).data();
                    let mut dx = Vec::with_capacity(gd.len());
                    for b in 0..bt {
                        let row = &gd[b * per..(b + 1) * per];
                        dx.extend(row.iter().zip(dm).map(|(&gv, &mv)| gv * mv));
                    }
                    accum(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
                if self.rg(*m) {
                    let dxv = self.value(*x).data();
                    let mut dmg = vec![0.0; per];
                    for b in 0..bt {
                        for p in 0..per {
                            dmg[p] += gd[b * per + p] * dxv[b * per + p];
                        }
                    }
                    accum(grads, *m, Tensor::new(self.value(*m).shape().to_vec(), dmg)?);
                }
            }
            Op::MulScalarNode(x, s) => {
                if self.rg(*x) {
                    let sv = self.value(*s).item();
                    accum(grads, *x, g.map(|v| v * sv));
                }
                if self.rg(*s) {
                    let dot: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| a * b)
                        .sum();
                    accum(grads, *s, Tensor::scalar(dot));
                }
            }
            Op::Recip(a) => {
                if self.rg(*a) {
                    accum(grads, *a, g.zip(self.value(*a), |gv, av| -gv / (av * av))?);
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let gv = g.item();
                    accum(grads, *a, Tensor::filled(self.value(*a).shape().to_vec(), gv));
                }
            }
            Op::Sqrt(a) => {
                if self.rg(*a) {
                    // derivative 1/(2 sqrt x); sqrt value already on the node
                    accum(grads, *a, g.zip(&self.nodes[i].value, |gv, sv| gv / (2.0 * sv))?);
                }
            }
            Op::HardSigmoid(a) => {
                if self.rg(*a) {
                    accum(
                        grads,
                        *a,
                        g.zip(self.value(*a), |gv, av| {
                            if av > -3.0 && av < 3.0 {
                                gv / 6.0
                            } else {
                                0.0
                            }
                        })?,
                    );
                }
            }
            Op::BroadcastScalar(s) => {
                if self.rg(*s) {
                    accum(grads, *s, Tensor::scalar(g.sum()));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.rg(*logits) {
                    let bt = labels.len();
                    let k = probs.shape()[1];
                    let scale = g.item() / bt as f64;
                    let mut dl = probs.data().to_vec();
                    for i2 in 0..bt {
                        dl[i2 * k + labels[i2]] -= 1.0;
                    }
                    for v in dl.iter_mut() {
                        *v *= scale;
                    }
                    accum(grads, *logits, Tensor::new(vec![bt, k], dl)?);
                }
            }
        }
        Ok(())
    }
}

/// Scaled hard sigmoid used by the differentiable gate.
pub fn hard_sigmoid(x: f64) -> f64 {
    if x <= -3.0 {
        0.0
    } else if x >= 3.0 {
        1.0
    } else {
        x / 6.0 + 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), true);
        let loss = t.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((t.value(loss).item() - (2.0f64).ln()).abs() < 1e-12);
        let g = t.backward(loss).unwrap();
        let gl = g.get(logits).unwrap().data();
        assert!((gl[0] - (-0.5)).abs() < 1e-12);
        assert!((gl[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_is_stable() {
        let mut t = Tape::new();
        let logits = t.leaf(Tensor::new(vec![1, 2], vec![1e6, 0.0]).unwrap(), true);
        let loss = t.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(t.value(loss).item().abs() < 1e-9);
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let x = t.constant(Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap());
        let y = t.matmul(i2, x).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut t = Tape::new();
        let x = t.constant(
            Tensor::new(vec![1, 1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap(),
        );
        let w = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let y = t.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());
    }

    #[test]
    fn conv_rejects_undersized_input() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let w = t.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        let err = t.conv2d(x, w, 1, 0).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }

    #[test]
    fn backward_twice_is_stale() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert!(matches!(t.backward(y), Err(Error::StaleGraph)));
    }

    #[test]
    fn backward_needs_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn mul_bcast_unit_broadcasts_over_batch() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let m = t.leaf(Tensor::new(vec![2], vec![10.0, 0.0]).unwrap(), true);
        let y = t.mul_bcast_unit(x, m).unwrap();
        assert_eq!(t.value(y).data(), &[10.0, 0.0, 30.0, 0.0]);
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(m).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(g.get(x).unwrap().data(), &[10.0, 0.0, 10.0, 0.0]);
    }

    #[test]
    fn hard_sigmoid_piecewise_values() {
        assert_eq!(hard_sigmoid(0.0), 0.5);
        assert_eq!(hard_sigmoid(3.0), 1.0);
        assert_eq!(hard_sigmoid(-3.0), 0.0);
        assert_eq!(hard_sigmoid(6.0), 1.0);
        assert!((hard_sigmoid(1.5) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn linearity_of_backward() {
        // grad of a*L1 + b*L2 equals a*grad(L1) + b*grad(L2)
        let x0 = Tensor::new(vec![3], vec![0.5, -1.2, 2.0]).unwrap();
        let run = |a: f64, b: f64| -> Vec<f64> {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), true);
            let sq = t.mul(x, x).unwrap();
            let l1 = t.sum(sq).unwrap();
            let r = t.relu(x).unwrap();
            let l2 = t.sum(r).unwrap();
            let l1s = t.scale(l1, a).unwrap();
            let l2s = t.scale(l2, b).unwrap();
            let loss = t.add(l1s, l2s).unwrap();
            let g = t.backward(loss).unwrap();
            g.get(x).unwrap().data().to_vec()
        };
        let g1 = run(1.0, 0.0);
        let g2 = run(0.0, 1.0);
        let gc = run(2.5, -0.75);
        for i in 0..3 {
            assert!((gc[i] - (2.5 * g1[i] - 0.75 * g2[i])).abs() < 1e-10);
        }
    }
}
