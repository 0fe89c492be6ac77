use super::{AutodiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Output element -> operand element.
#[derive(Debug, Clone)]
enum IndexMap {
    Identity,
    /// Operand repeats along leading axes: `k % len`.
    Tile(usize),
    Gather(Vec<usize>),
}

impl IndexMap {
    #[inline]
    fn get(&self, k: usize) -> usize {
        match self {
            Self::Identity => k,
            Self::Tile(len) => k % len,
            Self::Gather(m) => m[k],
        }
    }
}

/// Element index maps for a broadcast binary op.
#[derive(Debug, Clone)]
struct Broadcast {
    shape: Vec<usize>,
    lhs: IndexMap,
    rhs: IndexMap,
}

impl Broadcast {
    fn new(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self, AutodiffError> {
        if lhs == rhs {
            return Ok(Self {
                shape: lhs.to_vec(),
                lhs: IndexMap::Identity,
                rhs: IndexMap::Identity,
            });
        }
        let rank = lhs.len().max(rhs.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pl, pr) = (pad(lhs), pad(rhs));
        let mut shape = Vec::with_capacity(rank);
        for (&l, &r) in pl.iter().zip(&pr) {
            if l == r || r == 1 {
                shape.push(l);
            } else if l == 1 {
                shape.push(r);
            } else {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    lhs: lhs.to_vec(),
                    rhs: rhs.to_vec(),
                });
            }
        }
        let index_map = |padded: &[usize]| -> IndexMap {
            if padded == shape.as_slice() {
                return IndexMap::Identity;
            }
            let lead = padded.iter().take_while(|&&d| d == 1).count();
            if padded[lead..] == shape[lead..] {
                return IndexMap::Tile(padded.iter().product());
            }
            // strides of the operand, zeroed along broadcast axes
            let mut strides = vec![0; rank];
            let mut acc = 1;
            for ax in (0..rank).rev() {
                strides[ax] = if padded[ax] == 1 { 0 } else { acc };
                acc *= padded[ax];
            }
            let total: usize = shape.iter().product();
            let mut out = Vec::with_capacity(total);
            let mut counter = vec![0usize; rank];
            let mut offset = 0;
            for _ in 0..total {
                out.push(offset);
                for ax in (0..rank).rev() {
                    counter[ax] += 1;
                    offset += strides[ax];
                    if counter[ax] < shape[ax] {
                        break;
                    }
                    offset -= strides[ax] * shape[ax];
                    counter[ax] = 0;
                }
            }
            IndexMap::Gather(out)
        };
        let lhs_map = index_map(&pl);
        let rhs_map = index_map(&pr);
        Ok(Self {
            shape,
            lhs: lhs_map,
            rhs: rhs_map,
        })
    }

    #[inline]
    fn l(&self, k: usize) -> usize {
        self.lhs.get(k)
    }

    #[inline]
    fn r(&self, k: usize) -> usize {
        self.rhs.get(k)
    }

    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Pow(Var, Var, Broadcast),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    FloorMax(Var, f64),
    StopGradient(Var),
    Sum(Var),
    Mean(Var),
    L1(Var),
    SquaredL2(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalConv {
        x: Var,
        kernel: Var,
    },
    MaskedSoftmax(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Pow(a, b, _) => {
                vec![*a, *b]
            }
            Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Transpose(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::FloorMax(x, _)
            | Op::StopGradient(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::L1(x)
            | Op::SquaredL2(x)
            | Op::SliceCols(x, _)
            | Op::SliceRows(x, _)
            | Op::MaskedSoftmax(x) => vec![*x],
            Op::ConcatCols(parts) => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CausalConv { x, kernel } => vec![*x, *kernel],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and the provenance graph cannot contain a cycle.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Replacement values for successive `stop_gradient` outputs.
    held_stops: Vec<Tensor>,
    stops_seen: usize,
}

/// Gradient buffers produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` is unreachable.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the node received no gradient.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn require_shape(op: &'static str, got: &[usize], want: &[usize]) -> Result<(), AutodiffError> {
    if got == want {
        Ok(())
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: got.to_vec(),
            rhs: want.to_vec(),
        })
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(AutodiffError::Invalid {
            op,
            msg: format!("expected a rank-2 tensor, got shape {s:?}"),
        }),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose k-th `stop_gradient` call outputs `held[k]` (when the
    /// shapes agree) instead of its live input, so stopped subtrees act as
    /// constants fixed at values recorded from another graph.
    pub fn with_held_stops(held: Vec<Tensor>) -> Self {
        Self {
            held_stops: held,
            ..Self::default()
        }
    }

    /// Forward values of every `stop_gradient` output, in creation order.
    pub fn stop_values(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGradient(_)))
            .map(|n| n.value.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient(_) => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            is_param: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].is_param
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Parents of `v` in the provenance graph.
    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    /// True if gradient can flow from `to` back into `from`.
    pub fn depends_on(&self, to: Var, from: Var) -> bool {
        let mut stack = vec![to];
        let mut seen = vec![false; to.0 + 1];
        while let Some(v) = stack.pop() {
            if v == from {
                return true;
            }
            if seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            if let Op::StopGradient(_) = self.nodes[v.0].op {
                continue;
            }
            stack.extend(self.nodes[v.0].op.parents());
        }
        false
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast), AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = Broadcast::new(op, av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = match (&bc.lhs, &bc.rhs) {
            (IndexMap::Identity, IndexMap::Identity) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            (IndexMap::Identity, IndexMap::Tile(len)) if *len > 0 => {
                let mut out = Vec::with_capacity(ad.len());
                for row in ad.chunks_exact(*len) {
                    out.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            _ => (0..bc.len()).map(|k| f(ad[bc.l(k)], bd[bc.r(k)])).collect(),
        };
        Ok((Tensor::new(bc.shape.clone(), data)?, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b, bc)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b, bc)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b, bc)))
    }

    /// Element-wise `base^exponent`, with `exponent` broadcast over `base`.
    ///
    /// `base` must be strictly positive.
    pub fn pow(&mut self, base: Var, exponent: Var) -> Result<Var, AutodiffError> {
        if let Some((index, &value)) = self
            .value(base)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0))
        {
            return Err(AutodiffError::Domain {
                op: "pow",
                index,
                value,
            });
        }
        let (t, bc) = self.binary("pow", base, exponent, f64::powf)?;
        Ok(self.push(t, Op::Pow(base, exponent, bc)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = require_matrix("matmul", self.value(a))?;
        let (k2, n) = require_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        if n > 0 && k > 0 {
            for (orow, arow) in out.chunks_exact_mut(n).zip(ad.chunks_exact(k)) {
                // four rows of b per sweep; the sum stays in p order
                let mut quads = arow.chunks_exact(4).zip(bd.chunks_exact(4 * n));
                for (a4, b4) in &mut quads {
                    let (b0, rest) = b4.split_at(n);
                    let (b1, rest) = rest.split_at(n);
                    let (b2, b3) = rest.split_at(n);
                    for ((((o, &x0), &x1), &x2), &x3) in orow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                        *o = *o + a4[0] * x0 + a4[1] * x1 + a4[2] * x2 + a4[3] * x3;
                    }
                }
                let done = k - k % 4;
                for (&aip, brow) in arow[done..].iter().zip(bd[done * n..].chunks_exact(n)) {
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aip * bv;
                    }
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (r, c) = require_matrix("transpose", self.value(x))?;
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, out)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    /// Natural log; input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var, AutodiffError> {
        if let Some((index, &value)) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > 0.0))
        {
            return Err(AutodiffError::Domain {
                op: "log",
                index,
                value,
            });
        }
        let t = self.value(x).map(f64::ln);
        Ok(self.push(t, Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    /// `max(x, beta)`; the gradient is zero wherever `x <= beta`.
    pub fn floor_max(&mut self, x: Var, beta: f64) -> Var {
        let t = self.value(x).map(|v| v.max(beta));
        self.push(t, Op::FloorMax(x, beta))
    }

    /// Forward identity that blocks all gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let live = self.value(x);
        let t = match self.held_stops.get(self.stops_seen) {
            Some(h) if h.shape() == live.shape() => h.clone(),
            _ => live.clone(),
        };
        self.stops_seen += 1;
        self.push(t, Op::StopGradient(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Entry-wise L1 norm, `sum |x|`.
    pub fn l1_norm(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        self.push(Tensor::scalar(s), Op::L1(x))
    }

    /// Squared entry-wise L2 norm, `sum x^2`.
    pub fn squared_l2(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SquaredL2(x))
    }

    /// Concatenates rank-2 tensors along the trailing (band) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or(AutodiffError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (rows, _) = require_matrix("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = require_matrix("concat_cols", self.value(p))?;
            if r != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows],
                    rhs: vec![r],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (rows, cols) = require_matrix("slice_cols", self.value(x))?;
        if start + len > cols {
            return Err(AutodiffError::Invalid {
                op: "slice_cols",
                msg: format!("range {start}..{} exceeds {cols} columns", start + len),
            });
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&d[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::matrix(rows, len, out)?;
        Ok(self.push(t, Op::SliceCols(x, start)))
    }

    /// Rows `start..start + len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (rows, cols) = require_matrix("slice_rows", self.value(x))?;
        if start + len > rows {
            return Err(AutodiffError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{} exceeds {rows} rows", start + len),
            });
        }
        let out = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let t = Tensor::matrix(len, cols, out)?;
        Ok(self.push(t, Op::SliceRows(x, start)))
    }

    /// Layer normalization over the trailing axis with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, AutodiffError> {
        let (rows, cols) = require_matrix("layer_norm", self.value(x))?;
        require_shape("layer_norm", self.shape(gain), &[cols])?;
        require_shape("layer_norm", self.shape(bias), &[cols])?;
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Depthwise convolution along time with left-only zero padding.
    ///
    /// `x` is `[frames, channels]`, `kernel` is `[taps, channels]`, and
    /// `out[t, c] = sum_k kernel[k, c] * x[t - (taps - 1) + k, c]`.
    pub fn causal_depthwise_conv(&mut self, x: Var, kernel: Var) -> Result<Var, AutodiffError> {
        let (frames, channels) = require_matrix("causal_conv", self.value(x))?;
        let (taps, kc) = require_matrix("causal_conv", self.value(kernel))?;
        if kc != channels || taps == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "causal_conv",
                lhs: vec![frames, channels],
                rhs: vec![taps, kc],
            });
        }
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![0.0; frames * channels];
        for t in 0..frames {
            for k in 0..taps {
                let Some(s) = (t + k).checked_sub(taps - 1) else {
                    continue;
                };
                for c in 0..channels {
                    out[t * channels + c] += kd[k * channels + c] * xd[s * channels + c];
                }
            }
        }
        let t = Tensor::matrix(frames, channels, out)?;
        Ok(self.push(t, Op::CausalConv { x, kernel }))
    }

    /// Row-wise softmax of `x + mask`, where `mask` is an additive constant
    /// (use `f64::NEG_INFINITY` for disallowed positions).
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var, AutodiffError> {
        let (rows, cols) = require_matrix("masked_softmax", self.value(x))?;
        require_shape("masked_softmax", mask.shape(), &[rows, cols])?;
        let xd = self.value(x).data();
        let md = mask.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let z: Vec<f64> = (0..cols).map(|c| xd[r * cols + c] + md[r * cols + c]).collect();
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY || max.is_nan() {
                return Err(AutodiffError::Domain {
                    op: "masked_softmax",
                    index: r,
                    value: max,
                });
            }
            let mut total = 0.0;
            for c in 0..cols {
                let e = (z[c] - max).exp();
                out[r * cols + c] = e;
                total += e;
            }
            for v in &mut out[r * cols..(r + 1) * cols] {
                *v /= total;
            }
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(t, Op::MaskedSoftmax(x)))
    }

    /// Reverse-mode accumulation from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            for (parent, contribution) in self.propagate(i, &g) {
                match &mut grads[parent.0] {
                    Some(buf) => buf.iter_mut().zip(&contribution).for_each(|(b, c)| *b += c),
                    slot => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    /// Zeroed gradient buffer for `v`, or `None` when `v` needs no gradient.
    fn slot(&self, v: Var) -> Option<Vec<f64>> {
        let node = &self.nodes[v.0];
        node.requires_grad.then(|| vec![0.0; node.value.numel()])
    }

    /// Vector-Jacobian products of node `i` for each parent that needs one.
    fn propagate(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf | Op::StopGradient(_) => {}
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(mut ga) = self.slot(*a) {
                    g.iter().enumerate().for_each(|(k, gk)| ga[bc.l(k)] += gk);
                    out.push((*a, ga));
                }
                if let Some(mut gb) = self.slot(*b) {
                    g.iter().enumerate().for_each(|(k, gk)| gb[bc.r(k)] += sign * gk);
                    out.push((*b, gb));
                }
            }
            Op::Mul(a, b, bc) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(mut ga) = self.slot(*a) {
                    for (k, &gk) in g.iter().enumerate() {
                        ga[bc.l(k)] += gk * bd[bc.r(k)];
                    }
                    out.push((*a, ga));
                }
                if let Some(mut gb) = self.slot(*b) {
                    for (k, &gk) in g.iter().enumerate() {
                        gb[bc.r(k)] += gk * ad[bc.l(k)];
                    }
                    out.push((*b, gb));
                }
            }
            Op::Pow(base, exponent, bc) => {
                let (bd, ed) = (self.value(*base).data(), self.value(*exponent).data());
                if let Some(mut gb) = self.slot(*base) {
                    for (k, &gk) in g.iter().enumerate() {
                        let (b, e) = (bd[bc.l(k)], ed[bc.r(k)]);
                        gb[bc.l(k)] += gk * e * b.powf(e - 1.0);
                    }
                    out.push((*base, gb));
                }
                if let Some(mut ge) = self.slot(*exponent) {
                    for (k, &gk) in g.iter().enumerate() {
                        // base clamped before the log: sigmoid outputs can underflow
                        ge[bc.r(k)] += gk * y[k] * bd[bc.l(k)].max(1e-12).ln();
                    }
                    out.push((*exponent, ge));
                }
            }
            Op::Scale(x, c) => {
                if self.slot(*x).is_some() {
                    out.push((*x, g.iter().map(|gk| gk * c).collect()));
                }
            }
            Op::MatMul(a, b) => {
                let (m, kk) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(mut ga) = self.slot(*a) {
                    // g * b^T
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..kk {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * kk + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    out.push((*a, ga));
                }
                if let Some(mut gb) = self.slot(*b) {
                    // a^T * g
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..kk {
                            let aip = ad[i * kk + p];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (o, &gv) in gbrow.iter_mut().zip(grow) {
                                *o += aip * gv;
                            }
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::Transpose(x) => {
                if let Some(mut gx) = self.slot(*x) {
                    let (r, c) = (self.value(*x).rows(), self.value(*x).cols());
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] = g[j * r + i];
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Log(x) => {
                if self.slot(*x).is_some() {
                    let xd = self.value(*x).data();
                    out.push((*x, g.iter().zip(xd).map(|(gk, v)| gk / v).collect()));
                }
            }
            Op::Exp(x) => {
                if self.slot(*x).is_some() {
                    out.push((*x, g.iter().zip(y).map(|(gk, v)| gk * v).collect()));
                }
            }
            Op::Sigmoid(x) => {
                if self.slot(*x).is_some() {
                    out.push((*x, g.iter().zip(y).map(|(gk, v)| gk * v * (1.0 - v)).collect()));
                }
            }
            Op::Tanh(x) => {
                if self.slot(*x).is_some() {
                    out.push((*x, g.iter().zip(y).map(|(gk, v)| gk * (1.0 - v * v)).collect()));
                }
            }
            Op::FloorMax(x, beta) => {
                if self.slot(*x).is_some() {
                    let xd = self.value(*x).data();
                    let gx = g
                        .iter()
                        .zip(xd)
                        .map(|(gk, v)| if *v > *beta { *gk } else { 0.0 })
                        .collect();
                    out.push((*x, gx));
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.slot(*x).is_some() {
                    let n = self.value(*x).numel();
                    let v = if matches!(node.op, Op::Mean(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    out.push((*x, vec![v; n]));
                }
            }
            Op::L1(x) => {
                if self.slot(*x).is_some() {
                    let xd = self.value(*x).data();
                    let sign = |v: f64| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    };
                    out.push((*x, xd.iter().map(|&v| g[0] * sign(v)).collect()));
                }
            }
            Op::SquaredL2(x) => {
                if self.slot(*x).is_some() {
                    let xd = self.value(*x).data();
                    out.push((*x, xd.iter().map(|v| 2.0 * v * g[0]).collect()));
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.value.rows(), node.value.cols());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(mut gp) = self.slot(p) {
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        out.push((p, gp));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                if let Some(mut gx) = self.slot(*x) {
                    let cols = self.value(*x).cols();
                    let (rows, w) = (node.value.rows(), node.value.cols());
                    for r in 0..rows {
                        gx[r * cols + start..r * cols + start + w]
                            .copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    out.push((*x, gx));
                }
            }
            Op::SliceRows(x, start) => {
                if let Some(mut gx) = self.slot(*x) {
                    let offset = start * node.value.cols();
                    gx[offset..offset + g.len()].copy_from_slice(g);
                    out.push((*x, gx));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                if let Some(mut gg) = self.slot(*gain) {
                    for (k, (gk, h)) in g.iter().zip(xhat).enumerate() {
                        gg[k % cols] += gk * h;
                    }
                    out.push((*gain, gg));
                }
                if let Some(mut gb) = self.slot(*bias) {
                    for (k, gk) in g.iter().enumerate() {
                        gb[k % cols] += gk;
                    }
                    out.push((*bias, gb));
                }
                if let Some(mut gx) = self.slot(*x) {
                    let gd = self.value(*gain).data();
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let dh: Vec<f64> = grow.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] = inv_std[r] * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::CausalConv { x, kernel } => {
                let (frames, channels) = (node.value.rows(), node.value.cols());
                let taps = self.value(*kernel).rows();
                let (xd, kd) = (self.value(*x).data(), self.value(*kernel).data());
                let mut gx = self.slot(*x);
                let mut gk = self.slot(*kernel);
                for t in 0..frames {
                    for k in 0..taps {
                        let Some(s) = (t + k).checked_sub(taps - 1) else {
                            continue;
                        };
                        for c in 0..channels {
                            let go = g[t * channels + c];
                            if let Some(gx) = gx.as_mut() {
                                gx[s * channels + c] += go * kd[k * channels + c];
                            }
                            if let Some(gk) = gk.as_mut() {
                                gk[k * channels + c] += go * xd[s * channels + c];
                            }
                        }
                    }
                }
                out.extend(gx.map(|v| (*x, v)));
                out.extend(gk.map(|v| (*kernel, v)));
            }
            Op::MaskedSoftmax(x) => {
                if let Some(mut gx) = self.slot(*x) {
                    let cols = node.value.cols();
                    for r in 0..node.value.rows() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    out.push((*x, gx));
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
