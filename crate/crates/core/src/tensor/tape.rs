use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{split_axis, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batched: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Transpose { a: Var },
    Reshape { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { a: Var, inv_std: Vec<f64> },
    Gelu { a: Var },
    Exp { a: Var },
    Log1pExp { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    L2Normalize { a: Var, axis: usize, norms: Vec<f64> },
    FunnelPool { a: Var, stride: usize },
    GatherRows { table: Var, ids: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Exp { .. } => "exp",
            Op::Log1pExp { .. } => "log1p_exp",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::FunnelPool { .. } => "funnel_pool",
            Op::GatherRows { .. } => "gather_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::Scale { a, .. }
            | Op::Slice { a, .. }
            | Op::Transpose { a }
            | Op::Reshape { a }
            | Op::Softmax { a, .. }
            | Op::LayerNorm { a, .. }
            | Op::Gelu { a }
            | Op::Exp { a }
            | Op::Log1pExp { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::L2Normalize { a, .. }
            | Op::FunnelPool { a, .. } => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Ordered record of executed primitives.
///
/// Nodes are appended in execution order, so every op's inputs precede it.
/// Leaf gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grad`]; leaves created with `requires_grad = false` never get
/// a gradient buffer.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Non-finite entries are rejected.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if one has been allocated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Number of scalar gradient entries that a backward pass through this
    /// tape materializes for leaves.
    pub fn trainable_leaf_elements(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .map(|n| n.value.numel())
            .sum()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        let name = op.name();
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ------------------------------------------------------------------
    // primitives

    /// Matrix product. Supports `[.., m, k] @ [k, n]` (right operand shared
    /// across all leading dimensions) and `[B, m, k] @ [B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() >= 2 && sb.len() == 2 && sa[sa.len() - 1] == sb[0] {
            let (k, n) = (sb[0], sb[1]);
            let m = self.value(a).numel() / k.max(1);
            let mut out = vec![0.0; m * n];
            gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, batched: false });
        }
        if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1] {
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = vec![0.0; bs * m * n];
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bs {
                gemm_nn(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    &bd[i * k * n..],
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
            return self.push(Tensor::new([bs, m, n], out)?, Op::MatMul { a, b, batched: true });
        }
        Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa,
            rhs: sb,
        })
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.ends_with(sb) {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var, TensorError> {
        self.broadcast_check(op.name(), a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let nb = vb.len();
        let data = va
            .data()
            .chunks(nb.max(1))
            .flat_map(|chunk| chunk.iter().zip(vb).map(|(&x, &y)| f(x, y)))
            .collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, data)?, op)
    }

    /// Elementwise `a + b`; `b`'s shape must be a suffix of `a`'s and is
    /// broadcast over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * s).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Scale { a, s })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} of shape {shape:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = (end - start) * inner;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            data.extend_from_slice(&src[base..base + width]);
        }
        let mut out = shape;
        out[axis] = end - start;
        self.push(Tensor::new(out, data)?, Op::Slice { a, axis, start })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                msg: format!("rank {r} < 2"),
            });
        }
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let src = self.value(a).data();
        let batches = src.len() / (m * n).max(1);
        let mut data = vec![0.0; src.len()];
        for b in 0..batches {
            let off = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    data[off + j * m + i] = src[off + i * n + j];
                }
            }
        }
        let mut out = shape;
        out.swap(r - 2, r - 1);
        self.push(Tensor::new(out, data)?, Op::Transpose { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = v.clone().reshaped(shape.to_vec());
        self.push(value, Op::Reshape { a })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for rank {}", shape.len()),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = self.value(a).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    data[at(j)] /= sum;
                }
            }
        }
        self.push(Tensor::new(shape, data)?, Op::Softmax { a, axis })
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var, TensorError> {
        let v = self.value(a);
        let shape = v.shape().to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::InvalidArgument {
            op: "layer_norm",
            msg: "scalar input".into(),
        })?;
        let mut data = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / d.max(1));
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(Tensor::new(shape, data)?, Op::LayerNorm { a, inv_std })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, gelu, Op::Gelu { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    /// `ln(1 + e^x)` evaluated as `x + ln1p(e^-x)` for positive `x`.
    pub fn log1p_exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, softplus, Op::Log1pExp { a })
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Result<Var, TensorError> {
        let v = self.value(a);
        let data = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        self.push(Tensor::new(shape, data)?, op)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                msg: "empty input".into(),
            });
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a })
    }

    /// Scales each slice along `axis` to unit Euclidean norm. A slice whose
    /// norm is below `eps` is an error rather than a silent zero.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "l2_normalize",
                msg: format!("axis {axis} out of range for rank {}", shape.len()),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = self.value(a).data().to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let norm = (0..len).map(|j| data[at(j)] * data[at(j)]).sum::<f64>().sqrt();
                if norm < eps || !norm.is_finite() {
                    return Err(TensorError::DegenerateVector { norm, eps });
                }
                for j in 0..len {
                    data[at(j)] /= norm;
                }
                norms.push(norm);
            }
        }
        self.push(Tensor::new(shape, data)?, Op::L2Normalize { a, axis, norms })
    }

    /// Mean-pools consecutive groups of `stride` rows along the token axis
    /// (second to last). The final group may be shorter.
    pub fn funnel_pool(&mut self, a: Var, stride: usize) -> Result<Var, TensorError> {
        if stride < 1 {
            return Err(TensorError::InvalidArgument {
                op: "funnel_pool",
                msg: "stride must be at least 1".into(),
            });
        }
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 2] == 0 {
            return Err(TensorError::InvalidArgument {
                op: "funnel_pool",
                msg: format!("needs a non-empty token axis, got shape {shape:?}"),
            });
        }
        let (outer, n, d) = split_axis(&shape, r - 2);
        let out_n = n.div_ceil(stride);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * out_n * d];
        for o in 0..outer {
            for g in 0..out_n {
                let start = g * stride;
                let end = (start + stride).min(n);
                let dst = &mut data[(o * out_n + g) * d..(o * out_n + g + 1) * d];
                for t in start..end {
                    let row = &src[(o * n + t) * d..(o * n + t + 1) * d];
                    dst.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
                let inv = 1.0 / (end - start) as f64;
                dst.iter_mut().for_each(|x| *x *= inv);
            }
        }
        let mut out = shape;
        out[r - 2] = out_n;
        self.push(Tensor::new(out, data)?, Op::FunnelPool { a, stride })
    }

    /// Row lookup: `table[ids[i]]` for each `i`, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("table must be rank 2, got {shape:?}"),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                msg: format!("id {bad} out of range for {rows} rows"),
            });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            Tensor::new([ids.len(), d], data)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    // ------------------------------------------------------------------
    // reverse pass

    /// Backpropagates from a one-element `loss`, accumulating into the
    /// gradient buffers of every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let v = self.value(loss);
        if v.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: v.shape().to_vec(),
            });
        }
        let seed = Tensor::full(v.shape().to_vec(), 1.0);
        self.backward_from(&[(loss, seed)])
    }

    /// Backpropagates from several outputs at once, each seeded with an
    /// upstream gradient of its own shape.
    pub fn backward_from(&mut self, seeds: &[(Var, Tensor)]) -> Result<(), TensorError> {
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Ok(());
        };
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; top + 1];
        for (v, g) in seeds {
            let node = &self.nodes[v.0];
            if g.shape() != node.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward",
                    lhs: node.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if let Some(slot) = slot(&self.nodes, &mut grads, *v) {
                add_into(slot, g.data());
            }
        }
        for i in (0..=top).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                propagate(&self.nodes, i, &g, &mut grads);
            }
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let buf = node.grad.get_or_insert_with(|| vec![0.0; node.value.numel()]);
                if let Some(Some(g)) = grads.get(i) {
                    add_into(buf, g);
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

/// Pushes the upstream gradient `g` of node `i` into its inputs.
fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    let val = |v: &Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, batched } => {
            let (sa, sb) = (val(a).shape(), val(b).shape());
            if !batched {
                let (k, n) = (sb[0], sb[1]);
                let m = val(a).numel() / k.max(1);
                let ad = val(a).data();
                let bd = val(b).data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm_nt(m, n, k, g, bd, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm_tn(k, m, n, ad, g, gb);
                }
            } else {
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let ad = val(a).data();
                let bd = val(b).data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for t in 0..bs {
                        gemm_nt(m, n, k, &g[t * m * n..], &bd[t * k * n..], &mut ga[t * m * k..(t + 1) * m * k]);
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for t in 0..bs {
                        gemm_tn(k, m, n, &ad[t * m * k..], &g[t * m * n..], &mut gb[t * k * n..(t + 1) * k * n]);
                    }
                }
            }
        }
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g);
            }
            let nb = val(b).numel();
            if let Some(gb) = slot(nodes, grads, *b) {
                for chunk in g.chunks(nb.max(1)) {
                    gb.iter_mut().zip(chunk).for_each(|(d, s)| *d += sign * s);
                }
            }
        }
        Op::Mul { a, b } => {
            let ad = val(a).data();
            let bd = val(b).data();
            let nb = bd.len().max(1);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (idx, (d, s)) in ga.iter_mut().zip(g).enumerate() {
                    *d += s * bd[idx % nb];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (idx, (s, x)) in g.iter().zip(ad).enumerate() {
                    gb[idx % nb] += s * x;
                }
            }
        }
        Op::Scale { a, s } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, x)| *d += s * x);
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let total = out.shape()[*axis] * inner;
            let mut offset = 0;
            for p in parts {
                let len = val(p).shape()[*axis] * inner;
                if let Some(gp) = slot(nodes, grads, *p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        add_into(&mut gp[o * len..(o + 1) * len], src);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { a, axis, start } => {
            let shape = val(a).shape().to_vec();
            let (outer, len, inner) = split_axis(&shape, *axis);
            let width = out.shape()[*axis] * inner;
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    let base = o * len * inner + start * inner;
                    add_into(&mut ga[base..base + width], &g[o * width..(o + 1) * width]);
                }
            }
        }
        Op::Transpose { a } => {
            let shape = val(a).shape();
            let r = shape.len();
            let (m, n) = (shape[r - 2], shape[r - 1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                let batches = ga.len() / (m * n).max(1);
                for t in 0..batches {
                    let off = t * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            ga[off + i * n + j] += g[off + j * m + i];
                        }
                    }
                }
            }
        }
        Op::Reshape { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_into(ga, g);
            }
        }
        Op::Softmax { a, axis } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { a, inv_std } => {
            let d = *out.shape().last().unwrap();
            let y = out.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for (r, inv) in inv_std.iter().enumerate() {
                    let gs = &g[r * d..(r + 1) * d];
                    let ys = &y[r * d..(r + 1) * d];
                    let mean_g = gs.iter().sum::<f64>() / d as f64;
                    let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        ga[r * d + j] += inv * (gs[j] - mean_g - ys[j] * mean_gy);
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let x = val(a).data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, s), x) in ga.iter_mut().zip(g).zip(x) {
                    *d += s * gelu_grad(*x);
                }
            }
        }
        Op::Exp { a } => {
            let y = out.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(y) {
                    *d += s * y;
                }
            }
        }
        Op::Log1pExp { a } => {
            let x = val(a).data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, s), x) in ga.iter_mut().zip(g).zip(x) {
                    *d += s * sigmoid(*x);
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean { a } => {
            let n = val(a).numel() as f64;
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::L2Normalize { a, axis, norms } => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = norms[o * inner + i];
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] += (g[at(j)] - y[at(j)] * dot) / norm;
                        }
                    }
                }
            }
        }
        Op::FunnelPool { a, stride } => {
            let shape = val(a).shape();
            let r = shape.len();
            let (outer, n, d) = split_axis(shape, r - 2);
            let out_n = out.shape()[r - 2];
            if let Some(ga) = slot(nodes, grads, *a) {
                for o in 0..outer {
                    for grp in 0..out_n {
                        let start = grp * stride;
                        let end = (start + stride).min(n);
                        let inv = 1.0 / (end - start) as f64;
                        let src = &g[(o * out_n + grp) * d..(o * out_n + grp + 1) * d];
                        for t in start..end {
                            let dst = &mut ga[(o * n + t) * d..(o * n + t + 1) * d];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y * inv);
                        }
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let d = val(table).shape()[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
    }
}
