use super::{AutogradError, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Elementwise primitive selector. Binary kinds take two operands, the rest one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Negate,
    Scale(f64),
}

impl ElementwiseOp {
    pub fn name(&self) -> &'static str {
        match self {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
            ElementwiseOp::Tanh => "tanh",
            ElementwiseOp::Sigmoid => "sigmoid",
            ElementwiseOp::Relu => "relu",
            ElementwiseOp::Exp => "exp",
            ElementwiseOp::Log => "log",
            ElementwiseOp::Negate => "negate",
            ElementwiseOp::Scale(_) => "scale",
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(
            self,
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul
        )
    }
}

/// Reduction selector for [`Tape::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    Lse,
}

impl ReduceOp {
    pub fn name(&self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
            ReduceOp::Lse => "lse",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

impl Node {
    fn numel(&self) -> usize {
        self.data.len()
    }
}

enum Op {
    Unary {
        kind: ElementwiseOp,
        x: TensorId,
        out: TensorId,
    },
    Binary {
        kind: ElementwiseOp,
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Matmul {
        a: TensorId,
        b: TensorId,
        out: TensorId,
    },
    Transpose {
        x: TensorId,
        out: TensorId,
    },
    Reshape {
        x: TensorId,
        out: TensorId,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
        out: TensorId,
    },
    BroadcastRows {
        x: TensorId,
        out: TensorId,
    },
    MaskRows {
        x: TensorId,
        mask: Vec<bool>,
        out: TensorId,
    },
    Clamp {
        x: TensorId,
        lo: f64,
        hi: f64,
        out: TensorId,
    },
    MaskedSoftmax {
        x: TensorId,
        axis: usize,
        mask: Option<Vec<bool>>,
        out: TensorId,
    },
    Reduce {
        kind: ReduceOp,
        x: TensorId,
        axis: usize,
        mask: Option<Vec<bool>>,
        // flat input offset of the winning entry per (outer, inner) slice
        argmax: Vec<usize>,
        out: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
        out: TensorId,
    },
    GatherRows {
        table: TensorId,
        indices: Vec<usize>,
        out: TensorId,
    },
}

/// Result of one backward traversal.
#[derive(Debug, Clone, Copy)]
pub struct BackwardReport {
    /// Number of recorded operations visited; always equals the op count.
    pub ops_visited: usize,
}

/// Records primitive operations during a forward pass and replays them in
/// reverse to accumulate gradients.
///
/// Operands always precede the operations that consume them, so a single
/// reverse sweep visits every operation exactly once. A tape is confined to
/// one thread; independent tapes may run in parallel.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// out += a . b, a: [m,k], b: [k,n]
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

// out += a . b^T, a: [m,k], b: [n,k]
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

// out += a^T . b, a: [k,m], b: [k,n]
fn matmul_tn_acc(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    for r in 0..k {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// outer extent before `axis`, the extent at `axis`, and inner extent after it
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn grad_buf<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: TensorId,
) -> &'g mut [f64] {
    let len = nodes[id.0].numel();
    grads[id.0]
        .get_or_insert_with(|| vec![0.0; len])
        .as_mut_slice()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push_node(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            needs_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Registers a non-trainable value.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId, AutogradError> {
        let t = Tensor::new(data, shape)?;
        let (shape, data) = (t.shape().to_vec(), t.data().to_vec());
        Ok(self.push_node(shape, data, false))
    }

    pub fn scalar_const(&mut self, value: f64) -> TensorId {
        self.push_node(vec![1], vec![value], false)
    }

    /// Registers a copy of `tensor`; gradients accumulate here iff it requires grad.
    pub fn leaf(&mut self, tensor: &Tensor) -> TensorId {
        self.push_node(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape_of(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Value of a single-element tensor.
    pub fn item(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].numel(), 1);
        self.nodes[id.0].data[0]
    }

    /// Accumulated gradient, available after [`Tape::backward`].
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn check_id(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    // ---- elementwise -------------------------------------------------------

    /// Dispatches on `kind`; binary kinds require `b`, unary kinds forbid it.
    pub fn elementwise(
        &mut self,
        kind: ElementwiseOp,
        a: TensorId,
        b: Option<TensorId>,
    ) -> Result<TensorId, AutogradError> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => self.binary(kind, a, b),
            (false, None) => self.unary(kind, a),
            (binary, _) => Err(AutogradError::Arity {
                op: kind.name(),
                expected: if binary { 2 } else { 1 },
            }),
        }
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        self.binary(ElementwiseOp::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        self.binary(ElementwiseOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        self.binary(ElementwiseOp::Mul, a, b)
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, AutogradError> {
        self.unary(ElementwiseOp::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, AutogradError> {
        self.unary(ElementwiseOp::Sigmoid, x)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId, AutogradError> {
        self.unary(ElementwiseOp::Relu, x)
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId, AutogradError> {
        self.unary(ElementwiseOp::Exp, x)
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId, AutogradError> {
        self.unary(ElementwiseOp::Log, x)
    }

    pub fn negate(&mut self, x: TensorId) -> Result<TensorId, AutogradError> {
        self.unary(ElementwiseOp::Negate, x)
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId, AutogradError> {
        self.unary(ElementwiseOp::Scale(factor), x)
    }

    fn unary(&mut self, kind: ElementwiseOp, x: TensorId) -> Result<TensorId, AutogradError> {
        let node = self.check_id(x);
        if let ElementwiseOp::Log = kind {
            if let Some(&bad) = node.data.iter().find(|v| **v <= 0.0) {
                return Err(AutogradError::Domain {
                    op: "log",
                    value: bad,
                });
            }
        }
        let data: Vec<f64> = match kind {
            ElementwiseOp::Tanh => node.data.iter().map(|v| v.tanh()).collect(),
            ElementwiseOp::Sigmoid => node.data.iter().map(|v| sigmoid(*v)).collect(),
            ElementwiseOp::Relu => node.data.iter().map(|v| v.max(0.0)).collect(),
            ElementwiseOp::Exp => node.data.iter().map(|v| v.exp()).collect(),
            ElementwiseOp::Log => node.data.iter().map(|v| v.ln()).collect(),
            ElementwiseOp::Negate => node.data.iter().map(|v| -v).collect(),
            ElementwiseOp::Scale(c) => node.data.iter().map(|v| c * v).collect(),
            _ => unreachable!("binary kind routed to unary"),
        };
        let shape = node.shape.clone();
        let needs = node.needs_grad;
        let out = self.push_node(shape, data, needs);
        self.ops.push(Op::Unary { kind, x, out });
        Ok(out)
    }

    /// Equal shapes, or identical leading extents with one operand carrying a
    /// trailing extent of 1 that broadcasts across the other's last axis.
    fn binary_broadcast(
        op: &'static str,
        lhs: &[usize],
        rhs: &[usize],
    ) -> Result<Vec<usize>, AutogradError> {
        let mismatch = || AutogradError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if lhs == rhs {
            return Ok(lhs.to_vec());
        }
        if lhs.len() != rhs.len() || lhs[..lhs.len() - 1] != rhs[..rhs.len() - 1] {
            return Err(mismatch());
        }
        let (la, lb) = (lhs[lhs.len() - 1], rhs[rhs.len() - 1]);
        if la == 1 || lb == 1 {
            let mut out = lhs.to_vec();
            *out.last_mut().unwrap() = la.max(lb);
            Ok(out)
        } else {
            Err(mismatch())
        }
    }

    fn binary(
        &mut self,
        kind: ElementwiseOp,
        a: TensorId,
        b: TensorId,
    ) -> Result<TensorId, AutogradError> {
        let out_shape = Self::binary_broadcast(
            kind.name(),
            &self.nodes[a.0].shape,
            &self.nodes[b.0].shape,
        )?;
        let last = *out_shape.last().unwrap();
        let leading: usize = out_shape.iter().product::<usize>() / last;
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let (la, lb) = (
            *self.nodes[a.0].shape.last().unwrap(),
            *self.nodes[b.0].shape.last().unwrap(),
        );
        let mut data = vec![0.0; leading * last];
        for o in 0..leading {
            for j in 0..last {
                let av = da[o * la + if la == 1 { 0 } else { j }];
                let bv = db[o * lb + if lb == 1 { 0 } else { j }];
                data[o * last + j] = match kind {
                    ElementwiseOp::Add => av + bv,
                    ElementwiseOp::Sub => av - bv,
                    ElementwiseOp::Mul => av * bv,
                    _ => unreachable!("unary kind routed to binary"),
                };
            }
        }
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let out = self.push_node(out_shape, data, needs);
        self.ops.push(Op::Binary { kind, a, b, out });
        Ok(out)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutogradError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        matmul_acc(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut data,
        );
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        let out = self.push_node(vec![m, n], data, needs);
        self.ops.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, AutogradError> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 {
            return Err(AutogradError::RankMismatch {
                op: "transpose",
                expected: 2,
                found: shape.len(),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.nodes[x.0].data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        let out = self.push_node(vec![c, r], data, needs);
        self.ops.push(Op::Transpose { x, out });
        Ok(out)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, AutogradError> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.nodes[x.0].numel() {
            return Err(AutogradError::InvalidShape {
                len: self.nodes[x.0].numel(),
                shape: shape.to_vec(),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.nodes[x.0].needs_grad;
        let out = self.push_node(shape.to_vec(), data, needs);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    /// Concatenates tensors of equal rank along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId, AutogradError> {
        if parts.is_empty() {
            return Err(AutogradError::EmptyConcat);
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(AutogradError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(AutogradError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; outer * axis_total * inner];
        for o in 0..outer {
            let mut written = 0;
            for p in parts {
                let s = &self.nodes[p.0].shape;
                let block = s[axis] * inner;
                let src = &self.nodes[p.0].data[o * block..(o + 1) * block];
                let dst_start = (o * axis_total + written) * inner;
                data[dst_start..dst_start + block].copy_from_slice(src);
                written += s[axis];
            }
        }
        let needs = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        let out = self.push_node(out_shape, data, needs);
        self.ops.push(Op::Concat {
            parts: parts.to_vec(),
            axis,
            out,
        });
        Ok(out)
    }

    /// Repeats a rank-1 tensor of length d into `rows` identical rows: [d] -> [rows, d].
    pub fn broadcast_rows(&mut self, x: TensorId, rows: usize) -> Result<TensorId, AutogradError> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 1 || rows == 0 {
            return Err(AutogradError::RankMismatch {
                op: "broadcast_rows",
                expected: 1,
                found: shape.len(),
            });
        }
        let d = shape[0];
        let src = &self.nodes[x.0].data;
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let needs = self.nodes[x.0].needs_grad;
        let out = self.push_node(vec![rows, d], data, needs);
        self.ops.push(Op::BroadcastRows { x, out });
        Ok(out)
    }

    /// Zeroes the rows (leading-axis slices) whose mask entry is false.
    pub fn mask_rows(&mut self, x: TensorId, mask: &[bool]) -> Result<TensorId, AutogradError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() || mask.len() != shape[0] {
            return Err(AutogradError::MaskLength {
                mask_len: mask.len(),
                extent: shape.first().copied().unwrap_or(0),
                axis: 0,
            });
        }
        let row = self.nodes[x.0].numel() / shape[0];
        let mut data = self.nodes[x.0].data.clone();
        for (i, keep) in mask.iter().enumerate() {
            if !keep {
                data[i * row..(i + 1) * row].fill(0.0);
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        let out = self.push_node(shape, data, needs);
        self.ops.push(Op::MaskRows {
            x,
            mask: mask.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Clamps values into [lo, hi]; gradient passes only where lo < x < hi.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId, AutogradError> {
        debug_assert!(lo < hi);
        let node = &self.nodes[x.0];
        let data: Vec<f64> = node.data.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = node.shape.clone();
        let needs = node.needs_grad;
        let out = self.push_node(shape, data, needs);
        self.ops.push(Op::Clamp { x, lo, hi, out });
        Ok(out)
    }

    // ---- structured ops ----------------------------------------------------

    /// Softmax along `axis`, restricted to positions whose mask entry is true.
    ///
    /// Masked positions come out exactly 0; valid positions are positive and
    /// sum to 1 per slice. Stabilized by subtracting the per-slice valid max.
    pub fn masked_softmax(
        &mut self,
        x: TensorId,
        axis: usize,
        mask: Option<&[bool]>,
    ) -> Result<TensorId, AutogradError> {
        let shape = self.nodes[x.0].shape.clone();
        self.check_axis_mask("masked_softmax", &shape, axis, mask)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = &self.nodes[x.0].data;
        let valid = |j: usize| mask.map_or(true, |m| m[j]);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    if valid(j) {
                        mx = mx.max(src[at(j)]);
                    }
                }
                let mut denom = 0.0;
                for j in 0..len {
                    if valid(j) {
                        let e = (src[at(j)] - mx).exp();
                        data[at(j)] = e;
                        denom += e;
                    }
                }
                for j in 0..len {
                    if valid(j) {
                        data[at(j)] /= denom;
                    }
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        let out = self.push_node(shape, data, needs);
        self.ops.push(Op::MaskedSoftmax {
            x,
            axis,
            mask: mask.map(|m| m.to_vec()),
            out,
        });
        Ok(out)
    }

    /// Reduction along `axis`. Masked entries contribute nothing; `mean`
    /// divides by the valid count; `max` routes its gradient to the
    /// lowest-index maximal valid entry; `lse` is max-shifted log-sum-exp.
    /// The reduced axis is dropped from the output shape (scalars keep `[1]`).
    pub fn reduce(
        &mut self,
        kind: ReduceOp,
        x: TensorId,
        axis: usize,
        mask: Option<&[bool]>,
    ) -> Result<TensorId, AutogradError> {
        let shape = self.nodes[x.0].shape.clone();
        self.check_axis_mask(kind.name(), &shape, axis, mask)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = &self.nodes[x.0].data;
        let valid = |j: usize| mask.map_or(true, |m| m[j]);
        let count = mask.map_or(len, |m| m.iter().filter(|v| **v).count());
        let mut data = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceOp::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let slot = o * inner + i;
                match kind {
                    ReduceOp::Sum => {
                        data[slot] = (0..len).filter(|&j| valid(j)).map(|j| src[at(j)]).sum();
                    }
                    ReduceOp::Mean => {
                        let s: f64 = (0..len).filter(|&j| valid(j)).map(|j| src[at(j)]).sum();
                        data[slot] = s / count as f64;
                    }
                    ReduceOp::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_at = 0;
                        for j in 0..len {
                            if valid(j) && src[at(j)] > best {
                                best = src[at(j)];
                                best_at = at(j);
                            }
                        }
                        data[slot] = best;
                        argmax[slot] = best_at;
                    }
                    ReduceOp::Lse => {
                        let mut mx = f64::NEG_INFINITY;
                        for j in 0..len {
                            if valid(j) {
                                mx = mx.max(src[at(j)]);
                            }
                        }
                        let s: f64 = (0..len)
                            .filter(|&j| valid(j))
                            .map(|j| (src[at(j)] - mx).exp())
                            .sum();
                        data[slot] = mx + s.ln();
                    }
                }
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| *d != axis)
            .map(|(_, e)| *e)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.nodes[x.0].needs_grad;
        let out = self.push_node(out_shape, data, needs);
        self.ops.push(Op::Reduce {
            kind,
            x,
            axis,
            mask: mask.map(|m| m.to_vec()),
            argmax,
            out,
        });
        Ok(out)
    }

    fn check_axis_mask(
        &self,
        op: &'static str,
        shape: &[usize],
        axis: usize,
        mask: Option<&[bool]>,
    ) -> Result<(), AutogradError> {
        if axis >= shape.len() {
            return Err(AutogradError::AxisOutOfRange {
                op,
                axis,
                rank: shape.len(),
            });
        }
        if let Some(m) = mask {
            if m.len() != shape[axis] {
                return Err(AutogradError::MaskLength {
                    mask_len: m.len(),
                    extent: shape[axis],
                    axis,
                });
            }
            if !m.iter().any(|v| *v) {
                return Err(AutogradError::EmptySlice { op, axis });
            }
        }
        Ok(())
    }

    /// Row-wise normalization of a [n, d] tensor:
    /// out = gain * (x - mean) / sqrt(var + eps) + bias, with population variance.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId, AutogradError> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(AutogradError::RankMismatch {
                op: "layer_norm",
                expected: 2,
                found: shape.len(),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = &self.nodes[id.0].shape;
            if s.as_slice() != [d] {
                return Err(AutogradError::ShapeMismatch {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    lhs: vec![d],
                    rhs: s.clone(),
                });
            }
        }
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let orow = &mut data[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = g[j] * (row[j] - mean) * inv + b[j];
            }
        }
        let needs = self.nodes[x.0].needs_grad
            || self.nodes[gain.0].needs_grad
            || self.nodes[bias.0].needs_grad;
        let out = self.push_node(shape, data, needs);
        self.ops.push(Op::LayerNorm {
            x,
            gain,
            bias,
            eps,
            out,
        });
        Ok(out)
    }

    /// Row lookup: out[i] = table[indices[i]]. Backward scatter-adds into the
    /// table, so repeated indices accumulate.
    pub fn gather_rows(
        &mut self,
        table: TensorId,
        indices: &[usize],
    ) -> Result<TensorId, AutogradError> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(AutogradError::RankMismatch {
                op: "gather_rows",
                expected: 2,
                found: shape.len(),
            });
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|i| **i >= v) {
            return Err(AutogradError::IndexOutOfRange {
                index: bad,
                rows: v,
            });
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.nodes[table.0].needs_grad;
        let out = self.push_node(vec![indices.len(), d], data, needs);
        self.ops.push(Op::GatherRows {
            table,
            indices: indices.to_vec(),
            out,
        });
        Ok(out)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a single-element loss; every recorded operation is
    /// visited exactly once. Gradients are then readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<BackwardReport, AutogradError> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(AutogradError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let ops = std::mem::take(&mut self.ops);
        let mut visited = 0;
        for op in ops.iter().rev() {
            visited += 1;
            self.backprop(op);
        }
        self.ops = ops;
        Ok(BackwardReport {
            ops_visited: visited,
        })
    }

    fn out_of(op: &Op) -> TensorId {
        match op {
            Op::Unary { out, .. }
            | Op::Binary { out, .. }
            | Op::Matmul { out, .. }
            | Op::Transpose { out, .. }
            | Op::Reshape { out, .. }
            | Op::Concat { out, .. }
            | Op::BroadcastRows { out, .. }
            | Op::MaskRows { out, .. }
            | Op::Clamp { out, .. }
            | Op::MaskedSoftmax { out, .. }
            | Op::Reduce { out, .. }
            | Op::LayerNorm { out, .. }
            | Op::GatherRows { out, .. } => *out,
        }
    }

    fn backprop(&mut self, op: &Op) {
        let out = Self::out_of(op);
        if !self.nodes[out.0].needs_grad {
            return;
        }
        let Some(gout) = self.grads[out.0].clone() else {
            return; // branch not reached from the loss
        };
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        match op {
            Op::Unary { kind, x, out } => {
                if !nodes[x.0].needs_grad {
                    return;
                }
                let xv = &nodes[x.0].data;
                let yv = &nodes[out.0].data;
                let gx = grad_buf(grads, nodes, *x);
                for i in 0..gx.len() {
                    let d = match kind {
                        ElementwiseOp::Tanh => 1.0 - yv[i] * yv[i],
                        ElementwiseOp::Sigmoid => yv[i] * (1.0 - yv[i]),
                        ElementwiseOp::Relu => {
                            if xv[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        ElementwiseOp::Exp => yv[i],
                        ElementwiseOp::Log => 1.0 / xv[i],
                        ElementwiseOp::Negate => -1.0,
                        ElementwiseOp::Scale(c) => *c,
                        _ => unreachable!(),
                    };
                    gx[i] += gout[i] * d;
                }
            }
            Op::Binary { kind, a, b, out } => {
                let last = *nodes[out.0].shape.last().unwrap();
                let leading = nodes[out.0].numel() / last;
                let la = *nodes[a.0].shape.last().unwrap();
                let lb = *nodes[b.0].shape.last().unwrap();
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                if nodes[a.0].needs_grad {
                    let ga = grad_buf(grads, nodes, *a);
                    for o in 0..leading {
                        for j in 0..last {
                            let g = gout[o * last + j];
                            let ia = o * la + if la == 1 { 0 } else { j };
                            let ib = o * lb + if lb == 1 { 0 } else { j };
                            ga[ia] += match kind {
                                ElementwiseOp::Add | ElementwiseOp::Sub => g,
                                ElementwiseOp::Mul => g * bv[ib],
                                _ => unreachable!(),
                            };
                        }
                    }
                }
                if nodes[b.0].needs_grad {
                    let gb = grad_buf(grads, nodes, *b);
                    for o in 0..leading {
                        for j in 0..last {
                            let g = gout[o * last + j];
                            let ia = o * la + if la == 1 { 0 } else { j };
                            let ib = o * lb + if lb == 1 { 0 } else { j };
                            gb[ib] += match kind {
                                ElementwiseOp::Add => g,
                                ElementwiseOp::Sub => -g,
                                ElementwiseOp::Mul => g * av[ia],
                                _ => unreachable!(),
                            };
                        }
                    }
                }
            }
            Op::Matmul { a, b, out: _ } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if nodes[a.0].needs_grad {
                    let bd = nodes[b.0].data.clone();
                    let ga = grad_buf(grads, nodes, *a);
                    matmul_nt_acc(&gout, &bd, m, n, k, ga);
                }
                if nodes[b.0].needs_grad {
                    let ad = nodes[a.0].data.clone();
                    let gb = grad_buf(grads, nodes, *b);
                    matmul_tn_acc(&ad, &gout, m, k, n, gb);
                }
            }
            Op::Transpose { x, out } => {
                if !nodes[x.0].needs_grad {
                    return;
                }
                let (c, r) = (nodes[out.0].shape[0], nodes[out.0].shape[1]);
                let gx = grad_buf(grads, nodes, *x);
                for i in 0..c {
                    for j in 0..r {
                        gx[j * c + i] += gout[i * r + j];
                    }
                }
            }
            Op::Reshape { x, .. } => {
                if !nodes[x.0].needs_grad {
                    return;
                }
                let gx = grad_buf(grads, nodes, *x);
                for (g, go) in gx.iter_mut().zip(gout.iter()) {
                    *g += go;
                }
            }
            Op::Concat { parts, axis, out } => {
                let out_shape = &nodes[out.0].shape;
                let (outer, total, inner) = axis_split(out_shape, *axis);
                for o in 0..outer {
                    let mut consumed = 0;
                    for p in parts {
                        let extent = nodes[p.0].shape[*axis];
                        let block = extent * inner;
                        if nodes[p.0].needs_grad {
                            let src_start = (o * total + consumed) * inner;
                            let gp = grad_buf(grads, nodes, *p);
                            for t in 0..block {
                                gp[o * block + t] += gout[src_start + t];
                            }
                        }
                        consumed += extent;
                    }
                }
            }
            Op::BroadcastRows { x, out } => {
                if !nodes[x.0].needs_grad {
                    return;
                }
                let (rows, d) = (nodes[out.0].shape[0], nodes[out.0].shape[1]);
                let gx = grad_buf(grads, nodes, *x);
                for r in 0..rows {
                    for j in 0..d {
                        gx[j] += gout[r * d + j];
                    }
                }
            }
            Op::MaskRows { x, mask, .. } => {
                if !nodes[x.0].needs_grad {
                    return;
                }
                let row = nodes[x.0].numel() / mask.len();
                let gx = grad_buf(grads, nodes, *x);
                for (i, keep) in mask.iter().enumerate() {
                    if *keep {
                        for t in 0..row {
                            gx[i * row + t] += gout[i * row + t];
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi, .. } => {
                if !nodes[x.0].needs_grad {
                    return;
                }
                let xv = &nodes[x.0].data;
                let gx = grad_buf(grads, nodes, *x);
                for i in 0..gx.len() {
                    if xv[i] > *lo && xv[i] < *hi {
                        gx[i] += gout[i];
                    }
                }
            }
            Op::MaskedSoftmax { x, axis, mask, out } => {
                if !nodes[x.0].needs_grad {
                    return;
                }
                let shape = &nodes[out.0].shape;
                let (outer, len, inner) = axis_split(shape, *axis);
                let yv = nodes[out.0].data.clone();
                let valid = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
                let gx = grad_buf(grads, nodes, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            if valid(j) {
                                dot += gout[at(j)] * yv[at(j)];
                            }
                        }
                        for j in 0..len {
                            if valid(j) {
                                gx[at(j)] += yv[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Reduce {
                kind,
                x,
                axis,
                mask,
                argmax,
                out,
            } => {
                if !nodes[x.0].needs_grad {
                    return;
                }
                let shape = &nodes[x.0].shape;
                let (outer, len, inner) = axis_split(shape, *axis);
                let valid = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
                let count = mask
                    .as_ref()
                    .map_or(len, |m| m.iter().filter(|v| **v).count());
                let xv = nodes[x.0].data.clone();
                let yv = nodes[out.0].data.clone();
                let gx = grad_buf(grads, nodes, *x);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let slot = o * inner + i;
                        let g = gout[slot];
                        match kind {
                            ReduceOp::Sum => {
                                for j in 0..len {
                                    if valid(j) {
                                        gx[at(j)] += g;
                                    }
                                }
                            }
                            ReduceOp::Mean => {
                                let per = g / count as f64;
                                for j in 0..len {
                                    if valid(j) {
                                        gx[at(j)] += per;
                                    }
                                }
                            }
                            ReduceOp::Max => {
                                gx[argmax[slot]] += g;
                            }
                            ReduceOp::Lse => {
                                for j in 0..len {
                                    if valid(j) {
                                        gx[at(j)] += g * (xv[at(j)] - yv[slot]).exp();
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
                out: _,
            } => {
                let (n, d) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let xv = nodes[x.0].data.clone();
                let gv = nodes[gain.0].data.clone();
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let go = &gout[r * d..(r + 1) * d];
                    if nodes[gain.0].needs_grad {
                        let gg = grad_buf(grads, nodes, *gain);
                        for j in 0..d {
                            gg[j] += go[j] * (row[j] - mean) * inv;
                        }
                    }
                    if nodes[bias.0].needs_grad {
                        let gb = grad_buf(grads, nodes, *bias);
                        for j in 0..d {
                            gb[j] += go[j];
                        }
                    }
                    if nodes[x.0].needs_grad {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = go[j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        let gx = grad_buf(grads, nodes, *x);
                        for j in 0..d {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = go[j] * gv[j];
                            gx[r * d + j] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::GatherRows { table, indices, .. } => {
                if !nodes[table.0].needs_grad {
                    return;
                }
                let d = nodes[table.0].shape[1];
                let gt = grad_buf(grads, nodes, *table);
                for (i, &src_row) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[src_row * d + j] += gout[i * d + j];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, data: Vec<f64>, shape: &[usize]) -> TensorId {
        let t = Tensor::new(data, shape).unwrap().with_requires_grad(true);
        tape.leaf(&t)
    }

    #[test]
    fn elementwise_spot_values() {
        let mut tape = Tape::new();
        let zero = leaf(&mut tape, vec![0.0], &[1]);
        let t = tape.tanh(zero).unwrap();
        assert_eq!(tape.item(t), 0.0);
        let s = tape.sigmoid(zero).unwrap();
        assert_eq!(tape.item(s), 0.5);
        let a = leaf(&mut tape, vec![1.0, 2.0], &[2]);
        let b = leaf(&mut tape, vec![3.0, 4.0], &[2]);
        let sum = tape.add(a, b).unwrap();
        assert_eq!(tape.value(sum), &[4.0, 6.0]);
    }

    #[test]
    fn binary_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![0.0; 6], &[2, 3]);
        let b = leaf(&mut tape, vec![0.0; 4], &[2, 2]);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn trailing_one_broadcast() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = leaf(&mut tape, vec![10.0, 100.0], &[2, 1]);
        let prod = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(prod), &[10.0, 20.0, 300.0, 400.0]);
        let loss = tape.reduce(ReduceOp::Sum, prod, 0, None).unwrap();
        let loss = tape.reduce(ReduceOp::Sum, loss, 0, None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 7.0]);
        assert_eq!(tape.grad(a).unwrap(), &[10.0, 10.0, 100.0, 100.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, 0.0], &[2]);
        assert!(matches!(
            tape.log(x),
            Err(AutogradError::Domain { op: "log", .. })
        ));
    }

    #[test]
    fn elementwise_dispatch_checks_arity() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0], &[1]);
        assert!(tape.elementwise(ElementwiseOp::Add, x, None).is_err());
        assert!(tape.elementwise(ElementwiseOp::Tanh, x, Some(x)).is_err());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let eye = leaf(
            &mut tape,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            &[3, 3],
        );
        let m = leaf(
            &mut tape,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
            &[3, 3],
        );
        let out = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));

        let a = leaf(&mut tape, vec![2.0], &[1, 1]);
        let b = leaf(&mut tape, vec![3.0], &[1, 1]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.item(c), 6.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut expected = vec![0.0; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    expected[i * 2 + j] += a[i * 4 + k] * b[k * 2 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let ta = leaf(&mut tape, a, &[3, 4]);
        let tb = leaf(&mut tape, b, &[4, 2]);
        let out = tape.matmul(ta, tb).unwrap();
        for (got, want) in tape.value(out).iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_spot_values() {
        let mut tape = Tape::new();
        // single valid entry -> weight 1 there, 0 at masked slots
        let x = leaf(&mut tape, vec![5.0, -1.0, 2.0], &[3]);
        let y = tape
            .masked_softmax(x, 0, Some(&[false, true, false]))
            .unwrap();
        assert_eq!(tape.value(y), &[0.0, 1.0, 0.0]);

        // equal logits over 4 valid entries
        let x = leaf(&mut tape, vec![0.7; 4], &[4]);
        let y = tape.masked_softmax(x, 0, None).unwrap();
        for v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }

        // logits [0, ln 2] -> [1/3, 2/3]
        let x = leaf(&mut tape, vec![0.0, 2.0f64.ln()], &[2]);
        let y = tape.masked_softmax(x, 0, Some(&[true, true])).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((v[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_rejects_empty_slice() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, 2.0], &[2]);
        assert!(matches!(
            tape.masked_softmax(x, 0, Some(&[false, false])),
            Err(AutogradError::EmptySlice { .. })
        ));
    }

    #[test]
    fn reduce_spot_values() {
        let mut tape = Tape::new();
        // lse over three equal values 0 -> ln 3
        let x = leaf(&mut tape, vec![0.0, 0.0, 0.0], &[3]);
        let y = tape.reduce(ReduceOp::Lse, x, 0, None).unwrap();
        assert!((tape.item(y) - 3.0f64.ln()).abs() < 1e-12);

        // masked mean of [1, 3, 99] with pad on the last entry -> 2
        let x = leaf(&mut tape, vec![1.0, 3.0, 99.0], &[3]);
        let y = tape
            .reduce(ReduceOp::Mean, x, 0, Some(&[true, true, false]))
            .unwrap();
        assert_eq!(tape.item(y), 2.0);

        // max of [0.2, 0.7, 0.7]: value 0.7, gradient routed to index 1 only
        let x = leaf(&mut tape, vec![0.2, 0.7, 0.7], &[3]);
        let y = tape.reduce(ReduceOp::Max, x, 0, None).unwrap();
        assert_eq!(tape.item(y), 0.7);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn reduce_fully_masked_rejected() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, 2.0], &[2]);
        assert!(matches!(
            tape.reduce(ReduceOp::Sum, x, 0, Some(&[false, false])),
            Err(AutogradError::EmptySlice { .. })
        ));
    }

    #[test]
    fn masked_reduce_equals_compacted_reduce() {
        let mut tape = Tape::new();
        let full = vec![0.5, -1.25, 3.5, 0.25, -2.0];
        let mask = [true, false, true, true, false];
        let compact: Vec<f64> = full
            .iter()
            .zip(mask.iter())
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .collect();
        for kind in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Max, ReduceOp::Lse] {
            let a = leaf(&mut tape, full.clone(), &[5]);
            let b = leaf(&mut tape, compact.clone(), &[3]);
            let ya = tape.reduce(kind, a, 0, Some(&mask)).unwrap();
            let yb = tape.reduce(kind, b, 0, None).unwrap();
            assert_eq!(tape.item(ya), tape.item(yb), "{}", kind.name());
        }
    }

    #[test]
    fn layer_norm_spot_values() {
        let mut tape = Tape::new();
        let gain = leaf(&mut tape, vec![1.0, 1.0], &[2]);
        let bias = leaf(&mut tape, vec![0.0, 0.0], &[2]);

        // constant row -> zeros
        let x = leaf(&mut tape, vec![3.0, 3.0], &[1, 2]);
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);

        // row [1, -1] already has mean 0 and population variance 1
        let x = leaf(&mut tape, vec![1.0, -1.0], &[1, 2]);
        let y = tape.layer_norm(x, gain, bias, 1e-15).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0).abs() < 1e-7 && (v[1] + 1.0).abs() < 1e-7);

        // zero gain -> bias vector
        let zero_gain = leaf(&mut tape, vec![0.0, 0.0], &[2]);
        let some_bias = leaf(&mut tape, vec![0.25, -0.5], &[2]);
        let x = leaf(&mut tape, vec![0.3, 9.1], &[1, 2]);
        let y = tape.layer_norm(x, zero_gain, some_bias, 1e-9).unwrap();
        assert_eq!(tape.value(y), &[0.25, -0.5]);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut tape = Tape::new();
        let gain = leaf(&mut tape, vec![1.0; 8], &[8]);
        let bias = leaf(&mut tape, vec![0.0; 8], &[8]);
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() * 3.0 + 1.0).collect();
        let x = leaf(&mut tape, data, &[3, 8]);
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        for r in 0..3 {
            let row = &tape.value(y)[r * 8..(r + 1) * 8];
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn gather_rows_contract() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let out = tape.gather_rows(table, &[0, 0]).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 1.0, 2.0]);
        let total = tape.reduce(ReduceOp::Sum, out, 0, None).unwrap();
        let total = tape.reduce(ReduceOp::Sum, total, 0, None).unwrap();
        tape.backward(total).unwrap();
        // repeated index accumulates gradient 2 on row 0
        assert_eq!(tape.grad(table).unwrap(), &[2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);

        let id = tape.gather_rows(table, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(id), tape.value(table));

        let err = tape.gather_rows(table, &[3]).unwrap_err();
        assert!(err.to_string().contains('3'));
    }

    #[test]
    fn backward_spot_gradients() {
        // loss = x^2 at x = 3 -> grad 6
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3.0], &[1]);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);

        // loss = sigmoid(x) at 0 -> grad 0.25
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![0.0], &[1]);
        let y = tape.sigmoid(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, 2.0], &[2]);
        assert!(matches!(
            tape.backward(x),
            Err(AutogradError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_visits_each_op_once() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![0.3], &[1]);
        let a = tape.tanh(x).unwrap();
        let b = tape.sigmoid(x).unwrap();
        let c = tape.mul(a, b).unwrap();
        let d = tape.exp(c).unwrap();
        let report = tape.backward(d).unwrap();
        assert_eq!(report.ops_visited, tape.num_ops());
        assert_eq!(report.ops_visited, 4);
    }

    #[test]
    fn concat_and_transpose_round_trip() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = leaf(&mut tape, vec![5.0, 6.0], &[2, 1]);
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape_of(cat), &[2, 3]);
        assert_eq!(tape.value(cat), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let t = tape.transpose(cat).unwrap();
        assert_eq!(tape.shape_of(t), &[3, 2]);
        assert_eq!(tape.value(t), &[1.0, 3.0, 2.0, 4.0, 5.0, 6.0]);
        let s0 = tape.reduce(ReduceOp::Sum, t, 0, None).unwrap();
        let s = tape.reduce(ReduceOp::Sum, s0, 0, None).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn mask_rows_zeroes_rows_and_grads() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let y = tape.mask_rows(x, &[true, false]).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 0.0, 0.0]);
        let s0 = tape.reduce(ReduceOp::Sum, y, 0, None).unwrap();
        let s = tape.reduce(ReduceOp::Sum, s0, 0, None).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
