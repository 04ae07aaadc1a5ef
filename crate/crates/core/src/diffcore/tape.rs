use std::sync::Arc;

use super::tensor::DenseTensor;
use crate::error::{Error, Result};

/// Lower bound applied to the argument of `log`.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwiseKind {
    Mul,
    Add,
    Sub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    /// Softmax over the innermost axis.
    SoftmaxLastDim,
    /// Natural log of the input clamped below at [`LOG_CLAMP`].
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Ewise {
        a: Var,
        b: Var,
        kind: EwiseKind,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Shift {
        a: Var,
    },
    Act {
        a: Var,
        kind: Activation,
    },
    Reduce {
        a: Var,
        kind: ReduceKind,
        outer: usize,
        extent: usize,
        inner: usize,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Embedding {
        table: Var,
        tokens: Vec<usize>,
        pad: usize,
        width: usize,
    },
    SelectRow {
        a: Var,
        row: usize,
        width: usize,
    },
    TileRows {
        a: Var,
        times: usize,
    },
    Stack {
        parts: Vec<Var>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Ewise { .. } => "ewise",
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "shift",
            Op::Act { .. } => "activation",
            Op::Reduce { .. } => "reduce",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Embedding { .. } => "embedding",
            Op::SelectRow { .. } => "select_row",
            Op::TileRows { .. } => "tile_rows",
            Op::Stack { .. } => "stack",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in reverse.
///
/// Nodes are appended in evaluation order, which is a topological order of
/// the graph. A tape is single-threaded; build one per worker.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of the given length when none reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
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

fn softmax_rows(values: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &x in row {
            let e = (x - max).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    out
}

fn as_matrix(shape: &[usize], left: bool) -> Option<(usize, usize)> {
    match shape.len() {
        1 if left => Some((1, shape[0])),
        1 => Some((shape[0], 1)),
        2 => Some((shape[0], shape[1])),
        _ => None,
    }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Registers a tensor as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &DenseTensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_values(),
            op: Op::Leaf,
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: &DenseTensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &DenseTensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].needs_grad = false;
        v
    }

    /// Copies the value of `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), Arc::clone(&n.value));
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> DenseTensor {
        let n = self.node(v);
        DenseTensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    /// Matrix product with rank-1 operands treated as row (left) or column (right) vectors;
    /// the vector axes are dropped from the result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = as_matrix(&sa, true)
            .ok_or_else(|| Error::dim("matmul", format!("left operand rank {}", sa.len())))?;
        let (k2, n) = as_matrix(&sb, false)
            .ok_or_else(|| Error::dim("matmul", format!("right operand rank {}", sb.len())))?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (av, bv) = (self.values(a), self.values(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &x) in arow.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let mut shape = Vec::new();
        if sa.len() == 2 {
            shape.push(m);
        }
        if sb.len() == 2 {
            shape.push(n);
        }
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n }, needs))
    }

    pub fn ewise(&mut self, a: Var, b: Var, kind: EwiseKind) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "ewise",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let (av, bv) = (self.values(a), self.values(b));
        let out: Vec<f64> = match kind {
            EwiseKind::Mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
            EwiseKind::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            EwiseKind::Sub => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
        };
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Ewise { a, b, kind }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(a, b, EwiseKind::Mul)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(a, b, EwiseKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise(a, b, EwiseKind::Sub)
    }

    /// `c * a` for a scalar `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.values(a).iter().map(|x| c * x).collect();
        let (shape, needs) = (self.shape(a).to_vec(), self.node(a).needs_grad);
        self.push(shape, out, Op::Scale { a, c }, needs)
    }

    /// `a + c` for a scalar `c`.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let out = self.values(a).iter().map(|x| x + c).collect();
        let (shape, needs) = (self.shape(a).to_vec(), self.node(a).needs_grad);
        self.push(shape, out, Op::Shift { a }, needs)
    }

    pub fn activate(&mut self, a: Var, kind: Activation) -> Var {
        let x = self.values(a);
        let out: Vec<f64> = match kind {
            Activation::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Activation::Tanh => x.iter().map(|v| v.tanh()).collect(),
            Activation::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Activation::Log => x.iter().map(|&v| v.max(LOG_CLAMP).ln()).collect(),
            Activation::SoftmaxLastDim => {
                let width = self.shape(a).last().copied().unwrap_or(1);
                softmax_rows(x, width)
            }
        };
        let (shape, needs) = (self.shape(a).to_vec(), self.node(a).needs_grad);
        self.push(shape, out, Op::Act { a, kind }, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Relu)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.activate(a, Activation::SoftmaxLastDim)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Log)
    }

    /// Sum or mean over one axis, or over everything (to a scalar) when `axis` is `None`.
    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, extent, inner, out_shape) = match axis {
            None => (1, shape.iter().product(), 1, Vec::new()),
            Some(ax) if ax < shape.len() => {
                let outer = shape[..ax].iter().product();
                let inner = shape[ax + 1..].iter().product();
                let mut s = shape.clone();
                s.remove(ax);
                (outer, shape[ax], inner, s)
            }
            Some(ax) => {
                return Err(Error::dim(
                    "reduce",
                    format!("axis {ax} of rank {}", shape.len()),
                ))
            }
        };
        let x = self.values(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        if kind == ReduceKind::Mean {
            let n = extent as f64;
            out.iter_mut().for_each(|v| *v /= n);
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            out_shape,
            out,
            Op::Reduce {
                a,
                kind,
                outer,
                extent,
                inner,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(a, ReduceKind::Sum, None).unwrap()
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(a, ReduceKind::Mean, None).unwrap()
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.values(a).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let node = self.node(a);
        let (value, needs) = (Arc::clone(&node.value), node.needs_grad);
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Reshape { a },
            needs_grad: needs,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("transpose", format!("rank {}", shape.len())));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let x = self.values(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            vec![cols, rows],
            out,
            Op::Transpose { a, rows, cols },
            needs,
        ))
    }

    /// Looks up `tokens` in a `[vocab x width]` table; tokens equal to `pad` yield zero rows
    /// and send no gradient to the table.
    pub fn embedding(&mut self, table: Var, tokens: &[usize], pad: usize) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || tokens.is_empty() {
            return Err(Error::dim(
                "embedding",
                format!("table {shape:?}, {} tokens", tokens.len()),
            ));
        }
        let (vocab, width) = (shape[0], shape[1]);
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::dim(
                "embedding",
                format!("token {bad} outside vocabulary of {vocab}"),
            ));
        }
        let tv = self.values(table);
        let mut out = vec![0.0; tokens.len() * width];
        for (row, &tok) in tokens.iter().enumerate() {
            if tok != pad {
                out[row * width..(row + 1) * width]
                    .copy_from_slice(&tv[tok * width..(tok + 1) * width]);
            }
        }
        let needs = self.node(table).needs_grad;
        Ok(self.push(
            vec![tokens.len(), width],
            out,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
                pad,
                width,
            },
            needs,
        ))
    }

    /// Row `row` of a rank-2 tensor as a rank-1 tensor.
    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || row >= shape[0] {
            return Err(Error::dim("select_row", format!("row {row} of {shape:?}")));
        }
        let width = shape[1];
        let out = self.values(a)[row * width..(row + 1) * width].to_vec();
        let needs = self.node(a).needs_grad;
        Ok(self.push(vec![width], out, Op::SelectRow { a, row, width }, needs))
    }

    /// Repeats a rank-1 tensor as `times` rows of a matrix.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 1 || times == 0 {
            return Err(Error::dim("tile_rows", format!("{shape:?} x {times}")));
        }
        let x = self.values(a);
        let out: Vec<f64> = (0..times).flat_map(|_| x.iter().copied()).collect();
        let needs = self.node(a).needs_grad;
        Ok(self.push(vec![times, shape[0]], out, Op::TileRows { a, times }, needs))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("stack", "no operands"))?;
        let inner = self.shape(*first).to_vec();
        if parts.iter().any(|&p| self.shape(p) != inner.as_slice()) {
            return Err(Error::dim("stack", "operand shapes differ"));
        }
        let mut out = Vec::with_capacity(parts.len() * inner.iter().product::<usize>());
        for &p in parts {
            out.extend_from_slice(self.values(p));
        }
        let needs = parts.iter().any(|&p| self.node(p).needs_grad);
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        Ok(self.push(
            shape,
            out,
            Op::Stack {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.node(root);
        if root_node.value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("root must be scalar, got shape {:?}", root_node.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dout) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &dout, &mut grads)?;
            grads[id] = Some(dout);
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !self.nodes[id].needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, dout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].needs_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if needs(a) {
                    // dA[i,p] = sum_j dC[i,j] B[p,j]
                    acc(a, &mut |ga| {
                        for i in 0..m {
                            let drow = &dout[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                ga[i * k + p] +=
                                    drow.iter().zip(brow).map(|(d, y)| d * y).sum::<f64>();
                            }
                        }
                    });
                }
                if needs(b) {
                    // dB[p,j] = sum_i A[i,p] dC[i,j]
                    acc(b, &mut |gb| {
                        for i in 0..m {
                            let drow = &dout[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (g, d) in gb[p * n..(p + 1) * n].iter_mut().zip(drow) {
                                    *g += x * d;
                                }
                            }
                        }
                    });
                }
            }
            &Op::Ewise { a, b, kind } => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                match kind {
                    EwiseKind::Mul => {
                        acc(a, &mut |g| {
                            for ((g, d), y) in g.iter_mut().zip(dout).zip(bv.iter()) {
                                *g += d * y;
                            }
                        });
                        acc(b, &mut |g| {
                            for ((g, d), x) in g.iter_mut().zip(dout).zip(av.iter()) {
                                *g += d * x;
                            }
                        });
                    }
                    EwiseKind::Add | EwiseKind::Sub => {
                        let sign = if kind == EwiseKind::Sub { -1.0 } else { 1.0 };
                        acc(a, &mut |g| {
                            g.iter_mut().zip(dout).for_each(|(g, d)| *g += d)
                        });
                        acc(b, &mut |g| {
                            g.iter_mut().zip(dout).for_each(|(g, d)| *g += sign * d)
                        });
                    }
                }
            }
            &Op::Scale { a, c } => {
                acc(a, &mut |g| {
                    g.iter_mut().zip(dout).for_each(|(g, d)| *g += c * d)
                });
            }
            &Op::Shift { a } | &Op::Reshape { a } => {
                acc(a, &mut |g| {
                    g.iter_mut().zip(dout).for_each(|(g, d)| *g += d)
                });
            }
            &Op::Act { a, kind } => {
                let x = &self.nodes[a.0].value;
                let y = &node.value;
                match kind {
                    Activation::Sigmoid => acc(a, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += dout[i] * y[i] * (1.0 - y[i]);
                        }
                    }),
                    Activation::Tanh => acc(a, &mut |g| {
                        for i in 0..g.len() {
                            g[i] += dout[i] * (1.0 - y[i] * y[i]);
                        }
                    }),
                    Activation::Relu => acc(a, &mut |g| {
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                g[i] += dout[i];
                            }
                        }
                    }),
                    Activation::Log => acc(a, &mut |g| {
                        for i in 0..g.len() {
                            if x[i] > LOG_CLAMP {
                                g[i] += dout[i] / x[i];
                            }
                        }
                    }),
                    Activation::SoftmaxLastDim => {
                        let width = node.shape.last().copied().unwrap_or(1);
                        acc(a, &mut |g| {
                            for r in 0..y.len() / width {
                                let span = r * width..(r + 1) * width;
                                let (yr, dr) = (&y[span.clone()], &dout[span.clone()]);
                                let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                                for (gi, (p, d)) in g[span].iter_mut().zip(yr.iter().zip(dr)) {
                                    *gi += p * (d - dot);
                                }
                            }
                        });
                    }
                }
            }
            &Op::Reduce {
                a,
                kind,
                outer,
                extent,
                inner,
            } => {
                let scale = if kind == ReduceKind::Mean {
                    1.0 / extent as f64
                } else {
                    1.0
                };
                acc(a, &mut |g| {
                    for o in 0..outer {
                        for e in 0..extent {
                            let base = (o * extent + e) * inner;
                            for i in 0..inner {
                                g[base + i] += scale * dout[o * inner + i];
                            }
                        }
                    }
                });
            }
            &Op::Transpose { a, rows, cols } => {
                acc(a, &mut |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += dout[c * rows + r];
                        }
                    }
                });
            }
            Op::Embedding {
                table,
                tokens,
                pad,
                width,
            } => {
                let (pad, width) = (*pad, *width);
                acc(*table, &mut |g| {
                    for (row, &tok) in tokens.iter().enumerate() {
                        if tok == pad {
                            continue;
                        }
                        let src = &dout[row * width..(row + 1) * width];
                        for (gi, d) in g[tok * width..(tok + 1) * width].iter_mut().zip(src) {
                            *gi += d;
                        }
                    }
                });
            }
            &Op::SelectRow { a, row, width } => {
                acc(a, &mut |g| {
                    for (gi, d) in g[row * width..(row + 1) * width].iter_mut().zip(dout) {
                        *gi += d;
                    }
                });
            }
            &Op::TileRows { a, times } => {
                acc(a, &mut |g| {
                    let width = g.len();
                    for t in 0..times {
                        for (gi, d) in g.iter_mut().zip(&dout[t * width..(t + 1) * width]) {
                            *gi += d;
                        }
                    }
                });
            }
            Op::Stack { parts } => {
                let width = self.nodes[parts[0].0].value.len();
                for (j, &p) in parts.iter().enumerate() {
                    acc(p, &mut |g| {
                        for (gi, d) in g.iter_mut().zip(&dout[j * width..(j + 1) * width]) {
                            *gi += d;
                        }
                    });
                }
            }
        }
        if dout.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient flowing through {}",
                node.op.name()
            )));
        }
        Ok(())
    }
}
