use super::{GraphError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Log,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Max,
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Strided view of a tensor around one axis: `outer × n × inner`.
#[derive(Clone, Copy, Debug)]
struct AxisView {
    outer: usize,
    n: usize,
    inner: usize,
}

impl AxisView {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            n: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    #[inline]
    fn at(&self, o: usize, j: usize, i: usize) -> usize {
        (o * self.n + j) * self.inner + i
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Log(Var),
    Relu(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { input: Var, rows: usize, cols: usize },
    Reshape(Var),
    Reduce { kind: ReduceOp, input: Var, view: AxisView, argmax: Vec<usize> },
    Softmax { input: Var, view: AxisView },
    LogSoftmax { input: Var, view: AxisView },
    PairwiseSqDist { a: Var, b: Var, n: usize, m: usize, d: usize },
    GatherCols { input: Var, cols: usize, index: Vec<usize> },
    IndexRows { input: Var, width: usize, rows: Vec<usize> },
    L2NormalizeRows { input: Var, width: usize, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run tape. Nodes are stored in creation order, which is a valid
/// topological order because every op only refers to earlier nodes.
#[derive(Debug, Default)]
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

    /// Inserts a leaf. Non-finite entries are rejected.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var, GraphError> {
        if !tensor.all_finite() {
            return Err(GraphError::NonFinite("leaf tensor".into()));
        }
        Ok(self.push(Op::Leaf, tensor))
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var, GraphError> {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var, GraphError> {
        let mut t = tensor;
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var]) -> Var {
        let mut t = Tensor::from_parts(shape, data);
        t.set_requires_grad(inputs.iter().any(|v| self.nodes[v.0].value.requires_grad()));
        self.push(op, t)
    }

    fn check(&self, v: Var) -> Result<(), GraphError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::Shape(format!("unknown node {}", v.0)))
        }
    }

    // ---- elementwise ----

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var, GraphError> {
        match (op, b) {
            (ElementwiseOp::Add, Some(b)) => self.binary(BinaryKind::Add, a, b),
            (ElementwiseOp::Sub, Some(b)) => self.binary(BinaryKind::Sub, a, b),
            (ElementwiseOp::Mul, Some(b)) => self.binary(BinaryKind::Mul, a, b),
            (ElementwiseOp::Log, None) => self.log(a),
            (ElementwiseOp::Relu, None) => self.relu(a),
            (op, _) => Err(GraphError::Shape(format!("wrong operand count for {op:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, GraphError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape() == tb.shape() {
            ta.shape().to_vec()
        } else if ta.is_scalar() {
            tb.shape().to_vec()
        } else if tb.is_scalar() {
            ta.shape().to_vec()
        } else {
            return Err(GraphError::Shape(format!(
                "{kind:?}: {:?} vs {:?} (only scalar broadcasting is supported)",
                ta.shape(),
                tb.shape()
            )));
        };
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let data = (0..n).map(|i| f(pick(da, i), pick(db, i))).collect();
        Ok(self.push_derived(Op::Binary { kind, a, b }, shape, data, &[a, b]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check(a)?;
        let t = self.value(a);
        if let Some(bad) = t.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(GraphError::Domain(format!("log of non-positive value {bad}")));
        }
        let data = t.data().iter().map(|x| x.ln()).collect();
        let shape = t.shape().to_vec();
        Ok(self.push_derived(Op::Log(a), shape, data, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check(a)?;
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = t.shape().to_vec();
        Ok(self.push_derived(Op::Relu(a), shape, data, &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, GraphError> {
        self.check(a)?;
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x + c).collect();
        let shape = t.shape().to_vec();
        Ok(self.push_derived(Op::AddScalar(a), shape, data, &[a]))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var, GraphError> {
        self.check(a)?;
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let shape = t.shape().to_vec();
        Ok(self.push_derived(Op::MulScalar(a, c), shape, data, &[a]))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, GraphError> {
        self.mul_scalar(a, -1.0)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(GraphError::Shape(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        Ok(self.push_derived(Op::MatMul { a, b, m, k, n }, vec![m, n], data, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(GraphError::Shape(format!("transpose needs rank 2, got {:?}", t.shape())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let data = transpose_raw(t.data(), rows, cols);
        Ok(self.push_derived(Op::Transpose { input: a, rows, cols }, vec![cols, rows], data, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, GraphError> {
        self.check(a)?;
        let t = self.value(a);
        if shape.contains(&0) || shape.iter().product::<usize>() != t.numel() {
            return Err(GraphError::Shape(format!("reshape {:?} -> {shape:?}", t.shape())));
        }
        let data = t.data().to_vec();
        Ok(self.push_derived(Op::Reshape(a), shape, data, &[a]))
    }

    // ---- reductions ----

    /// Reduces along `axis`, dropping it. Max routes gradient to the lowest
    /// index among tied maxima.
    pub fn reduce(&mut self, kind: ReduceOp, a: Var, axis: usize) -> Result<Var, GraphError> {
        self.check(a)?;
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(GraphError::Axis { axis, rank: t.rank() });
        }
        let view = AxisView::of(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; view.outer * view.inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceOp::Max => {
                argmax = vec![0; out.len()];
                for o in 0..view.outer {
                    for i in 0..view.inner {
                        let mut best = 0;
                        let mut best_v = x[view.at(o, 0, i)];
                        for j in 1..view.n {
                            let v = x[view.at(o, j, i)];
                            if v > best_v {
                                best_v = v;
                                best = j;
                            }
                        }
                        out[o * view.inner + i] = best_v;
                        argmax[o * view.inner + i] = best;
                    }
                }
            }
            ReduceOp::Mean | ReduceOp::Sum => {
                for o in 0..view.outer {
                    for j in 0..view.n {
                        for i in 0..view.inner {
                            out[o * view.inner + i] += x[view.at(o, j, i)];
                        }
                    }
                }
                if kind == ReduceOp::Mean {
                    let inv = 1.0 / view.n as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok(self.push_derived(Op::Reduce { kind, input: a, view, argmax }, shape, out, &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, GraphError> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n])?;
        self.reduce(ReduceOp::Sum, flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, GraphError> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n])?;
        self.reduce(ReduceOp::Mean, flat, 0)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, GraphError> {
        let (view, data) = self.softmax_forward(a, axis, false)?;
        let shape = self.value(a).shape().to_vec();
        Ok(self.push_derived(Op::Softmax { input: a, view }, shape, data, &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, GraphError> {
        let (view, data) = self.softmax_forward(a, axis, true)?;
        let shape = self.value(a).shape().to_vec();
        Ok(self.push_derived(Op::LogSoftmax { input: a, view }, shape, data, &[a]))
    }

    fn softmax_forward(&self, a: Var, axis: usize, log: bool) -> Result<(AxisView, Vec<f64>), GraphError> {
        self.check(a)?;
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(GraphError::Axis { axis, rank: t.rank() });
        }
        let view = AxisView::of(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..view.outer {
            for i in 0..view.inner {
                let max = (0..view.n)
                    .map(|j| x[view.at(o, j, i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..view.n {
                    let e = (x[view.at(o, j, i)] - max).exp();
                    out[view.at(o, j, i)] = e;
                    total += e;
                }
                if log {
                    let lse = total.ln();
                    for j in 0..view.n {
                        let idx = view.at(o, j, i);
                        out[idx] = x[idx] - max - lse;
                    }
                } else {
                    for j in 0..view.n {
                        out[view.at(o, j, i)] /= total;
                    }
                }
            }
        }
        Ok((view, out))
    }

    // ---- distances and indexing ----

    /// `out[n, m] = ||a_n - b_m||^2` for `a: [N, D]`, `b: [M, D]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(GraphError::Shape(format!(
                "pairwise_sq_dist: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (n, d, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let data = pairwise_sq_dist_raw(ta.data(), tb.data(), n, m, d);
        Ok(self.push_derived(Op::PairwiseSqDist { a, b, n, m, d }, vec![n, m], data, &[a, b]))
    }

    /// Squared distance of every row of `z: [HW, D]` to `p: [D]`.
    pub fn sq_dist_map(&mut self, z: Var, p: Var) -> Result<Var, GraphError> {
        self.check(p)?;
        let pt = self.value(p);
        if pt.rank() != 1 {
            return Err(GraphError::Shape(format!("prototype must be rank 1, got {:?}", pt.shape())));
        }
        let d = pt.numel();
        let p2 = self.reshape(p, vec![1, d])?;
        let dist = self.pairwise_sq_dist(z, p2)?;
        let hw = self.value(dist).shape()[0];
        self.reshape(dist, vec![hw])
    }

    /// Picks `index.len() / rows` columns from each row of a `[rows, cols]`
    /// tensor. `index` is row-major over the output.
    pub fn gather_cols(&mut self, a: Var, index: Vec<usize>) -> Result<Var, GraphError> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(GraphError::Shape(format!("gather_cols needs rank 2, got {:?}", t.shape())));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if index.is_empty() || !index.len().is_multiple_of(rows) || index.iter().any(|&c| c >= cols) {
            return Err(GraphError::Shape(format!(
                "gather_cols: {} indices for {rows}x{cols}",
                index.len()
            )));
        }
        let per_row = index.len() / rows;
        let x = t.data();
        let data = index
            .iter()
            .enumerate()
            .map(|(k, &c)| x[(k / per_row) * cols + c])
            .collect();
        Ok(self.push_derived(Op::GatherCols { input: a, cols, index }, vec![rows, per_row], data, &[a]))
    }

    /// Selects rows of a `[R, W]` tensor (repeats allowed).
    pub fn index_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var, GraphError> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(GraphError::Shape(format!("index_rows needs rank 2, got {:?}", t.shape())));
        }
        let (r, width) = (t.shape()[0], t.shape()[1]);
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(GraphError::Shape(format!("index_rows: bad row set for {r} rows")));
        }
        let x = t.data();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &i in &rows {
            data.extend_from_slice(&x[i * width..(i + 1) * width]);
        }
        let shape = vec![rows.len(), width];
        Ok(self.push_derived(Op::IndexRows { input: a, width, rows }, shape, data, &[a]))
    }

    /// Scales each row of a `[R, W]` tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, GraphError> {
        self.check(a)?;
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(GraphError::Shape(format!("l2_normalize_rows needs rank 2, got {:?}", t.shape())));
        }
        let width = t.shape()[1];
        let x = t.data();
        let mut norms = Vec::with_capacity(t.shape()[0]);
        let mut data = Vec::with_capacity(x.len());
        for row in x.chunks(width) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 1e-300) {
                return Err(GraphError::Domain("zero-norm row in l2 normalization".into()));
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let shape = t.shape().to_vec();
        Ok(self.push_derived(Op::L2NormalizeRows { input: a, width, norms }, shape, data, &[a]))
    }

    // ---- reverse pass ----

    /// Accumulates d(target)/d(node) into every node that requires a gradient.
    /// Any gradients from a previous call are replaced.
    pub fn backward(&mut self, target: Var) -> Result<(), GraphError> {
        self.check(target)?;
        let t = self.value(target);
        if !t.is_scalar() {
            return Err(GraphError::Shape(format!("backward target must be scalar, got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(GraphError::NonFinite("backward target".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; target.0 + 1];
        grads[target.0] = Some(vec![1.0]);

        for id in (0..=target.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.value.requires_grad() {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[id].value.requires_grad() {
                    self.nodes[id].value.set_grad(g);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.wants(v) {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match *op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let xa = self.data(a);
                let xb = self.data(b);
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                let sa = match kind {
                    BinaryKind::Add | BinaryKind::Sub => None,
                    BinaryKind::Mul => Some(xb),
                };
                acc(a, &mut |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        let local = sa.map_or(1.0, |d| pick(d, i));
                        if ga.len() == 1 {
                            ga[0] += gi * local;
                        } else {
                            ga[i] += gi * local;
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        let local = match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => pick(xa, i),
                        };
                        if gb.len() == 1 {
                            gb[0] += gi * local;
                        } else {
                            gb[i] += gi * local;
                        }
                    }
                });
            }
            Op::Log(a) => {
                let x = self.data(a);
                acc(a, &mut |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.data(a);
                acc(a, &mut |ga| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::MulScalar(a, c) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::MatMul { a, b, m, k, n } => {
                let (xa, xb) = (self.data(a), self.data(b));
                acc(a, &mut |ga| {
                    // dA = G · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &xb[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    // dB = Aᵀ · G
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = xa[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut gb[p * n..(p + 1) * n];
                            dst.iter_mut().zip(grow).for_each(|(d, gv)| *d += av * gv);
                        }
                    }
                });
            }
            Op::Transpose { input, rows, cols } => {
                acc(input, &mut |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Reduce { kind, input, view, ref argmax } => {
                acc(input, &mut |ga| {
                    for o in 0..view.outer {
                        for i in 0..view.inner {
                            let gv = g[o * view.inner + i];
                            match kind {
                                ReduceOp::Max => ga[view.at(o, argmax[o * view.inner + i], i)] += gv,
                                ReduceOp::Sum => {
                                    for j in 0..view.n {
                                        ga[view.at(o, j, i)] += gv;
                                    }
                                }
                                ReduceOp::Mean => {
                                    let share = gv / view.n as f64;
                                    for j in 0..view.n {
                                        ga[view.at(o, j, i)] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Softmax { input, view } => {
                let y = out.data();
                acc(input, &mut |ga| {
                    for o in 0..view.outer {
                        for i in 0..view.inner {
                            let dot: f64 = (0..view.n).map(|j| g[view.at(o, j, i)] * y[view.at(o, j, i)]).sum();
                            for j in 0..view.n {
                                let idx = view.at(o, j, i);
                                ga[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { input, view } => {
                let y = out.data();
                acc(input, &mut |ga| {
                    for o in 0..view.outer {
                        for i in 0..view.inner {
                            let total: f64 = (0..view.n).map(|j| g[view.at(o, j, i)]).sum();
                            for j in 0..view.n {
                                let idx = view.at(o, j, i);
                                ga[idx] += g[idx] - y[idx].exp() * total;
                            }
                        }
                    }
                });
            }
            Op::PairwiseSqDist { a, b, n, m, d } => {
                let (xa, xb) = (self.data(a), self.data(b));
                acc(a, &mut |ga| {
                    for r in 0..n {
                        let arow = &xa[r * d..(r + 1) * d];
                        for c in 0..m {
                            let w = 2.0 * g[r * m + c];
                            if w == 0.0 {
                                continue;
                            }
                            let brow = &xb[c * d..(c + 1) * d];
                            for e in 0..d {
                                ga[r * d + e] += w * (arow[e] - brow[e]);
                            }
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for r in 0..n {
                        let arow = &xa[r * d..(r + 1) * d];
                        for c in 0..m {
                            let w = 2.0 * g[r * m + c];
                            if w == 0.0 {
                                continue;
                            }
                            let brow = &xb[c * d..(c + 1) * d];
                            for e in 0..d {
                                gb[c * d + e] -= w * (arow[e] - brow[e]);
                            }
                        }
                    }
                });
            }
            Op::GatherCols { input, cols, ref index } => {
                let per_row = index.len() / self.value(input).shape()[0];
                acc(input, &mut |ga| {
                    for (k, &c) in index.iter().enumerate() {
                        ga[(k / per_row) * cols + c] += g[k];
                    }
                });
            }
            Op::IndexRows { input, width, ref rows } => {
                acc(input, &mut |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g[k * width..(k + 1) * width];
                        ga[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::L2NormalizeRows { input, width, ref norms } => {
                let y = out.data();
                acc(input, &mut |ga| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let span = r * width..(r + 1) * width;
                        let yr = &y[span.clone()];
                        let gr = &g[span.clone()];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (e, idx) in span.enumerate() {
                            ga[idx] += (gr[e] - yr[e] * dot) / norm;
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn pairwise_sq_dist_raw(a: &[f64], b: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * m);
    for r in 0..n {
        let arow = &a[r * d..(r + 1) * d];
        for c in 0..m {
            let brow = &b[c * d..(c + 1) * d];
            out.push(arow.iter().zip(brow).map(|(x, y)| (x - y) * (x - y)).sum());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, data: &[f64]) -> Var {
        g.param(Tensor::vector(data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[3.0, 4.0]);
        let c = g.elementwise(ElementwiseOp::Add, a, Some(b)).unwrap();
        assert_eq!(g.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn log_of_one_is_zero() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0]);
        let l = g.elementwise(ElementwiseOp::Log, a, None).unwrap();
        assert_eq!(g.data(l), &[0.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 0.0]);
        assert!(matches!(g.log(a), Err(GraphError::Domain(_))));
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[2.0]);
        let b = vec_leaf(&mut g, &[5.0]);
        let c = g.mul(a, b).unwrap();
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(GraphError::Shape(_))));
    }

    #[test]
    fn scalar_broadcast_sums_gradient() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        let s = g.param(Tensor::scalar(2.0)).unwrap();
        let p = g.mul(s, a).unwrap();
        let t = g.sum_all(p).unwrap();
        g.backward(t).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[6.0]);
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let m = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let r = g.matmul(eye, m).unwrap();
        assert_eq!(g.data(r), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let col = g.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap()).unwrap();
        let r = g.matmul(row, col).unwrap();
        assert_eq!(g.shape(r), &[1, 1]);
        assert_eq!(g.data(r), &[11.0]);
        assert!(g.matmul(row, row).is_err());
    }

    #[test]
    fn reduce_max_and_mean() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 5.0, 3.0]);
        let m = g.reduce(ReduceOp::Max, a, 0).unwrap();
        assert_eq!(g.data(m), &[5.0]);
        g.backward(m).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0, 1.0, 0.0]);

        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 5.0, 3.0]);
        let m = g.reduce(ReduceOp::Mean, a, 0).unwrap();
        assert_eq!(g.data(m), &[3.0]);
        g.backward(m).unwrap();
        for v in g.grad(a).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reduce_max_tie_goes_to_lowest_index() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[2.0, 2.0]);
        let m = g.reduce(ReduceOp::Max, a, 0).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn reduce_axis_out_of_range() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[2.0, 2.0]);
        assert!(matches!(g.reduce(ReduceOp::Max, a, 1), Err(GraphError::Axis { .. })));
        assert!(matches!(g.softmax(a, 3), Err(GraphError::Axis { .. })));
    }

    #[test]
    fn reduce_middle_axis() {
        let mut g = Graph::new();
        // shape [2, 3, 2]
        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let a = g.param(Tensor::new(vec![2, 3, 2], data).unwrap()).unwrap();
        let m = g.reduce(ReduceOp::Max, a, 1).unwrap();
        assert_eq!(g.shape(m), &[2, 2]);
        assert_eq!(g.data(m), &[4.0, 5.0, 10.0, 11.0]);
        let s = g.reduce(ReduceOp::Sum, a, 1).unwrap();
        assert_eq!(g.data(s), &[6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[0.0, 0.0]);
        let s = g.softmax(a, 0).unwrap();
        assert_eq!(g.data(s), &[0.5, 0.5]);
        let b = vec_leaf(&mut g, &[1000.0, 1000.0]);
        let s = g.softmax(b, 0).unwrap();
        assert_eq!(g.data(s), &[0.5, 0.5]);
    }

    #[test]
    fn sq_dist_map_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap()).unwrap();
        let p = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap()).unwrap();
        let d = g.sq_dist_map(z, p).unwrap();
        assert_eq!(g.data(d), &[25.0, 0.0]);
        let bad = g.constant(Tensor::vector(vec![1.0; 3]).unwrap()).unwrap();
        assert!(g.sq_dist_map(z, bad).is_err());
    }

    #[test]
    fn two_consumers_accumulate() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[3.0]);
        let b = g.mul(a, a).unwrap();
        let c = g.add(b, a).unwrap();
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        // d/da (a^2 + a) = 2a + 1
        assert_eq!(g.grad(a).unwrap(), &[7.0]);
    }

    #[test]
    fn non_finite_leaf_rejected() {
        let mut g = Graph::new();
        assert!(g.leaf(Tensor::vector(vec![f64::NAN]).unwrap()).is_err());
        assert!(g.leaf(Tensor::vector(vec![f64::INFINITY]).unwrap()).is_err());
    }

    #[test]
    fn gather_and_index_rows() {
        let mut g = Graph::new();
        let a = g
            .param(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let gc = g.gather_cols(a, vec![2, 0, 1, 1]).unwrap();
        assert_eq!(g.shape(gc), &[2, 2]);
        assert_eq!(g.data(gc), &[3.0, 1.0, 5.0, 5.0]);
        let ir = g.index_rows(a, vec![1, 1, 0]).unwrap();
        assert_eq!(g.data(ir), &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        let s1 = g.sum_all(gc).unwrap();
        let s2 = g.sum_all(ir).unwrap();
        let s = g.add(s1, s2).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[2.0, 1.0, 2.0, 2.0, 4.0, 2.0]);
    }

    #[test]
    fn l2_normalize_rejects_zero_row() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(g.l2_normalize_rows(a), Err(GraphError::Domain(_))));
    }
}
