//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records operations as they are requested; nothing is evaluated
//! until [`Graph::forward`] is called on a root. Node ids are handed out in
//! insertion order, and every parent has a smaller id than its child, so the
//! insertion order is already a topological order.
//!
//! ```
//! use afex::autodiff::Graph;
//! use afex::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.input(Tensor::scalar(3.0));
//! let y = g.square(x);
//! assert_eq!(g.forward(y).unwrap().item(), 9.0);
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```
//!
//! The least-squares node is differentiated implicitly: for
//! `w = (FᵀF + λI)⁻¹ Fᵀy` and an incoming gradient `ḡ`, one extra solve
//! `(FᵀF + λI) v = ḡ` gives `∂L/∂y = F v` and `∂L/∂F = (y − F w) vᵀ − (F v) wᵀ`.

use std::fmt;

use crate::linalg::{self, LeastSquares, LinalgError, RankReport, SolvePolicy};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Column scoring functions used by the attention-style weightings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Dot,
    Cosine,
    Pearson,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Transpose(NodeId),
    Concat(Vec<NodeId>),
    /// `x w + b` with `b` broadcast over rows.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    /// `(1 − α) h + α x` with scalar `α`.
    Shortcut { h: NodeId, x: NodeId, alpha: NodeId },
    /// Elementwise products of column pairs.
    PairProducts { f: NodeId, pairs: Vec<(usize, usize)> },
    RidgeSolve { f: NodeId, y: NodeId, policy: SolvePolicy },
    ColumnScores { f: NodeId, y: NodeId, kind: ScoreKind },
    Softmax(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            Op::Transpose(_) => "transpose",
            Op::Concat(_) => "concat",
            Op::Affine { .. } => "affine",
            Op::Shortcut { .. } => "shortcut",
            Op::PairProducts { .. } => "pair-products",
            Op::RidgeSolve { .. } => "ridge-solve",
            Op::ColumnScores { .. } => "column-scores",
            Op::Softmax(_) => "softmax",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Transpose(a)
            | Op::Softmax(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Shortcut { h, x, alpha } => vec![*h, *x, *alpha],
            Op::PairProducts { f, .. } => vec![*f],
            Op::RidgeSolve { f, y, .. } | Op::ColumnScores { f, y, .. } => vec![*f, *y],
        }
    }
}

/// Identifies a node in error messages: `#12 matmul "layer-2"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRef {
    pub id: usize,
    pub op: &'static str,
    pub label: Option<String>,
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{} {}", self.id, self.op)?;
        if let Some(l) = &self.label {
            write!(f, " \"{l}\"")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: NodeRef, detail: String },
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: NodeRef },
    #[error("input node {node} is not bound to a tensor")]
    Unbound { node: NodeRef },
    #[error("backward called on node {node} before forward")]
    NotEvaluated { node: NodeRef },
    #[error("least-squares solve failed at node {node}: {source}")]
    Solve { node: NodeRef, source: LinalgError },
    #[error("degenerate score at node {node}: column {column} has zero {what}")]
    DegenerateScore {
        node: NodeRef,
        column: usize,
        what: &'static str,
    },
}

struct Node {
    op: Op,
    label: Option<String>,
    value: Option<Tensor>,
    solve: Option<LeastSquares>,
}

/// Gradients of a root with respect to every node reachable from it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
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

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.parents().iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            op,
            label: None,
            value: None,
            solve: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node_ref(&self, id: usize) -> NodeRef {
        NodeRef {
            id,
            op: self.nodes[id].op.name(),
            label: self.nodes[id].label.clone(),
        }
    }

    pub fn set_label(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id.0].label = Some(label.into());
    }

    /// An input already bound to a value.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Input);
        self.nodes[id.0].value = Some(value);
        id
    }

    /// An input to be bound later with [`Graph::bind`].
    pub fn placeholder(&mut self, label: &str) -> NodeId {
        let id = self.push(Op::Input);
        self.nodes[id.0].label = Some(label.to_string());
        id
    }

    /// Binds (or rebinds) an input. Invalidates cached values downstream.
    pub fn bind(&mut self, id: NodeId, value: Tensor) {
        assert!(matches!(self.nodes[id.0].op, Op::Input), "bind on a non-input node");
        self.nodes[id.0].value = Some(value);
        for node in &mut self.nodes[id.0 + 1..] {
            if !matches!(node.op, Op::Input) {
                node.value = None;
                node.solve = None;
            }
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    /// Horizontal concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Affine { x, w, b })
    }

    pub fn shortcut(&mut self, h: NodeId, x: NodeId, alpha: NodeId) -> NodeId {
        self.push(Op::Shortcut { h, x, alpha })
    }

    pub fn pair_products(&mut self, f: NodeId, pairs: Vec<(usize, usize)>) -> NodeId {
        self.push(Op::PairProducts { f, pairs })
    }

    /// `w` solving `(FᵀF + λI) w = Fᵀ y`. With `λ = 0` the solve goes through QR
    /// and requires full column rank.
    pub fn ridge_solve(&mut self, f: NodeId, y: NodeId, lambda: f64, rank_tol: f64) -> NodeId {
        self.push(Op::RidgeSolve {
            f,
            y,
            policy: SolvePolicy::Fixed { lambda, rank_tol },
        })
    }

    /// Least squares with the rank check deciding between QR and ridge.
    pub fn least_squares(&mut self, f: NodeId, y: NodeId, ridge: f64, rank_tol: f64) -> NodeId {
        self.push(Op::RidgeSolve {
            f,
            y,
            policy: SolvePolicy::Auto { ridge, rank_tol },
        })
    }

    /// One score per column of `f` against the column vector `y`; `m × 1`.
    pub fn column_scores(&mut self, f: NodeId, y: NodeId, kind: ScoreKind) -> NodeId {
        self.push(Op::ColumnScores { f, y, kind })
    }

    /// Softmax over all entries.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    /// Cached value, if evaluated.
    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    /// Rank report of an evaluated least-squares node.
    pub fn rank_report(&self, id: NodeId) -> Option<&RankReport> {
        self.nodes[id.0].solve.as_ref().and_then(|s| s.report.as_ref())
    }

    /// Ridge parameter actually used by an evaluated least-squares node.
    pub fn solve_lambda(&self, id: NodeId) -> Option<f64> {
        self.nodes[id.0].solve.as_ref().map(|s| s.lambda)
    }

    fn reachable(&self, root: NodeId) -> Vec<bool> {
        let mut seen = vec![false; root.0 + 1];
        seen[root.0] = true;
        for i in (0..=root.0).rev() {
            if seen[i] {
                for p in self.nodes[i].op.parents() {
                    seen[p.0] = true;
                }
            }
        }
        seen
    }

    /// Evaluates every node the root depends on and returns the root value.
    pub fn forward(&mut self, root: NodeId) -> Result<Tensor, AutodiffError> {
        let reach = self.reachable(root);
        for i in 0..=root.0 {
            if !reach[i] || self.nodes[i].value.is_some() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Input) {
                return Err(AutodiffError::Unbound { node: self.node_ref(i) });
            }
            let (value, solve) = self.eval(i)?;
            if !value.is_finite() {
                return Err(AutodiffError::NonFinite { node: self.node_ref(i) });
            }
            self.nodes[i].value = Some(value);
            self.nodes[i].solve = solve;
        }
        for (i, r) in reach.iter().enumerate() {
            if *r && matches!(self.nodes[i].op, Op::Input) {
                let v = self.nodes[i].value.as_ref().expect("bound");
                if !v.is_finite() {
                    return Err(AutodiffError::NonFinite { node: self.node_ref(i) });
                }
            }
        }
        Ok(self.nodes[root.0].value.clone().expect("evaluated"))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id.0].value.as_ref().expect("parent evaluated")
    }

    fn mismatch(&self, i: usize, detail: String) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            node: self.node_ref(i),
            detail,
        }
    }

    fn same_shape(&self, i: usize, a: NodeId, b: NodeId) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(self.mismatch(i, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn eval(&self, i: usize) -> Result<(Tensor, Option<LeastSquares>), AutodiffError> {
        let op = &self.nodes[i].op;
        let out = match op {
            Op::Input => unreachable!(),
            Op::Add(a, b) => {
                self.same_shape(i, *a, *b)?;
                self.val(*a).zip_map(self.val(*b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                self.same_shape(i, *a, *b)?;
                self.val(*a).zip_map(self.val(*b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                self.same_shape(i, *a, *b)?;
                self.val(*a).zip_map(self.val(*b), |x, y| x * y)
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.val(*a).map(|x| x * s)
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                if va.cols() != vb.rows() {
                    return Err(self.mismatch(i, format!("{:?} · {:?}", va.shape(), vb.shape())));
                }
                linalg::matmul(va, vb)
            }
            Op::Tanh(a) => self.val(*a).map(f64::tanh),
            Op::Relu(a) => self.val(*a).map(|x| x.max(0.0)),
            Op::Sum(a) => Tensor::scalar(self.val(*a).sum()),
            Op::Mean(a) => {
                let v = self.val(*a);
                if v.is_empty() {
                    return Err(self.mismatch(i, "mean of an empty tensor".into()));
                }
                Tensor::scalar(v.sum() / v.len() as f64)
            }
            Op::Square(a) => self.val(*a).map(|x| x * x),
            Op::Transpose(a) => self.val(*a).transpose(),
            Op::Concat(parts) => {
                if parts.is_empty() {
                    return Err(self.mismatch(i, "concat of nothing".into()));
                }
                let rows = self.val(parts[0]).rows();
                if let Some(p) = parts.iter().find(|p| self.val(**p).rows() != rows) {
                    return Err(self.mismatch(
                        i,
                        format!("row counts {} vs {} (part #{})", rows, self.val(*p).rows(), p.0),
                    ));
                }
                let vals: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                Tensor::hstack(&vals)
            }
            Op::Affine { x, w, b } => {
                let (vx, vw, vb) = (self.val(*x), self.val(*w), self.val(*b));
                if vx.cols() != vw.rows() || vb.shape() != [1, vw.cols()] {
                    return Err(self.mismatch(
                        i,
                        format!("x {:?}, w {:?}, b {:?}", vx.shape(), vw.shape(), vb.shape()),
                    ));
                }
                let mut out = linalg::matmul(vx, vw);
                let q = out.cols();
                let bias = vb.as_slice();
                for row in out.as_mut_slice().chunks_mut(q) {
                    for (o, bj) in row.iter_mut().zip(bias) {
                        *o += bj;
                    }
                }
                out
            }
            Op::Shortcut { h, x, alpha } => {
                self.same_shape(i, *h, *x)?;
                let va = self.val(*alpha);
                if va.shape() != [1, 1] {
                    return Err(self.mismatch(i, format!("alpha must be 1x1, got {:?}", va.shape())));
                }
                let a = va.item();
                self.val(*h).zip_map(self.val(*x), |hv, xv| (1.0 - a) * hv + a * xv)
            }
            Op::PairProducts { f, pairs } => {
                let vf = self.val(*f);
                let m = vf.cols();
                if let Some(&(a, b)) = pairs.iter().find(|(a, b)| *a >= m || *b >= m) {
                    return Err(self.mismatch(i, format!("pair ({a},{b}) out of {m} columns")));
                }
                let n = vf.rows();
                let mut out = Tensor::zeros(n, pairs.len());
                for r in 0..n {
                    let src = vf.row(r);
                    let dst = &mut out.as_mut_slice()[r * pairs.len()..(r + 1) * pairs.len()];
                    for (o, &(a, b)) in dst.iter_mut().zip(pairs) {
                        *o = src[a] * src[b];
                    }
                }
                out
            }
            Op::RidgeSolve { f, y, policy } => {
                let (vf, vy) = (self.val(*f), self.val(*y));
                if vy.shape() != [vf.rows(), 1] {
                    return Err(self.mismatch(i, format!("F {:?}, y {:?}", vf.shape(), vy.shape())));
                }
                let sol = linalg::least_squares(vf, vy.as_slice(), *policy).map_err(|source| {
                    AutodiffError::Solve {
                        node: self.node_ref(i),
                        source,
                    }
                })?;
                let w = Tensor::column(sol.w.clone());
                return Ok((w, Some(sol)));
            }
            Op::ColumnScores { f, y, kind } => {
                let (vf, vy) = (self.val(*f), self.val(*y));
                if vy.shape() != [vf.rows(), 1] {
                    return Err(self.mismatch(i, format!("F {:?}, y {:?}", vf.shape(), vy.shape())));
                }
                let scores = column_scores(vf, vy.as_slice(), *kind)
                    .map_err(|(column, what)| AutodiffError::DegenerateScore {
                        node: self.node_ref(i),
                        column,
                        what,
                    })?;
                Tensor::column(scores)
            }
            Op::Softmax(a) => {
                let v = self.val(*a);
                let s = softmax(v.as_slice());
                Tensor::from_vec(v.rows(), v.cols(), s).expect("same shape")
            }
        };
        Ok((out, None))
    }

    /// Reverse sweep from `root`, seeded with ones of the root's shape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, AutodiffError> {
        let reach = self.reachable(root);
        for (i, r) in reach.iter().enumerate() {
            if *r && self.nodes[i].value.is_none() {
                return Err(AutodiffError::NotEvaluated { node: self.node_ref(root.0) });
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let rv = self.val(root);
        grads[root.0] = Some(Tensor::ones(rv.rows(), rv.cols()));

        for i in (0..=root.0).rev() {
            if !reach[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |id: NodeId, delta: Tensor| match &mut grads[id.0] {
            Some(t) => t.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(*a, g.zip_map(vb, |x, y| x * y));
                acc(*b, g.zip_map(va, |x, y| x * y));
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(*a, g.map(|v| v * s));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(*a), self.val(*b));
                acc(*a, linalg::matmul_nt(g, vb));
                acc(*b, linalg::matmul_tn(va, g));
            }
            Op::Tanh(a) => {
                let out = self.nodes[i].value.as_ref().expect("evaluated");
                acc(*a, g.zip_map(out, |gv, t| gv * (1.0 - t * t)));
            }
            Op::Relu(a) => {
                let va = self.val(*a);
                acc(*a, g.zip_map(va, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Sum(a) => {
                let va = self.val(*a);
                acc(*a, Tensor::filled(va.rows(), va.cols(), g.item()));
            }
            Op::Mean(a) => {
                let va = self.val(*a);
                acc(*a, Tensor::filled(va.rows(), va.cols(), g.item() / va.len() as f64));
            }
            Op::Square(a) => {
                let va = self.val(*a);
                acc(*a, g.zip_map(va, |gv, x| 2.0 * gv * x));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let width = self.val(*p).cols();
                    let mut part = Tensor::zeros(g.rows(), width);
                    for r in 0..g.rows() {
                        part.as_mut_slice()[r * width..(r + 1) * width]
                            .copy_from_slice(&g.row(r)[offset..offset + width]);
                    }
                    offset += width;
                    acc(*p, part);
                }
            }
            Op::Affine { x, w, b } => {
                let (vx, vw) = (self.val(*x), self.val(*w));
                acc(*x, linalg::matmul_nt(g, vw));
                acc(*w, linalg::matmul_tn(vx, g));
                let q = g.cols();
                let mut db = vec![0.0; q];
                for row in g.as_slice().chunks(q) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                acc(*b, Tensor::from_vec(1, q, db).expect("row"));
            }
            Op::Shortcut { h, x, alpha } => {
                let a = self.val(*alpha).item();
                let (vh, vx) = (self.val(*h), self.val(*x));
                acc(*h, g.map(|v| (1.0 - a) * v));
                acc(*x, g.map(|v| a * v));
                let da: f64 = g
                    .as_slice()
                    .iter()
                    .zip(vh.as_slice().iter().zip(vx.as_slice()))
                    .map(|(gv, (hv, xv))| gv * (xv - hv))
                    .sum();
                acc(*alpha, Tensor::scalar(da));
            }
            Op::PairProducts { f, pairs } => {
                let vf = self.val(*f);
                let (n, m) = (vf.rows(), vf.cols());
                let mut df = Tensor::zeros(n, m);
                for r in 0..n {
                    let src = vf.row(r);
                    let grow = g.row(r);
                    let drow = &mut df.as_mut_slice()[r * m..(r + 1) * m];
                    for (&gv, &(a, b)) in grow.iter().zip(pairs) {
                        drow[a] += gv * src[b];
                        drow[b] += gv * src[a];
                    }
                }
                acc(*f, df);
            }
            Op::RidgeSolve { f, y, .. } => {
                let sol = self.nodes[i].solve.as_ref().expect("solve cached");
                let (vf, vy) = (self.val(*f), self.val(*y));
                let v = sol.factor.solve(g.as_slice());
                let fv = linalg::mat_vec(vf, &v);
                let fw = linalg::mat_vec(vf, &sol.w);
                let (n, m) = (vf.rows(), vf.cols());
                let mut df = Tensor::zeros(n, m);
                for r in 0..n {
                    let resid = vy.as_slice()[r] - fw[r];
                    let row = &mut df.as_mut_slice()[r * m..(r + 1) * m];
                    for ((d, &vj), &wj) in row.iter_mut().zip(&v).zip(&sol.w) {
                        *d = resid * vj - fv[r] * wj;
                    }
                }
                acc(*f, df);
                acc(*y, Tensor::column(fv));
            }
            Op::ColumnScores { f, y, kind } => {
                let (df, dy) = column_scores_backward(self.val(*f), self.val(*y).as_slice(), *kind, g.as_slice());
                acc(*f, df);
                acc(*y, Tensor::column(dy));
            }
            Op::Softmax(a) => {
                let s = self.nodes[i].value.as_ref().expect("evaluated");
                let inner = linalg::dot(s.as_slice(), g.as_slice());
                acc(*a, s.zip_map(g, |sv, gv| sv * (gv - inner)));
            }
        }
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn prepared(v: &[f64], kind: ScoreKind) -> Vec<f64> {
    match kind {
        ScoreKind::Pearson => {
            let mu = mean(v);
            v.iter().map(|x| x - mu).collect()
        }
        _ => v.to_vec(),
    }
}

/// Scores of every column of `f` against `y`. On a degenerate column returns
/// its index (`usize::MAX` for `y` itself) and what vanished.
pub(crate) fn column_scores(f: &Tensor, y: &[f64], kind: ScoreKind) -> Result<Vec<f64>, (usize, &'static str)> {
    let what = if kind == ScoreKind::Pearson { "variance" } else { "norm" };
    let yp = prepared(y, kind);
    let ynorm = linalg::dot(&yp, &yp).sqrt();
    if kind != ScoreKind::Dot && ynorm == 0.0 {
        return Err((usize::MAX, what));
    }
    (0..f.cols())
        .map(|c| {
            let gp = prepared(&f.col(c), kind);
            let inner = linalg::dot(&yp, &gp);
            if kind == ScoreKind::Dot {
                return Ok(inner);
            }
            let gnorm = linalg::dot(&gp, &gp).sqrt();
            if gnorm == 0.0 {
                return Err((c, what));
            }
            Ok(inner / (ynorm * gnorm))
        })
        .collect()
}

fn column_scores_backward(f: &Tensor, y: &[f64], kind: ScoreKind, upstream: &[f64]) -> (Tensor, Vec<f64>) {
    let (n, m) = (f.rows(), f.cols());
    let mut df = Tensor::zeros(n, m);
    let mut dy = vec![0.0; n];
    let yp = prepared(y, kind);
    let ynorm = linalg::dot(&yp, &yp).sqrt();
    for c in 0..m {
        let gbar = upstream[c];
        let gp = prepared(&f.col(c), kind);
        // Gradients with respect to the (possibly centered) vectors.
        let (dg, dyc): (Vec<f64>, Vec<f64>) = match kind {
            ScoreKind::Dot => (yp.iter().map(|v| gbar * v).collect(), gp.iter().map(|v| gbar * v).collect()),
            ScoreKind::Cosine | ScoreKind::Pearson => {
                let gnorm = linalg::dot(&gp, &gp).sqrt();
                let cos = linalg::dot(&yp, &gp) / (ynorm * gnorm);
                let dg = gp
                    .iter()
                    .zip(&yp)
                    .map(|(g, y)| gbar * (y / (ynorm * gnorm) - cos * g / (gnorm * gnorm)))
                    .collect();
                let dy = yp
                    .iter()
                    .zip(&gp)
                    .map(|(y, g)| gbar * (g / (ynorm * gnorm) - cos * y / (ynorm * ynorm)))
                    .collect();
                (dg, dy)
            }
        };
        // Centering is a projection; its adjoint subtracts the mean.
        let (dg, dyc) = if kind == ScoreKind::Pearson {
            (prepared(&dg, kind), prepared(&dyc, kind))
        } else {
            (dg, dyc)
        };
        for r in 0..n {
            df.set(r, c, dg[r]);
        }
        for (d, v) in dy.iter_mut().zip(dyc) {
            *d += v;
        }
    }
    (df, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    /// Central differences of `build`'s scalar output with respect to each
    /// entry of `inputs[which]`.
    fn finite_difference(
        inputs: &[Tensor],
        which: usize,
        build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId,
        step: f64,
    ) -> Vec<f64> {
        let eval = |inputs: &[Tensor]| {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
            let root = build(&mut g, &ids);
            g.forward(root).unwrap().item()
        };
        (0..inputs[which].len())
            .map(|e| {
                let mut plus = inputs.to_vec();
                plus[which].as_mut_slice()[e] += step;
                let mut minus = inputs.to_vec();
                minus[which].as_mut_slice()[e] -= step;
                (eval(&plus) - eval(&minus)) / (2.0 * step)
            })
            .collect()
    }

    fn analytic(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId) -> Vec<Tensor> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let root = build(&mut g, &ids);
        g.forward(root).unwrap();
        let grads = g.backward(root).unwrap();
        ids.iter()
            .map(|id| {
                grads
                    .get(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(inputs[id.0].rows(), inputs[id.0].cols()))
            })
            .collect()
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }

    fn check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId, tol: f64) {
        let grads = analytic(inputs, build);
        for (k, grad) in grads.iter().enumerate() {
            let fd = finite_difference(inputs, k, build, 1e-5);
            let err = relative_error(grad.as_slice(), &fd);
            assert!(err < tol, "input {k}: relative error {err:e}");
        }
    }

    #[test]
    fn forward_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let sq = g.square(x);
        assert_eq!(g.forward(sq).unwrap().item(), 9.0);

        let z = g.input(Tensor::scalar(0.0));
        let t = g.tanh(z);
        assert_eq!(g.forward(t).unwrap().item(), 0.0);

        let eye = g.input(Tensor::identity(2));
        let v = g.input(Tensor::column(vec![1.0, 2.0]));
        let p = g.matmul(eye, v);
        assert_eq!(g.forward(p).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let sq = g.square(x);
        g.forward(sq).unwrap();
        assert_eq!(g.backward(sq).unwrap().get(x).unwrap().item(), 6.0);

        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(4, 1));
        let t = g.tanh(x);
        let s = g.sum(t);
        g.forward(s).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap().as_slice(), &[1.0; 4]);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.0));
        let sq = g.square(x);
        assert!(matches!(g.backward(sq), Err(AutodiffError::NotEvaluated { .. })));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(2, 3));
        let b = g.input(Tensor::zeros(2, 3));
        let p = g.matmul(a, b);
        g.set_label(p, "bad-product");
        match g.forward(p) {
            Err(AutodiffError::ShapeMismatch { node, .. }) => {
                assert_eq!(node.id, p.index());
                assert_eq!(node.op, "matmul");
                assert_eq!(node.label.as_deref(), Some("bad-product"));
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_values_fail_fast() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(f64::MAX));
        let b = g.square(a);
        let c = g.tanh(b);
        match g.forward(c) {
            Err(AutodiffError::NonFinite { node }) => assert_eq!(node.id, b.index()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unbound_placeholder_is_reported() {
        let mut g = Graph::new();
        let x = g.placeholder("x");
        let s = g.sum(x);
        assert!(matches!(g.forward(s), Err(AutodiffError::Unbound { .. })));
        g.bind(x, Tensor::ones(3, 1));
        assert_eq!(g.forward(s).unwrap().item(), 3.0);
        g.bind(x, Tensor::ones(5, 1));
        assert_eq!(g.forward(s).unwrap().item(), 5.0);
    }

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![random(4, 3, &mut rng), random(3, 2, &mut rng), random(2, 4, &mut rng)];
        let build = |g: &mut Graph, ids: &[NodeId]| {
            let ab = g.matmul(ids[0], ids[1]);
            let abc = g.matmul(ab, ids[2]);
            let t = g.tanh(abc);
            g.sum(t)
        };
        check(&inputs, &build, 1e-4);
    }

    #[test]
    fn every_differentiable_op_matches_finite_differences() {
        type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> NodeId>;
        let cases: Vec<(&str, Vec<[usize; 2]>, Build)> = vec![
            ("add-mul-sub", vec![[3, 2], [3, 2]], Box::new(|g, ids| {
                let a = g.add(ids[0], ids[1]);
                let m = g.mul(a, ids[0]);
                let s = g.sub(m, ids[1]);
                let sq = g.square(s);
                g.sum(sq)
            })),
            ("scale-mean-transpose", vec![[3, 4]], Box::new(|g, ids| {
                let t = g.transpose(ids[0]);
                let s = g.scale(t, -1.7);
                let q = g.square(s);
                g.mean(q)
            })),
            ("relu", vec![[5, 3]], Box::new(|g, ids| {
                let r = g.relu(ids[0]);
                let q = g.square(r);
                g.sum(q)
            })),
            ("concat", vec![[4, 2], [4, 1]], Box::new(|g, ids| {
                let c = g.concat(&[ids[0], ids[1], ids[0]]);
                let t = g.tanh(c);
                let q = g.square(t);
                g.sum(q)
            })),
            ("affine", vec![[6, 3], [3, 2], [1, 2]], Box::new(|g, ids| {
                let a = g.affine(ids[0], ids[1], ids[2]);
                let t = g.tanh(a);
                g.sum(t)
            })),
            ("shortcut", vec![[6, 1], [6, 1], [1, 1]], Box::new(|g, ids| {
                let h = g.tanh(ids[0]);
                let s = g.shortcut(h, ids[1], ids[2]);
                let q = g.square(s);
                g.sum(q)
            })),
            ("pair-products", vec![[5, 3]], Box::new(|g, ids| {
                let p = g.pair_products(ids[0], vec![(0, 1), (0, 2), (1, 2)]);
                let q = g.square(p);
                g.sum(q)
            })),
            ("ridge-solve", vec![[12, 3], [12, 1]], Box::new(|g, ids| {
                let w = g.ridge_solve(ids[0], ids[1], 0.1, 1e-10);
                let q = g.square(w);
                g.sum(q)
            })),
            ("ridge-solve-qr", vec![[12, 3], [12, 1]], Box::new(|g, ids| {
                let w = g.ridge_solve(ids[0], ids[1], 0.0, 1e-10);
                let t = g.tanh(w);
                g.sum(t)
            })),
            ("least-squares-loss", vec![[15, 4], [15, 1]], Box::new(|g, ids| {
                let w = g.least_squares(ids[0], ids[1], 0.1, 1e-10);
                let p = g.matmul(ids[0], w);
                let r = g.sub(p, ids[1]);
                let q = g.square(r);
                g.mean(q)
            })),
            ("dot-softmax", vec![[8, 3], [8, 1]], Box::new(|g, ids| {
                let s = g.column_scores(ids[0], ids[1], ScoreKind::Dot);
                let w = g.softmax(s);
                let p = g.matmul(ids[0], w);
                let q = g.square(p);
                g.sum(q)
            })),
            ("cosine", vec![[8, 3], [8, 1]], Box::new(|g, ids| {
                let s = g.column_scores(ids[0], ids[1], ScoreKind::Cosine);
                let p = g.matmul(ids[0], s);
                let q = g.square(p);
                g.sum(q)
            })),
            ("pearson-softmax", vec![[8, 3], [8, 1]], Box::new(|g, ids| {
                let s = g.column_scores(ids[0], ids[1], ScoreKind::Pearson);
                let w = g.softmax(s);
                let p = g.matmul(ids[0], w);
                let r = g.sub(p, ids[1]);
                let q = g.square(r);
                g.sum(q)
            })),
        ];
        for (name, shapes, build) in &cases {
            for seed in 0..10 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s[0], s[1], &mut rng)).collect();
                let grads = analytic(&inputs, build.as_ref());
                for (k, grad) in grads.iter().enumerate() {
                    let fd = finite_difference(&inputs, k, build.as_ref(), 1e-5);
                    let err = relative_error(grad.as_slice(), &fd);
                    assert!(err < 1e-3, "{name} seed {seed} input {k}: relative error {err:e}");
                }
            }
        }
    }

    #[test]
    fn ridge_solve_examples() {
        let mut g = Graph::new();
        let f = g.input(Tensor::identity(2));
        let y = g.input(Tensor::column(vec![1.0, 2.0]));
        let w = g.ridge_solve(f, y, 0.0, 1e-10);
        let v = g.forward(w).unwrap();
        assert!((v.as_slice()[0] - 1.0).abs() < 1e-14 && (v.as_slice()[1] - 2.0).abs() < 1e-14);

        let mut g = Graph::new();
        let f = g.input(Tensor::column(vec![1.0, 2.0, 3.0]));
        let y = g.input(Tensor::column(vec![2.0, 4.0, 6.0]));
        let w = g.ridge_solve(f, y, 0.0, 1e-10);
        assert!((g.forward(w).unwrap().item() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn ridge_solve_refuses_singular_without_lambda() {
        let mut g = Graph::new();
        let f = g.input(Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]));
        let y = g.input(Tensor::column(vec![1.0, 2.0, 3.0]));
        let w = g.ridge_solve(f, y, 0.0, 1e-10);
        match g.forward(w) {
            Err(AutodiffError::Solve { source, .. }) => {
                assert!(source.to_string().contains("ridge"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&[2.0, 2.0, 2.0, 2.0]);
        assert!(s.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let s = softmax(&[0.0, 800.0]);
        assert!(s[0] < 1e-300 && (s[1] - 1.0).abs() < 1e-15);
        let s = softmax(&[1.0, 2.0, 3.0]);
        let total = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for (v, x) in s.iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((v - x.exp() / total).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (f, y) = (random(30, 5, &mut rng), random(30, 1, &mut rng));
        let run = || {
            let mut g = Graph::new();
            let fi = g.input(f.clone());
            let yi = g.input(y.clone());
            let w = g.least_squares(fi, yi, 0.1, 1e-10);
            g.forward(w).unwrap()
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor| t.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
