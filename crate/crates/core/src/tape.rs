//! Reverse-mode automatic differentiation over a small primitive vocabulary.
//!
//! The training objective is assembled as an explicit expression graph on a
//! [`Tape`]: each builder method validates operand shapes, evaluates the
//! result eagerly, and records the operation for the backward pass.
//! [`Tape::backward`] then returns exact adjoints of a scalar loss with
//! respect to every parameter leaf.
//!
//! The vocabulary is deliberately closed — elementwise arithmetic, `exp` /
//! `ln` / `tanh`, matrix products, reductions, log-sum-exp over rows or
//! columns (the building block of log-space Sinkhorn normalization), scatter
//! into a strictly lower triangle, a batched acyclic-system solve (ancestral
//! sampling), and a stop-gradient marker. Anything outside it is a
//! construction-time error: there are no silently non-differentiated paths.
//!
//! Values are scalars, vectors, or matrices of one [`Scalar`] type. Gradient
//! checking against central finite differences lives in [`check_gradients`].

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::opt::{BoundParams, GradStore, ParamStore};
use crate::scalar::Scalar;
use crate::scm;
use crate::F;

/// Handle to a node on a [`Tape`].
pub type NodeId = usize;

/// A scalar, vector, or matrix value.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Value<S: Scalar> {
    Scalar(S),
    Vector(Array1<S>),
    Matrix(Array2<S>),
}

/// Shape of a [`Value`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Matrix(usize, usize),
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "vector[{n}]"),
            Shape::Matrix(r, c) => write!(f, "matrix[{r}x{c}]"),
        }
    }
}

impl<S: Scalar> Value<S> {
    /// Shape tag of this value.
    pub fn shape(&self) -> Shape {
        match self {
            Value::Scalar(_) => Shape::Scalar,
            Value::Vector(v) => Shape::Vector(v.len()),
            Value::Matrix(m) => Shape::Matrix(m.nrows(), m.ncols()),
        }
    }

    /// Number of coordinates.
    pub fn len(&self) -> usize {
        match self {
            Value::Scalar(_) => 1,
            Value::Vector(v) => v.len(),
            Value::Matrix(m) => m.len(),
        }
    }

    /// True when this value holds no coordinates.
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate at flat (row-major) index `i`.
    pub fn coord(&self, i: usize) -> S {
        match self {
            Value::Scalar(s) => {
                debug_assert_eq!(i, 0);
                *s
            }
            Value::Vector(v) => v[i],
            Value::Matrix(m) => m[(i / m.ncols(), i % m.ncols())],
        }
    }

    /// Overwrites the coordinate at flat (row-major) index `i`.
    pub fn set_coord(&mut self, i: usize, x: S) {
        match self {
            Value::Scalar(s) => {
                debug_assert_eq!(i, 0);
                *s = x;
            }
            Value::Vector(v) => v[i] = x,
            Value::Matrix(m) => {
                let c = m.ncols();
                m[(i / c, i % c)] = x;
            }
        }
    }

    /// Zero value of the same shape.
    pub fn zeros_like(&self) -> Self {
        match self {
            Value::Scalar(_) => Value::Scalar(S::zero()),
            Value::Vector(v) => Value::Vector(Array1::zeros(v.len())),
            Value::Matrix(m) => Value::Matrix(Array2::zeros(m.dim())),
        }
    }

    /// Applies `f` to every coordinate.
    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        match self {
            Value::Scalar(s) => Value::Scalar(f(*s)),
            Value::Vector(v) => Value::Vector(v.mapv(&f)),
            Value::Matrix(m) => Value::Matrix(m.mapv(&f)),
        }
    }

    /// Combines two like-shaped values coordinate-wise.
    pub fn zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        match (self, other) {
            (Value::Scalar(a), Value::Scalar(b)) => Ok(Value::Scalar(f(*a, *b))),
            (Value::Vector(a), Value::Vector(b)) if a.len() == b.len() => {
                Ok(Value::Vector(ndarray::Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))))
            }
            (Value::Matrix(a), Value::Matrix(b)) if a.dim() == b.dim() => {
                Ok(Value::Matrix(ndarray::Zip::from(a).and(b).map_collect(|&x, &y| f(x, y))))
            }
            _ => Err(Error::DimensionMismatch(format!(
                "elementwise op on {} vs {}",
                self.shape(),
                other.shape()
            ))),
        }
    }

    /// Sum of all coordinates.
    pub fn total(&self) -> S {
        match self {
            Value::Scalar(s) => *s,
            Value::Vector(v) => v.sum(),
            Value::Matrix(m) => m.sum(),
        }
    }

    /// Euclidean norm over all coordinates.
    pub fn total_norm(&self) -> S {
        let mut sq = S::zero();
        for i in 0..self.len() {
            let x = self.coord(i);
            sq = sq + x * x;
        }
        sq.sqrt()
    }

    /// True when every coordinate is finite.
    pub fn is_finite(&self) -> bool {
        match self {
            Value::Scalar(s) => s.is_finite(),
            Value::Vector(v) => v.iter().all(|x| x.is_finite()),
            Value::Matrix(m) => m.iter().all(|x| x.is_finite()),
        }
    }

    /// The scalar payload, or an error for vectors/matrices.
    pub fn as_scalar(&self) -> Result<S> {
        match self {
            Value::Scalar(s) => Ok(*s),
            other => Err(Error::DimensionMismatch(format!(
                "expected scalar, got {}",
                other.shape()
            ))),
        }
    }

    /// The vector payload, or an error.
    pub fn as_vector(&self) -> Result<&Array1<S>> {
        match self {
            Value::Vector(v) => Ok(v),
            other => Err(Error::DimensionMismatch(format!(
                "expected vector, got {}",
                other.shape()
            ))),
        }
    }

    /// The matrix payload, or an error.
    pub fn as_matrix(&self) -> Result<&Array2<S>> {
        match self {
            Value::Matrix(m) => Ok(m),
            other => Err(Error::DimensionMismatch(format!(
                "expected matrix, got {}",
                other.shape()
            ))),
        }
    }
}

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    StopGrad,
    Neg(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddConst(NodeId, S),
    MulConst(NodeId, S),
    Exp(NodeId),
    Ln(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Scale(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    RowMatrix(NodeId),
    Reshape(NodeId),
    AddBias(NodeId, NodeId),
    SubPerRow(NodeId, NodeId),
    SubPerCol(NodeId, NodeId),
    LseRows(NodeId),
    LseCols(NodeId),
    ScatterLower(NodeId),
    SliceVec(NodeId, usize),
    IndexVec(NodeId, usize),
    SolveDag(NodeId, NodeId),
}

struct Node<S: Scalar> {
    value: Value<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Expression graph with eagerly evaluated forward values.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    /// Empty tape.
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when no node has been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Value<S> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Value<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Records a constant leaf (no gradient).
    pub fn constant(&mut self, value: Value<S>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite("constant leaf".into()));
        }
        Ok(self.push(value, Op::Leaf, false))
    }

    /// Records a parameter leaf (gradient tracked).
    pub fn param(&mut self, value: Value<S>) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite("parameter leaf".into()));
        }
        Ok(self.push(value, Op::Leaf, true))
    }

    /// Scalar constant convenience.
    pub fn lit(&mut self, x: S) -> Result<NodeId> {
        self.constant(Value::Scalar(x))
    }

    /// Marks a value as constant for differentiation purposes.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Elementwise negation.
    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| -v);
        let needs = self.needs(x);
        self.push(value, Op::Neg(x), needs)
    }

    /// Elementwise sum of two like-shaped values.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Elementwise difference of two like-shaped values.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    /// Elementwise (Hadamard) product of two like-shaped values.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Elementwise quotient of two like-shaped values.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a].value.zip(&self.nodes[b].value, |x, y| x / y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Div(a, b), needs))
    }

    /// Adds a compile-time constant to every coordinate.
    pub fn add_const(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.nodes[x].value.map(|v| v + c);
        let needs = self.needs(x);
        self.push(value, Op::AddConst(x, c), needs)
    }

    /// Multiplies every coordinate by a compile-time constant.
    pub fn mul_const(&mut self, x: NodeId, c: S) -> NodeId {
        let value = self.nodes[x].value.map(|v| v * c);
        let needs = self.needs(x);
        self.push(value, Op::MulConst(x, c), needs)
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v.exp());
        let needs = self.needs(x);
        self.push(value, Op::Exp(x), needs)
    }

    /// Elementwise natural logarithm.
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v.ln());
        let needs = self.needs(x);
        self.push(value, Op::Ln(x), needs)
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.map(|v| v.tanh());
        let needs = self.needs(x);
        self.push(value, Op::Tanh(x), needs)
    }

    /// Sum of all coordinates, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Value::Scalar(self.nodes[x].value.total());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    /// Broadcast product of a scalar node with any value.
    pub fn scale(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        let s = self.nodes[a].value.as_scalar()?;
        let value = self.nodes[x].value.map(|v| v * s);
        let needs = self.needs(a) || self.needs(x);
        Ok(self.push(value, Op::Scale(a, x), needs))
    }

    /// Matrix product of two matrix nodes.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ma = self.nodes[a].value.as_matrix()?;
        let mb = self.nodes[b].value.as_matrix()?;
        if ma.ncols() != mb.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "matmul {} by {}",
                self.nodes[a].value.shape(),
                self.nodes[b].value.shape()
            )));
        }
        let value = Value::Matrix(ma.dot(mb));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// Matrix transpose.
    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let m = self.nodes[x].value.as_matrix()?;
        let value = Value::Matrix(m.t().to_owned());
        let needs = self.needs(x);
        Ok(self.push(value, Op::Transpose(x), needs))
    }

    /// Reinterprets a vector of length `n` as a `1×n` matrix.
    pub fn row_matrix(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.nodes[x].value.as_vector()?;
        let value = Value::Matrix(v.clone().insert_axis(ndarray::Axis(0)));
        let needs = self.needs(x);
        Ok(self.push(value, Op::RowMatrix(x), needs))
    }

    /// Row-major reshape of a matrix.
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let m = self.nodes[x].value.as_matrix()?;
        if m.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "reshape {} into {rows}x{cols}",
                self.nodes[x].value.shape()
            )));
        }
        let flat: Vec<S> = m.iter().copied().collect();
        let value = Value::Matrix(
            Array2::from_shape_vec((rows, cols), flat)
                .expect("element count was checked"),
        );
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Adds a length-`ncols` vector to every row of a matrix.
    pub fn add_bias(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let mm = self.nodes[m].value.as_matrix()?;
        let vv = self.nodes[v].value.as_vector()?;
        if mm.ncols() != vv.len() {
            return Err(Error::DimensionMismatch(format!(
                "bias of length {} on {}",
                vv.len(),
                self.nodes[m].value.shape()
            )));
        }
        let value = Value::Matrix(mm + &vv.view().insert_axis(ndarray::Axis(0)));
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(value, Op::AddBias(m, v), needs))
    }

    /// Subtracts `v[i]` from every entry of row `i`.
    pub fn sub_per_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let mm = self.nodes[m].value.as_matrix()?;
        let vv = self.nodes[v].value.as_vector()?;
        if mm.nrows() != vv.len() {
            return Err(Error::DimensionMismatch(format!(
                "per-row vector of length {} on {}",
                vv.len(),
                self.nodes[m].value.shape()
            )));
        }
        let value = Value::Matrix(mm - &vv.view().insert_axis(ndarray::Axis(1)));
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(value, Op::SubPerRow(m, v), needs))
    }

    /// Subtracts `v[j]` from every entry of column `j`.
    pub fn sub_per_col(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let mm = self.nodes[m].value.as_matrix()?;
        let vv = self.nodes[v].value.as_vector()?;
        if mm.ncols() != vv.len() {
            return Err(Error::DimensionMismatch(format!(
                "per-column vector of length {} on {}",
                vv.len(),
                self.nodes[m].value.shape()
            )));
        }
        let value = Value::Matrix(mm - &vv.view().insert_axis(ndarray::Axis(0)));
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(value, Op::SubPerCol(m, v), needs))
    }

    /// Log-sum-exp of each row, as a vector node.
    pub fn lse_rows(&mut self, m: NodeId) -> Result<NodeId> {
        let mm = self.nodes[m].value.as_matrix()?;
        let value = Value::Vector(lse_axis(mm, true));
        let needs = self.needs(m);
        Ok(self.push(value, Op::LseRows(m), needs))
    }

    /// Log-sum-exp of each column, as a vector node.
    pub fn lse_cols(&mut self, m: NodeId) -> Result<NodeId> {
        let mm = self.nodes[m].value.as_matrix()?;
        let value = Value::Vector(lse_axis(mm, false));
        let needs = self.needs(m);
        Ok(self.push(value, Op::LseCols(m), needs))
    }

    /// Scatters a length-`d(d−1)/2` vector into the strictly lower triangle
    /// of a `d×d` matrix, row-major; everything else is zero.
    pub fn scatter_lower(&mut self, v: NodeId, d: usize) -> Result<NodeId> {
        let vv = self.nodes[v].value.as_vector()?;
        if vv.len() != d * (d - 1) / 2 {
            return Err(Error::DimensionMismatch(format!(
                "{} entries cannot fill the strict lower triangle of a {d}x{d} matrix",
                vv.len()
            )));
        }
        let mut m = Array2::zeros((d, d));
        for (k, (i, j)) in scm::lower_index_pairs(d).into_iter().enumerate() {
            m[(i, j)] = vv[k];
        }
        let needs = self.needs(v);
        Ok(self.push(Value::Matrix(m), Op::ScatterLower(v), needs))
    }

    /// Contiguous slice of a vector node.
    pub fn slice_vec(&mut self, v: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vv = self.nodes[v].value.as_vector()?;
        if start + len > vv.len() {
            return Err(Error::DimensionMismatch(format!(
                "slice {start}..{} of vector[{}]",
                start + len,
                vv.len()
            )));
        }
        let value = Value::Vector(vv.slice(ndarray::s![start..start + len]).to_owned());
        let needs = self.needs(v);
        Ok(self.push(value, Op::SliceVec(v, start), needs))
    }

    /// Single coordinate of a vector node, as a scalar node.
    pub fn index_vec(&mut self, v: NodeId, i: usize) -> Result<NodeId> {
        let vv = self.nodes[v].value.as_vector()?;
        if i >= vv.len() {
            return Err(Error::DimensionMismatch(format!(
                "index {i} of vector[{}]",
                vv.len()
            )));
        }
        let value = Value::Scalar(vv[i]);
        let needs = self.needs(v);
        Ok(self.push(value, Op::IndexVec(v, i), needs))
    }

    /// Batched acyclic-system solve: returns `Z` with `Z = Z·W + U` row-wise,
    /// i.e. `Z = U·(I−W)⁻¹`, computed by substitution in topological order of
    /// the support of `W`. Each row of `U` is one sample's drive vector.
    ///
    /// Fails when the support of the forward value of `W` is cyclic.
    pub fn solve_dag(&mut self, w: NodeId, u: NodeId) -> Result<NodeId> {
        let wm = self.nodes[w].value.as_matrix()?;
        let um = self.nodes[u].value.as_matrix()?;
        let d = wm.nrows();
        if wm.ncols() != d || um.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "solve with adjacency {} and drive {}",
                self.nodes[w].value.shape(),
                self.nodes[u].value.shape()
            )));
        }
        let order = scm::topo_order(&wm.view())?;
        let n = um.nrows();
        let mut z = um.clone();
        for &a in &order {
            // Z[:,a] += Σ_j w[j][a]·Z[:,j]  (parents j precede a)
            for j in 0..d {
                let wja = wm[(j, a)];
                if wja != S::zero() {
                    let col_j = z.column(j).to_owned();
                    let mut col_a = z.column_mut(a);
                    for r in 0..n {
                        col_a[r] += wja * col_j[r];
                    }
                }
            }
        }
        let needs = self.needs(w) || self.needs(u);
        Ok(self.push(Value::Matrix(z), Op::SolveDag(w, u), needs))
    }

    /// Reverse-mode sweep from a scalar loss node.
    ///
    /// Returns one adjoint slot per node (`None` where no gradient flows).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Value<S>>>> {
        self.nodes[loss].value.as_scalar().map_err(|_| {
            Error::GraphConstruction(format!(
                "backward requires a scalar loss, got {}",
                self.nodes[loss].value.shape()
            ))
        })?;
        let mut adj: Vec<Option<Value<S>>> = vec![None; self.nodes.len()];
        adj[loss] = Some(Value::Scalar(S::one()));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = adj[id].clone() else { continue };
            self.propagate_adjoint(id, &g, &mut adj)?;
        }
        Ok(adj)
    }

    fn propagate_adjoint(
        &self,
        id: NodeId,
        g: &Value<S>,
        adj: &mut Vec<Option<Value<S>>>,
    ) -> Result<()> {
        let acc = |adj: &mut Vec<Option<Value<S>>>, target: NodeId, delta: Value<S>| -> Result<()> {
            match &mut adj[target] {
                Some(existing) => {
                    *existing = existing.zip(&delta, |a, b| a + b)?;
                }
                slot @ None => *slot = Some(delta),
            }
            Ok(())
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::StopGrad => {}
            Op::Neg(x) => {
                if self.needs(*x) {
                    acc(adj, *x, g.map(|v| -v))?;
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(adj, *a, g.clone())?;
                }
                if self.needs(*b) {
                    acc(adj, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(adj, *a, g.clone())?;
                }
                if self.needs(*b) {
                    acc(adj, *b, g.map(|v| -v))?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(adj, *a, g.zip(&self.nodes[*b].value, |gv, bv| gv * bv)?)?;
                }
                if self.needs(*b) {
                    acc(adj, *b, g.zip(&self.nodes[*a].value, |gv, av| gv * av)?)?;
                }
            }
            Op::Div(a, b) => {
                if self.needs(*a) {
                    acc(adj, *a, g.zip(&self.nodes[*b].value, |gv, bv| gv / bv)?)?;
                }
                if self.needs(*b) {
                    // d(a/b)/db = −a/b²
                    let quotient = &self.nodes[id].value; // a/b
                    let over_b = quotient.zip(&self.nodes[*b].value, |q, bv| q / bv)?;
                    acc(adj, *b, g.zip(&over_b, |gv, t| -(gv * t))?)?;
                }
            }
            Op::AddConst(x, _) => {
                if self.needs(*x) {
                    acc(adj, *x, g.clone())?;
                }
            }
            Op::MulConst(x, c) => {
                if self.needs(*x) {
                    let c = *c;
                    acc(adj, *x, g.map(|v| v * c))?;
                }
            }
            Op::Exp(x) => {
                if self.needs(*x) {
                    acc(adj, *x, g.zip(&self.nodes[id].value, |gv, e| gv * e)?)?;
                }
            }
            Op::Ln(x) => {
                if self.needs(*x) {
                    acc(adj, *x, g.zip(&self.nodes[*x].value, |gv, xv| gv / xv)?)?;
                }
            }
            Op::Tanh(x) => {
                if self.needs(*x) {
                    let t = &self.nodes[id].value;
                    acc(adj, *x, g.zip(t, |gv, tv| gv * (S::one() - tv * tv))?)?;
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let gs = g.as_scalar()?;
                    acc(adj, *x, self.nodes[*x].value.map(|_| gs))?;
                }
            }
            Op::Scale(a, x) => {
                let s = self.nodes[*a].value.as_scalar()?;
                if self.needs(*a) {
                    let inner = g.zip(&self.nodes[*x].value, |gv, xv| gv * xv)?;
                    acc(adj, *a, Value::Scalar(inner.total()))?;
                }
                if self.needs(*x) {
                    acc(adj, *x, g.map(|gv| gv * s))?;
                }
            }
            Op::MatMul(a, b) => {
                let gm = g.as_matrix()?;
                if self.needs(*a) {
                    let bm = self.nodes[*b].value.as_matrix()?;
                    acc(adj, *a, Value::Matrix(gm.dot(&bm.t())))?;
                }
                if self.needs(*b) {
                    let am = self.nodes[*a].value.as_matrix()?;
                    acc(adj, *b, Value::Matrix(am.t().dot(gm)))?;
                }
            }
            Op::Transpose(x) => {
                if self.needs(*x) {
                    let gm = g.as_matrix()?;
                    acc(adj, *x, Value::Matrix(gm.t().to_owned()))?;
                }
            }
            Op::RowMatrix(x) => {
                if self.needs(*x) {
                    let gm = g.as_matrix()?;
                    acc(adj, *x, Value::Vector(gm.row(0).to_owned()))?;
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let gm = g.as_matrix()?;
                    let (r, c) = self.nodes[*x].value.as_matrix()?.dim();
                    let flat: Vec<S> = gm.iter().copied().collect();
                    acc(
                        adj,
                        *x,
                        Value::Matrix(
                            Array2::from_shape_vec((r, c), flat).expect("same element count"),
                        ),
                    )?;
                }
            }
            Op::AddBias(m, v) => {
                let gm = g.as_matrix()?;
                if self.needs(*m) {
                    acc(adj, *m, g.clone())?;
                }
                if self.needs(*v) {
                    acc(adj, *v, Value::Vector(gm.sum_axis(ndarray::Axis(0))))?;
                }
            }
            Op::SubPerRow(m, v) => {
                let gm = g.as_matrix()?;
                if self.needs(*m) {
                    acc(adj, *m, g.clone())?;
                }
                if self.needs(*v) {
                    let sums = gm.sum_axis(ndarray::Axis(1));
                    acc(adj, *v, Value::Vector(sums.mapv(|s| -s)))?;
                }
            }
            Op::SubPerCol(m, v) => {
                let gm = g.as_matrix()?;
                if self.needs(*m) {
                    acc(adj, *m, g.clone())?;
                }
                if self.needs(*v) {
                    let sums = gm.sum_axis(ndarray::Axis(0));
                    acc(adj, *v, Value::Vector(sums.mapv(|s| -s)))?;
                }
            }
            Op::LseRows(m) => {
                if self.needs(*m) {
                    let gv = g.as_vector()?;
                    let x = self.nodes[*m].value.as_matrix()?;
                    let out = self.nodes[id].value.as_vector()?;
                    let mut d = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        for j in 0..x.ncols() {
                            d[(i, j)] = gv[i] * (x[(i, j)] - out[i]).exp();
                        }
                    }
                    acc(adj, *m, Value::Matrix(d))?;
                }
            }
            Op::LseCols(m) => {
                if self.needs(*m) {
                    let gv = g.as_vector()?;
                    let x = self.nodes[*m].value.as_matrix()?;
                    let out = self.nodes[id].value.as_vector()?;
                    let mut d = Array2::zeros(x.dim());
                    for i in 0..x.nrows() {
                        for j in 0..x.ncols() {
                            d[(i, j)] = gv[j] * (x[(i, j)] - out[j]).exp();
                        }
                    }
                    acc(adj, *m, Value::Matrix(d))?;
                }
            }
            Op::ScatterLower(v) => {
                if self.needs(*v) {
                    let gm = g.as_matrix()?;
                    let d = gm.nrows();
                    let mut gv = Array1::zeros(d * (d - 1) / 2);
                    for (k, (i, j)) in scm::lower_index_pairs(d).into_iter().enumerate() {
                        gv[k] = gm[(i, j)];
                    }
                    acc(adj, *v, Value::Vector(gv))?;
                }
            }
            Op::SliceVec(v, start) => {
                if self.needs(*v) {
                    let gs = g.as_vector()?;
                    let mut gv = Array1::zeros(self.nodes[*v].value.as_vector()?.len());
                    for (k, &x) in gs.iter().enumerate() {
                        gv[start + k] = x;
                    }
                    acc(adj, *v, Value::Vector(gv))?;
                }
            }
            Op::IndexVec(v, i) => {
                if self.needs(*v) {
                    let gs = g.as_scalar()?;
                    let mut gv = Array1::zeros(self.nodes[*v].value.as_vector()?.len());
                    gv[*i] = gs;
                    acc(adj, *v, Value::Vector(gv))?;
                }
            }
            Op::SolveDag(w, u) => {
                // Z = U·A⁻¹ with A = I−W. With Ḡ the adjoint of Z:
                //   Ū = Ḡ·A⁻ᵀ   (same solve against the transposed system)
                //   W̄ = Zᵀ·Ū
                let gm = g.as_matrix()?;
                let wm = self.nodes[*w].value.as_matrix()?;
                let z = self.nodes[id].value.as_matrix()?;
                let d = wm.nrows();
                let n = gm.nrows();
                let order = scm::topo_order(&wm.view())?;
                let mut ubar = gm.clone();
                for &a in order.iter().rev() {
                    // Ū[:,a] += Σ_b w[a][b]·Ū[:,b]  (children b follow a)
                    for b in 0..d {
                        let wab = wm[(a, b)];
                        if wab != S::zero() {
                            let col_b = ubar.column(b).to_owned();
                            let mut col_a = ubar.column_mut(a);
                            for r in 0..n {
                                col_a[r] += wab * col_b[r];
                            }
                        }
                    }
                }
                if self.needs(*u) {
                    acc(adj, *u, Value::Matrix(ubar.clone()))?;
                }
                if self.needs(*w) {
                    acc(adj, *w, Value::Matrix(z.t().dot(&ubar)))?;
                }
            }
        }
        Ok(())
    }
}

fn lse_axis<S: Scalar>(m: &Array2<S>, rows: bool) -> Array1<S> {
    let (outer, inner) = if rows {
        (m.nrows(), m.ncols())
    } else {
        (m.ncols(), m.nrows())
    };
    let mut out = Array1::zeros(outer);
    for i in 0..outer {
        let at = |k: usize| if rows { m[(i, k)] } else { m[(k, i)] };
        let mut mx = S::neg_infinity();
        for k in 0..inner {
            if at(k) > mx {
                mx = at(k);
            }
        }
        let mut s = S::zero();
        for k in 0..inner {
            s += (at(k) - mx).exp();
        }
        out[i] = mx + s.ln();
    }
    out
}

/// Outcome of a finite-difference comparison, per parameter coordinate.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest deviation `|analytic − numeric| / (max(|analytic|, |numeric|) + 1e-4)`.
    pub max_rel_err: F,
    /// Largest absolute deviation.
    pub max_abs_err: F,
    /// Parameter name and flat coordinate of the worst deviation, with the
    /// analytic and numeric values there.
    pub worst: Option<(String, usize, F, F)>,
    /// Number of coordinates compared.
    pub coords: usize,
}

impl GradCheck {
    /// True when the worst relative deviation is within `tol`.
    pub fn passes(&self, tol: F) -> bool {
        self.max_rel_err <= tol
    }
}

/// Builds a loss on a fresh tape and returns its value and the gradients of
/// every parameter in `params`.
///
/// `build` receives the tape and the bound parameter leaves; it must return
/// the scalar loss node.
pub fn eval_with_grads<B>(params: &ParamStore, build: B) -> Result<(F, GradStore)>
where
    B: Fn(&mut Tape<F>, &BoundParams) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params)?;
    let loss = build(&mut tape, &bound)?;
    let value = tape.value(loss).as_scalar()?;
    let adj = tape.backward(loss)?;
    let mut grads = GradStore::zeros_like(params);
    for (name, &id) in bound.ids() {
        if let Some(g) = &adj[id] {
            grads.set(name, g.clone())?;
        }
    }
    Ok((value, grads))
}

/// Evaluates the loss only (no backward pass).
pub fn eval_value<B>(params: &ParamStore, build: B) -> Result<F>
where
    B: Fn(&mut Tape<F>, &BoundParams) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params)?;
    let loss = build(&mut tape, &bound)?;
    tape.value(loss).as_scalar()
}

/// Evaluates two scalar nodes of one graph (no backward pass).
pub fn eval_pair<B>(params: &ParamStore, build: B) -> Result<(F, F)>
where
    B: Fn(&mut Tape<F>, &BoundParams) -> Result<(NodeId, NodeId)>,
{
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params)?;
    let (first, second) = build(&mut tape, &bound)?;
    Ok((
        tape.value(first).as_scalar()?,
        tape.value(second).as_scalar()?,
    ))
}

/// Compares supplied gradients against central finite differences of the
/// loss, coordinate by coordinate.
pub fn compare_fd<B>(
    params: &ParamStore,
    build: B,
    grads: &GradStore,
    step: F,
) -> Result<GradCheck>
where
    B: Fn(&mut Tape<F>, &BoundParams) -> Result<NodeId>,
{
    let mut check = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        coords: 0,
    };
    for name in params.names() {
        let len = params.get(&name)?.len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.nudge(&name, i, step)?;
            let mut minus = params.clone();
            minus.nudge(&name, i, -step)?;
            let f_plus = eval_value(&plus, &build)?;
            let f_minus = eval_value(&minus, &build)?;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let analytic = grads.get(&name)?.coord(i);
            let abs = (analytic - numeric).abs();
            let rel = abs / (analytic.abs().max(numeric.abs()) + 1e-4);
            check.coords += 1;
            if abs > check.max_abs_err {
                check.max_abs_err = abs;
            }
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst = Some((name.clone(), i, analytic, numeric));
            }
        }
    }
    Ok(check)
}

/// Full gradient check: computes reverse-mode gradients of the loss and
/// compares every coordinate against central finite differences with the
/// given step.
pub fn check_gradients<B>(params: &ParamStore, build: B, step: F) -> Result<GradCheck>
where
    B: Fn(&mut Tape<F>, &BoundParams) -> Result<NodeId>,
{
    let (_, grads) = eval_with_grads(params, &build)?;
    compare_fd(params, &build, &grads, step)
}
