//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in execution order; [`Tape::backward`]
//! walks it once in reverse. Sparse operands (wavelet bases, graph operators)
//! enter only as borrowed constants through [`Tape::spmm`], so all learnable
//! state is dense.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{dense_matmul, dense_matmul_nt, dense_matmul_tn, spmm, spmm_transposed, DenseMatrix, SparseMatrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<'a> {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    SpMM(&'a SparseMatrix, Tensor),
    ScaleRows(Tensor, Tensor),
    Relu(Tensor),
    SoftmaxRows(Tensor),
    Mask(Tensor, DenseMatrix),
    ConcatCols(Vec<Tensor>),
    FrobeniusSq(Tensor),
    SumAll(Tensor),
    Abs(Tensor),
    Log(Tensor),
    MulElem(Tensor, Tensor),
    RowSums(Tensor),
    ColSums(Tensor),
    Gather(Tensor, Vec<(usize, usize)>),
}

struct Node<'a> {
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
    requires_grad: bool,
    op: Op<'a>,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, value: DenseMatrix) -> Tensor {
        self.leaf(value, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: DenseMatrix) -> Tensor {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: DenseMatrix, requires_grad: bool) -> Tensor {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, t: Tensor) -> &DenseMatrix {
        &self.nodes[t.0].value
    }

    /// Value of a 1×1 tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        let v = self.value(t);
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Accumulated gradient; `None` until a backward pass reaches `t`.
    pub fn grad(&self, t: Tensor) -> Option<&DenseMatrix> {
        self.nodes[t.0].grad.as_ref()
    }

    /// Accumulated gradient, or zeros of the value's shape.
    pub fn grad_or_zeros(&self, t: Tensor) -> DenseMatrix {
        let node = &self.nodes[t.0];
        node.grad
            .clone()
            .unwrap_or_else(|| DenseMatrix::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: DenseMatrix, requires_grad: bool, op: Op<'a>) -> Tensor {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn rg(&self, ts: &[Tensor]) -> bool {
        ts.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = self.value(a).scaled(c);
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let v = dense_matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::Transpose(a))
    }

    /// `s * a` for a constant sparse `s`.
    pub fn spmm(&mut self, s: &'a SparseMatrix, a: Tensor) -> Result<Tensor> {
        let v = spmm(s, self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, rg, Op::SpMM(s, a)))
    }

    /// `diag(d) * a` where `d` is an n×1 column.
    pub fn scale_rows(&mut self, a: Tensor, d: Tensor) -> Result<Tensor> {
        let (av, dv) = (self.value(a), self.value(d));
        if dv.cols() != 1 || dv.rows() != av.rows() {
            return Err(Error::shape(
                "scale_rows",
                format!("diagonal {:?} for matrix {:?}", dv.shape(), av.shape()),
            ));
        }
        let mut v = av.clone();
        for i in 0..v.rows() {
            let di = dv.get(i, 0);
            v.row_mut(i).iter_mut().for_each(|x| *x *= di);
        }
        let rg = self.rg(&[a, d]);
        Ok(self.push(v, rg, Op::ScaleRows(a, d)))
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::Relu(a))
    }

    /// Row-wise softmax, stabilized by subtracting each row maximum.
    pub fn softmax_rows(&mut self, a: Tensor) -> Tensor {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::SoftmaxRows(a))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`. Identity
    /// (the same handle) when `training` is off or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Tensor, rate: f64, training: bool, rng: &mut R) -> Result<Tensor> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let (r, c) = self.value(a).shape();
        let mask = DenseMatrix::from_fn(r, c, |_, _| if rng.random::<f64>() < rate { 0.0 } else { keep });
        let v = self.value(a).zip_map(&mask, |x, m| x * m)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, rg, Op::Mask(a, mask)))
    }

    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat_cols needs at least one input".into()))?;
        let rows = self.value(*first).rows();
        if let Some(bad) = parts.iter().find(|t| self.value(**t).rows() != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("{} rows vs {rows}", self.value(*bad).rows()),
            ));
        }
        let cols: usize = parts.iter().map(|t| self.value(*t).cols()).sum();
        let mut v = DenseMatrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for t in parts {
                let src = self.value(*t).row(i);
                v.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(v, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// `‖a‖²_F` as a 1×1 tensor.
    pub fn frobenius_sq(&mut self, a: Tensor) -> Tensor {
        let v = DenseMatrix::filled(1, 1, self.value(a).frobenius_sq());
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::FrobeniusSq(a))
    }

    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let v = DenseMatrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::SumAll(a))
    }

    pub fn abs(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::Abs(a))
    }

    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        if let Some(bad) = self.value(a).as_slice().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive entry {bad}"),
            });
        }
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(v, rg, Op::Log(a)))
    }

    pub fn mul_elementwise(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul_elementwise", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, rg, Op::MulElem(a, b)))
    }

    /// n×1 column of row sums.
    pub fn row_sums(&mut self, a: Tensor) -> Tensor {
        let av = self.value(a);
        let v = DenseMatrix::from_fn(av.rows(), 1, |i, _| av.row(i).iter().sum());
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::RowSums(a))
    }

    /// 1×m row of column sums.
    pub fn col_sums(&mut self, a: Tensor) -> Tensor {
        let av = self.value(a);
        let mut v = DenseMatrix::zeros(1, av.cols());
        for i in 0..av.rows() {
            for (o, &x) in v.row_mut(0).iter_mut().zip(av.row(i)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        self.push(v, rg, Op::ColSums(a))
    }

    /// k×1 column of the entries at `index`.
    pub fn gather(&mut self, a: Tensor, index: &[(usize, usize)]) -> Result<Tensor> {
        let av = self.value(a);
        if let Some(&(i, j)) = index.iter().find(|&&(i, j)| i >= av.rows() || j >= av.cols()) {
            return Err(Error::shape("gather", format!("index ({i}, {j}) outside {:?}", av.shape())));
        }
        let v = DenseMatrix::from_fn(index.len(), 1, |k, _| av.get(index[k].0, index[k].1));
        let rg = self.rg(&[a]);
        Ok(self.push(v, rg, Op::Gather(a, index.to_vec())))
    }

    /// Back-propagates from a 1×1 `objective`, adding into every reachable
    /// trainable node's gradient.
    pub fn backward(&mut self, objective: Tensor) -> Result<()> {
        let shape = self.value(objective).shape();
        if shape != (1, 1) {
            return Err(Error::shape("backward", format!("objective is {shape:?}, expected 1x1")));
        }
        let mut adj: Vec<Option<DenseMatrix>> = (0..=objective.0).map(|_| None).collect();
        adj[objective.0] = Some(DenseMatrix::filled(1, 1, 1.0));

        for id in (0..=objective.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj)?;
            match &mut self.nodes[id].grad {
                Some(acc) => acc.axpy(1.0, &g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &DenseMatrix, adj: &mut [Option<DenseMatrix>]) -> Result<()> {
        let node = &self.nodes[id];
        let mut send = |t: Tensor, contrib: DenseMatrix| -> Result<()> {
            if !self.nodes[t.0].requires_grad {
                return Ok(());
            }
            match &mut adj[t.0] {
                Some(acc) => acc.axpy(1.0, &contrib),
                slot @ None => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.scaled(-1.0))?;
            }
            Op::Scale(a, c) => send(*a, g.scaled(*c))?,
            Op::AddScalar(a) => send(*a, g.clone())?,
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    send(*a, dense_matmul_nt(g, self.value(*b))?)?;
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, dense_matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::Transpose(a) => send(*a, g.transpose())?,
            Op::SpMM(s, a) => send(*a, spmm_transposed(s, g)?)?,
            Op::ScaleRows(a, d) => {
                let (av, dv) = (self.value(*a), self.value(*d));
                if self.nodes[a.0].requires_grad {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        let di = dv.get(i, 0);
                        ga.row_mut(i).iter_mut().for_each(|x| *x *= di);
                    }
                    send(*a, ga)?;
                }
                if self.nodes[d.0].requires_grad {
                    let gd = DenseMatrix::from_fn(dv.rows(), 1, |i, _| {
                        av.row(i).iter().zip(g.row(i)).map(|(x, y)| x * y).sum()
                    });
                    send(*d, gd)?;
                }
            }
            Op::Relu(a) => {
                let ga = self.value(*a).zip_map(g, |x, gi| if x > 0.0 { gi } else { 0.0 })?;
                send(*a, ga)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = DenseMatrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (p, q)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                send(*a, ga)?;
            }
            Op::Mask(a, mask) => send(*a, g.zip_map(mask, |x, m| x * m)?)?,
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for t in parts {
                    let w = self.value(*t).cols();
                    let piece = DenseMatrix::from_fn(g.rows(), w, |i, j| g.get(i, off + j));
                    send(*t, piece)?;
                    off += w;
                }
            }
            Op::FrobeniusSq(a) => {
                let s = 2.0 * g.get(0, 0);
                send(*a, self.value(*a).scaled(s))?;
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, DenseMatrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::Abs(a) => {
                let ga = self.value(*a).zip_map(g, |x, gi| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })?;
                send(*a, ga)?;
            }
            Op::Log(a) => send(*a, g.zip_map(self.value(*a), |gi, x| gi / x)?)?,
            Op::MulElem(a, b) => {
                if self.nodes[a.0].requires_grad {
                    send(*a, g.zip_map(self.value(*b), |gi, y| gi * y)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, g.zip_map(self.value(*a), |gi, x| gi * x)?)?;
                }
            }
            Op::RowSums(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, DenseMatrix::from_fn(r, c, |i, _| g.get(i, 0)))?;
            }
            Op::ColSums(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, DenseMatrix::from_fn(r, c, |_, j| g.get(0, j)))?;
            }
            Op::Gather(a, index) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = DenseMatrix::zeros(r, c);
                for (k, &(i, j)) in index.iter().enumerate() {
                    ga.set(i, j, ga.get(i, j) + g.get(k, 0));
                }
                send(*a, ga)?;
            }
        }
        Ok(())
    }
}
