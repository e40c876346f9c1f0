use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    BiasAdd(Var, Var),
    Tanh(Var),
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    Mean(Var),
    Sum(Var),
    MeanRows(Var),
    Square(Var),
    Exp(Var),
    ExpHalf(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    LogSoftmaxRows(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients of a scalar loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss
    /// through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf (data, targets, noise).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2("matmul")?;
        let (k2, m) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), n, k, m, false, false);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn elementwise2(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let out = ta.zip_map(tb, f);
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x (n×m) + b (1×m)` broadcast over rows. The only broadcasting op.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (n, m) = tx.dims2("bias_add")?;
        if tb.shape() != [1, m] {
            return Err(shape_err("bias_add", tx, tb));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(m) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::BiasAdd(x, b), &[x, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        self.push(out, op, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// `e^{0.5 x}`, the standard deviation from a log-variance.
    pub fn exp_half(&mut self, x: Var) -> Var {
        self.unary(x, |v| (0.5 * v).exp(), Op::ExpHalf(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Row-wise concatenation `(N×a, N×b) → N×(a+b)`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca) = ta.dims2("concat")?;
        let (n2, cb) = tb.dims2("concat")?;
        if n != n2 {
            return Err(shape_err("concat", ta, tb));
        }
        let mut out = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        Ok(self.push(
            Tensor::matrix(n, ca + cb, out)?,
            Op::ConcatCols(a, b),
            &[a, b],
        ))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, c) = tx.dims2("slice")?;
        if start >= end || end > c {
            return Err(Error::Shape {
                op: "slice",
                left: tx.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&tx.row(i)[start..end]);
        }
        Ok(self.push(
            Tensor::matrix(n, end - start, out)?,
            Op::SliceCols(x, start, end),
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = crate::numeric::kahan_sum(self.value(x).data().iter().copied());
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = crate::numeric::kahan_sum(t.data().iter().copied()) / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column means `(N×M) → (1×M)`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, m) = tx.dims2("mean_rows")?;
        let mut acc = vec![crate::numeric::KahanSum::new(); m];
        for i in 0..n {
            for (a, &v) in acc.iter_mut().zip(tx.row(i)) {
                a.add(v);
            }
        }
        let out = acc.iter().map(|a| a.value() / n as f64).collect();
        Ok(self.push(Tensor::matrix(1, m, out)?, Op::MeanRows(x), &[x]))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, k) = tx.dims2("log_softmax_rows")?;
        if k < 2 {
            return Err(Error::invalid("log_softmax_rows needs K >= 2"));
        }
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = tx.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = crate::numeric::kahan_sum(row.iter().map(|&l| (l - max).exp())).ln();
            out.extend(row.iter().map(|&l| l - max - lse));
        }
        Ok(self.push(Tensor::matrix(n, k, out)?, Op::LogSoftmaxRows(x), &[x]))
    }

    /// `mu + noise ⊙ e^{0.5 logvar}`; `noise` is a constant operand.
    pub fn gaussian_reparam(&mut self, mu: Var, logvar: Var, noise: Tensor) -> Result<Var> {
        let eps = self.constant(noise);
        let std = self.exp_half(logvar);
        let scaled = self.mul(eps, std)?;
        self.add(mu, scaled)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, contrib) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let y = &node.value;
        match node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.cols();
                let ga = matmul_raw(g.data(), tb.data(), n, m, k, false, true);
                let gb = matmul_raw(ta.data(), g.data(), k, n, m, true, false);
                vec![
                    (a, Tensor::matrix(n, k, ga).expect("shape")),
                    (b, Tensor::matrix(k, m, gb).expect("shape")),
                ]
            }
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (a, g.zip_map(self.value(b), |gv, bv| gv * bv)),
                (b, g.zip_map(self.value(a), |gv, av| gv * av)),
            ],
            Op::BiasAdd(x, b) => {
                let m = g.cols();
                let mut gb = vec![crate::numeric::KahanSum::new(); m];
                for i in 0..g.rows() {
                    for (acc, &v) in gb.iter_mut().zip(g.row(i)) {
                        acc.add(v);
                    }
                }
                let gb = gb.iter().map(|a| a.value()).collect();
                vec![
                    (x, g.clone()),
                    (b, Tensor::matrix(1, m, gb).expect("shape")),
                ]
            }
            Op::Tanh(x) => vec![(x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)))],
            Op::Relu(x) => vec![(
                x,
                g.zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            )],
            Op::Scale(x, s) => vec![(x, g.map(|v| v * s))],
            Op::AddScalar(x) => vec![(x, g.clone())],
            Op::Square(x) => vec![(x, g.zip_map(self.value(x), |gv, xv| 2.0 * xv * gv))],
            Op::Exp(x) => vec![(x, g.zip_map(y, |gv, yv| gv * yv))],
            Op::ExpHalf(x) => vec![(x, g.zip_map(y, |gv, yv| 0.5 * gv * yv))],
            Op::Ln(x) => vec![(x, g.zip_map(self.value(x), |gv, xv| gv / xv))],
            Op::Clamp(x, lo, hi) => vec![(
                x,
                g.zip_map(self.value(x), |gv, xv| {
                    if (lo..=hi).contains(&xv) {
                        gv
                    } else {
                        0.0
                    }
                }),
            )],
            Op::ConcatCols(a, b) => {
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                let n = g.rows();
                let mut ga = Vec::with_capacity(n * ca);
                let mut gb = Vec::with_capacity(n * cb);
                for i in 0..n {
                    let row = g.row(i);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![
                    (a, Tensor::matrix(n, ca, ga).expect("shape")),
                    (b, Tensor::matrix(n, cb, gb).expect("shape")),
                ]
            }
            Op::SliceCols(x, start, end) => {
                let tx = self.value(x);
                let (n, c) = (tx.rows(), tx.cols());
                let mut gx = vec![0.0; n * c];
                for i in 0..n {
                    gx[i * c + start..i * c + end].copy_from_slice(g.row(i));
                }
                vec![(x, Tensor::matrix(n, c, gx).expect("shape"))]
            }
            Op::Sum(x) => vec![(x, Tensor::full(self.value(x).shape(), g.item()))],
            Op::Mean(x) => {
                let tx = self.value(x);
                vec![(x, Tensor::full(tx.shape(), g.item() / tx.numel() as f64))]
            }
            Op::MeanRows(x) => {
                let tx = self.value(x);
                let n = tx.rows();
                let row: Vec<f64> = g.data().iter().map(|v| v / n as f64).collect();
                let data = row.repeat(n);
                vec![(x, Tensor::new(tx.shape().to_vec(), data).expect("shape"))]
            }
            Op::LogSoftmaxRows(x) => {
                let (n, k) = (y.rows(), y.cols());
                let mut gx = Vec::with_capacity(n * k);
                for i in 0..n {
                    let gs = crate::numeric::kahan_sum(g.row(i).iter().copied());
                    gx.extend(
                        g.row(i)
                            .iter()
                            .zip(y.row(i))
                            .map(|(&gv, &yv)| gv - yv.exp() * gs),
                    );
                }
                vec![(x, Tensor::matrix(n, k, gx).expect("shape"))]
            }
        }
    }
}
