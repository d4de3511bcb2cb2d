use rand::Rng;

use super::kernels::{self, ConvDims};
use super::{AutodiffError, Precision, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train mode applies stochastic layers; eval mode makes them the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Neg(Var),
    Ln(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Max {
        input: Var,
        at: usize,
    },
    Std {
        input: Var,
        mean: f64,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Slice {
        input: Var,
        start: usize,
    },
    StackColumns(Vec<Var>),
    Column {
        input: Var,
        col: usize,
        cols: usize,
    },
    SelectCells {
        input: Var,
        offsets: Vec<usize>,
    },
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the tape
/// order is already a topological order of the DAG.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::Shape(format!(
            "{op}: operand shapes differ, {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::Double)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, mut value: Tensor, requires_grad: bool) -> Var {
        if self.precision == Precision::Single {
            value.round_to_f32();
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adjoint of `v` from the most recent [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Differentiable leaf (a parameter or a probed input).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// SAME-padded stride-1 cross-correlation.
    ///
    /// `input` is `H×W×Cin` or batched `B×H×W×Cin`; `kernel` is
    /// `k×k×Cin×Cout` with odd `k`; `bias` is `Cout`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (is, ks, bs) = (
            self.value(input).shape().to_vec(),
            self.value(kernel).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        let (batch, spatial) = match is.len() {
            3 => (1, &is[..]),
            4 => (is[0], &is[1..]),
            _ => {
                return Err(AutodiffError::Shape(format!(
                    "conv2d: input must be H×W×C or B×H×W×C, got {is:?}"
                )))
            }
        };
        if ks.len() != 4 || ks[0] != ks[1] || ks[0] % 2 == 0 {
            return Err(AutodiffError::Shape(format!(
                "conv2d: kernel must be k×k×Cin×Cout with odd k, got {ks:?}"
            )));
        }
        if ks[2] != spatial[2] {
            return Err(AutodiffError::Shape(format!(
                "conv2d: kernel {ks:?} expects {} input channels but input {is:?} has {}",
                ks[2], spatial[2]
            )));
        }
        if bs != [ks[3]] {
            return Err(AutodiffError::Shape(format!(
                "conv2d: bias {bs:?} does not match kernel {ks:?}"
            )));
        }
        let dims = ConvDims {
            batch,
            height: spatial[0],
            width: spatial[1],
            cin: spatial[2],
            cout: ks[3],
            ksize: ks[0],
        };
        let cols = kernels::im2col(self.value(input).data(), &dims);
        let out = kernels::conv_forward(
            &cols,
            self.value(kernel).data(),
            self.value(bias).data(),
            &dims,
        );
        let mut shape = is.clone();
        *shape.last_mut().unwrap() = dims.cout;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
                cols,
            },
            Tensor::from_parts(shape, out),
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2 over `H×W×C` or `B×H×W×C`.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let is = self.value(input).shape().to_vec();
        let (batch, h, w, c) = match is[..] {
            [h, w, c] => (1, h, w, c),
            [b, h, w, c] => (b, h, w, c),
            _ => {
                return Err(AutodiffError::Shape(format!(
                    "maxpool2: expected H×W×C or B×H×W×C, got {is:?}"
                )))
            }
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::Shape(format!(
                "maxpool2: spatial dims must be even, got {h}×{w}"
            )));
        }
        let (values, argmax) = kernels::maxpool2(self.value(input).data(), batch, h, w, c);
        let mut shape = is.clone();
        let n = shape.len();
        shape[n - 3] = h / 2;
        shape[n - 2] = w / 2;
        let rg = self.rg(&[input]);
        Ok(self.push(
            Op::MaxPool2 { input, argmax },
            Tensor::from_parts(shape, values),
            rg,
        ))
    }

    /// Affine map `weight · input + bias` on an `n`-vector or each row of a
    /// `B×n` matrix. `weight` is `m×n`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        self.dense_impl(input, weight, Some(bias))
    }

    /// `matrix · x` for an `m×n` matrix and `n`-vector (or `B×n` rows).
    pub fn matvec(&mut self, matrix: Var, x: Var) -> Result<Var, AutodiffError> {
        self.dense_impl(x, matrix, None)
    }

    fn dense_impl(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var, AutodiffError> {
        let is = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if ws.len() != 2 {
            return Err(AutodiffError::Shape(format!(
                "dense: weight must be m×n, got {ws:?}"
            )));
        }
        let (m, n) = (ws[0], ws[1]);
        let (rows, batched) = match is[..] {
            [k] if k == n => (1, false),
            [b, k] if k == n => (b, true),
            _ => {
                return Err(AutodiffError::Shape(format!(
                    "dense: input {is:?} does not match weight {ws:?}"
                )))
            }
        };
        let mut out = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [m] {
                    return Err(AutodiffError::Shape(format!(
                        "dense: bias {:?} does not match weight {ws:?}",
                        bv.shape()
                    )));
                }
                bv.data().repeat(rows)
            }
            None => vec![0.0; rows * m],
        };
        kernels::gemm(
            rows,
            n,
            m,
            self.value(input).data(),
            (n, 1),
            self.value(weight).data(),
            (1, n),
            1.0,
            &mut out,
        );
        let shape = if batched { vec![rows, m] } else { vec![m] };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
                rows,
            },
            Tensor::from_parts(shape, out),
            rg,
        ))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(op, value, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    /// Natural log with the argument floored at [`LN_FLOOR`].
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), |v| v.max(LN_FLOOR).ln())
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        self.unary(x, Op::ScalarMul(x, alpha), |v| alpha * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.neg(x);
        self.add_scalar(n, 1.0)
    }

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        same_shape(name, self.value(a), self.value(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn reduction(&mut self, op: Op, input: Var, value: f64) -> Var {
        let rg = self.rg(&[input]);
        self.push(op, Tensor::scalar(value), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.reduction(Op::Sum(x), x, s)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.reduction(Op::Mean(x), x, m)
    }

    /// Largest element; the gradient goes to the first maximiser.
    pub fn max(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let mut at = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[at] {
                at = i;
            }
        }
        let m = d[at];
        self.reduction(Op::Max { input: x, at }, x, m)
    }

    /// Population standard deviation (divides by N). A single element or a
    /// constant input gives 0 with zero gradient.
    pub fn std(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        self.reduction(Op::Std { input: x, mean }, x, var.sqrt())
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::Precondition(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::from_parts(v.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Dropout { input: x, mask }, value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Contiguous run of `len` elements of the flattened input.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        if len == 0 || start + len > v.len() {
            return Err(AutodiffError::Shape(format!(
                "slice [{start}, {}) out of range for {:?}",
                start + len,
                v.shape()
            )));
        }
        let value = Tensor::vector(v.data()[start..start + len].to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(Op::Slice { input: x, start }, value, rg))
    }

    /// Flat concatenation of the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Shape("concat of nothing".into()));
        }
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), rg))
    }

    /// Stack K vectors of length M as the columns of an `M×K` matrix.
    pub fn stack_columns(&mut self, columns: &[Var]) -> Result<Var, AutodiffError> {
        let Some(&first) = columns.first() else {
            return Err(AutodiffError::Shape("stack_columns of nothing".into()));
        };
        let m = self.value(first).len();
        for &c in columns {
            let s = self.value(c).shape();
            if s != [m] {
                return Err(AutodiffError::Shape(format!(
                    "stack_columns: expected [{m}] columns, got {s:?}"
                )));
            }
        }
        let k = columns.len();
        let mut data = vec![0.0; m * k];
        for (j, &c) in columns.iter().enumerate() {
            for (i, &v) in self.value(c).data().iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        let rg = self.rg(columns);
        Ok(self.push(
            Op::StackColumns(columns.to_vec()),
            Tensor::from_parts(vec![m, k], data),
            rg,
        ))
    }

    /// Column `col` of an `M×K` matrix.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var, AutodiffError> {
        let s = self.value(x).shape().to_vec();
        let [m, k] = s[..] else {
            return Err(AutodiffError::Shape(format!(
                "column: expected a matrix, got {s:?}"
            )));
        };
        if col >= k {
            return Err(AutodiffError::Shape(format!(
                "column {col} out of range for {s:?}"
            )));
        }
        let d = self.value(x).data();
        let data = (0..m).map(|i| d[i * k + col]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Op::Column {
                input: x,
                col,
                cols: k,
            },
            Tensor::vector(data),
            rg,
        ))
    }

    /// Gather one channel vector per image from a `B×R×C×Ch` grid; `cells[b]`
    /// is the `(row, col)` picked for image `b`. Output is `B×Ch`.
    pub fn select_cells(
        &mut self,
        grid: Var,
        cells: &[(usize, usize)],
    ) -> Result<Var, AutodiffError> {
        let s = self.value(grid).shape().to_vec();
        let [b, r, c, ch] = s[..] else {
            return Err(AutodiffError::Shape(format!(
                "select_cells: expected B×R×C×Ch grid, got {s:?}"
            )));
        };
        if cells.len() != b {
            return Err(AutodiffError::Shape(format!(
                "select_cells: {} cells for a batch of {b}",
                cells.len()
            )));
        }
        let mut offsets = Vec::with_capacity(b);
        let mut data = Vec::with_capacity(b * ch);
        let d = self.value(grid).data();
        for (i, &(row, col)) in cells.iter().enumerate() {
            if row >= r || col >= c {
                return Err(AutodiffError::Shape(format!(
                    "select_cells: cell ({row}, {col}) outside {r}×{c} grid"
                )));
            }
            let off = ((i * r + row) * c + col) * ch;
            offsets.push(off);
            data.extend_from_slice(&d[off..off + ch]);
        }
        let rg = self.rg(&[grid]);
        Ok(self.push(
            Op::SelectCells {
                input: grid,
                offsets,
            },
            Tensor::from_parts(vec![b, ch], data),
            rg,
        ))
    }

    /// Reverse sweep from a scalar output. Adjoints from any earlier call
    /// are discarded first.
    pub fn backward(&mut self, output: Var) -> Result<(), AutodiffError> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(AutodiffError::NotScalar(out.shape().to_vec()));
        }
        let seed = Tensor::filled(out.shape(), 1.0);
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(mut g) = self.grads[i].take() else {
                continue;
            };
            if self.precision == Precision::Single {
                g.round_to_f32();
            }
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contribution: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(&contribution) {
                    *a += c;
                }
            }
            slot @ None => {
                let shape = self.nodes[target.0].value.shape().to_vec();
                *slot = Some(Tensor::from_parts(shape, contribution));
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        let gd = g.data();
        let node = &self.nodes[i];
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
                cols,
            } => {
                let need_input = self.requires_grad(*input);
                let (dk, db, dc) =
                    kernels::conv_backward(cols, self.value(*kernel).data(), gd, dims, need_input);
                if let Some(dc) = dc {
                    out.push((*input, kernels::col2im(&dc, dims)));
                }
                out.push((*kernel, dk));
                out.push((*bias, db));
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (&at, &gv) in argmax.iter().zip(gd) {
                    d[at] += gv;
                }
                out.push((*input, d));
            }
            Op::Dense {
                input,
                weight,
                bias,
                rows,
            } => {
                let ws = self.value(*weight).shape();
                let (m, n) = (ws[0], ws[1]);
                if self.requires_grad(*input) {
                    let mut dx = vec![0.0; rows * n];
                    kernels::gemm(
                        *rows,
                        m,
                        n,
                        gd,
                        (m, 1),
                        self.value(*weight).data(),
                        (n, 1),
                        0.0,
                        &mut dx,
                    );
                    out.push((*input, dx));
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![0.0; m * n];
                    kernels::gemm(
                        m,
                        *rows,
                        n,
                        gd,
                        (1, m),
                        self.value(*input).data(),
                        (n, 1),
                        0.0,
                        &mut dw,
                    );
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    let mut db = vec![0.0; m];
                    for row in gd.chunks_exact(m) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                out.push((*x, d));
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                out.push((*x, d));
            }
            Op::Neg(x) => out.push((*x, gd.iter().map(|v| -v).collect())),
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > LN_FLOOR { gv / v } else { 0.0 })
                    .collect();
                out.push((*x, d));
            }
            Op::Add(a, b) => {
                out.push((*a, gd.to_vec()));
                out.push((*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, gd.to_vec()));
                out.push((*b, gd.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect()));
                out.push((*b, gd.iter().zip(av).map(|(g, x)| g * x).collect()));
            }
            Op::ScalarMul(x, alpha) => out.push((*x, gd.iter().map(|v| alpha * v).collect())),
            Op::AddScalar(x) => out.push((*x, gd.to_vec())),
            Op::Sum(x) => out.push((*x, vec![gd[0]; self.value(*x).len()])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                out.push((*x, vec![gd[0] / n as f64; n]));
            }
            Op::Max { input, at } => {
                let mut d = vec![0.0; self.value(*input).len()];
                d[*at] = gd[0];
                out.push((*input, d));
            }
            Op::Std { input, mean } => {
                let sigma = node.value.data()[0];
                let xv = self.value(*input).data();
                let n = xv.len() as f64;
                let d = if sigma > 0.0 {
                    xv.iter().map(|v| gd[0] * (v - mean) / (n * sigma)).collect()
                } else {
                    vec![0.0; xv.len()]
                };
                out.push((*input, d));
            }
            Op::Dropout { input, mask } => {
                out.push((*input, gd.iter().zip(mask).map(|(g, m)| g * m).collect()))
            }
            Op::Reshape(x) => out.push((*x, gd.to_vec())),
            Op::Slice { input, start } => {
                let mut d = vec![0.0; self.value(*input).len()];
                d[*start..*start + gd.len()].copy_from_slice(gd);
                out.push((*input, d));
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    out.push((p, gd[at..at + n].to_vec()));
                    at += n;
                }
            }
            Op::StackColumns(columns) => {
                let k = columns.len();
                for (j, &c) in columns.iter().enumerate() {
                    out.push((c, gd.iter().skip(j).step_by(k).copied().collect()));
                }
            }
            Op::Column { input, col, cols } => {
                let mut d = vec![0.0; self.value(*input).len()];
                for (i, &gv) in gd.iter().enumerate() {
                    d[i * cols + col] = gv;
                }
                out.push((*input, d));
            }
            Op::SelectCells { input, offsets } => {
                let ch = gd.len() / offsets.len().max(1);
                let mut d = vec![0.0; self.value(*input).len()];
                for (row, &off) in gd.chunks_exact(ch).zip(offsets) {
                    d[off..off + ch].copy_from_slice(row);
                }
                out.push((*input, d));
            }
        }
        for (target, contribution) in out {
            self.accumulate(target, contribution);
        }
    }
}

/// Lower clamp applied to the argument of [`Graph::ln`].
pub const LN_FLOOR: f64 = 1e-12;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
