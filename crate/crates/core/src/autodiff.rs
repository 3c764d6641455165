//! Dense reverse-mode differentiation on a tape of matrices, plus the
//! spectral-filter MLP, Adam and the text checkpoint format.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module.
///
/// `backward` receives the input values, the output value and the gradient of
/// the output, and returns one gradient per input (`None` for inputs that do
/// not need one).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>>;
}

enum Op {
    Leaf,
    MatMul,
    Add,
    /// Adds a `1 × c` row to every row.
    AddRowBias,
    Relu,
    Elu,
    /// Elementwise product with a constant.
    MulConst(Matrix),
    Hadamard,
    Sum,
    ConcatCols,
    Mean,
    LogSoftmaxRows,
    /// Mean negative log-likelihood of `(row, class)` pairs.
    Nll(Vec<(usize, usize)>),
    /// Softmax over consecutive segments of each row; masked entries are 0.
    SegmentSoftmax {
        segment: usize,
    },
    Custom(Box<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::AddRowBias => "add_row_bias",
            Op::Relu => "relu",
            Op::Elu => "elu",
            Op::MulConst(_) => "mul_const",
            Op::Hadamard => "hadamard",
            Op::Sum => "sum",
            Op::ConcatCols => "concat_cols",
            Op::Mean => "mean",
            Op::LogSoftmaxRows => "log_softmax",
            Op::Nll(_) => "nll",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::Custom(c) => c.name(),
        };
        f.write_str(s)
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Records operations in evaluation order; [`Tape::backward`] walks it in
/// reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn check_shape(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Shape(what()))
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: Vec<usize>) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: vec![],
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: vec![],
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_shape(x.cols() == y.rows(), || format!("matmul {:?} · {:?}", x.shape(), y.shape()))?;
        let out = x.matmul(y);
        Ok(self.push(out, Op::MatMul, vec![a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_shape(x.shape() == y.shape(), || format!("add {:?} + {:?}", x.shape(), y.shape()))?;
        let out = x.zip_map(y, |p, q| p + q);
        Ok(self.push(out, Op::Add, vec![a.0, b.0]))
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        check_shape(b.rows() == 1 && b.cols() == x.cols(), || {
            format!("bias {:?} for input {:?}", b.shape(), x.shape())
        })?;
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRowBias, vec![a.0, bias.0]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu, vec![a.0])
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(elu);
        self.push(out, Op::Elu, vec![a.0])
    }

    /// Elementwise product with a constant matrix (dropout masks, zeroing).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        let x = self.value(a);
        check_shape(x.shape() == c.shape(), || format!("mul_const {:?} ∘ {:?}", x.shape(), c.shape()))?;
        let out = x.zip_map(&c, |p, q| p * q);
        Ok(self.push(out, Op::MulConst(c), vec![a.0]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        check_shape(x.shape() == y.shape(), || format!("hadamard {:?} ∘ {:?}", x.shape(), y.shape()))?;
        let out = x.zip_map(y, |p, q| p * q);
        Ok(self.push(out, Op::Hadamard, vec![a.0, b.0]))
    }

    /// Sum of all entries as a `1 × 1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).as_slice().iter().sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum, vec![a.0])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        check_shape(parts.iter().all(|p| self.value(*p).rows() == rows), || {
            "concat_cols row counts differ".into()
        })?;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols, parts.iter().map(|p| p.0).collect()))
    }

    /// Elementwise mean of equally shaped inputs.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("mean of nothing".into()))?;
        let shape = self.value(*first).shape();
        check_shape(parts.iter().all(|p| self.value(*p).shape() == shape), || {
            "mean input shapes differ".into()
        })?;
        let mut out = Matrix::zeros(shape.0, shape.1);
        let w = 1.0 / parts.len() as f64;
        for p in parts {
            out.axpy(w, self.value(*p));
        }
        Ok(self.push(out, Op::Mean, parts.iter().map(|p| p.0).collect()))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRows, vec![a.0])
    }

    /// Mean negative log-likelihood over `rows`, with `targets[i]` the class
    /// of `rows[i]`. Input holds log-probabilities.
    pub fn nll(&mut self, logp: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        let x = self.value(logp);
        check_shape(rows.len() == targets.len() && !rows.is_empty(), || {
            "nll needs equally many rows and targets, at least one".into()
        })?;
        let mut pairs = Vec::with_capacity(rows.len());
        let mut total = 0.0;
        for (&r, &t) in rows.iter().zip(targets) {
            check_shape(r < x.rows() && t < x.cols(), || format!("nll index ({r}, {t}) outside {:?}", x.shape()))?;
            total -= x[(r, t)];
            pairs.push((r, t));
        }
        let out = Matrix::filled(1, 1, total / rows.len() as f64);
        Ok(self.push(out, Op::Nll(pairs), vec![logp.0]))
    }

    /// Softmax over each length-`segment` run of every row. Entries where
    /// `mask` is `false` are excluded (output 0); a segment whose mask is all
    /// `false` is treated as unmasked.
    pub fn segment_softmax(&mut self, a: Var, segment: usize, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        check_shape(segment > 0 && x.cols() % segment == 0, || {
            format!("segment {segment} does not divide {} columns", x.cols())
        })?;
        if let Some(m) = mask {
            check_shape(m.len() == x.rows() * x.cols(), || "segment_softmax mask size".into())?;
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let src = x.as_slice();
        let dst = out.as_mut_slice();
        for start in (0..src.len()).step_by(segment) {
            let end = start + segment;
            let keep: Vec<bool> = match mask {
                Some(m) if m[start..end].iter().any(|&b| b) => m[start..end].to_vec(),
                _ => vec![true; segment],
            };
            softmax_into(&src[start..end], &keep, &mut dst[start..end]);
        }
        Ok(self.push(out, Op::SegmentSoftmax { segment }, vec![a.0]))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Matrix) -> Var {
        self.push(output, Op::Custom(op), inputs.iter().map(|v| v.0).collect())
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        check_shape(ov.shape() == (1, 1), || format!("backward from non-scalar {:?}", ov.shape()))?;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let ins: Vec<&Matrix> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let local = local_grads(&node.op, &ins, &node.value, &g)?;
            grads[idx] = Some(g);
            for (&i, lg) in node.inputs.iter().zip(local) {
                let Some(lg) = lg else { continue };
                if !self.nodes[i].requires_grad {
                    continue;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&lg),
                    slot @ None => *slot = Some(lg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn softmax_into(src: &[f64], keep: &[bool], dst: &mut [f64]) {
    let mx = src
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for ((d, &s), &k) in dst.iter_mut().zip(src).zip(keep) {
        *d = if k { (s - mx).exp() } else { 0.0 };
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

fn local_grads(op: &Op, ins: &[&Matrix], out: &Matrix, g: &Matrix) -> Result<Vec<Option<Matrix>>> {
    Ok(match op {
        Op::Leaf => vec![],
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let mut ga = Matrix::zeros(a.rows(), a.cols());
            gemm(1.0, g, false, b, true, 0.0, &mut ga);
            let mut gb = Matrix::zeros(b.rows(), b.cols());
            gemm(1.0, a, true, g, false, 0.0, &mut gb);
            vec![Some(ga), Some(gb)]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::AddRowBias => {
            let mut gb = Matrix::zeros(1, g.cols());
            for r in 0..g.rows() {
                for (b, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                    *b += v;
                }
            }
            vec![Some(g.clone()), Some(gb)]
        }
        Op::Relu => vec![Some(ins[0].zip_map(g, |x, gv| if x > 0.0 { gv } else { 0.0 }))],
        Op::Elu => vec![Some(ins[0].zip_map(g, |x, gv| if x > 0.0 { gv } else { gv * x.exp() }))],
        Op::MulConst(c) => vec![Some(g.zip_map(c, |gv, cv| gv * cv))],
        Op::Hadamard => vec![
            Some(g.zip_map(ins[1], |gv, y| gv * y)),
            Some(g.zip_map(ins[0], |gv, x| gv * x)),
        ],
        Op::Sum => {
            let (r, c) = ins[0].shape();
            vec![Some(Matrix::filled(r, c, g[(0, 0)]))]
        }
        Op::ConcatCols => {
            let mut off = 0;
            let mut res = Vec::with_capacity(ins.len());
            for part in ins {
                let w = part.cols();
                let pg = Matrix::from_fn(part.rows(), w, |r, c| g[(r, off + c)]);
                off += w;
                res.push(Some(pg));
            }
            res
        }
        Op::Mean => {
            let s = g.scaled(1.0 / ins.len() as f64);
            ins.iter().map(|_| Some(s.clone())).collect()
        }
        Op::LogSoftmaxRows => {
            let mut gx = g.clone();
            for r in 0..gx.rows() {
                let gs: f64 = g.row(r).iter().sum();
                for (d, &lp) in gx.row_mut(r).iter_mut().zip(out.row(r)) {
                    *d -= lp.exp() * gs;
                }
            }
            vec![Some(gx)]
        }
        Op::Nll(pairs) => {
            let mut gx = Matrix::zeros(ins[0].rows(), ins[0].cols());
            let w = g[(0, 0)] / pairs.len() as f64;
            for &(r, t) in pairs {
                gx[(r, t)] -= w;
            }
            vec![Some(gx)]
        }
        Op::SegmentSoftmax { segment } => {
            let mut gx = Matrix::zeros(out.rows(), out.cols());
            let (y, gy) = (out.as_slice(), g.as_slice());
            let dst = gx.as_mut_slice();
            for s in (0..y.len()).step_by(*segment) {
                let e = s + segment;
                let dotp: f64 = y[s..e].iter().zip(&gy[s..e]).map(|(a, b)| a * b).sum();
                for i in s..e {
                    dst[i] = y[i] * (gy[i] - dotp);
                }
            }
            vec![Some(gx)]
        }
        Op::Custom(c) => c.backward(ins, out, g)?,
    })
}

/// Softmax of a row in which `-∞` marks excluded entries.
pub fn masked_softmax(row: &[f64]) -> Result<Vec<f64>> {
    let keep: Vec<bool> = row.iter().map(|v| *v != f64::NEG_INFINITY).collect();
    if !keep.iter().any(|&k| k) {
        return Err(Error::Numeric("masked_softmax: every entry is masked".into()));
    }
    if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numeric("masked_softmax: non-finite entry".into()));
    }
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &keep, &mut out);
    Ok(out)
}

/// Central-difference check of a scalar function built on a tape.
///
/// `f` receives a fresh tape and one parameter per input and must return a
/// `1 × 1` node. Returns the largest `|g_ad − g_fd| / max(1, |g_fd|)`.
pub fn grad_check(
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    inputs: &[Matrix],
    eps: f64,
) -> Result<f64> {
    let eval = |vals: &[Matrix]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut worst = 0.0f64;
    let mut work: Vec<Matrix> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let ad = grads.get_or_zeros(*v, inputs[k].shape());
        for i in 0..inputs[k].as_slice().len() {
            let orig = inputs[k].as_slice()[i];
            work[k].as_mut_slice()[i] = orig + eps;
            let (t, _, o) = eval(&work)?;
            let plus = t.value(o)[(0, 0)];
            work[k].as_mut_slice()[i] = orig - eps;
            let (t, _, o) = eval(&work)?;
            let minus = t.value(o)[(0, 0)];
            work[k].as_mut_slice()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (ad.as_slice()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Uniform Glorot initialization for a `fan_in × fan_out` weight.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..=limit))
}

/// Pointwise filter network `λ/2 → hidden → hidden → M` with ReLU on the two
/// hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpFilterParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

impl MlpFilterParams {
    pub fn init(hidden: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: glorot(1, hidden, rng),
            b1: Matrix::zeros(1, hidden),
            w2: glorot(hidden, hidden, rng),
            b2: Matrix::zeros(1, hidden),
            w3: glorot(hidden, heads, rng),
            b3: Matrix::zeros(1, heads),
        }
    }

    pub fn zeros(hidden: usize, heads: usize) -> Self {
        Self {
            w1: Matrix::zeros(1, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, hidden),
            b2: Matrix::zeros(1, hidden),
            w3: Matrix::zeros(hidden, heads),
            b3: Matrix::zeros(1, heads),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.w1.cols()
    }

    pub fn head_count(&self) -> usize {
        self.w3.cols()
    }

    pub fn tensors(&self) -> [&Matrix; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3, &mut self.b3]
    }
}

/// Tape handles of the MLP parameters.
#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl MlpVars {
    pub fn register(tape: &mut Tape, p: &MlpFilterParams, trainable: bool) -> Self {
        let mut add = |m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        Self {
            w1: add(&p.w1),
            b1: add(&p.b1),
            w2: add(&p.w2),
            b2: add(&p.b2),
            w3: add(&p.w3),
            b3: add(&p.b3),
        }
    }

    pub fn all(&self) -> [Var; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }

    /// Response at each `λ` in `points` (`len × M`) on the tape.
    pub fn response(&self, tape: &mut Tape, points: &[f64]) -> Result<Var> {
        let x = tape.constant(Matrix::column_vector(&points.iter().map(|l| 0.5 * l).collect::<Vec<_>>()));
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_row_bias(h, self.b1)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, self.w2)?;
        let h = tape.add_row_bias(h, self.b2)?;
        let h = tape.relu(h);
        let h = tape.matmul(h, self.w3)?;
        tape.add_row_bias(h, self.b3)
    }
}

/// Response of the filter MLP at `eigenvalues`, `len × M`, off-tape.
pub fn mlp_response(p: &MlpFilterParams, eigenvalues: &[f64]) -> Matrix {
    let mut tape = Tape::new();
    let vars = MlpVars::register(&mut tape, p, false);
    let out = vars.response(&mut tape, eigenvalues).expect("MLP shapes are consistent by construction");
    tape.value(out).clone()
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape("one gradient per parameter expected".into()));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape("parameter count changed between Adam steps".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = &grads[k];
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[k].as_mut_slice(), self.v[k].as_mut_slice());
            for (i, x) in p.as_mut_slice().iter_mut().enumerate() {
                let gi = g.as_slice()[i] + self.weight_decay * *x;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Named tensors plus a string header, stored as text. Values are written in
/// shortest round-trip form, so reading back is bit-exact.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Matrix)>,
}

const CHECKPOINT_MAGIC: &str = "asgat-checkpoint\t1";

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Validation(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(CHECKPOINT_MAGIC);
        out.push('\n');
        for (k, v) in &self.header {
            let _ = writeln!(out, "config\t{k}\t{v}");
        }
        for (name, m) in &self.tensors {
            let _ = writeln!(out, "tensor\t{name}\t{}\t{}", m.rows(), m.cols());
            let vals: Vec<String> = m.as_slice().iter().map(|v| v.to_string()).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == CHECKPOINT_MAGIC => {}
            _ => return Err(Error::parse(1, "not an asgat checkpoint")),
        }
        let mut ck = Checkpoint::default();
        while let Some((ln, line)) = lines.next() {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["config", k, v] => {
                    if ck.header.insert(k.to_string(), v.to_string()).is_some() {
                        return Err(Error::parse(ln, format!("duplicate config key `{k}`")));
                    }
                }
                ["tensor", name, r, c] => {
                    let rows: usize = r.parse().map_err(|_| Error::parse(ln, "bad row count"))?;
                    let cols: usize = c.parse().map_err(|_| Error::parse(ln, "bad column count"))?;
                    let (vl, vline) = lines.next().ok_or_else(|| Error::parse(ln + 1, "missing tensor values"))?;
                    let vals = vline
                        .split(' ')
                        .filter(|t| !t.is_empty())
                        .map(|t| {
                            t.parse::<f64>()
                                .ok()
                                .filter(|v| v.is_finite())
                                .ok_or_else(|| Error::parse(vl, format!("invalid number `{t}`")))
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    if Some(vals.len()) != rows.checked_mul(cols) {
                        return Err(Error::parse(vl, format!("expected {rows}×{cols} values, got {}", vals.len())));
                    }
                    if ck.tensors.iter().any(|(n, _)| n == name) {
                        return Err(Error::parse(ln, format!("duplicate tensor `{name}`")));
                    }
                    ck.tensors.push((name.to_string(), Matrix::from_vec(rows, cols, vals)?));
                }
                [""] => {}
                _ => return Err(Error::parse(ln, "expected a `config` or `tensor` line")),
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
