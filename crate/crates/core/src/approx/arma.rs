//! Rational (ARMA) approximation of a spectral filter,
//! `g̃(λ) = Σ_q b_q λ^q / (1 + Σ_p a_p λ^p)`, fitted on a uniform grid by
//! Sanathanan–Koerner iteration and applied with conjugate gradients.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::cg::conjugate_gradient;
use super::chebyshev::parse_floats;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymOperator};

/// Number of fitting abscissae on `[0, 2]`.
pub const GRID_POINTS: usize = 256;
/// Points used to check that the denominator stays away from zero.
pub const STABILITY_GRID_POINTS: usize = 1024;
/// Smallest denominator value accepted on the stability grid.
pub const MIN_DENOMINATOR: f64 = 1e-6;
/// Relative singular-value cutoff for the minimum-norm least-squares solves.
const RCOND: f64 = 1e-13;
pub const CG_TOLERANCE: f64 = 1e-8;

/// Uniform grid of `n` points over `[0, 2]`, both ends included.
pub fn uniform_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| 2.0 * i as f64 / (n - 1) as f64).collect(),
    }
}

/// One fitted rational filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmaHead {
    /// `b_0..b_Q`.
    pub numerator: Vec<f64>,
    /// `a_1..a_P`.
    pub denominator: Vec<f64>,
    /// Sum of squared grid residuals after each accepted iteration.
    pub residual_history: Vec<f64>,
}

impl ArmaHead {
    pub fn numerator_at(&self, lambda: f64) -> f64 {
        horner(&self.numerator, lambda)
    }

    pub fn denominator_at(&self, lambda: f64) -> f64 {
        1.0 + lambda * horner(&self.denominator, lambda)
    }

    pub fn evaluate(&self, lambda: f64) -> f64 {
        self.numerator_at(lambda) / self.denominator_at(lambda)
    }

    /// Minimum of the denominator over the stability grid.
    pub fn min_denominator(&self) -> f64 {
        uniform_grid(STABILITY_GRID_POINTS)
            .into_iter()
            .map(|l| self.denominator_at(l))
            .fold(f64::INFINITY, f64::min)
    }

    /// Sum of squared errors against `values` on `grid`.
    pub fn residual(&self, grid: &[f64], values: &[f64]) -> f64 {
        grid.iter().zip(values).map(|(&l, &g)| (self.evaluate(l) - g).powi(2)).sum()
    }

    pub fn is_stable(&self) -> bool {
        self.min_denominator() >= MIN_DENOMINATOR
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

/// Per-head rational filters sharing orders `P`, `Q` and iteration cap `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmaFilter {
    pub p: usize,
    pub q: usize,
    pub max_iters: usize,
    pub heads: Vec<ArmaHead>,
}

impl ArmaFilter {
    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("arma\t{}\t{}\t{}\t{}\n", self.p, self.q, self.max_iters, self.heads.len());
        for (h, head) in self.heads.iter().enumerate() {
            for (tag, vals) in [("a", &head.denominator), ("b", &head.numerator)] {
                let _ = write!(out, "{h}\t{tag}\t");
                let v: Vec<String> = vals.iter().map(|x| x.to_string()).collect();
                out.push_str(&v.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty input"))?;
        let f: Vec<&str> = header.split('\t').collect();
        if f.len() != 5 || f[0] != "arma" {
            return Err(Error::parse(1, "header must be `arma<TAB>P<TAB>Q<TAB>T<TAB>M`"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::parse(1, format!("bad integer `{s}`")));
        let (p, q, max_iters, m) = (num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
        if m > text.len() {
            return Err(Error::parse(1, "head count exceeds input"));
        }
        let mut heads = Vec::with_capacity(m);
        for h in 0..m {
            let mut take = |tag: &str, len: usize| -> Result<Vec<f64>> {
                let (ln, line) = lines.next().ok_or_else(|| Error::parse(0, "truncated input"))?;
                let mut parts = line.splitn(3, '\t');
                let idx = parts.next().and_then(|s| s.parse::<usize>().ok());
                let t = parts.next();
                if idx != Some(h) || t != Some(tag) {
                    return Err(Error::parse(ln, format!("expected `{h}<TAB>{tag}`")));
                }
                let vals = parse_floats(parts.next().unwrap_or(""), ln)?;
                if vals.len() != len {
                    return Err(Error::parse(ln, format!("expected {len} coefficients")));
                }
                Ok(vals)
            };
            let denominator = take("a", p)?;
            let numerator = take("b", q + 1)?;
            heads.push(ArmaHead {
                numerator,
                denominator,
                residual_history: Vec::new(),
            });
        }
        let filter = Self { p, q, max_iters, heads };
        for (h, head) in filter.heads.iter().enumerate() {
            if !head.is_stable() {
                return Err(Error::Numeric(format!("head {h}: denominator has a root in [0, 2]")));
            }
        }
        Ok(filter)
    }
}

/// Minimum-norm least squares `argmin ‖A x − b‖` via SVD.
fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) || !smax.is_finite() {
        return Err(Error::Numeric(
            "singular least-squares system; try lower P/Q orders".into(),
        ));
    }
    svd.solve(b, RCOND * smax)
        .map_err(|e| Error::Numeric(format!("least-squares solve failed ({e}); try lower P/Q orders")))
}

/// Fits one head. Iteration `k` solves the linearized problem
/// `min Σ_j w_j² (N(t_j) − g_j D(t_j))²` with `w_j = 1 / D_{k−1}(t_j)` in the
/// scaled variable `t = λ/2`. An iterate is accepted only if its true squared
/// residual does not increase and its denominator stays positive on `[0, 2]`;
/// the first rejected or stagnating iterate ends the fit. If even the first
/// iterate is unstable the result is the degree-`Q` polynomial fit.
pub fn arma_fit_head(grid: &[f64], values: &[f64], p: usize, q: usize, max_iters: usize) -> Result<ArmaHead> {
    if max_iters < 1 {
        return Err(Error::Validation("ARMA iteration count T must be at least 1".into()));
    }
    if grid.len() != values.len() {
        return Err(Error::Shape("grid and response lengths differ".into()));
    }
    if grid.len() < p.max(q) + 1 {
        return Err(Error::Numeric(format!(
            "{} grid points cannot determine orders P={p}, Q={q}; try lower P/Q orders",
            grid.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) || grid.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite response on the fitting grid".into()));
    }

    let t: Vec<f64> = grid.iter().map(|l| 0.5 * l).collect();
    let n = t.len();
    let mut weights = vec![1.0; n];
    let mut best: Option<ArmaHead> = None;
    let mut history = Vec::new();

    for _ in 0..max_iters {
        let mut a = DMatrix::<f64>::zeros(n, q + 1 + p);
        let mut rhs = DVector::<f64>::zeros(n);
        for j in 0..n {
            let w = weights[j];
            let mut pw = 1.0;
            for k in 0..=q {
                a[(j, k)] = w * pw;
                pw *= t[j];
            }
            let mut pw = t[j];
            for k in 0..p {
                a[(j, q + 1 + k)] = -w * values[j] * pw;
                pw *= t[j];
            }
            rhs[j] = w * values[j];
        }
        let sol = lstsq(&a, &rhs)?;
        // Back to powers of λ: coefficient of t^k = λ^k / 2^k.
        let numerator: Vec<f64> = (0..=q).map(|k| sol[k] / 2f64.powi(k as i32)).collect();
        let denominator: Vec<f64> = (0..p).map(|k| sol[q + 1 + k] / 2f64.powi(k as i32 + 1)).collect();
        let candidate = ArmaHead {
            numerator,
            denominator,
            residual_history: Vec::new(),
        };
        if !candidate.is_stable() || candidate.numerator.iter().chain(&candidate.denominator).any(|v| !v.is_finite()) {
            if best.is_none() {
                // No stable rational start: use the order-Q polynomial fit,
                // whose denominator is identically 1.
                let poly = polynomial_fit(&t, values, p, q)?;
                history.push(poly.residual(grid, values));
                best = Some(poly);
            }
            break;
        }
        let residual = candidate.residual(grid, values);
        let previous = history.last().copied();
        if let Some(prev) = previous {
            if residual > prev {
                break;
            }
        }
        history.push(residual);
        for (w, &l) in weights.iter_mut().zip(grid) {
            *w = 1.0 / candidate.denominator_at(l);
        }
        best = Some(candidate);
        if let Some(prev) = previous {
            if prev - residual <= 1e-12 * prev.max(f64::MIN_POSITIVE) {
                break;
            }
        }
    }
    let mut head = best.expect("first iterate is either accepted or returns an error");
    head.residual_history = history;
    Ok(head)
}

fn polynomial_fit(t: &[f64], values: &[f64], p: usize, q: usize) -> Result<ArmaHead> {
    let a = DMatrix::<f64>::from_fn(t.len(), q + 1, |j, k| t[j].powi(k as i32));
    let sol = lstsq(&a, &DVector::from_column_slice(values))?;
    Ok(ArmaHead {
        numerator: (0..=q).map(|k| sol[k] / 2f64.powi(k as i32)).collect(),
        denominator: vec![0.0; p],
        residual_history: Vec::new(),
    })
}

/// Fits every column of `response` (`grid.len() × M`).
pub fn arma_fit(grid: &[f64], response: &Matrix, p: usize, q: usize, max_iters: usize) -> Result<ArmaFilter> {
    if response.rows() != grid.len() {
        return Err(Error::Shape(format!(
            "response has {} rows for {} grid points",
            response.rows(),
            grid.len()
        )));
    }
    let heads = (0..response.cols())
        .map(|h| arma_fit_head(grid, &response.column(h), p, q, max_iters))
        .collect::<Result<Vec<_>>>()?;
    Ok(ArmaFilter { p, q, max_iters, heads })
}

/// Linear map from grid samples to numerator coefficients with the
/// denominator held fixed: `b = map · g`, shape `(Q+1) × G`.
///
/// This is the final numerator solve of the fit, and it is what gradients of
/// the filter parameters pass through during training.
pub fn numerator_map(grid: &[f64], denominator: &[f64], q: usize) -> Result<Matrix> {
    let n = grid.len();
    let d: Vec<f64> = grid.iter().map(|&l| 1.0 + l * horner(denominator, l)).collect();
    let mut a = DMatrix::<f64>::zeros(n, q + 1);
    for j in 0..n {
        let t = 0.5 * grid[j];
        let mut pw = 1.0;
        for k in 0..=q {
            a[(j, k)] = pw / d[j];
            pw *= t;
        }
    }
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let pinv = svd
        .pseudo_inverse(RCOND * smax)
        .map_err(|e| Error::Numeric(format!("numerator map: {e}")))?;
    Ok(Matrix::from_fn(q + 1, n, |k, j| pinv[(k, j)] / 2f64.powi(k as i32)))
}

/// `out = poly(L) · x` by Horner's rule, where `poly(λ) = Σ c_k λ^k`.
fn poly_apply<O: SymOperator + ?Sized>(op: &O, coeffs: &[f64], x: &[f64], out: &mut [f64], tmp: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (k, &c) in coeffs.iter().enumerate().rev() {
        if k + 1 < coeffs.len() {
            op.apply_vec(out, tmp);
            out.copy_from_slice(tmp);
        }
        for (o, xi) in out.iter_mut().zip(x) {
            *o += c * xi;
        }
    }
}

/// Solves `(I + Σ a_p L^p) y = (Σ b_q L^q) x` for every column of `x`.
pub fn arma_apply<O: SymOperator + ?Sized>(op: &O, f: &ArmaFilter, head: usize, x: &Matrix) -> Result<Matrix> {
    if x.rows() != op.order() {
        return Err(Error::Shape(format!(
            "signal has {} rows for an operator of order {}",
            x.rows(),
            op.order()
        )));
    }
    let h = f
        .heads
        .get(head)
        .ok_or_else(|| Error::Validation(format!("head {head} out of range")))?;
    if !h.is_stable() {
        return Err(Error::Numeric("denominator has a root in [0, 2]".into()));
    }
    let n = op.order();
    let mut out = Matrix::zeros(n, x.cols());
    let mut rhs = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for c in 0..x.cols() {
        let col = x.column(c);
        poly_apply(op, &h.numerator, &col, &mut rhs, &mut tmp);
        let y = solve_denominator(op, &h.denominator, &rhs)?;
        out.set_column(c, &y);
    }
    Ok(out)
}

/// CG solve of `(I + Σ a_p L^p) y = rhs`.
pub fn solve_denominator<O: SymOperator + ?Sized>(op: &O, denominator: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = op.order();
    let mut dcoef = Vec::with_capacity(denominator.len() + 1);
    dcoef.push(1.0);
    dcoef.extend_from_slice(denominator);
    let mut tmp = vec![0.0; n];
    let sol = conjugate_gradient(
        |v, out| poly_apply(op, &dcoef, v, out, &mut tmp),
        rhs,
        CG_TOLERANCE,
        (10 * n).max(10),
    )?;
    Ok(sol.x)
}
