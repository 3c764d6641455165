//! Shifted Chebyshev expansion of a spectral filter.
//!
//! With `a = λ_max / 2` the basis is `T̄_0 = I`, `T̄_1 = (L − aI)/a`,
//! `T̄_i = 2(L − aI)/a · T̄_{i−1} − T̄_{i−2}` and the filter is
//! `g(L) ≈ ½c_0 I + Σ_{i≥1} c_i T̄_i(L)`. Coefficients come from `S = R + 1`
//! cosine-spaced samples of `g` over `[0, λ_max]`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymOperator};

/// Upper end of the normalized Laplacian spectrum.
pub const LAMBDA_MAX: f64 = 2.0;

/// Fitted coefficients: `coeffs` is `(R+1) × M`, column `h` is head `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebFilter {
    pub order: usize,
    pub coeffs: Matrix,
    pub lambda_max: f64,
}

/// The `S = R + 1` sample abscissae `λ_m = (λ_max/2)(cos(π(m − ½)/S) + 1)`.
pub fn sample_points(order: usize) -> Vec<f64> {
    let s = order + 1;
    (1..=s)
        .map(|m| {
            let theta = PI * (m as f64 - 0.5) / s as f64;
            0.5 * LAMBDA_MAX * (theta.cos() + 1.0)
        })
        .collect()
}

/// Linear map from samples to coefficients: `c = map · g(λ_m)`, shape
/// `(R+1) × S`.
pub fn coefficient_map(order: usize) -> Matrix {
    let s = order + 1;
    Matrix::from_fn(order + 1, s, |i, m| {
        let theta = PI * (m as f64 + 0.5) / s as f64;
        2.0 / s as f64 * (i as f64 * theta).cos()
    })
}

impl ChebFilter {
    /// Coefficients from a `S × M` matrix of samples taken at [`sample_points`].
    pub fn from_samples(order: usize, samples: &Matrix) -> Result<Self> {
        if order < 1 {
            return Err(Error::Validation("Chebyshev order must be at least 1".into()));
        }
        if samples.rows() != order + 1 {
            return Err(Error::Shape(format!(
                "expected {} samples, got {}",
                order + 1,
                samples.rows()
            )));
        }
        if !samples.is_finite() {
            return Err(Error::Numeric("filter response is non-finite at a sample point".into()));
        }
        Ok(Self {
            order,
            coeffs: coefficient_map(order).matmul(samples),
            lambda_max: LAMBDA_MAX,
        })
    }

    pub fn head_count(&self) -> usize {
        self.coeffs.cols()
    }

    /// Evaluates the truncated series at a scalar `λ`.
    pub fn evaluate(&self, lambda: f64, head: usize) -> f64 {
        let a = 0.5 * self.lambda_max;
        let x = (lambda - a) / a;
        let c = |i: usize| self.coeffs[(i, head)];
        let mut t_prev = 1.0;
        let mut t_cur = x;
        let mut acc = 0.5 * c(0) + c(1) * x;
        for i in 2..=self.order {
            let t_next = 2.0 * x * t_cur - t_prev;
            acc += c(i) * t_next;
            t_prev = t_cur;
            t_cur = t_next;
        }
        acc
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("cheb\t{}\t{}\t{}\n", self.order, self.head_count(), self.lambda_max);
        for h in 0..self.head_count() {
            let _ = write!(out, "{h}\t");
            let vals: Vec<String> = self.coeffs.column(h).iter().map(|v| v.to_string()).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty input"))?;
        let f: Vec<&str> = header.split('\t').collect();
        if f.len() != 4 || f[0] != "cheb" {
            return Err(Error::parse(1, "header must be `cheb<TAB>R<TAB>M<TAB>lambda_max`"));
        }
        let order: usize = f[1].parse().map_err(|_| Error::parse(1, "bad order"))?;
        let heads: usize = f[2].parse().map_err(|_| Error::parse(1, "bad head count"))?;
        let lambda_max: f64 = f[3].parse().map_err(|_| Error::parse(1, "bad lambda_max"))?;
        if order < 1 || !(lambda_max > 0.0) || !lambda_max.is_finite() {
            return Err(Error::parse(1, "order must be ≥ 1 and lambda_max positive"));
        }
        if heads > text.len() || order > text.len() {
            return Err(Error::parse(1, "header sizes exceed input"));
        }
        let mut coeffs = Matrix::zeros(order + 1, heads);
        for h in 0..heads {
            let (ln, line) = lines.next().ok_or_else(|| Error::parse(h + 2, "missing head line"))?;
            let (idx, vals) = line.split_once('\t').ok_or_else(|| Error::parse(ln, "expected `head<TAB>coeffs`"))?;
            if idx.parse::<usize>().ok() != Some(h) {
                return Err(Error::parse(ln, format!("expected head index {h}")));
            }
            let vals = parse_floats(vals, ln)?;
            if vals.len() != order + 1 {
                return Err(Error::parse(ln, format!("expected {} coefficients", order + 1)));
            }
            coeffs.set_column(h, &vals);
        }
        Ok(Self {
            order,
            coeffs,
            lambda_max,
        })
    }
}

pub(crate) fn parse_floats(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split(' ')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(line, format!("invalid number `{t}`")))
        })
        .collect()
}

/// Fits coefficients for `heads` filters given as a closure `(λ, head) → g`.
pub fn chebyshev_fit(response: impl Fn(f64, usize) -> f64, heads: usize, order: usize) -> Result<ChebFilter> {
    if order < 1 {
        return Err(Error::Validation("Chebyshev order must be at least 1".into()));
    }
    let pts = sample_points(order);
    let samples = Matrix::from_fn(pts.len(), heads, |m, h| response(pts[m], h));
    ChebFilter::from_samples(order, &samples)
}

/// Iterates `T̄_i(L)·X` for `i = 0..=order`, one operator product per step
/// after the first.
pub struct ChebyshevTerms<'a, O: SymOperator + ?Sized> {
    op: &'a O,
    order: usize,
    a: f64,
    next: usize,
    prev: Matrix,
    cur: Matrix,
    scratch: Matrix,
}

impl<'a, O: SymOperator + ?Sized> ChebyshevTerms<'a, O> {
    pub fn new(op: &'a O, x: &Matrix, order: usize, lambda_max: f64) -> Self {
        Self {
            op,
            order,
            a: 0.5 * lambda_max,
            next: 0,
            prev: Matrix::zeros(x.rows(), x.cols()),
            cur: x.clone(),
            scratch: Matrix::zeros(x.rows(), x.cols()),
        }
    }

    /// Advances and returns `(i, T̄_i X)`, or `None` past `order`.
    pub fn next_term(&mut self) -> Option<(usize, &Matrix)> {
        let i = self.next;
        if i > self.order {
            return None;
        }
        self.next += 1;
        match i {
            0 => {}
            1 => {
                // T̄_1 X = (L X − a X) / a; `prev` keeps T̄_0 X.
                std::mem::swap(&mut self.prev, &mut self.cur);
                self.op.apply_into(&self.prev, &mut self.scratch);
                let inv = 1.0 / self.a;
                self.cur = self.scratch.zip_map(&self.prev, |lx, x| (lx - self.a * x) * inv);
            }
            _ => {
                self.op.apply_into(&self.cur, &mut self.scratch);
                let two_inv = 2.0 / self.a;
                let a = self.a;
                // T̄_{i} = 2(L − aI)/a · T̄_{i−1} − T̄_{i−2}, written into `prev`.
                for ((p, &lx), &c) in self
                    .prev
                    .as_mut_slice()
                    .iter_mut()
                    .zip(self.scratch.as_slice())
                    .zip(self.cur.as_slice())
                {
                    *p = two_inv * (lx - a * c) - *p;
                }
                std::mem::swap(&mut self.prev, &mut self.cur);
            }
        }
        Some((i, &self.cur))
    }
}

/// `(½c_0 I + Σ c_i T̄_i(L)) · X` for one head, using only operator products.
pub fn chebyshev_apply<O: SymOperator + ?Sized>(op: &O, f: &ChebFilter, head: usize, x: &Matrix) -> Result<Matrix> {
    if x.rows() != op.order() {
        return Err(Error::Shape(format!(
            "signal has {} rows for an operator of order {}",
            x.rows(),
            op.order()
        )));
    }
    if head >= f.head_count() {
        return Err(Error::Validation(format!("head {head} out of range")));
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut terms = ChebyshevTerms::new(op, x, f.order, f.lambda_max);
    while let Some((i, t)) = terms.next_term() {
        let c = f.coeffs[(i, head)];
        out.axpy(if i == 0 { 0.5 * c } else { c }, t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMatrix;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| LAMBDA_MAX * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn constant_response() {
        let f = chebyshev_fit(|_, _| 3.0, 1, 10).unwrap();
        assert!((f.coeffs[(0, 0)] - 6.0).abs() < 1e-12);
        assert!((1..=10).all(|i| f.coeffs[(i, 0)].abs() <= 1e-12));
    }

    #[test]
    fn linear_response_is_reproduced_for_every_order() {
        for order in 1..8 {
            let f = chebyshev_fit(|l, _| l, 1, order).unwrap();
            for l in grid(1024) {
                assert!((f.evaluate(l, 0) - l).abs() <= 1e-12, "order {order} at {l}");
            }
        }
    }

    #[test]
    fn heat_kernel_order_15() {
        let f = chebyshev_fit(|l, _| (-l).exp(), 1, 15).unwrap();
        let err = grid(1024)
            .into_iter()
            .map(|l| (f.evaluate(l, 0) - (-l).exp()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-9, "max error {err:e}");
    }

    #[test]
    fn order_zero_and_non_finite_rejected() {
        assert!(chebyshev_fit(|_, _| 1.0, 1, 0).is_err());
        assert!(matches!(chebyshev_fit(|l, _| 1.0 / (l - l), 1, 3), Err(Error::Numeric(_))));
    }

    #[test]
    fn identity_filter_returns_input() {
        let l = SymMatrix::from_lower(Matrix::from_fn(4, 4, |r, c| if r == c { 1.0 } else { -0.2 })).unwrap();
        let f = chebyshev_fit(|_, _| 1.0, 1, 15).unwrap();
        let x = Matrix::from_fn(4, 2, |r, c| (r + 2 * c) as f64);
        let y = chebyshev_apply(&l, &f, 0, &x).unwrap();
        assert!(y.sub(&x).max_abs() < 1e-8);
        assert!(chebyshev_apply(&l, &f, 0, &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn text_round_trip() {
        let f = chebyshev_fit(|l, h| (-(h as f64 + 1.0) * l).exp(), 2, 5).unwrap();
        assert_eq!(ChebFilter::parse(&f.to_text()).unwrap(), f);
        assert!(ChebFilter::parse("cheb\t3\t1\t2\n0\t1 2\n").is_err());
    }
}
