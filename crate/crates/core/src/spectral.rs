//! Dense symmetric eigendecomposition and exact spectral filtering.
//!
//! A filter `g` acts on the graph as `U · diag(g(Λ)) · Uᵀ`; row `v` of that
//! operator is the graph wavelet centred at node `v`.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{gemm, Matrix, SymMatrix};

/// Off-diagonal Frobenius tolerance, relative to `max(1, ‖A‖_F)`.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// Largest graph the exact backend accepts.
pub const EXACT_MAX_NODES: usize = 5000;

/// Eigenvalues in ascending order and the orthonormal eigenbasis (as columns).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    pub basis: Matrix,
}

impl Spectrum {
    pub fn order(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `‖UᵀU − I‖_max`.
    pub fn orthogonality_error(&self) -> f64 {
        let gram = self.basis.t_matmul(&self.basis);
        gram.sub(&Matrix::identity(self.order())).max_abs()
    }

    /// `U · diag(Λ) · Uᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.filter_matrix(&self.eigenvalues)
    }

    /// `U · diag(values) · Uᵀ` for an arbitrary per-eigenvalue response.
    pub fn filter_matrix(&self, values: &[f64]) -> Matrix {
        let n = self.order();
        let mut scaled = self.basis.clone();
        for r in 0..n {
            for (x, g) in scaled.row_mut(r).iter_mut().zip(values) {
                *x *= g;
            }
        }
        let mut out = Matrix::zeros(n, n);
        gemm(1.0, &scaled, false, &self.basis, true, 0.0, &mut out);
        out
    }

    /// `U · diag(values) · Uᵀ · x` without forming the N×N operator.
    pub fn filter_signal(&self, values: &[f64], x: &Matrix) -> Matrix {
        let mut coeffs = self.basis.t_matmul(x);
        for (i, g) in values.iter().enumerate() {
            coeffs.row_mut(i).iter_mut().for_each(|c| *c *= g);
        }
        self.basis.matmul(&coeffs)
    }
}

/// Per-eigenvalue, per-head filter values; entry `(i, h)` is `g_h(λ_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterResponse {
    pub values: Matrix,
}

impl FilterResponse {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::Numeric("filter response contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn from_fn(eigenvalues: &[f64], heads: usize, f: impl Fn(f64, usize) -> f64) -> Result<Self> {
        Self::new(Matrix::from_fn(eigenvalues.len(), heads, |i, h| f(eigenvalues[i], h)))
    }

    pub fn head_count(&self) -> usize {
        self.values.cols()
    }

    pub fn head(&self, h: usize) -> Vec<f64> {
        self.values.column(h)
    }
}

/// Low-pass heat kernel `exp(−s·λ)` as a single-head response.
pub fn heat_response(scale: f64, eigenvalues: &[f64]) -> Result<FilterResponse> {
    if !(scale >= 0.0) {
        return Err(Error::Validation(format!("heat scale must be nonnegative, got {scale}")));
    }
    FilterResponse::from_fn(eigenvalues, 1, |l, _| (-scale * l).exp())
}

/// Wavelet matrix `Ψ = U · diag(r[:, head]) · Uᵀ`.
pub fn apply_filter_exact(spectrum: &Spectrum, response: &FilterResponse, head: usize) -> Result<SymMatrix> {
    if response.values.rows() != spectrum.order() {
        return Err(Error::Shape(format!(
            "response has {} rows for a spectrum of order {}",
            response.values.rows(),
            spectrum.order()
        )));
    }
    if head >= response.head_count() {
        return Err(Error::Validation(format!(
            "head {head} out of range for {} heads",
            response.head_count()
        )));
    }
    SymMatrix::from_lower(spectrum.filter_matrix(&response.head(head)))
}

/// Cyclic Jacobi eigendecomposition of a dense symmetric matrix.
///
/// Eigenvalues come back ascending. Each eigenvector is signed so that its
/// largest-magnitude component (first one on ties) is nonnegative.
pub fn eigendecompose(l: &SymMatrix) -> Result<Spectrum> {
    let n = l.order();
    let mut a = l.as_matrix().clone();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(1.0);
    let threshold = JACOBI_TOLERANCE * scale;

    let mut converged = false;
    let mut residual = off_diagonal_norm(&a);
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if residual <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if theta.is_finite() {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    // |θ| overflowed: the rotation angle is ~1/(2θ).
                    0.5 / theta
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
        residual = off_diagonal_norm(&a);
    }
    if !converged && residual > threshold {
        return Err(Error::NoConvergence {
            sweeps: JACOBI_MAX_SWEEPS,
            residual,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]).then(i.cmp(&j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut basis = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let mut best = 0usize;
        for r in 0..n {
            if v[(r, src)].abs() > v[(best, src)].abs() {
                best = r;
            }
        }
        let sign = if v[(best, src)] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            basis[(r, col)] = sign * v[(r, src)];
        }
    }
    Ok(Spectrum { eigenvalues, basis })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Applies `A ← JᵀAJ`, `V ← VJ` for the plane rotation in `(p, q)`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    {
        let data = a.as_mut_slice();
        let (lo, hi) = data.split_at_mut(q * n);
        let row_p = &mut lo[p * n..(p + 1) * n];
        let row_q = &mut hi[..n];
        for (x, y) in row_p.iter_mut().zip(row_q.iter_mut()) {
            let (apk, aqk) = (*x, *y);
            *x = c * apk - s * aqk;
            *y = s * apk + c * aqk;
        }
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

const CACHE_MAGIC: &[u8; 8] = b"ASGATSPC";
const CACHE_VERSION: u32 = 1;

/// SHA-256 of the matrix order and its entries' little-endian bit patterns.
pub fn laplacian_hash(l: &SymMatrix) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((l.order() as u64).to_le_bytes());
    for v in l.as_matrix().as_slice() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Binary cache record: magic, version, N, key hash, Λ, then U row-major.
/// All integers and floats little-endian.
pub fn encode_spectrum_cache(key: &[u8; 32], s: &Spectrum) -> Vec<u8> {
    let n = s.order();
    let mut out = Vec::with_capacity(8 + 4 + 8 + 32 + 8 * (n + n * n));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(key);
    for v in s.eigenvalues.iter().chain(s.basis.as_slice()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_spectrum_cache(bytes: &[u8]) -> Result<([u8; 32], Spectrum)> {
    let bad = |msg: &str| Error::Validation(format!("spectrum cache: {msg}"));
    if bytes.len() < 52 || &bytes[..8] != CACHE_MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let key: [u8; 32] = bytes[20..52].try_into().expect("32 bytes");
    let body = &bytes[52..];
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(n)?.checked_add(n)?.checked_mul(8))
        .ok_or_else(|| bad("order overflows"))?;
    if body.len() != expected {
        return Err(bad("payload length does not match declared order"));
    }
    let n = n as usize;
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value"));
    }
    let eigenvalues = floats[..n].to_vec();
    let basis = Matrix::from_vec(n, n, floats[n..].to_vec())?;
    Ok((key, Spectrum { eigenvalues, basis }))
}

/// Eigendecomposes `l`, reusing `<dir>/<hash>.spectrum` when present.
pub fn eigendecompose_cached(l: &SymMatrix, dir: Option<&Path>) -> Result<Spectrum> {
    let Some(dir) = dir else {
        return eigendecompose(l);
    };
    let key = laplacian_hash(l);
    let hex: String = key.iter().map(|b| format!("{b:02x}")).collect();
    let path: PathBuf = dir.join(format!("{hex}.spectrum"));
    if let Ok(bytes) = std::fs::read(&path) {
        match decode_spectrum_cache(&bytes) {
            Ok((k, s)) if k == key && s.order() == l.order() => return Ok(s),
            _ => log::warn!("ignoring stale spectrum cache {}", path.display()),
        }
    }
    let s = eigendecompose(l)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(&path, encode_spectrum_cache(&key, &s)).map_err(|e| Error::io(&path, e))?;
    Ok(s)
}
