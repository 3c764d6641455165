//! The ASGAT network: learned spectral filters, top-k wavelet attention and
//! two shared-weight aggregation layers.
//!
//! Per forward pass the filter MLP is evaluated at the points the backend
//! needs (eigenvalues, Chebyshev sample points or the ARMA fitting grid), one
//! wavelet operator `Ψ_h` is materialized per head, each row keeps its `k`
//! largest entries and a softmax over those entries gives the attention
//! weights. Both layers share that attention set.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::approx::arma::{arma_fit_head, numerator_map, solve_denominator, uniform_grid, GRID_POINTS};
use crate::approx::chebyshev::{coefficient_map, sample_points, ChebyshevTerms, LAMBDA_MAX};
use crate::autodiff::{glorot, masked_softmax, Checkpoint, CustomOp, MlpFilterParams, MlpVars, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{normalized_laplacian, normalized_laplacian_sparse, Graph};
use crate::linalg::{gemm_strided, CsrMatrix, Matrix, SymOperator};
use crate::spectral::{eigendecompose_cached, Spectrum, EXACT_MAX_NODES};

/// Largest number of `N × N` floats a backend may keep resident between
/// passes (Chebyshev terms, Laplacian powers).
pub const DENSE_CACHE_BUDGET: usize = 128 * 1024 * 1024;

/// How the wavelet operators are computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Backend {
    /// Full eigendecomposition, `Ψ = U g(Λ) Uᵀ`.
    Exact,
    /// Chebyshev expansion of order `R`.
    Chebyshev { order: usize },
    /// Rational fit with orders `P`, `Q` and at most `T` iterations, refitted
    /// on every forward pass.
    Arma { p: usize, q: usize, iters: usize },
    /// Fixed heat kernel `e^{−sλ}`; the filter MLP is not used.
    Heat { scale: f64 },
}

impl Backend {
    pub const DEFAULT_CHEB_ORDER: usize = 15;
    pub const DEFAULT_ARMA: (usize, usize, usize) = (12, 18, 30);

    pub fn name(&self) -> &'static str {
        match self {
            Backend::Exact => "exact",
            Backend::Chebyshev { .. } => "cheb",
            Backend::Arma { .. } => "arma",
            Backend::Heat { .. } => "heat",
        }
    }

    /// Backend by name with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        let (p, q, iters) = Self::DEFAULT_ARMA;
        Ok(match name {
            "exact" => Backend::Exact,
            "cheb" | "chebyshev" => Backend::Chebyshev {
                order: Self::DEFAULT_CHEB_ORDER,
            },
            "arma" => Backend::Arma { p, q, iters },
            "heat" => Backend::Heat { scale: 1.0 },
            other => return Err(Error::Config(format!("unknown backend `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Backend::Chebyshev { order } if order < 1 => {
                Err(Error::Config("Chebyshev order must be at least 1".into()))
            }
            Backend::Arma { iters, .. } if iters < 1 => Err(Error::Config("ARMA iterations must be at least 1".into())),
            Backend::Arma { p, q, .. } if p.max(q) + 1 > GRID_POINTS => {
                Err(Error::Config(format!("ARMA orders exceed the {GRID_POINTS}-point grid")))
            }
            Backend::Heat { scale } if !(scale >= 0.0) || !scale.is_finite() => {
                Err(Error::Config("heat scale must be finite and ≥ 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn learns_filter(&self) -> bool {
        !matches!(self, Backend::Heat { .. })
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AsgatConfig {
    pub heads: usize,
    pub k: usize,
    pub hidden: usize,
    pub filter_hidden: usize,
    pub dropout: f64,
    pub backend: Backend,
    pub feature_dim: usize,
    pub class_count: usize,
}

impl AsgatConfig {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        if self.heads < 1 {
            return Err(Error::Config("at least one head is required".into()));
        }
        if self.k < 1 || self.k > num_nodes {
            return Err(Error::Config(format!("k = {} outside [1, {num_nodes}]", self.k)));
        }
        if self.hidden < 1 || self.filter_hidden < 1 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.class_count < 1 || self.feature_dim < 1 {
            return Err(Error::Config("feature and class counts must be positive".into()));
        }
        self.backend.validate()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("heads", self.heads.to_string());
        put("k", self.k.to_string());
        put("hidden", self.hidden.to_string());
        put("filter_hidden", self.filter_hidden.to_string());
        put("dropout", self.dropout.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("class_count", self.class_count.to_string());
        put("backend", self.backend.name().to_string());
        match self.backend {
            Backend::Chebyshev { order } => put("cheb_order", order.to_string()),
            Backend::Arma { p, q, iters } => {
                put("arma_p", p.to_string());
                put("arma_q", q.to_string());
                put("arma_iters", iters.to_string());
            }
            Backend::Heat { scale } => put("heat_scale", scale.to_string()),
            Backend::Exact => {}
        }
        m
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let v = m.get(key).ok_or_else(|| Error::Config(format!("missing `{key}`")))?;
            v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let backend = match m.get("backend").map(String::as_str) {
            Some("exact") => Backend::Exact,
            Some("cheb") => Backend::Chebyshev {
                order: get(m, "cheb_order")?,
            },
            Some("arma") => Backend::Arma {
                p: get(m, "arma_p")?,
                q: get(m, "arma_q")?,
                iters: get(m, "arma_iters")?,
            },
            Some("heat") => Backend::Heat {
                scale: get(m, "heat_scale")?,
            },
            other => return Err(Error::Config(format!("bad backend {other:?}"))),
        };
        Ok(Self {
            heads: get(m, "heads")?,
            k: get(m, "k")?,
            hidden: get(m, "hidden")?,
            filter_hidden: get(m, "filter_hidden")?,
            dropout: get(m, "dropout")?,
            backend,
            feature_dim: get(m, "feature_dim")?,
            class_count: get(m, "class_count")?,
        })
    }
}

/// Everything about a graph that stays fixed across forward passes.
pub struct GraphContext {
    num_nodes: usize,
    features: Matrix,
    laplacian: Arc<CsrMatrix>,
    spectrum: Option<Arc<Spectrum>>,
    /// Row `i` holds `T̄_i(L)` flattened row-major.
    cheb_terms: Option<Arc<Matrix>>,
    powers: Option<Arc<Vec<Matrix>>>,
    backend: Backend,
}

impl GraphContext {
    /// Prepares `g` for `backend`. Features are row-normalized when
    /// `normalize_features` is set. The exact and heat backends compute (or
    /// load from `cache_dir`) the eigendecomposition.
    pub fn new(g: &Graph, backend: Backend, normalize_features: bool, cache_dir: Option<&Path>) -> Result<Self> {
        backend.validate()?;
        let n = g.num_nodes();
        let features = if normalize_features {
            g.with_row_normalized_features().features().clone()
        } else {
            g.features().clone()
        };
        let laplacian = Arc::new(normalized_laplacian_sparse(g));
        let needs_spectrum = match backend {
            Backend::Exact => {
                if n > EXACT_MAX_NODES {
                    return Err(Error::Validation(format!(
                        "exact backend supports at most {EXACT_MAX_NODES} nodes, graph has {n}; use cheb or arma"
                    )));
                }
                true
            }
            Backend::Heat { .. } => n <= EXACT_MAX_NODES,
            _ => false,
        };
        let spectrum = if needs_spectrum {
            Some(Arc::new(eigendecompose_cached(&normalized_laplacian(g), cache_dir)?))
        } else {
            None
        };
        let cheb_order = match backend {
            Backend::Chebyshev { order } => Some(order),
            Backend::Heat { .. } if spectrum.is_none() => Some(Backend::DEFAULT_CHEB_ORDER),
            _ => None,
        };
        let cheb_terms = match cheb_order {
            Some(order) if (order + 1).saturating_mul(n * n) <= DENSE_CACHE_BUDGET => {
                let mut terms = Matrix::zeros(order + 1, n * n);
                let mut it = ChebyshevTerms::new(laplacian.as_ref(), &Matrix::identity(n), order, LAMBDA_MAX);
                while let Some((i, t)) = it.next_term() {
                    terms.row_mut(i).copy_from_slice(t.as_slice());
                }
                Some(Arc::new(terms))
            }
            _ => None,
        };
        let powers = match backend {
            Backend::Arma { q, .. } => {
                if (q + 1).saturating_mul(n * n) > DENSE_CACHE_BUDGET {
                    return Err(Error::Validation(format!(
                        "ARMA backend needs {} dense {n}×{n} Laplacian powers, over budget; use cheb",
                        q + 1
                    )));
                }
                let mut p = vec![Matrix::identity(n)];
                for _ in 0..q {
                    let next = laplacian.apply(p.last().expect("nonempty"));
                    p.push(next);
                }
                Some(Arc::new(p))
            }
            _ => None,
        };
        Ok(Self {
            num_nodes: n,
            features,
            laplacian,
            spectrum,
            cheb_terms,
            powers,
            backend,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn spectrum(&self) -> Option<&Spectrum> {
        self.spectrum.as_deref()
    }

    /// Points at which the filter response is evaluated for this backend.
    pub fn response_points(&self) -> Vec<f64> {
        match self.backend {
            Backend::Exact => self.spectrum.as_ref().expect("exact has a spectrum").eigenvalues.clone(),
            Backend::Chebyshev { order } => sample_points(order),
            Backend::Arma { .. } => uniform_grid(GRID_POINTS),
            Backend::Heat { .. } => match &self.spectrum {
                Some(s) => s.eigenvalues.clone(),
                None => sample_points(Backend::DEFAULT_CHEB_ORDER),
            },
        }
    }
}

/// Column indices of the kept wavelet entries, laid out `[node][head][slot]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionIndex {
    pub num_nodes: usize,
    pub heads: usize,
    pub k: usize,
    pub cols: Vec<usize>,
}

impl AttentionIndex {
    pub fn stride(&self) -> usize {
        self.heads * self.k
    }

    pub fn col(&self, v: usize, h: usize, j: usize) -> usize {
        self.cols[v * self.stride() + h * self.k + j]
    }
}

/// Row-stochastic sparse attention per head: `weights` is `N × (M·k)` with
/// entry `(v, h·k + j)` the weight of node `index.col(v, h, j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSet {
    pub index: Arc<AttentionIndex>,
    pub weights: Matrix,
}

impl AttentionSet {
    pub fn head_count(&self) -> usize {
        self.index.heads
    }

    pub fn k(&self) -> usize {
        self.index.k
    }

    pub fn head_dense(&self, h: usize) -> Matrix {
        let n = self.index.num_nodes;
        let k = self.index.k;
        let mut out = Matrix::zeros(n, n);
        for v in 0..n {
            for j in 0..k {
                out[(v, self.index.col(v, h, j))] += self.weights[(v, h * k + j)];
            }
        }
        out
    }

    /// Largest `|Σ_u a_vu − 1|` over all rows and heads.
    pub fn row_sum_error(&self) -> f64 {
        let k = self.index.k;
        let mut worst = 0.0f64;
        for v in 0..self.index.num_nodes {
            for h in 0..self.index.heads {
                let s: f64 = self.weights.row(v)[h * k..(h + 1) * k].iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    /// Largest count of strictly positive weights in any row of any head.
    pub fn max_row_support(&self) -> usize {
        let k = self.index.k;
        let mut worst = 0;
        for v in 0..self.index.num_nodes {
            for h in 0..self.index.heads {
                let c = self.weights.row(v)[h * k..(h + 1) * k].iter().filter(|&&w| w > 0.0).count();
                worst = worst.max(c);
            }
        }
        worst
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.as_slice().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Mean over heads of (entries in the kept support) / N².
    pub fn density(&self) -> f64 {
        let n = self.index.num_nodes as f64;
        (self.index.k as f64 * n) / (n * n)
    }

    pub fn check(&self, tol: f64) -> Result<()> {
        let err = self.row_sum_error();
        if err > tol || self.max_row_support() > self.k() || self.min_weight() < 0.0 {
            return Err(Error::Numeric(format!(
                "attention invariant violated: row-sum error {err:e}, support {} for k = {}",
                self.max_row_support(),
                self.k()
            )));
        }
        Ok(())
    }
}

/// Entries closer than this fraction of the row's largest magnitude count as
/// ties. Wavelet rows of graphs with symmetric nodes contain entries that are
/// equal in exact arithmetic but differ in the last bits.
pub const TIE_TOLERANCE: f64 = 1e-10;

/// Indices of the `k` largest entries of `row`, ties toward the smaller
/// index, returned in ascending index order.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let n = row.len();
    if k >= n {
        return (0..n).collect();
    }
    if k == 0 {
        return Vec::new();
    }
    let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let quantum = scale * TIE_TOLERANCE;
    let key = |v: f64| if quantum > 0.0 { (v / quantum).round() as i64 } else { 0 };
    // Best-first (key descending). Scanning in index order means an equal
    // key never displaces an entry, which gives ties to the smaller index.
    let mut best: Vec<(i64, usize)> = Vec::with_capacity(k + 1);
    for (u, &v) in row.iter().enumerate() {
        let kv = key(v);
        if best.len() == k && kv <= best[k - 1].0 {
            continue;
        }
        let pos = best.partition_point(|&(b, _)| b >= kv);
        best.insert(pos, (kv, u));
        best.truncate(k);
    }
    let mut idx: Vec<usize> = best.into_iter().map(|(_, u)| u).collect();
    idx.sort_unstable();
    idx
}

/// Keeps the `k` largest entries of `row` and replaces the rest with `−∞`.
pub fn topk_sparsify(row: &[f64], k: usize) -> Result<Vec<f64>> {
    if k < 1 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let mut out = vec![f64::NEG_INFINITY; row.len()];
    for i in topk_indices(row, k.min(row.len())) {
        out[i] = row[i];
    }
    Ok(out)
}

fn check_finite(psi: &Matrix, h: usize) -> Result<()> {
    if psi.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("wavelet matrix of head {h} has non-finite entries")))
    }
}

/// Selects the top-`k` entries of every row of `psi` into head `h` of
/// (`cols`, `values`).
fn select_head(psi: &Matrix, h: usize, heads: usize, k: usize, cols: &mut [usize], values: &mut Matrix) {
    for v in 0..psi.rows() {
        select_row(psi.row(v), v, h, heads, k, cols, values);
    }
}

fn select_row(row: &[f64], v: usize, h: usize, heads: usize, k: usize, cols: &mut [usize], values: &mut Matrix) {
    let stride = heads * k;
    for (j, u) in topk_indices(row, k).into_iter().enumerate() {
        cols[v * stride + h * k + j] = u;
        values[(v, h * k + j)] = row[u];
    }
}

const ROW_BLOCK: usize = 32;

/// Top-`k` selection of `Ψ_h = ½c₀T₀ + Σ cᵢTᵢ` from cached terms, built
/// `ROW_BLOCK` rows at a time so the full `Ψ_h` is never stored.
fn cheb_select_cached(terms: &Matrix, n: usize, c: &Matrix, k: usize, cols: &mut [usize], values: &mut Matrix) -> Result<()> {
    let heads = c.cols();
    let order = terms.rows();
    // Weights as heads × terms, with the halved constant term folded in.
    let a = Matrix::from_fn(heads, order, |h, i| if i == 0 { 0.5 } else { 1.0 } * c[(i, h)]);
    let mut buf = vec![0.0; heads * ROW_BLOCK * n];
    for start in (0..n).step_by(ROW_BLOCK) {
        let rows = ROW_BLOCK.min(n - start);
        let len = rows * n;
        gemm_strided(heads, order, len, a.as_slice(), &terms.as_slice()[start * n..], n * n, &mut buf);
        for h in 0..heads {
            let b = &buf[h * len..(h + 1) * len];
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("wavelet matrix of head {h} has non-finite entries")));
            }
            for r in 0..rows {
                select_row(&b[r * n..(r + 1) * n], start + r, h, heads, k, cols, values);
            }
        }
    }
    Ok(())
}

/// `masked_softmax ∘ topk_sparsify` applied to every row of every head.
pub fn build_attention(psi: &[Matrix], k: usize) -> Result<AttentionSet> {
    let heads = psi.len();
    let n = psi.first().map(Matrix::rows).ok_or_else(|| Error::Shape("no heads".into()))?;
    if k < 1 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    let k = k.min(n);
    let mut cols = vec![0; n * heads * k];
    let mut weights = Matrix::zeros(n, heads * k);
    for (h, p) in psi.iter().enumerate() {
        if p.shape() != (n, n) {
            return Err(Error::Shape(format!("head {h} wavelet is {:?}, expected {n}×{n}", p.shape())));
        }
        check_finite(p, h)?;
        select_head(p, h, heads, k, &mut cols, &mut weights);
    }
    for v in 0..n {
        for h in 0..heads {
            let seg = &mut weights.row_mut(v)[h * k..(h + 1) * k];
            let sm = masked_softmax(seg)?;
            seg.copy_from_slice(&sm);
        }
    }
    Ok(AttentionSet {
        index: Arc::new(AttentionIndex {
            num_nodes: n,
            heads,
            k,
            cols,
        }),
        weights,
    })
}

/// Sparse `G_h` (the gradient w.r.t. kept entries of head `h`) times a dense
/// matrix with `n` rows.
fn sparse_grad_matmul(index: &AttentionIndex, g: &Matrix, h: usize, rhs: &Matrix) -> Matrix {
    let k = index.k;
    let d = rhs.cols();
    let mut out = Matrix::zeros(index.num_nodes, d);
    for v in 0..index.num_nodes {
        let orow = out.row_mut(v);
        for j in 0..k {
            let gv = g[(v, h * k + j)];
            if gv == 0.0 {
                continue;
            }
            for (o, r) in orow.iter_mut().zip(rhs.row(index.col(v, h, j))) {
                *o += gv * r;
            }
        }
    }
    out
}

/// `Σ_{kept (v,u)} G[v, u] · T[v, u]` for head `h`.
fn gather_dot(index: &AttentionIndex, g: &Matrix, h: usize, t: &[f64]) -> f64 {
    let k = index.k;
    let n = index.num_nodes;
    let mut s = 0.0;
    for v in 0..n {
        let trow = &t[v * n..(v + 1) * n];
        for j in 0..k {
            s += g[(v, h * k + j)] * trow[index.col(v, h, j)];
        }
    }
    s
}

struct ExactWaveletOp {
    spectrum: Arc<Spectrum>,
    index: Arc<AttentionIndex>,
}

impl CustomOp for ExactWaveletOp {
    fn name(&self) -> &'static str {
        "exact_wavelet_topk"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let u = &self.spectrum.basis;
        let n = u.rows();
        let heads = inputs[0].cols();
        let mut dr = Matrix::zeros(n, heads);
        for h in 0..heads {
            // dr_i = Σ_v U[v,i] (G_h U)[v,i]
            let y = sparse_grad_matmul(&self.index, grad, h, u);
            for v in 0..n {
                for (i, (a, b)) in u.row(v).iter().zip(y.row(v)).enumerate() {
                    dr[(i, h)] += a * b;
                }
            }
        }
        Ok(vec![Some(dr)])
    }
}

struct ChebWaveletOp {
    laplacian: Arc<CsrMatrix>,
    terms: Option<Arc<Matrix>>,
    order: usize,
    index: Arc<AttentionIndex>,
}

impl ChebWaveletOp {
    fn for_each_term(&self, mut f: impl FnMut(usize, &[f64])) {
        match &self.terms {
            Some(terms) => (0..terms.rows()).for_each(|i| f(i, terms.row(i))),
            None => {
                let n = self.laplacian.order();
                let mut it = ChebyshevTerms::new(self.laplacian.as_ref(), &Matrix::identity(n), self.order, LAMBDA_MAX);
                while let Some((i, t)) = it.next_term() {
                    f(i, t.as_slice());
                }
            }
        }
    }
}

impl CustomOp for ChebWaveletOp {
    fn name(&self) -> &'static str {
        "cheb_wavelet_topk"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let heads = inputs[0].cols();
        let mut dc = Matrix::zeros(self.order + 1, heads);
        self.for_each_term(|i, t| {
            let w = if i == 0 { 0.5 } else { 1.0 };
            for h in 0..heads {
                dc[(i, h)] = w * gather_dot(&self.index, grad, h, t);
            }
        });
        Ok(vec![Some(dc)])
    }
}

struct ArmaWaveletOp {
    laplacian: Arc<CsrMatrix>,
    powers: Arc<Vec<Matrix>>,
    denominators: Vec<Vec<f64>>,
    numerator_maps: Vec<Matrix>,
    index: Arc<AttentionIndex>,
}

impl CustomOp for ArmaWaveletOp {
    fn name(&self) -> &'static str {
        "arma_wavelet_topk"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let heads = inputs[0].cols();
        let n = self.index.num_nodes;
        let k = self.index.k;
        let mut dr = Matrix::zeros(inputs[0].rows(), heads);
        for h in 0..heads {
            // Z = D_h(L)^{-1} G_h, then db_q = ⟨Z, L^q⟩.
            let mut gcols = Matrix::zeros(n, n);
            for v in 0..n {
                for j in 0..k {
                    gcols[(v, self.index.col(v, h, j))] += grad[(v, h * k + j)];
                }
            }
            let mut z = Matrix::zeros(n, n);
            for c in 0..n {
                let col = gcols.column(c);
                if col.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let y = solve_denominator(self.laplacian.as_ref(), &self.denominators[h], &col)?;
                z.set_column(c, &y);
            }
            let db: Vec<f64> = self
                .powers
                .iter()
                .map(|p| p.as_slice().iter().zip(z.as_slice()).map(|(a, b)| a * b).sum())
                .collect();
            let map = &self.numerator_maps[h];
            for g in 0..map.cols() {
                dr[(g, h)] = (0..map.rows()).map(|q| map[(q, g)] * db[q]).sum();
            }
        }
        Ok(vec![Some(dr)])
    }
}

/// Which heads of a layer are combined how.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Concat,
    Mean,
}

/// `out_h = A_h · X` for every head, concatenated or averaged. Inputs are the
/// attention weights (`N × M·k`) and `X` (`N × d`).
struct SparseAggregateOp {
    index: Arc<AttentionIndex>,
    combine: Combine,
    head_scale: Vec<f64>,
}

impl SparseAggregateOp {
    fn block(&self, h: usize, d: usize) -> (usize, f64) {
        match self.combine {
            Combine::Concat => (h * d, self.head_scale[h]),
            Combine::Mean => (0, self.head_scale[h] / self.index.heads as f64),
        }
    }

    fn forward(&self, att: &Matrix, x: &Matrix) -> Matrix {
        let (n, heads, k, d) = (self.index.num_nodes, self.index.heads, self.index.k, x.cols());
        let width = if self.combine == Combine::Concat { heads * d } else { d };
        let mut out = Matrix::zeros(n, width);
        for v in 0..n {
            for h in 0..heads {
                let (off, s) = self.block(h, d);
                if s == 0.0 {
                    continue;
                }
                for j in 0..k {
                    let w = s * att[(v, h * k + j)];
                    let src = x.row(self.index.col(v, h, j));
                    for (o, xv) in out.row_mut(v)[off..off + d].iter_mut().zip(src) {
                        *o += w * xv;
                    }
                }
            }
        }
        out
    }
}

impl CustomOp for SparseAggregateOp {
    fn name(&self) -> &'static str {
        "sparse_aggregate"
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad: &Matrix) -> Result<Vec<Option<Matrix>>> {
        let (att, x) = (inputs[0], inputs[1]);
        let (n, heads, k, d) = (self.index.num_nodes, self.index.heads, self.index.k, x.cols());
        let mut datt = Matrix::zeros(att.rows(), att.cols());
        let mut dx = Matrix::zeros(x.rows(), d);
        for v in 0..n {
            for h in 0..heads {
                let (off, s) = self.block(h, d);
                if s == 0.0 {
                    continue;
                }
                let g = &grad.row(v)[off..off + d];
                for j in 0..k {
                    let u = self.index.col(v, h, j);
                    datt[(v, h * k + j)] = s * g.iter().zip(x.row(u)).map(|(a, b)| a * b).sum::<f64>();
                    let w = s * att[(v, h * k + j)];
                    for (o, gv) in dx.row_mut(u).iter_mut().zip(g) {
                        *o += w * gv;
                    }
                }
            }
        }
        Ok(vec![Some(datt), Some(dx)])
    }
}

/// Records `combine_h(A_h · x)` on the tape.
pub fn aggregate(
    tape: &mut Tape,
    index: &Arc<AttentionIndex>,
    att: Var,
    x: Var,
    combine: Combine,
    head_scale: Option<&[f64]>,
) -> Result<Var> {
    let (a, xv) = (tape.value(att), tape.value(x));
    if a.shape() != (index.num_nodes, index.stride()) || xv.rows() != index.num_nodes {
        return Err(Error::Shape(format!(
            "aggregate: attention {:?}, features {:?} for {} nodes",
            a.shape(),
            xv.shape(),
            index.num_nodes
        )));
    }
    let head_scale = head_scale.map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0; index.heads]);
    if head_scale.len() != index.heads {
        return Err(Error::Shape("one head scale per head expected".into()));
    }
    let op = SparseAggregateOp {
        index: index.clone(),
        combine,
        head_scale,
    };
    let out = op.forward(a, xv);
    Ok(tape.custom(Box::new(op), &[att, x], out))
}

/// One ASGAT layer off-tape: `ELU(A_h · H · W)` per head, concatenated.
pub fn asgat_layer(h: &Matrix, att: &AttentionSet, w: &Matrix) -> Result<Matrix> {
    if h.cols() != w.rows() || h.rows() != att.index.num_nodes {
        return Err(Error::Shape(format!(
            "layer input {:?}, weight {:?}, {} nodes",
            h.shape(),
            w.shape(),
            att.index.num_nodes
        )));
    }
    let mut tape = Tape::new();
    let a = tape.constant(att.weights.clone());
    let hv = tape.constant(h.clone());
    let wv = tape.constant(w.clone());
    let hw = tape.matmul(hv, wv)?;
    let agg = aggregate(&mut tape, &att.index, a, hw, Combine::Concat, None)?;
    let out = tape.elu(agg);
    Ok(tape.value(out).clone())
}

/// Trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub filter: MlpFilterParams,
    /// `m × hidden`.
    pub w1: Matrix,
    /// `(M·hidden) × C`.
    pub w2: Matrix,
}

impl ModelParams {
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.filter.tensors().into_iter().collect();
        v.push(&self.w1);
        v.push(&self.w2);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self.filter.tensors_mut().into_iter().collect();
        v.push(&mut self.w1);
        v.push(&mut self.w2);
        v
    }
}

const TENSOR_NAMES: [&str; 8] = [
    "filter.w1",
    "filter.b1",
    "filter.w2",
    "filter.b2",
    "filter.w3",
    "filter.b3",
    "layer1.w",
    "layer2.w",
];

/// Options for one forward pass.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Training mode: dropout masks are drawn from this generator.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Zero the filter response for `λ ∈ [lo, hi)` (the top band includes 2).
    pub zero_band: Option<(f64, f64)>,
    /// Per-head multiplier on attention weights (0 removes a head).
    pub head_scale: Option<Vec<f64>>,
}

/// Tape and handles produced by [`Model::forward`].
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub param_vars: Vec<Var>,
    pub index: Arc<AttentionIndex>,
    /// Attention weights actually used by each layer.
    pub attention: [Var; 2],
}

impl ForwardPass {
    pub fn attention_set(&self, layer: usize) -> AttentionSet {
        AttentionSet {
            index: self.index.clone(),
            weights: self.tape.value(self.attention[layer]).clone(),
        }
    }

    pub fn logits(&self) -> &Matrix {
        self.tape.value(self.logits)
    }
}

/// Whether `lambda` falls in the band `[lo, hi)`; bands reaching 2 include
/// their upper end and bands starting at 0 absorb round-off below 0.
pub fn in_band(lambda: f64, lo: f64, hi: f64) -> bool {
    lo < hi && (lo <= 0.0 || lambda >= lo) && (hi >= LAMBDA_MAX || lambda < hi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: AsgatConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(cfg: AsgatConfig, seed: u64) -> Result<Self> {
        if cfg.heads < 1 || cfg.hidden < 1 || cfg.filter_hidden < 1 {
            return Err(Error::Config("head count and widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filter = MlpFilterParams::init(cfg.filter_hidden, cfg.heads, &mut rng);
        let w1 = glorot(cfg.feature_dim, cfg.hidden, &mut rng);
        let w2 = glorot(cfg.heads * cfg.hidden, cfg.class_count, &mut rng);
        Ok(Self {
            cfg,
            params: ModelParams { filter, w1, w2 },
        })
    }

    /// Filter values at `points` (`len × M`): the MLP, or the heat kernel.
    pub fn filter_response(&self, points: &[f64]) -> Matrix {
        match self.cfg.backend {
            Backend::Heat { scale } => {
                Matrix::from_fn(points.len(), self.cfg.heads, |i, _| (-scale * points[i]).exp())
            }
            _ => crate::autodiff::mlp_response(&self.params.filter, points),
        }
    }

    pub fn forward(&self, ctx: &GraphContext, opts: ForwardOptions<'_>) -> Result<ForwardPass> {
        let cfg = &self.cfg;
        let n = ctx.num_nodes();
        cfg.validate(n)?;
        if ctx.backend() != cfg.backend {
            return Err(Error::Config("graph context was prepared for a different backend".into()));
        }
        if ctx.features().cols() != cfg.feature_dim {
            return Err(Error::Shape(format!(
                "graph has {} features, model expects {}",
                ctx.features().cols(),
                cfg.feature_dim
            )));
        }
        let ForwardOptions {
            mut dropout_rng,
            zero_band,
            head_scale,
        } = opts;
        let mut tape = Tape::new();
        let learns = cfg.backend.learns_filter();
        let mlp = MlpVars::register(&mut tape, &self.params.filter, learns);
        let w1 = tape.param(self.params.w1.clone());
        let w2 = tape.param(self.params.w2.clone());
        let mut param_vars: Vec<Var> = mlp.all().to_vec();
        param_vars.push(w1);
        param_vars.push(w2);

        let points = ctx.response_points();
        let mut response = if learns {
            mlp.response(&mut tape, &points)?
        } else {
            tape.constant(self.filter_response(&points))
        };
        if let Some((lo, hi)) = zero_band {
            if !(0.0..=LAMBDA_MAX).contains(&lo) || !(0.0..=LAMBDA_MAX).contains(&hi) || lo > hi {
                return Err(Error::Validation(format!("invalid frequency band [{lo}, {hi})")));
            }
            let mask = Matrix::from_fn(points.len(), cfg.heads, |i, _| if in_band(points[i], lo, hi) { 0.0 } else { 1.0 });
            response = tape.mul_const(response, mask)?;
        }

        let (values, index) = wavelet_topk(&mut tape, ctx, cfg, response)?;
        let k = index.k;

        let mut attention = [values; 2];
        let x = tape.constant(ctx.features().clone());
        let mut h = x;
        for (layer, w) in [w1, w2].into_iter().enumerate() {
            let p = cfg.dropout;
            let (att, input) = match dropout_rng.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    let att_mask: Vec<bool> = (0..n * index.stride()).map(|_| rng.gen::<f64>() >= p).collect();
                    let att = tape.segment_softmax(values, k, Some(&att_mask))?;
                    let hv = tape.value(h);
                    let keep = 1.0 / (1.0 - p);
                    let mask = Matrix::from_fn(hv.rows(), hv.cols(), |_, _| if rng.gen::<f64>() >= p { keep } else { 0.0 });
                    (att, tape.mul_const(h, mask)?)
                }
                _ => (tape.segment_softmax(values, k, None)?, h),
            };
            attention[layer] = att;
            let hw = tape.matmul(input, w)?;
            h = if layer == 0 {
                let agg = aggregate(&mut tape, &index, att, hw, Combine::Concat, head_scale.as_deref())?;
                tape.elu(agg)
            } else {
                aggregate(&mut tape, &index, att, hw, Combine::Mean, head_scale.as_deref())?
            };
        }
        let logits = h;
        if !tape.value(logits).is_finite() {
            return Err(Error::Numeric("non-finite logits".into()));
        }
        Ok(ForwardPass {
            tape,
            logits,
            param_vars,
            index,
            attention,
        })
    }

    /// Mean NLL of `targets` at `rows`, and the gradient of every parameter
    /// in [`ModelParams::tensors`] order (zeros where nothing flows).
    pub fn loss_and_grads(
        &self,
        ctx: &GraphContext,
        rows: &[usize],
        targets: &[usize],
        opts: ForwardOptions<'_>,
    ) -> Result<(f64, Vec<Matrix>, ForwardPass)> {
        let mut pass = self.forward(ctx, opts)?;
        let logp = pass.tape.log_softmax_rows(pass.logits);
        let loss = pass.tape.nll(logp, rows, targets)?;
        let value = pass.tape.value(loss)[(0, 0)];
        let grads = pass.tape.backward(loss)?;
        let out = pass
            .param_vars
            .iter()
            .zip(self.params.tensors())
            .map(|(v, m)| grads.get_or_zeros(*v, m.shape()))
            .collect();
        Ok((value, out, pass))
    }

    /// Central-difference check of [`Model::loss_and_grads`] in evaluation
    /// mode: largest `|g_ad − g_fd| / max(1, |g_fd|)` over every parameter.
    pub fn gradient_check(&self, ctx: &GraphContext, rows: &[usize], targets: &[usize], eps: f64) -> Result<f64> {
        let (_, grads, _) = self.loss_and_grads(ctx, rows, targets, ForwardOptions::default())?;
        let mut work = self.clone();
        let mut worst = 0.0f64;
        for (t, g) in grads.iter().enumerate() {
            for i in 0..g.as_slice().len() {
                let orig = self.params.tensors()[t].as_slice()[i];
                work.params.tensors_mut()[t].as_mut_slice()[i] = orig + eps;
                let plus = work.loss_and_grads(ctx, rows, targets, ForwardOptions::default())?.0;
                work.params.tensors_mut()[t].as_mut_slice()[i] = orig - eps;
                let minus = work.loss_and_grads(ctx, rows, targets, ForwardOptions::default())?.0;
                work.params.tensors_mut()[t].as_mut_slice()[i] = orig;
                let fd = (plus - minus) / (2.0 * eps);
                worst = worst.max((g.as_slice()[i] - fd).abs() / fd.abs().max(1.0));
            }
        }
        Ok(worst)
    }

    /// Logits in evaluation mode.
    pub fn predict_logits(&self, ctx: &GraphContext) -> Result<Matrix> {
        Ok(self.forward(ctx, ForwardOptions::default())?.logits().clone())
    }

    pub fn predict(&self, ctx: &GraphContext) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_logits(ctx)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: self.cfg.to_map(),
            tensors: TENSOR_NAMES
                .iter()
                .zip(self.params.tensors())
                .map(|(n, m)| (n.to_string(), m.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = AsgatConfig::from_map(&ck.header)?;
        // Shapes are checked before anything is allocated, so a corrupt
        // header cannot request a huge buffer.
        let (f, m) = (cfg.filter_hidden, cfg.heads);
        let concat = m
            .checked_mul(cfg.hidden)
            .ok_or_else(|| Error::Shape("heads × hidden overflows".into()))?;
        let expected = [
            (1, f),
            (1, f),
            (f, f),
            (1, f),
            (f, m),
            (1, m),
            (cfg.feature_dim, cfg.hidden),
            (concat, cfg.class_count),
        ];
        let mut tensors = Vec::with_capacity(TENSOR_NAMES.len());
        for (name, shape) in TENSOR_NAMES.iter().zip(expected) {
            let t = ck.tensor(name)?;
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "tensor `{name}` is {:?}, configuration implies {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t.clone());
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("eight tensors");
        let filter = MlpFilterParams {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            w3: next(),
            b3: next(),
        };
        Ok(Model {
            params: ModelParams { filter, w1: next(), w2: next() },
            cfg,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
        })
        .collect()
}

/// Materializes `Ψ_h` for every head from `response` (on the tape) and keeps
/// the top-`k` entries per row. Returns the kept values (`N × M·k`) and
/// their column indices.
fn wavelet_topk(tape: &mut Tape, ctx: &GraphContext, cfg: &AsgatConfig, response: Var) -> Result<(Var, Arc<AttentionIndex>)> {
    let n = ctx.num_nodes();
    let heads = cfg.heads;
    let k = cfg.k.min(n);
    let mut cols = vec![0usize; n * heads * k];
    let mut values = Matrix::zeros(n, heads * k);
    let r = tape.value(response).clone();

    let use_exact = match cfg.backend {
        Backend::Exact => true,
        Backend::Heat { .. } => ctx.spectrum.is_some(),
        _ => false,
    };
    if use_exact {
        let spectrum = ctx.spectrum.clone().expect("spectrum prepared");
        for h in 0..heads {
            let psi = spectrum.filter_matrix(&r.column(h));
            check_finite(&psi, h)?;
            select_head(&psi, h, heads, k, &mut cols, &mut values);
        }
        let index = Arc::new(AttentionIndex {
            num_nodes: n,
            heads,
            k,
            cols,
        });
        let op = ExactWaveletOp {
            spectrum,
            index: index.clone(),
        };
        return Ok((tape.custom(Box::new(op), &[response], values), index));
    }

    match cfg.backend {
        Backend::Arma { p, q, iters } => {
            let grid = uniform_grid(GRID_POINTS);
            let powers = ctx.powers.clone().expect("ARMA powers prepared");
            let mut denominators = Vec::with_capacity(heads);
            let mut numerator_maps = Vec::with_capacity(heads);
            for h in 0..heads {
                let g = r.column(h);
                let fit = arma_fit_head(&grid, &g, p, q, iters)?;
                let map = numerator_map(&grid, &fit.denominator, q)?;
                let b: Vec<f64> = (0..=q).map(|i| map.row(i).iter().zip(&g).map(|(a, c)| a * c).sum()).collect();
                let mut num = Matrix::zeros(n, n);
                for (bq, pw) in b.iter().zip(powers.iter()) {
                    num.axpy(*bq, pw);
                }
                let mut psi = Matrix::zeros(n, n);
                for c in 0..n {
                    let y = solve_denominator(ctx.laplacian.as_ref(), &fit.denominator, &num.column(c))?;
                    psi.set_column(c, &y);
                }
                check_finite(&psi, h)?;
                select_head(&psi, h, heads, k, &mut cols, &mut values);
                denominators.push(fit.denominator);
                numerator_maps.push(map);
            }
            let index = Arc::new(AttentionIndex {
                num_nodes: n,
                heads,
                k,
                cols,
            });
            let op = ArmaWaveletOp {
                laplacian: ctx.laplacian.clone(),
                powers,
                denominators,
                numerator_maps,
                index: index.clone(),
            };
            Ok((tape.custom(Box::new(op), &[response], values), index))
        }
        Backend::Chebyshev { .. } | Backend::Heat { .. } => {
            let order = match cfg.backend {
                Backend::Chebyshev { order } => order,
                _ => Backend::DEFAULT_CHEB_ORDER,
            };
            let map = tape.constant(coefficient_map(order));
            let coeffs = tape.matmul(map, response)?;
            let c = tape.value(coeffs).clone();
            let mut op = ChebWaveletOp {
                laplacian: ctx.laplacian.clone(),
                terms: ctx.cheb_terms.clone(),
                order,
                index: Arc::new(AttentionIndex {
                    num_nodes: 0,
                    heads: 0,
                    k: 0,
                    cols: Vec::new(),
                }),
            };
            match &op.terms {
                Some(terms) => cheb_select_cached(terms, n, &c, k, &mut cols, &mut values)?,
                None => {
                    let mut psi: Vec<Matrix> = (0..heads).map(|_| Matrix::zeros(n, n)).collect();
                    op.for_each_term(|i, t| {
                        for (h, p) in psi.iter_mut().enumerate() {
                            let w = if i == 0 { 0.5 } else { 1.0 };
                            let a = w * c[(i, h)];
                            for (o, x) in p.as_mut_slice().iter_mut().zip(t) {
                                *o += a * x;
                            }
                        }
                    });
                    for (h, p) in psi.iter().enumerate() {
                        check_finite(p, h)?;
                        select_head(p, h, heads, k, &mut cols, &mut values);
                    }
                }
            }
            let index = Arc::new(AttentionIndex {
                num_nodes: n,
                heads,
                k,
                cols,
            });
            op.index = index.clone();
            Ok((tape.custom(Box::new(op), &[coeffs], values), index))
        }
        Backend::Exact => unreachable!("handled above"),
    }
}

/// Checks that the attention layer with `a_vu = Â_vu` (the self-loop
/// augmented, symmetrically normalized adjacency) and a ReLU reproduces a
/// one-layer GCN `ReLU(Â H W)` on random features. Returns the largest
/// absolute deviation.
pub fn gcn_equivalence_check(g: &Graph, seed: u64) -> Result<f64> {
    let n = g.num_nodes();
    let nbrs = g.neighbors();
    let deg: Vec<f64> = nbrs.iter().map(|l| l.len() as f64 + 1.0).collect();
    let k = nbrs.iter().map(|l| l.len() + 1).max().unwrap_or(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Matrix::from_fn(n, 5, |_, _| rng.gen_range(-1.0..1.0));
    let w = Matrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));

    let mut cols = vec![0; n * k];
    let mut weights = Matrix::zeros(n, k);
    for v in 0..n {
        let mut row: Vec<usize> = nbrs[v].clone();
        row.push(v);
        for j in 0..k {
            // Padding slots point at `v` with weight zero.
            let (u, a) = match row.get(j) {
                Some(&u) => (u, 1.0 / (deg[v] * deg[u]).sqrt()),
                None => (v, 0.0),
            };
            cols[v * k + j] = u;
            weights[(v, j)] = a;
        }
    }
    let index = Arc::new(AttentionIndex {
        num_nodes: n,
        heads: 1,
        k,
        cols,
    });
    let mut tape = Tape::new();
    let a = tape.constant(weights);
    let hv = tape.constant(h.clone());
    let wv = tape.constant(w.clone());
    let hw = tape.matmul(hv, wv)?;
    let agg = aggregate(&mut tape, &index, a, hw, Combine::Concat, None)?;
    let out = tape.relu(agg);

    let mut a_hat = g.adjacency();
    for v in 0..n {
        a_hat[(v, v)] += 1.0;
    }
    let a_hat = Matrix::from_fn(n, n, |r, c| a_hat[(r, c)] / (deg[r] * deg[c]).sqrt());
    let reference = a_hat.matmul(&h).matmul(&w).map(|x| x.max(0.0));
    Ok(tape.value(out).sub(&reference).max_abs())
}
