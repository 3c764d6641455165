//! Graph storage, the canonical TSV dataset format, the normalized
//! Laplacian, node/graph homophily, and per-class train/val/test splits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{CsrMatrix, Matrix, SymMatrix};

/// An undirected, unweighted graph with dense node features and class labels.
///
/// Edges are stored once per unordered pair as `(u, v)` with `u < v`, sorted.
/// Self-loops are never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    raw_edge_count: usize,
}

/// Symmetric closure of an edge list: every pair becomes `(min, max)`,
/// duplicates and self-loops are dropped, and the result is sorted.
pub fn to_undirected(edges: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let set: BTreeSet<(usize, usize)> = edges
        .iter()
        .filter(|(u, v)| u != v)
        .map(|&(u, v)| (u.min(v), u.max(v)))
        .collect();
    set.into_iter().collect()
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if features.rows() != num_nodes {
            return Err(Error::Validation(format!(
                "feature matrix has {} rows for {num_nodes} nodes",
                features.rows()
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::Validation(format!(
                "{} labels for {num_nodes} nodes",
                labels.len()
            )));
        }
        if let Some((v, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Validation(format!(
                "node {v} has label {l}, class count is {class_count}"
            )));
        }
        if let Some(&(u, v)) = edges.iter().find(|(u, v)| *u >= num_nodes || *v >= num_nodes) {
            return Err(Error::Validation(format!(
                "edge ({u}, {v}) references a node outside [0, {num_nodes})"
            )));
        }
        Ok(Self {
            num_nodes,
            edges: to_undirected(edges),
            features,
            labels,
            class_count,
            raw_edge_count: edges.len(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Unordered edges `(u, v)` with `u < v`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Number of edge records the graph was built from, before closure and
    /// de-duplication.
    pub fn raw_edge_count(&self) -> usize {
        self.raw_edge_count
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Rebuilds the graph through the symmetric closure. Idempotent.
    pub fn to_undirected(&self) -> Graph {
        Graph {
            edges: to_undirected(&self.edges),
            ..self.clone()
        }
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn adjacency(&self) -> Matrix {
        let mut a = Matrix::zeros(self.num_nodes, self.num_nodes);
        for &(u, v) in &self.edges {
            a[(u, v)] = 1.0;
            a[(v, u)] = 1.0;
        }
        a
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        let n = self.num_nodes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Validation("not a permutation of the node set".into()));
        }
        let mut features = Matrix::zeros(n, self.features.cols());
        let mut labels = vec![0; n];
        for v in 0..n {
            features.row_mut(perm[v]).copy_from_slice(self.features.row(v));
            labels[perm[v]] = self.labels[v];
        }
        let edges: Vec<_> = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Graph::new(n, &edges, features, labels, self.class_count)
    }

    /// Copy with every feature row scaled to unit L1 norm (all-zero rows kept).
    pub fn with_row_normalized_features(&self) -> Graph {
        let mut features = self.features.clone();
        for r in 0..features.rows() {
            let row = features.row_mut(r);
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Graph {
            features,
            ..self.clone()
        }
    }
}

/// Loads a dataset in the canonical TSV format.
pub fn load_graph(path: impl AsRef<Path>) -> Result<Graph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text)
}

/// Parses the canonical TSV format:
///
/// ```text
/// N<TAB>m<TAB>C
/// node_id<TAB>label<TAB>f_1 f_2 … f_m     (N lines)
/// EDGES
/// u<TAB>v                                (one line per edge)
/// ```
pub fn parse_graph(text: &str) -> Result<Graph> {
    let mut lines = text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .enumerate()
        .map(|(i, l)| (i + 1, l));

    let (ln, header) = lines.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    let fields: Vec<&str> = header.split('\t').collect();
    if fields.len() != 3 {
        return Err(Error::parse(ln, "header must be `N<TAB>m<TAB>C`"));
    }
    let n: usize = parse_field(fields[0], ln, "node count")?;
    let m: usize = parse_field(fields[1], ln, "feature dimension")?;
    let c: usize = parse_field(fields[2], ln, "class count")?;
    // Every node line and every feature value takes at least one byte.
    if n > text.len() || n.saturating_mul(m) > text.len() {
        return Err(Error::parse(ln, "header declares more data than the file holds"));
    }

    let mut features = Matrix::zeros(n, m);
    let mut labels = vec![0usize; n];
    let mut seen = vec![false; n];
    for i in 0..n {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::parse(i + 2, "unexpected end of file in node section"))?;
        let mut parts = line.splitn(3, '\t');
        let id: usize = parse_field(parts.next().unwrap_or(""), ln, "node id")?;
        let label: usize = parse_field(
            parts.next().ok_or_else(|| Error::parse(ln, "missing label"))?,
            ln,
            "label",
        )?;
        let feats = parts.next().unwrap_or("");
        if id >= n {
            return Err(Error::Validation(format!(
                "line {ln}: node id {id} outside [0, {n})"
            )));
        }
        if seen[id] {
            return Err(Error::parse(ln, format!("node id {id} appears twice")));
        }
        seen[id] = true;
        if label >= c {
            return Err(Error::Validation(format!(
                "line {ln}: label {label} outside [0, {c})"
            )));
        }
        labels[id] = label;
        let row = features.row_mut(id);
        let mut count = 0usize;
        for tok in feats.split(' ').filter(|t| !t.is_empty()) {
            if count >= m {
                return Err(Error::parse(ln, format!("more than {m} feature values")));
            }
            let v: f64 = parse_field(tok, ln, "feature value")?;
            if !v.is_finite() {
                return Err(Error::parse(ln, "non-finite feature value"));
            }
            row[count] = v;
            count += 1;
        }
        if count != m {
            return Err(Error::parse(ln, format!("expected {m} feature values, found {count}")));
        }
    }

    match lines.next() {
        Some((_, "EDGES")) => {}
        Some((ln, _)) => return Err(Error::parse(ln, "expected literal `EDGES`")),
        None => return Err(Error::parse(n + 2, "missing `EDGES` section")),
    }

    let mut edges = Vec::new();
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(ln, "edge line must be `u<TAB>v`"))?;
        let u: usize = parse_field(a, ln, "edge endpoint")?;
        let v: usize = parse_field(b, ln, "edge endpoint")?;
        if u >= n || v >= n {
            return Err(Error::Validation(format!(
                "line {ln}: edge ({u}, {v}) references a node outside [0, {n})"
            )));
        }
        edges.push((u, v));
    }

    Graph::new(n, &edges, features, labels, c)
}

fn parse_field<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("invalid {what} `{s}`")))
}

/// Serializes in the canonical TSV format. Edges are written as stored.
pub fn write_graph_tsv(g: &Graph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}\t{}\t{}", g.num_nodes, g.feature_dim(), g.class_count);
    for v in 0..g.num_nodes {
        let _ = write!(out, "{v}\t{}\t", g.labels[v]);
        for (j, x) in g.features.row(v).iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{x}");
        }
        out.push('\n');
    }
    out.push_str("EDGES\n");
    for &(u, v) in &g.edges {
        let _ = writeln!(out, "{u}\t{v}");
    }
    out
}

/// `L = I − D^{-1/2} A D^{-1/2}`; rows of isolated nodes are identity rows.
pub fn normalized_laplacian(g: &Graph) -> SymMatrix {
    let n = g.num_nodes;
    let inv_sqrt = inv_sqrt_degrees(g);
    let mut l = Matrix::identity(n);
    for &(u, v) in &g.edges {
        let w = -inv_sqrt[u] * inv_sqrt[v];
        l[(u, v)] = w;
        l[(v, u)] = w;
    }
    SymMatrix::from_lower(l).expect("square by construction")
}

/// Sparse form of [`normalized_laplacian`].
pub fn normalized_laplacian_sparse(g: &Graph) -> CsrMatrix {
    let n = g.num_nodes;
    let inv_sqrt = inv_sqrt_degrees(g);
    let mut t = Vec::with_capacity(n + 2 * g.edges.len());
    for v in 0..n {
        t.push((v, v, 1.0));
    }
    for &(u, v) in &g.edges {
        let w = -inv_sqrt[u] * inv_sqrt[v];
        t.push((u, v, w));
        t.push((v, u, w));
    }
    CsrMatrix::from_triplets(n, n, t)
}

fn inv_sqrt_degrees(g: &Graph) -> Vec<f64> {
    g.degrees()
        .into_iter()
        .map(|d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() })
        .collect()
}

/// Per-node neighbour label agreement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeHomophily {
    pub same: usize,
    pub degree: usize,
}

impl NodeHomophily {
    pub fn beta(&self) -> f64 {
        self.same as f64 / self.degree as f64
    }

    /// Bin in `0..5` for `[0,0.2], (0.2,0.4], …, (0.8,1.0]`, computed in
    /// integer arithmetic so boundary ratios land exactly.
    pub fn bin(&self) -> usize {
        let scaled = 5 * self.same;
        let ceil = scaled.div_ceil(self.degree);
        ceil.saturating_sub(1).min(4)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomophilyReport {
    /// Mean of β_v over nodes with at least one neighbour; `None` when the
    /// graph has no edges.
    pub beta: Option<f64>,
    /// Per node; `None` for isolated nodes.
    pub nodes: Vec<Option<NodeHomophily>>,
    /// Count of nodes with β_v exactly 0.
    pub zero_bin: usize,
    /// Counts for `(0,0.2], (0.2,0.4], (0.4,0.6], (0.6,0.8], (0.8,1.0]`.
    pub bins: [usize; 5],
}

impl HomophilyReport {
    pub fn beta_v(&self) -> Vec<f64> {
        self.nodes.iter().flatten().map(NodeHomophily::beta).collect()
    }

    pub fn is_undefined(&self) -> bool {
        self.beta.is_none()
    }
}

pub fn homophily(g: &Graph) -> HomophilyReport {
    let mut nodes: Vec<Option<NodeHomophily>> = vec![None; g.num_nodes];
    let mut counts = vec![(0usize, 0usize); g.num_nodes];
    for &(u, v) in &g.edges {
        let same = usize::from(g.labels[u] == g.labels[v]);
        counts[u].0 += same;
        counts[u].1 += 1;
        counts[v].0 += same;
        counts[v].1 += 1;
    }
    let mut sum = 0.0;
    let mut active = 0usize;
    let mut zero_bin = 0;
    let mut bins = [0usize; 5];
    for (v, &(same, degree)) in counts.iter().enumerate() {
        if degree == 0 {
            continue;
        }
        let h = NodeHomophily { same, degree };
        sum += h.beta();
        active += 1;
        if same == 0 {
            zero_bin += 1;
        } else {
            bins[h.bin()] += 1;
        }
        nodes[v] = Some(h);
    }
    HomophilyReport {
        beta: (active > 0).then(|| sum / active as f64),
        nodes,
        zero_bin,
        bins,
    }
}

/// Disjoint train/validation/test node masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
    pub seed: u64,
}

impl Split {
    pub fn from_indices(n: usize, train: &[usize], val: &[usize], test: &[usize], seed: u64) -> Result<Self> {
        let mut masks = [vec![false; n], vec![false; n], vec![false; n]];
        let mut owner = vec![false; n];
        for (mask, idx) in masks.iter_mut().zip([train, val, test]) {
            for &v in idx {
                if v >= n {
                    return Err(Error::Validation(format!("split index {v} outside [0, {n})")));
                }
                if std::mem::replace(&mut owner[v], true) {
                    return Err(Error::Validation(format!("node {v} appears in more than one split set")));
                }
                mask[v] = true;
            }
        }
        let [train, val, test] = masks;
        Ok(Self { train, val, test, seed })
    }

    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        mask_indices(&self.train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        mask_indices(&self.val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        mask_indices(&self.test)
    }

    /// Serializes as `TRAIN`/`VAL`/`TEST` headings, each followed by a line of
    /// space-separated node indices.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, idx) in [
            ("TRAIN", self.train_indices()),
            ("VAL", self.val_indices()),
            ("TEST", self.test_indices()),
        ] {
            out.push_str(name);
            out.push('\n');
            let line: Vec<String> = idx.iter().map(ToString::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, num_nodes: usize) -> Result<Split> {
        let lines: Vec<&str> = text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .collect();
        let mut sets: [Option<Vec<usize>>; 3] = [None, None, None];
        let mut i = 0;
        while i < lines.len() {
            let slot = match lines[i] {
                "TRAIN" => 0,
                "VAL" => 1,
                "TEST" => 2,
                "" if i + 1 == lines.len() => break,
                other => return Err(Error::parse(i + 1, format!("expected TRAIN/VAL/TEST, found `{other}`"))),
            };
            if sets[slot].is_some() {
                return Err(Error::parse(i + 1, "section repeated"));
            }
            let body = lines.get(i + 1).copied().unwrap_or("");
            let idx = body
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| parse_field::<usize>(t, i + 2, "node index"))
                .collect::<Result<Vec<_>>>()?;
            sets[slot] = Some(idx);
            i += 2;
        }
        let [train, val, test] = sets;
        let missing = |name: &str| Error::parse(lines.len(), format!("missing {name} section"));
        Split::from_indices(
            num_nodes,
            &train.ok_or_else(|| missing("TRAIN"))?,
            &val.ok_or_else(|| missing("VAL"))?,
            &test.ok_or_else(|| missing("TEST"))?,
            0,
        )
    }
}

fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Per-class 60/20/20 split: floor for train and validation, remainder to
/// test. Deterministic in `seed`.
pub fn split_per_class(g: &Graph, seed: u64) -> Result<Split> {
    let n = g.num_nodes;
    let mut by_class = vec![Vec::new(); g.class_count];
    for (v, &l) in g.labels.iter().enumerate() {
        by_class[l].push(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split {
        train: vec![false; n],
        val: vec![false; n],
        test: vec![false; n],
        seed,
    };
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::SmallClass {
                class,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n_train = members.len() * 3 / 5;
        let n_val = members.len() / 5;
        for (i, &v) in members.iter().enumerate() {
            if i < n_train {
                split.train[v] = true;
            } else if i < n_train + n_val {
                split.val[v] = true;
            } else {
                split.test[v] = true;
            }
        }
    }
    Ok(split)
}
