//! Seeded random graphs for tests, benchmarks and smoke runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::linalg::Matrix;

/// Connected graph on `n` nodes: a random spanning tree plus `extra_edges`
/// random extra edges, uniform features in `[-1, 1]` and labels cycling over
/// `classes` in shuffled order.
pub fn random_connected(n: usize, extra_edges: usize, feature_dim: usize, classes: usize, seed: u64) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut edges = Vec::with_capacity(n + extra_edges);
    for i in 1..n {
        let parent = order[rng.gen_range(0..i)];
        edges.push((parent, order[i]));
    }
    if n >= 2 {
        for _ in 0..extra_edges {
            let u = rng.gen_range(0..n);
            let v = rng.gen_range(0..n);
            if u != v {
                edges.push((u, v));
            }
        }
    }
    let features = Matrix::from_fn(n, feature_dim, |_, _| rng.gen_range(-1.0..1.0));
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes.max(1)).collect();
    labels.shuffle(&mut rng);
    Graph::new(n, &edges, features, labels, classes.max(1))
}

/// Planted-partition graph with `per_class` nodes per class. Each node gets
/// `degree` random edges, each to a same-class node with probability
/// `homophily` and otherwise to a node of another class. Features are a class
/// prototype plus uniform noise of amplitude `noise`.
pub fn planted_partition(
    classes: usize,
    per_class: usize,
    degree: usize,
    homophily: f64,
    feature_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let labels: Vec<usize> = (0..n).map(|v| v / per_class).collect();
    let mut edges = Vec::new();
    for v in 0..n {
        for _ in 0..degree {
            let same = classes == 1 || rng.gen::<f64>() < homophily;
            let c = if same {
                labels[v]
            } else {
                let off = rng.gen_range(1..classes);
                (labels[v] + off) % classes
            };
            let u = c * per_class + rng.gen_range(0..per_class);
            if u != v {
                edges.push((v, u));
            }
        }
    }
    let prototypes = Matrix::from_fn(classes, feature_dim, |_, _| rng.gen_range(-1.0..1.0));
    let features = Matrix::from_fn(n, feature_dim, |v, j| prototypes[(labels[v], j)] + noise * rng.gen_range(-1.0..1.0));
    Graph::new(n, &edges, features, labels, classes)
}

/// Ten-node graph with two linearly separable classes (nodes 0–4 and 5–9),
/// each class a path, joined by a single edge.
pub fn toy_two_class() -> Graph {
    let mut edges: Vec<(usize, usize)> = (0..4).map(|i| (i, i + 1)).collect();
    edges.extend((5..9).map(|i| (i, i + 1)));
    edges.push((4, 5));
    let features = Matrix::from_fn(10, 3, |v, j| match j {
        0 => if v < 5 { 1.0 } else { -1.0 },
        1 => 0.1 * v as f64,
        _ => 1.0,
    });
    let labels = (0..10).map(|v| usize::from(v >= 5)).collect();
    Graph::new(10, &edges, features, labels, 2).expect("valid toy graph")
}
