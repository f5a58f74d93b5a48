//! Seeded synthetic datasets for tests, benchmarks and demos.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::Graph;
use crate::solver::Problem;

/// Random edges: each node draws `degree` partners, of the same class with
/// probability `homophily`.
fn class_edges(rng: &mut ChaCha8Rng, labels: &[usize], classes: usize, degree: usize, homophily: f64) -> Vec<(usize, usize)> {
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let n = labels.len();
    let mut edges = Vec::with_capacity(n * degree);
    for (i, &y) in labels.iter().enumerate() {
        for _ in 0..degree {
            let j = if rng.random_bool(homophily) {
                by_class[y][rng.random_range(0..by_class[y].len())]
            } else {
                rng.random_range(0..n)
            };
            edges.push((i, j));
        }
    }
    edges
}

/// Even-indexed nodes train, odd-indexed nodes test.
fn alternating_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n).step_by(2).collect(), (1..n).step_by(2).collect())
}

/// Gaussian clusters around random centers at distance `separation`, with
/// homophilous edges.
pub fn blobs(nodes: usize, classes: usize, dims: usize, separation: f64, seed: u64) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = Array2::from_shape_fn((classes, dims), |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * separation / (dims as f64).sqrt()
    });
    let labels: Vec<usize> = (0..nodes).map(|i| i % classes).collect();
    let features = Array2::from_shape_fn((nodes, dims), |(i, k)| {
        let noise: f64 = StandardNormal.sample(&mut rng);
        centers[[labels[i], k]] + noise
    });
    let edges = class_edges(&mut rng, &labels, classes, 3, 0.8);
    let (train, test) = alternating_split(nodes);
    Graph::from_edges(classes, features, &edges, labels, train, test)
}

/// Two interleaved half circles in the plane joined by a 5-nearest-neighbor graph.
pub fn two_moons(nodes: usize, noise: f64, seed: u64) -> Result<Graph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..nodes).map(|i| i % 2).collect();
    let mut features = Array2::zeros((nodes, 2));
    for (i, &y) in labels.iter().enumerate() {
        let t = rng.random_range(0.0..std::f64::consts::PI);
        let (x0, x1) = if y == 0 { (t.cos(), t.sin()) } else { (1.0 - t.cos(), 0.5 - t.sin()) };
        let e0: f64 = StandardNormal.sample(&mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        features[[i, 0]] = x0 + noise * e0;
        features[[i, 1]] = x1 + noise * e1;
    }
    let mut edges = Vec::new();
    for i in 0..nodes {
        let mut dist: Vec<(f64, usize)> = (0..nodes)
            .filter(|&j| j != i)
            .map(|j| {
                let d0 = features[[i, 0]] - features[[j, 0]];
                let d1 = features[[i, 1]] - features[[j, 1]];
                (d0 * d0 + d1 * d1, j)
            })
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(dist.iter().take(5).map(|&(_, j)| (i, j)));
    }
    let (train, test) = alternating_split(nodes);
    Graph::from_edges(2, features, &edges, labels, train, test)
}

/// A graph with the dimensions of the Cora citation benchmark: 2708 nodes,
/// 1433 sparse binary features, 7 classes, 20 training nodes per class and
/// 1000 test nodes. Useful for timing; its accuracy says nothing about Cora.
pub fn cora_like(seed: u64) -> Result<Graph> {
    const NODES: usize = 2708;
    const FEATURES: usize = 1433;
    const CLASSES: usize = 7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..NODES).map(|_| rng.random_range(0..CLASSES)).collect();
    // each class prefers its own slice of the vocabulary
    let slice = FEATURES / CLASSES;
    let mut features = Array2::zeros((NODES, FEATURES));
    for (i, &y) in labels.iter().enumerate() {
        for _ in 0..18 {
            let w = if rng.random_bool(0.6) {
                y * slice + rng.random_range(0..slice)
            } else {
                rng.random_range(0..FEATURES)
            };
            features[[i, w]] = 1.0;
        }
    }
    let edges = class_edges(&mut rng, &labels, CLASSES, 2, 0.8);
    let mut order: Vec<usize> = (0..NODES).collect();
    order.shuffle(&mut rng);
    let mut per_class = [0usize; CLASSES];
    let mut train = Vec::new();
    let mut rest = Vec::new();
    for i in order {
        if per_class[labels[i]] < 20 {
            per_class[labels[i]] += 1;
            train.push(i);
        } else {
            rest.push(i);
        }
    }
    train.sort_unstable();
    let mut test: Vec<usize> = rest.into_iter().take(1000).collect();
    test.sort_unstable();
    Graph::from_edges(CLASSES, features, &edges, labels, train, test)
}

/// Random dense inputs with random labels, every sample in the training split.
pub fn dense_problem(samples: usize, in_dim: usize, classes: usize, seed: u64) -> Result<Problem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = Array2::from_shape_fn((in_dim, samples), |_| rng.random_range(-1.0..1.0));
    let labels = (0..samples).map(|_| rng.random_range(0..classes)).collect();
    Problem::new(features, labels, (0..samples).collect(), Vec::new(), classes)
}
