//! Independent oracles shared by the core integration tests and the
//! acceptance suite. Nothing here calls the routine it checks.

#![allow(dead_code, clippy::needless_range_loop)]

use occl_core::occlusion::Histogram;
use occl_core::tensor::Rng;
use occl_core::trainer::{head_layer, Activation, LayerSpec, ModelState};

pub fn random_histogram(b: usize, rng: &mut Rng) -> Histogram {
    loop {
        // a few exact zeros exercise degenerate bases
        let w: Vec<f64> = (0..b)
            .map(|_| if rng.unit() < 0.15 { 0.0 } else { rng.unit() })
            .collect();
        if w.iter().sum::<f64>() > 1e-3 {
            return Histogram::from_weights(&w).unwrap();
        }
    }
}

/// Symmetric non-negative cost with a zero diagonal, otherwise arbitrary
/// (no triangle inequality).
pub fn random_cost(b: usize, rng: &mut Rng) -> Vec<f64> {
    let mut c = vec![0.0; b * b];
    for i in 0..b {
        for j in i + 1..b {
            let v = rng.uniform(0.0, 5.0).unwrap();
            c[i * b + j] = v;
            c[j * b + i] = v;
        }
    }
    c
}

/// `W1` with unit bin spacing as the L1 distance between the CDFs.
pub fn cdf_w1(p: &[f64], q: &[f64]) -> f64 {
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(q) {
        cp += a;
        cq += b;
        total += (cp - cq).abs();
    }
    total
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    r
}

/// Cost of the basic solution supported on a spanning tree of cells, or
/// `None` when the tree forces a negative flow.
fn tree_cost(cells: &[usize], b: usize, p: &[f64], q: &[f64], cost: &[f64]) -> Option<f64> {
    // nodes 0..b are rows, b..2b columns
    let mut supply: Vec<f64> = p.iter().chain(q).copied().collect();
    let mut alive = vec![true; cells.len()];
    let mut total = 0.0;
    for _ in 0..cells.len() {
        let mut degree = vec![0usize; 2 * b];
        for (e, &c) in cells.iter().enumerate() {
            if alive[e] {
                degree[c / b] += 1;
                degree[b + c % b] += 1;
            }
        }
        let (e, leaf) = cells
            .iter()
            .enumerate()
            .filter(|(e, _)| alive[*e])
            .find_map(|(e, &c)| {
                let (r, col) = (c / b, b + c % b);
                if degree[r] == 1 {
                    Some((e, r))
                } else if degree[col] == 1 {
                    Some((e, col))
                } else {
                    None
                }
            })?;
        let c = cells[e];
        let other = if leaf < b { b + c % b } else { c / b };
        let flow = supply[leaf];
        if flow < -1e-12 {
            return None;
        }
        supply[leaf] = 0.0;
        supply[other] -= flow;
        total += flow * cost[c];
        alive[e] = false;
    }
    Some(total)
}

/// Exact transport objective by enumerating every spanning tree of the
/// bipartite cell graph (the bases of the transportation polytope). Feasible
/// for `b ≤ 5`.
pub fn basis_enumeration_ot(p: &[f64], q: &[f64], cost: &[f64]) -> f64 {
    let b = p.len();
    assert!(b <= 5, "enumeration is exponential in b");
    let size = 2 * b - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(size);

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        start: usize,
        b: usize,
        size: usize,
        chosen: &mut Vec<usize>,
        parent: &[usize],
        best: &mut f64,
        p: &[f64],
        q: &[f64],
        cost: &[f64],
    ) {
        if chosen.len() == size {
            if let Some(c) = tree_cost(chosen, b, p, q, cost) {
                *best = best.min(c);
            }
            return;
        }
        for cell in start..b * b {
            if b * b - cell < size - chosen.len() {
                break;
            }
            let mut next = parent.to_vec();
            let (x, y) = (find(&mut next, cell / b), find(&mut next, b + cell % b));
            if x == y {
                continue;
            }
            next[x] = y;
            chosen.push(cell);
            recurse(cell + 1, b, size, chosen, &next, best, p, q, cost);
            chosen.pop();
        }
    }

    let parent: Vec<usize> = (0..2 * b).collect();
    recurse(0, b, size, &mut chosen, &parent, &mut best, p, q, cost);
    best
}

/// Random small network with a matching head.
pub fn random_network(rng: &mut Rng) -> ModelState {
    let input = 2 + rng.below(5);
    let k = 2 + rng.below(3);
    let mut layers = Vec::new();
    let mut fan_in = input;
    for _ in 0..rng.below(3) {
        let width = 1 + rng.below(6);
        let act = if rng.unit() < 0.5 {
            Activation::Relu
        } else {
            Activation::Sigmoid
        };
        layers.push(LayerSpec::new(fan_in, width, act));
        fan_in = width;
    }
    layers.push(head_layer(fan_in, k));
    let mut model = ModelState::init(layers, rng.below(1 << 30) as u64).unwrap();
    // non-zero biases so no unit sits exactly at a kink
    for p in model.params_mut() {
        *p += rng.normal(0.0, 0.1);
    }
    model
}

pub fn num_classes(model: &ModelState) -> usize {
    let head = model.layers().last().unwrap();
    if head.activation == Activation::Sigmoid {
        2
    } else {
        head.fan_out
    }
}

pub fn random_batch(model: &ModelState, rng: &mut Rng) -> Vec<(Vec<f64>, usize)> {
    let k = num_classes(model);
    (0..1 + rng.below(6))
        .map(|_| {
            let x = (0..model.input_size())
                .map(|_| rng.normal(0.0, 1.0))
                .collect();
            (x, rng.below(k))
        })
        .collect()
}

/// Largest relative error between the analytic gradient and central
/// differences of the mean loss. Relative error uses
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(model: &ModelState, batch: &[(Vec<f64>, usize)], h: f64, floor: f64) -> f64 {
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let analytic = model.gradient(&refs).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..model.params().len() {
        let mut plus = model.clone();
        plus.params_mut()[i] += h;
        let mut minus = model.clone();
        minus.params_mut()[i] -= h;
        let numeric =
            (plus.mean_loss(&refs).unwrap() - minus.mean_loss(&refs).unwrap()) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// `I(Y; Ŷ)` in bits straight from a count table.
pub fn mi_from_counts(k: usize, counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let n = n as f64;
    let row: Vec<f64> = (0..k)
        .map(|i| counts[i * k..(i + 1) * k].iter().sum::<u64>() as f64 / n)
        .collect();
    let col: Vec<f64> = (0..k)
        .map(|j| (0..k).map(|i| counts[i * k + j]).sum::<u64>() as f64 / n)
        .collect();
    let mut mi = 0.0;
    for i in 0..k {
        for j in 0..k {
            let pij = counts[i * k + j] as f64 / n;
            if pij > 0.0 {
                mi += pij * (pij / (row[i] * col[j])).log2();
            }
        }
    }
    mi
}

pub fn entropy_bits(p: &[f64]) -> f64 {
    p.iter().filter(|x| **x > 0.0).map(|x| -x * x.log2()).sum()
}
