//! Independent reference implementations and instance generators shared by
//! the integration tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use codi::{AttentionBundle, ProbabilityVector, TokenMatrix};
use num_rational::Ratio;
use rand::Rng;

/// Masses are integers in units of `1 / MASS_UNITS`.
pub const MASS_UNITS: i64 = 1_000_000;

/// Random integer masses summing to `MASS_UNITS`, some possibly zero.
pub fn grid_masses(r: &mut impl Rng, n: usize, allow_zero: bool) -> Vec<i64> {
    loop {
        let mut cuts: Vec<i64> = (0..n - 1).map(|_| r.random_range(0..=MASS_UNITS)).collect();
        cuts.push(0);
        cuts.push(MASS_UNITS);
        cuts.sort_unstable();
        let masses: Vec<i64> = cuts.windows(2).map(|w| w[1] - w[0]).collect();
        if allow_zero || masses.iter().all(|&m| m > 0) {
            return masses;
        }
    }
}

pub fn to_probabilities(units: &[i64]) -> ProbabilityVector<f64> {
    ProbabilityVector::new(units.iter().map(|&u| u as f64 / MASS_UNITS as f64).collect())
        .expect("grid masses sum to one")
}

struct Arc {
    to: usize,
    cap: i64,
    cost: f64,
}

/// Min-cost flow by successive shortest paths (Bellman–Ford on the residual
/// graph). Returns the optimal flow on each `(i, j)` pair in mass units.
pub fn ssp_transport(a: &[i64], b: &[i64], cost: &[Vec<f64>]) -> Vec<Vec<i64>> {
    let (m, n) = (a.len(), b.len());
    let source = 0;
    let sink = m + n + 1;
    let nodes = m + n + 2;
    let mut arcs: Vec<Arc> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nodes];
    let add = |arcs: &mut Vec<Arc>, adj: &mut Vec<Vec<usize>>, u: usize, v: usize, cap: i64, c: f64| {
        adj[u].push(arcs.len());
        arcs.push(Arc { to: v, cap, cost: c });
        adj[v].push(arcs.len());
        arcs.push(Arc { to: u, cap: 0, cost: -c });
    };
    for (i, &ai) in a.iter().enumerate() {
        add(&mut arcs, &mut adj, source, 1 + i, ai, 0.0);
    }
    let mut pair_arc = vec![vec![0usize; n]; m];
    for i in 0..m {
        for j in 0..n {
            pair_arc[i][j] = arcs.len();
            add(&mut arcs, &mut adj, 1 + i, 1 + m + j, i64::MAX / 4, cost[i][j]);
        }
    }
    for (j, &bj) in b.iter().enumerate() {
        add(&mut arcs, &mut adj, 1 + m + j, sink, bj, 0.0);
    }

    loop {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via = vec![usize::MAX; nodes];
        let mut queued = vec![false; nodes];
        let mut queue = VecDeque::from([source]);
        dist[source] = 0.0;
        while let Some(u) = queue.pop_front() {
            queued[u] = false;
            for &e in &adj[u] {
                let arc = &arcs[e];
                if arc.cap > 0 && dist[u] + arc.cost < dist[arc.to] - 1e-15 {
                    dist[arc.to] = dist[u] + arc.cost;
                    via[arc.to] = e;
                    if !queued[arc.to] {
                        queued[arc.to] = true;
                        queue.push_back(arc.to);
                    }
                }
            }
        }
        if !dist[sink].is_finite() {
            break;
        }
        let mut push = i64::MAX;
        let mut v = sink;
        while v != source {
            let e = via[v];
            push = push.min(arcs[e].cap);
            v = arcs[e ^ 1].to;
        }
        let mut v = sink;
        while v != source {
            let e = via[v];
            arcs[e].cap -= push;
            arcs[e ^ 1].cap += push;
            v = arcs[e ^ 1].to;
        }
    }
    pair_arc
        .iter()
        .map(|row| row.iter().map(|&e| arcs[e ^ 1].cap).collect())
        .collect()
}

pub fn ssp_objective(a: &[i64], b: &[i64], cost: &[Vec<f64>]) -> f64 {
    let flow = ssp_transport(a, b, cost);
    let mut total = 0.0;
    for (i, row) in flow.iter().enumerate() {
        for (j, &f) in row.iter().enumerate() {
            total += f as f64 / MASS_UNITS as f64 * cost[i][j];
        }
    }
    total
}

/// Minimum of `Σ_i cost[i][π(i)]` over every permutation `π`.
pub fn min_over_permutations<T>(cost: &[Vec<T>]) -> T
where
    T: Clone + PartialOrd + std::ops::Add<Output = T> + num_traits::Zero,
{
    fn go<T>(cost: &[Vec<T>], row: usize, used: &mut Vec<bool>, acc: T, best: &mut Option<T>)
    where
        T: Clone + PartialOrd + std::ops::Add<Output = T>,
    {
        if row == cost.len() {
            if best.as_ref().is_none_or(|b| acc < *b) {
                *best = Some(acc);
            }
            return;
        }
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc.clone() + cost[row][j].clone(), best);
                used[j] = false;
            }
        }
    }
    let mut best = None;
    go(cost, 0, &mut vec![false; cost.len()], T::zero(), &mut best);
    best.expect("at least one permutation")
}

/// Otsu's method written out directly: every value is assigned the number
/// of histogram edges it lies strictly above, and each split `k` is scored
/// by the between-class variance `w0·w1·(μ0 − μ1)²` in exact arithmetic.
/// Returns the lowest best split, or `None` when no split has two classes.
pub fn otsu_scan(values: &[f64]) -> Option<(usize, Vec<bool>)> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return None;
    }
    let levels: Vec<i128> = values
        .iter()
        .map(|&v| {
            let x = (v - lo) / (hi - lo);
            (1..256).filter(|&m| x > m as f64 / 256.0).count() as i128
        })
        .collect();
    let total = levels.len() as i128;
    let mut best: Option<(usize, Ratio<i128>)> = None;
    for k in 0..255i128 {
        let (below, above): (Vec<i128>, Vec<i128>) = levels.iter().partition(|&&l| l <= k);
        if below.is_empty() || above.is_empty() {
            continue;
        }
        let n0 = below.len() as i128;
        let n1 = above.len() as i128;
        let w0 = Ratio::new(n0, total);
        let w1 = Ratio::new(n1, total);
        let mu0 = Ratio::new(below.iter().sum(), n0);
        let mu1 = Ratio::new(above.iter().sum(), n1);
        let score = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((k as usize, score));
        }
    }
    best.map(|(k, _)| (k, levels.iter().map(|&l| l > k as i128).collect()))
}

/// Softmax attention of each query over all of `keys`, computed row by row.
pub fn dense_attention(
    q: &TokenMatrix<f64>,
    keys: &[&[f64]],
    values: &[&[f64]],
    keep: &dyn Fn(usize) -> bool,
) -> Vec<Vec<f64>> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    q.iter_rows()
        .map(|qr| {
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| qr.iter().zip(*k).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(c, l)| if keep(c) { (l - top).exp() } else { 0.0 })
                .collect();
            let z: f64 = weights.iter().sum();
            let mut out = vec![0.0; values[0].len()];
            for (w, v) in weights.iter().zip(values) {
                for (o, x) in out.iter_mut().zip(*v) {
                    *o += w / z * x;
                }
            }
            out
        })
        .collect()
}

/// Dense evaluation of refinement: target keys are always kept, reference
/// key `j` only when `selected(j)`.
pub fn dense_refine(b: &AttentionBundle<f64>, selected: &dyn Fn(usize) -> bool) -> Vec<Vec<f64>> {
    let nt = b.k_target.rows();
    let keys: Vec<&[f64]> = b.k_target.iter_rows().chain(b.k_reference.iter_rows()).collect();
    let values: Vec<&[f64]> = b.v_target.iter_rows().chain(b.v_reference.iter_rows()).collect();
    dense_attention(&b.q_target, &keys, &values, &|c| c < nt || selected(c - nt))
}

pub fn random_matrix(r: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> TokenMatrix<f64> {
    TokenMatrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| (r.random::<f64>() * 2.0 - 1.0) * scale).collect(),
    )
    .unwrap()
}

pub fn random_bundle(r: &mut impl Rng) -> AttentionBundle<f64> {
    let d = r.random_range(1..=8);
    let nr = r.random_range(1..=6);
    let k_reference = random_matrix(r, nr, d, 2.0);
    let v_reference = random_matrix(r, nr, d, 1.0);
    bundle_for_reference(r, &k_reference, &v_reference)
}

/// A random target attending to the given reference keys and values.
pub fn bundle_for_reference(
    r: &mut impl Rng,
    k_reference: &TokenMatrix<f64>,
    v_reference: &TokenMatrix<f64>,
) -> AttentionBundle<f64> {
    let d = k_reference.cols();
    let q = r.random_range(1..=6);
    let nt = r.random_range(1..=6);
    AttentionBundle::new(
        random_matrix(r, q, d, 2.0),
        random_matrix(r, nt, d, 2.0),
        random_matrix(r, nt, d, 1.0),
        k_reference.clone(),
        v_reference.clone(),
    )
    .unwrap()
}

fn center_and_normalize(p: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let n = p.len() as f64;
    let mx = p.iter().map(|q| q[0]).sum::<f64>() / n;
    let my = p.iter().map(|q| q[1]).sum::<f64>() / n;
    let c: Vec<[f64; 2]> = p.iter().map(|q| [q[0] - mx, q[1] - my]).collect();
    let s = c.iter().map(|q| q[0] * q[0] + q[1] * q[1]).sum::<f64>().sqrt();
    c.iter().map(|q| [q[0] / s, q[1] / s]).collect()
}

/// Squared error and mean distance of `γ·x·M` against `y` for the
/// orthogonal `M` at `angle` (a reflection when `flip`), with `γ` chosen in
/// closed form.
fn scan_eval(x: &[[f64; 2]], y: &[[f64; 2]], angle: f64, flip: bool) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let m = if flip { [[c, s], [s, -c]] } else { [[c, -s], [s, c]] };
    let mapped: Vec<[f64; 2]> = x
        .iter()
        .map(|p| [p[0] * m[0][0] + p[1] * m[1][0], p[0] * m[0][1] + p[1] * m[1][1]])
        .collect();
    let inner: f64 = mapped.iter().zip(y).map(|(p, q)| p[0] * q[0] + p[1] * q[1]).sum();
    let gamma = inner.max(0.0);
    let mut sse = 0.0;
    let mut dist = 0.0;
    for (p, q) in mapped.iter().zip(y) {
        let dx = gamma * p[0] - q[0];
        let dy = gamma * p[1] - q[1];
        sse += dx * dx + dy * dy;
        dist += dx.hypot(dy);
    }
    (sse, dist / x.len() as f64)
}

/// Pose distance by scanning the rotation angle: a 1e-3 rad grid over the
/// circle, then a 1e-5 rad grid around the best coarse angle.
pub fn rotation_scan_distance(p_i: &[[f64; 2]], p_j: &[[f64; 2]], allow_reflection: bool) -> f64 {
    let x = center_and_normalize(p_i);
    let y = center_and_normalize(p_j);
    let flips: &[bool] = if allow_reflection { &[false, true] } else { &[false] };
    let mut best = (f64::INFINITY, f64::NAN);
    for &flip in flips {
        let coarse_steps = (std::f64::consts::TAU / 1e-3).ceil() as usize;
        let mut coarse = (f64::INFINITY, 0.0);
        for k in 0..coarse_steps {
            let angle = k as f64 * 1e-3;
            let (sse, _) = scan_eval(&x, &y, angle, flip);
            if sse < coarse.0 {
                coarse = (sse, angle);
            }
        }
        for k in -200..=200 {
            let angle = coarse.1 + k as f64 * 1e-5;
            let (sse, dist) = scan_eval(&x, &y, angle, flip);
            if sse < best.0 {
                best = (sse, dist);
            }
        }
    }
    best.1
}

/// Applies `s·R(θ)` (column convention) and a translation.
pub fn similarity_transform(p: &[[f64; 2]], scale: f64, angle: f64, shift: [f64; 2]) -> Vec<[f64; 2]> {
    let (s, c) = angle.sin_cos();
    p.iter()
        .map(|q| {
            [
                scale * (c * q[0] - s * q[1]) + shift[0],
                scale * (s * q[0] + c * q[1]) + shift[1],
            ]
        })
        .collect()
}

pub fn random_points(r: &mut impl Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|_| [r.random::<f64>(), r.random::<f64>()]).collect()
}
