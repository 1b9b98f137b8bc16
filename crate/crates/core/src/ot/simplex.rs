//! Exact transportation solver: the network simplex method specialised to
//! the complete bipartite supply/demand graph.
//!
//! A basis is a spanning tree on the `m + n` row and column nodes with
//! `m + n − 1` arcs. Each iteration recomputes the tree flows and the node
//! potentials from scratch, prices arcs in row-major order and pivots on the
//! first arc with a negative reduced cost (Bland's rule; the leaving arc is
//! the lowest-indexed blocking arc). The initial tree is the north-west
//! corner staircase.
//!
//! Floating-point instances perturb the supplies by `ε` (and the last demand
//! by `m·ε`) so that every basis is non-degenerate; the flows of the final
//! tree are then recomputed from the unperturbed masses. Exact scalar types
//! run with `ε = 0` and rely on Bland's rule alone.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mask::ProbabilityVector;
use crate::matrix::TokenMatrix;
use crate::ot::cost::CostMatrix;
use crate::scalar::Scalar;

/// Largest tolerated difference between the two marginal totals.
pub const BALANCE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct SimplexOptions<T> {
    pub perturbation: T,
    pub tolerance: T,
    pub max_pivots: usize,
}

impl<T: Scalar> Default for SimplexOptions<T> {
    fn default() -> Self {
        Self {
            perturbation: T::perturbation(),
            tolerance: T::tolerance(),
            max_pivots: 1_000_000,
        }
    }
}

/// Optimal coupling with row sums `a` (reference) and column sums `b` (target).
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan<T> {
    plan: TokenMatrix<T>,
    objective: T,
    basis: Vec<(usize, usize)>,
    pivots: usize,
}

impl<T: Scalar> TransportPlan<T> {
    /// Wraps a plan read back from disk; the objective is recomputed.
    pub fn from_matrix(plan: TokenMatrix<T>, cost: &CostMatrix<T>) -> Result<Self> {
        if (plan.rows(), plan.cols()) != (cost.rows(), cost.cols()) {
            return Err(Error::Shape(format!(
                "plan is {}x{}, costs are {}x{}",
                plan.rows(),
                plan.cols(),
                cost.rows(),
                cost.cols()
            )));
        }
        if plan.data().iter().any(|&t| t < T::zero()) {
            return Err(Error::Validation("plan has negative entries".into()));
        }
        let objective = inner(&plan, cost);
        let basis = (0..plan.rows())
            .flat_map(|i| (0..plan.cols()).map(move |j| (i, j)))
            .filter(|&(i, j)| plan.get(i, j) > T::zero())
            .collect();
        Ok(Self {
            plan,
            objective,
            basis,
            pivots: 0,
        })
    }

    pub fn matrix(&self) -> &TokenMatrix<T> {
        &self.plan
    }

    pub fn objective(&self) -> T {
        self.objective
    }

    /// Arcs of the final spanning tree; every positive entry is among them.
    pub fn basis(&self) -> &[(usize, usize)] {
        &self.basis
    }

    pub fn pivots(&self) -> usize {
        self.pivots
    }

    pub fn sources(&self) -> usize {
        self.plan.rows()
    }

    pub fn targets(&self) -> usize {
        self.plan.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.plan.get(i, j)
    }

    /// `(max |row_sum − a|, max |col_sum − b|)`.
    pub fn marginal_residuals(&self, a: &[T], b: &[T]) -> (T, T) {
        let worst = |sums: Vec<T>, target: &[T]| {
            sums.iter()
                .zip(target)
                .fold(T::zero(), |m, (&s, &t)| m.max_of((s - t).abs()))
        };
        (
            worst(self.plan.row_sums(), a),
            worst(self.plan.col_sums(), b),
        )
    }
}

fn inner<T: Scalar>(plan: &TokenMatrix<T>, cost: &CostMatrix<T>) -> T {
    plan.data()
        .iter()
        .zip(cost.matrix().data())
        .fold(T::zero(), |acc, (&t, &c)| acc + t * c)
}

pub fn solve_ot<T: Scalar>(
    a: &ProbabilityVector<T>,
    b: &ProbabilityVector<T>,
    cost: &CostMatrix<T>,
) -> Result<TransportPlan<T>> {
    solve_ot_with(a, b, cost, &SimplexOptions::default())
}

pub fn solve_ot_with<T: Scalar>(
    a: &ProbabilityVector<T>,
    b: &ProbabilityVector<T>,
    cost: &CostMatrix<T>,
    opts: &SimplexOptions<T>,
) -> Result<TransportPlan<T>> {
    let (m, n) = (a.len(), b.len());
    if (cost.rows(), cost.cols()) != (m, n) {
        return Err(Error::Shape(format!(
            "cost matrix is {}x{}, masses are {m} and {n}",
            cost.rows(),
            cost.cols()
        )));
    }
    cost.matrix().ensure_finite("cost matrix")?;
    let gap = (a.total() - b.total()).abs();
    if gap > T::from_f64_lossy(BALANCE_TOLERANCE) {
        return Err(Error::Infeasible(format!(
            "marginal totals differ by {gap:?}"
        )));
    }

    let eps = opts.perturbation;
    let mut supply = a.weights().to_vec();
    let mut demand = b.weights().to_vec();
    if eps != T::zero() {
        for s in &mut supply {
            *s = *s + eps;
        }
        demand[n - 1] = demand[n - 1] + eps * T::from_count(m);
    }

    let mut basis = north_west_corner(&supply, &demand);
    let mut in_basis = vec![false; m * n];
    for &(i, j) in &basis {
        in_basis[i * n + j] = true;
    }

    let mut pivots = 0;
    loop {
        let tree = Tree::new(m, n, &basis);
        let flows = tree.flows(&basis, &supply, &demand);
        let (u, v) = tree.potentials(&basis, cost);

        let entering = (0..m * n).find(|&k| {
            let (i, j) = (k / n, k % n);
            !in_basis[k] && cost.get(i, j) - u[i] - v[j] < -opts.tolerance
        });
        let Some(k) = entering else { break };
        let (ei, ej) = (k / n, k % n);

        if pivots >= opts.max_pivots {
            return Err(Error::NotConverged { pivots });
        }
        pivots += 1;

        // Cycle: entering arc (+), then the tree path row ei → column ej
        // whose arcs alternate −, +, −, … starting at ei.
        let path = tree.path(ei, m + ej);
        let leaving = path
            .iter()
            .step_by(2)
            .copied()
            .min_by(|&x, &y| {
                flows[x]
                    .partial_cmp(&flows[y])
                    .expect("finite flows")
                    .then_with(|| arc_index(basis[x], n).cmp(&arc_index(basis[y], n)))
            })
            .expect("cycle has a decreasing arc");

        let (li, lj) = basis[leaving];
        in_basis[li * n + lj] = false;
        in_basis[k] = true;
        basis[leaving] = (ei, ej);
    }

    let tree = Tree::new(m, n, &basis);
    let flows = tree.flows(&basis, a.weights(), b.weights());
    let mut plan = TokenMatrix::zeros(m, n);
    for (&(i, j), &f) in basis.iter().zip(&flows) {
        // Undoing the perturbation may leave round-off sized negatives.
        plan.set(i, j, f.max_of(T::zero()));
    }
    let objective = inner(&plan, cost);
    Ok(TransportPlan {
        plan,
        objective,
        basis,
        pivots,
    })
}

fn arc_index((i, j): (usize, usize), n: usize) -> usize {
    i * n + j
}

/// Staircase from `(0, 0)` to `(m−1, n−1)`: exactly `m + n − 1` arcs.
fn north_west_corner<T: Scalar>(supply: &[T], demand: &[T]) -> Vec<(usize, usize)> {
    let (m, n) = (supply.len(), demand.len());
    let mut arcs = Vec::with_capacity(m + n - 1);
    let (mut i, mut j) = (0, 0);
    let (mut row_left, mut col_left) = (supply[0], demand[0]);
    loop {
        arcs.push((i, j));
        if i == m - 1 && j == n - 1 {
            break;
        }
        let shipped = row_left.min_of(col_left);
        row_left = row_left - shipped;
        col_left = col_left - shipped;
        let row_done = row_left <= T::zero();
        if j == n - 1 || (i < m - 1 && row_done) {
            i += 1;
            row_left = supply[i];
        } else {
            j += 1;
            col_left = demand[j];
        }
    }
    arcs
}

/// Spanning tree over rows `0..m` and columns `m..m+n`, rooted at row 0.
struct Tree {
    m: usize,
    /// BFS order from the root.
    order: Vec<usize>,
    parent: Vec<Option<(usize, usize)>>, // (parent node, basis arc index)
    depth: Vec<usize>,
}

impl Tree {
    fn new(m: usize, n: usize, basis: &[(usize, usize)]) -> Self {
        let nodes = m + n;
        let mut adjacency = vec![Vec::new(); nodes];
        for (e, &(i, j)) in basis.iter().enumerate() {
            adjacency[i].push((m + j, e));
            adjacency[m + j].push((i, e));
        }
        let mut parent = vec![None; nodes];
        let mut depth = vec![0; nodes];
        let mut seen = vec![false; nodes];
        let mut order = Vec::with_capacity(nodes);
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &(w, e) in &adjacency[v] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = Some((v, e));
                    depth[w] = depth[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        debug_assert_eq!(order.len(), nodes, "basis must span all nodes");
        Self {
            m,
            order,
            parent,
            depth,
        }
    }

    /// Arc flows meeting the node balances, by peeling leaves toward the root.
    fn flows<T: Scalar>(&self, basis: &[(usize, usize)], supply: &[T], demand: &[T]) -> Vec<T> {
        let mut residual: Vec<T> = supply.iter().chain(demand).copied().collect();
        let mut flows = vec![T::zero(); basis.len()];
        for &v in self.order.iter().rev() {
            if let Some((p, e)) = self.parent[v] {
                flows[e] = residual[v];
                residual[p] = residual[p] - residual[v];
            }
        }
        flows
    }

    /// Potentials `u` (rows) and `v` (columns) with `u_i + v_j = c_ij` on tree arcs.
    fn potentials<T: Scalar>(
        &self,
        basis: &[(usize, usize)],
        cost: &CostMatrix<T>,
    ) -> (Vec<T>, Vec<T>) {
        let mut pot = vec![T::zero(); self.parent.len()];
        for &v in &self.order {
            if let Some((p, e)) = self.parent[v] {
                let (i, j) = basis[e];
                pot[v] = cost.get(i, j) - pot[p];
            }
        }
        let cols = pot.split_off(self.m);
        (pot, cols)
    }

    /// Basis arc indices along the tree path from node `from` to node `to`.
    fn path(&self, from: usize, to: usize) -> Vec<usize> {
        let (mut x, mut y) = (from, to);
        let mut head = Vec::new();
        let mut tail = Vec::new();
        while x != y {
            if self.depth[x] >= self.depth[y] {
                let (p, e) = self.parent[x].expect("non-root");
                head.push(e);
                x = p;
            } else {
                let (p, e) = self.parent[y].expect("non-root");
                tail.push(e);
                y = p;
            }
        }
        head.extend(tail.into_iter().rev());
        head
    }
}
