//! Exact solver for the discrete transportation problem.
//!
//! Network simplex specialized to the dense bipartite transport polytope:
//! minimize `sum_ij plan[i][j] * cost[i][j]` subject to fixed row and column
//! marginals. The initial basis comes from the northwest-corner rule with
//! exhaust-supply-first tie-breaking; with strictly positive marginals (zero
//! rows/columns are stripped first) that basis is strongly feasible when the
//! tree is rooted at the first supply node, and the leaving-arc rule below
//! (last blocking arc on the cycle, walking from the apex in the entering
//! arc's direction) keeps it strongly feasible. Strong feasibility rules out
//! cycling, so termination needs no perturbation and the result is an exact
//! vertex of the polytope.

use crate::{Error, Result};

const NO_NODE: usize = usize::MAX;

/// A basic optimal solution: positive plan entries and the objective value.
#[derive(Debug, Clone)]
pub struct TransportSolution {
    pub entries: Vec<(usize, usize, f64)>,
    pub objective: f64,
    pub pivots: usize,
}

struct Simplex<'a> {
    n: usize,
    m: usize,
    cost: &'a [f64], // n*m, row-major, scaled to max |cost| = 1
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
    flow_up: Vec<f64>, // flow on the arc joining a node to its parent
    depth: Vec<usize>,
    pot: Vec<f64>,
}

impl<'a> Simplex<'a> {
    fn is_supply(&self, node: usize) -> bool {
        node < self.n
    }

    /// Cost of the tree arc between `child` and its parent.
    fn arc_cost(&self, child: usize) -> f64 {
        let p = self.parent[child];
        if self.is_supply(child) {
            self.cost[child * self.m + (p - self.n)]
        } else {
            self.cost[p * self.m + (child - self.n)]
        }
    }

    /// Recomputes depths and potentials by a walk from the root.
    fn refresh_potentials(&mut self) {
        let root = 0;
        self.depth[root] = 0;
        self.pot[root] = 0.0;
        let mut stack = vec![root];
        while let Some(node) = stack.pop() {
            for &c in &self.children[node] {
                self.depth[c] = self.depth[node] + 1;
                // basic arcs have zero reduced cost: c_ij + pot_i - pot_j = 0
                self.pot[c] = if self.is_supply(c) {
                    self.pot[node] - self.arc_cost(c)
                } else {
                    self.pot[node] + self.arc_cost(c)
                };
                stack.push(c);
            }
        }
    }

    fn reduced_cost(&self, i: usize, j: usize) -> f64 {
        self.cost[i * self.m + j] + self.pot[i] - self.pot[self.n + j]
    }

    /// Path from a node up to (and including) the root of its subtree walk.
    fn path_to_apex(&self, mut a: usize, mut b: usize) -> (Vec<usize>, Vec<usize>) {
        let mut pa = vec![a];
        let mut pb = vec![b];
        while self.depth[a] > self.depth[b] {
            a = self.parent[a];
            pa.push(a);
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b];
            pb.push(b);
        }
        while a != b {
            a = self.parent[a];
            b = self.parent[b];
            pa.push(a);
            pb.push(b);
        }
        (pa, pb)
    }

    fn detach(&mut self, child: usize) {
        let p = self.parent[child];
        let pos = self.children[p].iter().position(|&c| c == child).unwrap();
        self.children[p].swap_remove(pos);
        self.parent[child] = NO_NODE;
    }

    fn attach(&mut self, child: usize, parent: usize, flow: f64) {
        self.parent[child] = parent;
        self.children[parent].push(child);
        self.flow_up[child] = flow;
    }

    /// Performs one pivot with entering arc (supply `es`, demand node `ed`).
    fn pivot(&mut self, es: usize, ed: usize) {
        let (path_es, path_ed) = self.path_to_apex(es, ed);

        // Walk the cycle in the entering arc's direction starting at the
        // apex: down path_es, across (es -> ed), up path_ed. A tree arc is
        // forward when its physical supply->demand direction matches the
        // walk. In walk order, collect (child identifying the arc, forward).
        let mut cycle: Vec<(usize, bool)> = Vec::with_capacity(path_es.len() + path_ed.len());
        for t in (0..path_es.len() - 1).rev() {
            let child = path_es[t];
            cycle.push((child, !self.is_supply(child)));
        }
        for t in 0..path_ed.len() - 1 {
            let child = path_ed[t];
            cycle.push((child, self.is_supply(child)));
        }

        let mut delta = f64::INFINITY;
        for &(child, forward) in &cycle {
            if !forward {
                delta = delta.min(self.flow_up[child]);
            }
        }
        // last blocking backward arc in walk order leaves the basis
        let mut leaving = NO_NODE;
        let mut leaving_on_es_side = false;
        for (idx, &(child, forward)) in cycle.iter().enumerate() {
            if !forward && self.flow_up[child] <= delta {
                leaving = child;
                leaving_on_es_side = idx < path_es.len() - 1;
            }
        }
        debug_assert!(leaving != NO_NODE, "transport cycle without backward arc");

        for &(child, forward) in &cycle {
            if forward {
                self.flow_up[child] += delta;
            } else {
                self.flow_up[child] -= delta;
            }
        }

        // Re-hang the detached subtree from the entering arc endpoint that
        // fell inside it, reversing parent links on the way up to the cut.
        self.detach(leaving);
        let (mut node, other, mut flow_new) = if leaving_on_es_side {
            (es, ed, delta)
        } else {
            (ed, es, delta)
        };
        let mut prev = other;
        while node != NO_NODE {
            let next = self.parent[node];
            let flow_next = self.flow_up[node];
            if next != NO_NODE {
                self.detach(node);
            }
            self.attach(node, prev, flow_new);
            prev = node;
            node = next;
            flow_new = flow_next;
        }
        self.refresh_potentials();
    }
}

/// Northwest-corner initial basis as a staircase path of n + m - 1 cells.
fn northwest_corner(a: &[f64], b: &[f64]) -> Vec<(usize, usize, f64)> {
    let (n, m) = (a.len(), b.len());
    let mut rem_a = a.to_vec();
    let mut rem_b = b.to_vec();
    let (mut i, mut j) = (0, 0);
    let mut cells = Vec::with_capacity(n + m - 1);
    loop {
        let x = rem_a[i].min(rem_b[j]);
        cells.push((i, j, x));
        rem_a[i] -= x;
        rem_b[j] -= x;
        if i == n - 1 && j == m - 1 {
            break;
        }
        // prefer moving down on ties so degenerate arcs keep supply children
        if rem_a[i] <= 0.0 && i < n - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    cells
}

/// Solves the balanced transport problem on strictly positive marginals.
fn solve_positive(cost: &[f64], a: &[f64], b: &[f64]) -> Result<TransportSolution> {
    let (n, m) = (a.len(), b.len());
    let nodes = n + m;

    let scale = cost.iter().fold(0.0f64, |acc, &c| acc.max(c.abs()));
    let scaled: Vec<f64> = if scale > 0.0 {
        cost.iter().map(|&c| c / scale).collect()
    } else {
        vec![0.0; cost.len()]
    };

    let mut s = Simplex {
        n,
        m,
        cost: &scaled,
        parent: vec![NO_NODE; nodes],
        children: vec![Vec::new(); nodes],
        flow_up: vec![0.0; nodes],
        depth: vec![0; nodes],
        pot: vec![0.0; nodes],
    };

    // Build the tree from the staircase: each cell after the first attaches
    // exactly one new node to the previous cell's nodes.
    let cells = northwest_corner(a, b);
    let mut in_tree = vec![false; nodes];
    in_tree[0] = true;
    for &(i, j, x) in &cells {
        let (si, dj) = (i, n + j);
        if !in_tree[dj] {
            s.attach(dj, si, x);
            in_tree[dj] = true;
        } else if !in_tree[si] {
            s.attach(si, dj, x);
            in_tree[si] = true;
        } else {
            return Err(Error::Numeric("degenerate northwest staircase".into()));
        }
    }
    s.refresh_potentials();

    let tol = 1e-11;
    let num_arcs = n * m;
    let block = ((num_arcs as f64).sqrt() as usize).max(8).min(num_arcs);
    let pivot_budget = 1000 + 300 * nodes;
    let mut next_arc = 0usize;
    let mut pivots = 0usize;

    loop {
        let mut best_arc = NO_NODE;
        let mut best_rc = -tol;
        let mut scanned = 0;
        while scanned < num_arcs {
            let stop = (next_arc + block).min(next_arc + (num_arcs - scanned));
            for arc in next_arc..stop {
                let idx = arc % num_arcs;
                let (i, j) = (idx / m, idx % m);
                let rc = s.reduced_cost(i, j);
                if rc < best_rc {
                    best_rc = rc;
                    best_arc = idx;
                }
            }
            scanned += stop - next_arc;
            next_arc = stop % num_arcs;
            if best_arc != NO_NODE {
                break;
            }
        }
        if best_arc == NO_NODE {
            break; // no arc prices below -tol: optimal
        }
        let (i, j) = (best_arc / m, best_arc % m);
        // skip arcs already in the tree (their reduced cost is float noise)
        if s.parent[i] == s.n + j || s.parent[s.n + j] == i {
            continue;
        }
        s.pivot(i, s.n + j);
        pivots += 1;
        if pivots > pivot_budget {
            return Err(Error::Numeric(format!(
                "network simplex exceeded pivot budget ({pivot_budget})"
            )));
        }
    }

    let mut entries = Vec::new();
    let mut objective = 0.0;
    for child in 1..nodes {
        let flow = s.flow_up[child];
        if flow > 0.0 {
            let (i, j) = if s.is_supply(child) {
                (child, s.parent[child] - n)
            } else {
                (s.parent[child], child - n)
            };
            objective += flow * cost[i * m + j];
            entries.push((i, j, flow));
        }
    }
    entries.sort_unstable_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));

    // feasibility audit: incremental flow updates must not have drifted
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; m];
    for &(i, j, f) in &entries {
        row[i] += f;
        col[j] += f;
    }
    let err = row
        .iter()
        .zip(a)
        .chain(col.iter().zip(b))
        .map(|(&got, &want)| (got - want).abs())
        .fold(0.0f64, f64::max);
    if err > 1e-8 {
        return Err(Error::Numeric(format!(
            "transport marginals drifted by {err:.3e}"
        )));
    }

    Ok(TransportSolution {
        entries,
        objective,
        pivots,
    })
}

/// Exact minimum-cost transport between weighted point masses.
///
/// `cost` is row-major n x m and must be finite; marginals must be
/// non-negative and balanced within 1e-6 relative (they are rescaled to
/// match exactly). Zero-mass rows/columns are stripped before solving.
pub fn solve_transport(
    cost: &[f64],
    n: usize,
    m: usize,
    a: &[f64],
    b: &[f64],
) -> Result<TransportSolution> {
    if a.len() != n || b.len() != m || cost.len() != n * m {
        return Err(Error::InvalidData("transport dimensions disagree".into()));
    }
    if n == 0 || m == 0 {
        return Err(Error::InvalidData("empty marginal".into()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidData(
            "transport cost must be finite (mask infinities per class)".into(),
        ));
    }
    if a.iter().chain(b.iter()).any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::InvalidData("marginals must be finite and >= 0".into()));
    }
    let sum_a: f64 = a.iter().sum();
    let sum_b: f64 = b.iter().sum();
    if sum_a <= 0.0 || sum_b <= 0.0 {
        return Err(Error::Infeasible("marginals carry no mass".into()));
    }
    if (sum_a - sum_b).abs() > 1e-6 * sum_a.max(sum_b) {
        return Err(Error::Infeasible(format!(
            "unbalanced marginals: {sum_a} vs {sum_b}"
        )));
    }

    // strip zero-mass nodes and balance exactly
    let rows: Vec<usize> = (0..n).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..m).filter(|&j| b[j] > 0.0).collect();
    let ra: Vec<f64> = rows.iter().map(|&i| a[i]).collect();
    let rb: Vec<f64> = cols.iter().map(|&j| b[j] * (sum_a / sum_b)).collect();
    let mut rcost = Vec::with_capacity(rows.len() * cols.len());
    for &i in &rows {
        for &j in &cols {
            rcost.push(cost[i * m + j]);
        }
    }

    let reduced = solve_positive(&rcost, &ra, &rb)?;
    let entries = reduced
        .entries
        .into_iter()
        .map(|(i, j, f)| (rows[i], cols[j], f))
        .collect();
    Ok(TransportSolution {
        entries,
        objective: reduced.objective,
        pivots: reduced.pivots,
    })
}
