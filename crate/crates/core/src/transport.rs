//! Exact uncapacitated min-cost flow via the network simplex method.
//!
//! The solver works against an [`ArcOracle`] so arc lists may be explicit
//! (sparse graphs) or implicit (dense bipartite problems priced on the fly).
//! Contract: all real arc costs lie in `[0, 1]` — the callers in `metrics`
//! clamp at the truncation level — and supplies balance to zero up to float
//! dust. The basis is kept strongly feasible (Cunningham's leaving-arc rule)
//! with a Bland-style fallback after long degenerate stalls.

use crate::{Error, Result};

/// Cost of the artificial root arcs. Any real source-sink route costs at
/// most 1 under the clamped-cost contract, so this dominates every shortest
/// path while staying small enough not to poison f64 potential arithmetic.
const BIG_M: f64 = 64.0;

const RC_EPS: f64 = 1e-12;

pub(crate) trait ArcOracle {
    fn n_nodes(&self) -> usize;
    fn n_arcs(&self) -> usize;
    /// Directed endpoints `(tail, head)` of arc `a`.
    fn endpoints(&self, a: usize) -> (usize, usize);
    /// Cost of arc `a`; must lie in `[0, 1]`.
    fn cost(&self, a: usize) -> f64;
}

/// Explicit arc list.
pub(crate) struct ExplicitGraph {
    pub n_nodes: usize,
    pub tails: Vec<u32>,
    pub heads: Vec<u32>,
    pub costs: Vec<f64>,
}

impl ExplicitGraph {
    pub fn new(n_nodes: usize) -> Self {
        ExplicitGraph {
            n_nodes,
            tails: Vec::new(),
            heads: Vec::new(),
            costs: Vec::new(),
        }
    }

    /// Add a pair of opposite arcs with the same cost.
    pub fn add_edge(&mut self, a: usize, b: usize, cost: f64) {
        self.add_arc(a, b, cost);
        self.add_arc(b, a, cost);
    }

    pub fn add_arc(&mut self, tail: usize, head: usize, cost: f64) {
        debug_assert!(tail != head);
        debug_assert!((0.0..=1.0).contains(&cost));
        self.tails.push(tail as u32);
        self.heads.push(head as u32);
        self.costs.push(cost);
    }
}

impl ArcOracle for ExplicitGraph {
    fn n_nodes(&self) -> usize {
        self.n_nodes
    }
    fn n_arcs(&self) -> usize {
        self.costs.len()
    }
    fn endpoints(&self, a: usize) -> (usize, usize) {
        (self.tails[a] as usize, self.heads[a] as usize)
    }
    fn cost(&self, a: usize) -> f64 {
        self.costs[a]
    }
}

struct Solver<'a, O: ArcOracle> {
    graph: &'a O,
    n: usize,
    root: usize,
    n_real_arcs: usize,
    /// Orientation of artificial arc `k`: true means `k -> root`.
    art_to_root: Vec<bool>,
    parent: Vec<usize>,
    parent_arc: Vec<usize>,
    /// Flow on `parent_arc[v]`, measured in the arc's tail->head direction.
    flow: Vec<f64>,
    pi: Vec<f64>,
    depth: Vec<u32>,
    children: Vec<Vec<u32>>,
}

const NONE: usize = usize::MAX;

impl<'a, O: ArcOracle> Solver<'a, O> {
    fn new(graph: &'a O, supplies: &[f64]) -> Self {
        let n = graph.n_nodes();
        let root = n;
        let art_to_root: Vec<bool> = supplies.iter().map(|b| *b >= 0.0).collect();
        let mut parent = vec![root; n + 1];
        parent[root] = NONE;
        let mut parent_arc = vec![NONE; n + 1];
        let mut flow = vec![0.0; n + 1];
        let mut pi = vec![0.0; n + 1];
        let mut depth = vec![1u32; n + 1];
        depth[root] = 0;
        let mut children = vec![Vec::new(); n + 1];
        for k in 0..n {
            parent_arc[k] = graph.n_arcs() + k;
            flow[k] = supplies[k].abs();
            pi[k] = if art_to_root[k] { -BIG_M } else { BIG_M };
            children[root].push(k as u32);
        }
        Solver {
            graph,
            n,
            root,
            n_real_arcs: graph.n_arcs(),
            art_to_root,
            parent,
            parent_arc,
            flow,
            pi,
            depth,
            children,
        }
    }

    fn arc_endpoints(&self, a: usize) -> (usize, usize) {
        if a < self.n_real_arcs {
            self.graph.endpoints(a)
        } else {
            let k = a - self.n_real_arcs;
            if self.art_to_root[k] {
                (k, self.root)
            } else {
                (self.root, k)
            }
        }
    }

    fn reduced_cost(&self, a: usize) -> f64 {
        let (t, h) = self.graph.endpoints(a);
        self.graph.cost(a) + self.pi[t] - self.pi[h]
    }

    /// Most negative reduced cost within a block of arcs, scanning from
    /// `cursor`; wraps through all real arcs before reporting optimality.
    fn find_entering(&self, cursor: &mut usize, block: usize, bland: bool) -> Option<usize> {
        let a_total = self.n_real_arcs;
        if a_total == 0 {
            return None;
        }
        if bland {
            return (0..a_total).find(|&a| self.reduced_cost(a) < -RC_EPS);
        }
        let mut scanned = 0;
        while scanned < a_total {
            let mut best = None;
            let mut best_rc = -RC_EPS;
            let end = (*cursor + block).min(*cursor + (a_total - scanned));
            let mut a = *cursor;
            while a < end {
                let idx = if a >= a_total { a - a_total } else { a };
                let rc = self.reduced_cost(idx);
                if rc < best_rc {
                    best_rc = rc;
                    best = Some(idx);
                }
                a += 1;
            }
            scanned += end - *cursor;
            *cursor = if end >= a_total { end - a_total } else { end };
            if best.is_some() {
                return best;
            }
        }
        None
    }

    /// Pivot on entering arc `enter = (u, v)`. Returns the flow pushed.
    fn pivot(&mut self, enter: usize) -> f64 {
        let (u, v) = self.arc_endpoints(enter);

        // Tree paths from u and v up to their join. Arcs are recorded as the
        // child node whose parent arc lies on the path.
        let mut u_path: Vec<usize> = Vec::new();
        let mut v_path: Vec<usize> = Vec::new();
        let (mut a, mut b) = (u, v);
        while self.depth[a] > self.depth[b] {
            u_path.push(a);
            a = self.parent[a];
        }
        while self.depth[b] > self.depth[a] {
            v_path.push(b);
            b = self.parent[b];
        }
        while a != b {
            u_path.push(a);
            v_path.push(b);
            a = self.parent[a];
            b = self.parent[b];
        }

        // Circulation pushes along u -> v; it traverses the u side downward
        // (apex to u) and the v side upward (v to apex). An arc aligned with
        // the circulation gains flow, an opposed arc loses it.
        let sign_of = |solver: &Self, node: usize, upward: bool| -> f64 {
            let (t, _h) = solver.arc_endpoints(solver.parent_arc[node]);
            let arc_points_up = t == node;
            if arc_points_up == upward {
                1.0
            } else {
                -1.0
            }
        };

        let mut delta = f64::INFINITY;
        for &node in &u_path {
            if sign_of(self, node, false) < 0.0 {
                delta = delta.min(self.flow[node]);
            }
        }
        for &node in &v_path {
            if sign_of(self, node, true) < 0.0 {
                delta = delta.min(self.flow[node]);
            }
        }
        debug_assert!(delta.is_finite(), "unbounded pivot with nonnegative costs");
        if !delta.is_finite() {
            delta = 0.0;
        }

        // Leaving arc: last blocking arc in circulation order starting at the
        // apex (Cunningham's rule, keeps the basis strongly feasible).
        let mut leaving = NONE;
        for &node in u_path.iter().rev() {
            if sign_of(self, node, false) < 0.0 && self.flow[node] <= delta {
                leaving = node;
            }
        }
        for &node in &v_path {
            if sign_of(self, node, true) < 0.0 && self.flow[node] <= delta {
                leaving = node;
            }
        }
        debug_assert!(leaving != NONE);

        for &node in &u_path {
            self.flow[node] += sign_of(self, node, false) * delta;
        }
        for &node in &v_path {
            self.flow[node] += sign_of(self, node, true) * delta;
        }

        // The subtree cut off by the leaving arc contains exactly one
        // endpoint of the entering arc; re-root it there and hang it under
        // the other endpoint.
        let on_u_side = u_path.contains(&leaving);
        let (w, z) = if on_u_side { (u, v) } else { (v, u) };
        // Flow on the entering arc in its own direction is +delta.
        self.reroot_under(w, z, enter, delta, leaving);
        self.refresh_subtree(w);
        delta
    }

    /// Reverse parent pointers along `w ..= cut` and attach `w` below `z`
    /// through the entering arc.
    fn reroot_under(&mut self, w: usize, z: usize, enter_arc: usize, enter_flow: f64, cut: usize) {
        // Detach the subtree at the leaving arc.
        let cut_parent = self.parent[cut];
        remove_child(&mut self.children[cut_parent], cut);

        let mut node = w;
        let mut new_parent = z;
        let mut new_arc = enter_arc;
        let mut new_flow = enter_flow;
        loop {
            let old_parent = self.parent[node];
            let old_arc = self.parent_arc[node];
            let old_flow = self.flow[node];
            let was_cut = node == cut;
            if !was_cut {
                remove_child(&mut self.children[old_parent], node);
            }
            self.parent[node] = new_parent;
            self.parent_arc[node] = new_arc;
            self.flow[node] = new_flow;
            self.children[new_parent].push(node as u32);
            if was_cut {
                break;
            }
            new_parent = node;
            node = old_parent;
            new_arc = old_arc;
            new_flow = old_flow;
        }
    }

    /// Recompute potentials and depths below `start` from its (already
    /// correct) parent.
    fn refresh_subtree(&mut self, start: usize) {
        let mut stack = vec![start];
        while let Some(node) = stack.pop() {
            let p = self.parent[node];
            let a = self.parent_arc[node];
            let (t, _h) = self.arc_endpoints(a);
            let c = if a < self.n_real_arcs {
                self.graph.cost(a)
            } else {
                BIG_M
            };
            self.pi[node] = if t == p {
                c + self.pi[p]
            } else {
                self.pi[p] - c
            };
            self.depth[node] = self.depth[p] + 1;
            for &ch in &self.children[node] {
                stack.push(ch as usize);
            }
        }
    }

    fn solve(&mut self) -> Result<f64> {
        let block = ((self.n_real_arcs as f64).sqrt() as usize).clamp(64, 8192);
        let mut cursor = 0usize;
        let mut degenerate_streak = 0usize;
        let stall_limit = 1000 + 10 * self.n;
        loop {
            let bland = degenerate_streak > stall_limit;
            let Some(enter) = self.find_entering(&mut cursor, block, bland) else {
                break;
            };
            let delta = self.pivot(enter);
            if delta > 0.0 {
                degenerate_streak = 0;
            } else {
                degenerate_streak += 1;
            }
        }

        let mut objective = 0.0;
        for node in 0..self.n {
            let a = self.parent_arc[node];
            let f = self.flow[node];
            if a < self.n_real_arcs {
                objective += f * self.graph.cost(a);
            } else if f.abs() > 1e-7 {
                return Err(Error::InvalidArgument(format!(
                    "transport solver left {f} units on an artificial arc (unbalanced problem?)"
                )));
            }
        }
        // Basis arcs not indexed by their child node (none: every tree arc is
        // some node's parent arc), so the sum above is complete.
        Ok(objective)
    }
}

fn remove_child(children: &mut Vec<u32>, node: usize) {
    if let Some(pos) = children.iter().position(|&c| c as usize == node) {
        children.swap_remove(pos);
    }
}

/// Solve the min-cost flow problem and return its optimal cost.
///
/// `supplies` may carry float dust; the largest entry is adjusted so the
/// problem balances exactly.
pub(crate) fn min_cost_flow<O: ArcOracle>(graph: &O, supplies: &[f64]) -> Result<f64> {
    assert_eq!(graph.n_nodes(), supplies.len());
    let mut supplies = supplies.to_vec();
    let imbalance: f64 = supplies.iter().sum();
    if imbalance != 0.0 {
        let k = supplies
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        supplies[k] -= imbalance;
    }
    if supplies.iter().all(|b| *b == 0.0) {
        return Ok(0.0);
    }
    Solver::new(graph, &supplies).solve()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_transports_at_cost() {
        let mut g = ExplicitGraph::new(2);
        g.add_edge(0, 1, 0.25);
        let cost = min_cost_flow(&g, &[1.0, -1.0]).unwrap();
        assert!((cost - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_supplies_cost_nothing() {
        let mut g = ExplicitGraph::new(3);
        g.add_edge(0, 1, 0.5);
        g.add_edge(1, 2, 0.5);
        assert_eq!(min_cost_flow(&g, &[0.0, 0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn chain_prefers_short_route() {
        // 0 -> 1 -> 2 with cheap hops vs a direct expensive arc.
        let mut g = ExplicitGraph::new(3);
        g.add_edge(0, 1, 0.1);
        g.add_edge(1, 2, 0.1);
        g.add_edge(0, 2, 0.9);
        let cost = min_cost_flow(&g, &[2.0, 0.0, -2.0]).unwrap();
        assert!((cost - 0.4).abs() < 1e-12);
    }

    #[test]
    fn splits_between_sinks() {
        // Source must feed both sinks; each unit takes its own best route.
        let mut g = ExplicitGraph::new(4);
        g.add_edge(0, 1, 0.2);
        g.add_edge(0, 2, 0.3);
        g.add_edge(1, 3, 0.05);
        g.add_edge(2, 3, 0.4);
        let cost = min_cost_flow(&g, &[1.0, -0.25, -0.5, -0.25]).unwrap();
        // sink1: 0.25 via 0-1 (0.2); sink2: 0.5 via 0-2 (0.3);
        // sink3: 0.25 via 0-1-3 (0.25).
        let expect = 0.25 * 0.2 + 0.5 * 0.3 + 0.25 * 0.25;
        assert!((cost - expect).abs() < 1e-12, "cost {cost}");
    }

    #[test]
    fn bipartite_two_by_two() {
        struct Dense;
        impl ArcOracle for Dense {
            fn n_nodes(&self) -> usize {
                4
            }
            fn n_arcs(&self) -> usize {
                4
            }
            fn endpoints(&self, a: usize) -> (usize, usize) {
                (a / 2, 2 + a % 2)
            }
            fn cost(&self, a: usize) -> f64 {
                [0.1, 0.9, 0.8, 0.2][a]
            }
        }
        let cost = min_cost_flow(&Dense, &[0.5, 0.5, -0.5, -0.5]).unwrap();
        assert!((cost - 0.15).abs() < 1e-12);
    }

    #[test]
    fn degenerate_equal_supplies_terminate() {
        // Many coincident supplies exercise degenerate pivots.
        let mut g = ExplicitGraph::new(10);
        for i in 0..9 {
            g.add_edge(i, i + 1, 0.0);
        }
        let mut b = vec![0.0; 10];
        b[0] = 1.0;
        b[9] = -1.0;
        let cost = min_cost_flow(&g, &b).unwrap();
        assert_eq!(cost, 0.0);
    }
}
