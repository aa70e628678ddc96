//! Successive-shortest-path min-cost flow with node potentials.
//!
//! All arc costs must be nonnegative when added; the relation solver shifts
//! its costs accordingly. Augmentations run Dijkstra on reduced costs, so the
//! total work is `O(flow * E log V)`. Iteration order is fixed by insertion
//! order and heap ties are broken by node index, which makes the solver fully
//! deterministic.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone)]
struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
}

#[derive(Debug)]
pub struct MinCostFlow {
    adjacency: Vec<Vec<usize>>,
    edges: Vec<Edge>,
}

/// Heap entry ordered by ascending distance, then node index.
struct HeapItem {
    dist: f64,
    node: usize,
}

impl PartialEq for HeapItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for HeapItem {}
impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed for a min-heap on (dist, node)
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl MinCostFlow {
    pub fn new(nodes: usize) -> Self {
        Self {
            adjacency: vec![Vec::new(); nodes],
            edges: Vec::new(),
        }
    }

    /// Adds a forward arc and its residual twin. Returns the forward arc id.
    pub fn add_edge(&mut self, from: usize, to: usize, cap: i64, cost: f64) -> usize {
        debug_assert!(cost >= 0.0, "arc costs must be nonnegative");
        let id = self.edges.len();
        self.adjacency[from].push(id);
        self.edges.push(Edge { to, cap, cost });
        self.adjacency[to].push(id + 1);
        self.edges.push(Edge {
            to: from,
            cap: 0,
            cost: -cost,
        });
        id
    }

    /// Flow pushed through the forward arc `id`.
    pub fn flow_on(&self, id: usize) -> i64 {
        self.edges[id + 1].cap
    }

    /// Sends up to `target` units from `source` to `sink`; returns the flow
    /// actually routed and its cost.
    pub fn solve(&mut self, source: usize, sink: usize, target: i64) -> (i64, f64) {
        let n = self.adjacency.len();
        let mut potential = vec![0.0f64; n];
        let mut flow = 0i64;
        let mut cost = 0.0f64;
        let mut dist = vec![f64::INFINITY; n];
        let mut prev_edge = vec![usize::MAX; n];

        while flow < target {
            dist.fill(f64::INFINITY);
            prev_edge.fill(usize::MAX);
            dist[source] = 0.0;
            let mut heap = BinaryHeap::new();
            heap.push(HeapItem {
                dist: 0.0,
                node: source,
            });
            while let Some(HeapItem { dist: d, node: u }) = heap.pop() {
                if d > dist[u] {
                    continue;
                }
                for &eid in &self.adjacency[u] {
                    let e = &self.edges[eid];
                    if e.cap <= 0 {
                        continue;
                    }
                    // reduced cost; clamp rounding noise at zero
                    let rc = (e.cost + potential[u] - potential[e.to]).max(0.0);
                    let nd = d + rc;
                    if nd < dist[e.to] {
                        dist[e.to] = nd;
                        prev_edge[e.to] = eid;
                        heap.push(HeapItem {
                            dist: nd,
                            node: e.to,
                        });
                    }
                }
            }
            if !dist[sink].is_finite() {
                break;
            }
            for (v, p) in potential.iter_mut().enumerate() {
                if dist[v].is_finite() {
                    *p += dist[v];
                }
            }
            // bottleneck along the augmenting path
            let mut bottleneck = target - flow;
            let mut v = sink;
            while v != source {
                let eid = prev_edge[v];
                bottleneck = bottleneck.min(self.edges[eid].cap);
                v = self.edges[eid ^ 1].to;
            }
            let mut v = sink;
            while v != source {
                let eid = prev_edge[v];
                self.edges[eid].cap -= bottleneck;
                self.edges[eid ^ 1].cap += bottleneck;
                cost += self.edges[eid].cost * bottleneck as f64;
                v = self.edges[eid ^ 1].to;
            }
            flow += bottleneck;
        }
        (flow, cost)
    }
}
