//! Directed-graph reachability instances with exactly controlled hop distance.
//!
//! Positives plant an s->t path of the requested length and add distractor
//! edges that are rejected whenever they would shorten the planted distance.
//! Negatives build the same structure, constrain distractors so every s->t
//! route runs through the first planted edge, then delete that edge. The
//! label is therefore decided by genuine connectivity, which the BFS oracle
//! re-verifies; shallow statistics (such as the source's out-degree) still
//! differ slightly between the classes, which is what makes per-step
//! supervision able to latch onto heuristics instead of message passing.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_seed, rng_from_seed, Rng};

/// One reachability query instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInstance {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub s: usize,
    pub t: usize,
    #[serde(with = "label_as_int")]
    pub label: bool,
    /// Shortest s->t distance for positives; `None` is the unreachable sentinel.
    pub hops: Option<usize>,
}

pub(crate) mod label_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(*v as u8)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        let v = u8::deserialize(d)?;
        Ok(v != 0)
    }
}

impl GraphInstance {
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
        }
        adj
    }
}

/// Breadth-first shortest distance from `s` over out-edges.
fn bfs_distances(n: usize, adj: &[Vec<usize>], s: usize) -> Vec<Option<usize>> {
    bfs_distances_skipping(n, adj, s, None)
}

/// BFS that optionally pretends one edge is absent.
fn bfs_distances_skipping(
    n: usize,
    adj: &[Vec<usize>],
    s: usize,
    skip: Option<(usize, usize)>,
) -> Vec<Option<usize>> {
    let mut dist = vec![None; n];
    dist[s] = Some(0);
    let mut q = VecDeque::new();
    q.push_back(s);
    while let Some(u) = q.pop_front() {
        let du = dist[u].unwrap();
        for &v in &adj[u] {
            if skip == Some((u, v)) {
                continue;
            }
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                q.push_back(v);
            }
        }
    }
    dist
}

/// Exact reachability and shortest distance for an instance's query pair.
pub fn bfs_oracle(g: &GraphInstance) -> (bool, Option<usize>) {
    let adj = g.adjacency();
    let d = bfs_distances(g.n, &adj, g.s)[g.t];
    (d.is_some(), d)
}

/// Default node count hosting the requested distance plus distractors.
pub fn default_n_for_hops(hops: usize) -> usize {
    if hops <= 8 {
        16
    } else {
        24
    }
}

/// Generate one instance with a coin-flipped label.
pub fn gen_graph(hops: usize, n: usize, seed: u64) -> Result<GraphInstance> {
    let mut rng = rng_from_seed(seed);
    let label = rng.random::<bool>();
    gen_graph_labeled(hops, n, label, child_seed(seed, 1))
}

/// Generate one instance with the requested label.
pub fn gen_graph_labeled(hops: usize, n: usize, label: bool, seed: u64) -> Result<GraphInstance> {
    if hops < 1 {
        return Err(Error::InfeasibleParams("hops must be >= 1".into()));
    }
    if n < hops + 1 {
        return Err(Error::InfeasibleParams(format!(
            "n = {n} cannot host a {hops}-hop path"
        )));
    }
    // Construction is rejection-sampled; each attempt gets a fresh stream.
    for attempt in 0..64 {
        let mut rng = rng_from_seed(child_seed(seed, attempt));
        if let Some(inst) = try_build(hops, n, label, &mut rng) {
            debug_assert!(verify(&inst));
            return Ok(inst);
        }
    }
    Err(Error::GeneratorContract(format!(
        "graph construction failed for hops={hops}, n={n}, label={label}"
    )))
}

fn try_build(hops: usize, n: usize, label: bool, rng: &mut Rng) -> Option<GraphInstance> {
    // Plant the path on a random permutation of node indices.
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    let path: Vec<usize> = perm[..hops + 1].to_vec();
    let (s, t) = (path[0], path[hops]);
    let bridge = (path[0], path[1]);

    let mut edges: Vec<(usize, usize)> = path.windows(2).map(|w| (w[0], w[1])).collect();
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in &edges {
        adj[u].push(v);
    }

    let has_edge = |edges: &[(usize, usize)], u: usize, v: usize| edges.iter().any(|&e| e == (u, v));

    // Distractors: keep the planted distance exact; for negatives also keep
    // the bridge as the sole gateway so deleting it disconnects the query.
    let extra = rng.random_range(n / 2..=n);
    let mut added = 0;
    let mut tries = 0;
    while added < extra && tries < extra * 20 {
        tries += 1;
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v || has_edge(&edges, u, v) {
            continue;
        }
        adj[u].push(v);
        let ok = {
            let d = bfs_distances(n, &adj, s)[t];
            let exact = d == Some(hops);
            if !label && exact {
                // With the bridge severed the target must stay unreachable.
                bfs_distances_skipping(n, &adj, s, Some(bridge))[t].is_none()
            } else {
                exact
            }
        };
        if ok {
            edges.push((u, v));
            added += 1;
        } else {
            adj[u].pop();
        }
    }

    if label {
        let inst = GraphInstance {
            n,
            edges,
            s,
            t,
            label: true,
            hops: Some(hops),
        };
        return Some(inst);
    }

    // Negative: delete the bridge.
    let pos = edges.iter().position(|&e| e == bridge)?;
    edges.swap_remove(pos);
    let apos = adj[bridge.0].iter().position(|&x| x == bridge.1)?;
    adj[bridge.0].swap_remove(apos);
    if bfs_distances(n, &adj, s)[t].is_some() {
        return None;
    }

    // No degree-zero giveaway: the source keeps at least one out-edge and
    // the target keeps its in-edges from the surviving path suffix.
    if adj[s].is_empty() {
        let mut tries = 0;
        loop {
            tries += 1;
            if tries > n * 20 {
                return None;
            }
            let v = rng.random_range(0..n);
            if v == s || has_edge(&edges, s, v) {
                continue;
            }
            adj[s].push(v);
            if bfs_distances(n, &adj, s)[t].is_none() {
                edges.push((s, v));
                break;
            }
            adj[s].pop();
        }
    }
    if hops == 1 {
        // The deleted bridge was the target's only planted in-edge.
        let has_in = edges.iter().any(|&(_, v)| v == t);
        if !has_in {
            let mut tries = 0;
            loop {
                tries += 1;
                if tries > n * 20 {
                    return None;
                }
                let u = rng.random_range(0..n);
                if u == t || has_edge(&edges, u, t) {
                    continue;
                }
                adj[u].push(t);
                if bfs_distances(n, &adj, s)[t].is_none() {
                    edges.push((u, t));
                    break;
                }
                adj[u].pop();
            }
        }
    }

    Some(GraphInstance {
        n,
        edges,
        s,
        t,
        label: false,
        hops: None,
    })
}

/// Full invariant re-check: stored label/hops match the oracle, degrees are
/// non-trivial, no duplicates.
pub fn verify(g: &GraphInstance) -> bool {
    if g.s == g.t || g.s >= g.n || g.t >= g.n {
        return false;
    }
    let mut seen = std::collections::HashSet::new();
    for &e in &g.edges {
        if e.0 == e.1 || e.0 >= g.n || e.1 >= g.n || !seen.insert(e) {
            return false;
        }
    }
    let (reach, dist) = bfs_oracle(g);
    if reach != g.label || dist != g.hops {
        return false;
    }
    let s_out = g.edges.iter().any(|&(u, _)| u == g.s);
    let t_in = g.edges.iter().any(|&(_, v)| v == g.t);
    s_out && t_in
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hop_contains_direct_edge() {
        let g = gen_graph_labeled(1, 16, true, 42).unwrap();
        assert!(g.edges.contains(&(g.s, g.t)));
        assert_eq!(g.hops, Some(1));
    }

    #[test]
    fn minimal_chain_three_hops() {
        // n = hops+1 leaves no spare nodes: the planted chain must be there.
        let g = gen_graph_labeled(3, 4, true, 7).unwrap();
        let (reach, dist) = bfs_oracle(&g);
        assert!(reach);
        assert_eq!(dist, Some(3));
    }

    #[test]
    fn bfs_oracle_on_chain() {
        let g = GraphInstance {
            n: 4,
            edges: vec![(0, 1), (1, 2), (2, 3)],
            s: 0,
            t: 3,
            label: true,
            hops: Some(3),
        };
        assert_eq!(bfs_oracle(&g), (true, Some(3)));
        let back = GraphInstance { s: 3, t: 0, label: false, hops: None, ..g };
        assert_eq!(bfs_oracle(&back), (false, None));
    }

    #[test]
    fn infeasible_params_rejected() {
        assert!(gen_graph_labeled(5, 5, true, 0).is_err());
        assert!(gen_graph_labeled(0, 8, true, 0).is_err());
    }

    #[test]
    fn sampled_instances_pass_oracle_reverification() {
        let mut balance = [0usize; 2];
        for hops in 1..=5 {
            for i in 0..400u64 {
                let seed = child_seed(99, hops as u64 * 1000 + i);
                let g = gen_graph(hops, 16, seed).unwrap();
                assert!(verify(&g), "hops={hops} i={i}");
                balance[g.label as usize] += 1;
            }
        }
        let frac = balance[1] as f64 / (balance[0] + balance[1]) as f64;
        assert!((frac - 0.5).abs() < 0.05, "label balance {frac}");
    }

    #[test]
    fn negatives_are_nontrivial() {
        for i in 0..200u64 {
            let g = gen_graph_labeled(4, 16, false, 1000 + i).unwrap();
            assert!(g.edges.iter().any(|&(u, _)| u == g.s), "s must keep out-edges");
            assert!(g.edges.iter().any(|&(_, v)| v == g.t), "t must keep in-edges");
            assert!(!bfs_oracle(&g).0);
        }
    }

    #[test]
    fn positives_have_exact_distance() {
        for hops in 1..=6 {
            for i in 0..100u64 {
                let g = gen_graph_labeled(hops, default_n_for_hops(hops), true, 7000 + i).unwrap();
                assert_eq!(bfs_oracle(&g).1, Some(hops), "hops={hops} i={i}");
            }
        }
    }

    /// Independent all-pairs check of the BFS oracle.
    fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<Option<usize>>> {
        let big = usize::MAX / 2;
        let mut d = vec![vec![big; n]; n];
        for i in 0..n {
            d[i][i] = 0;
        }
        for &(u, v) in edges {
            d[u][v] = d[u][v].min(1);
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    if d[i][k] + d[k][j] < d[i][j] {
                        d[i][j] = d[i][k] + d[k][j];
                    }
                }
            }
        }
        d.into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|v| if v >= big { None } else { Some(v) })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn bfs_matches_floyd_warshall() {
        for i in 0..50u64 {
            let g = gen_graph(3, 20, child_seed(5, i)).unwrap();
            let fw = floyd_warshall(g.n, &g.edges);
            let adj = g.adjacency();
            let bfs = bfs_distances(g.n, &adj, g.s);
            for v in 0..g.n {
                assert_eq!(bfs[v], fw[g.s][v], "instance {i}, node {v}");
            }
        }
    }

    #[test]
    fn jsonl_schema_roundtrip() {
        let g = gen_graph_labeled(2, 16, true, 3).unwrap();
        let line = serde_json::to_string(&g).unwrap();
        assert!(line.contains("\"label\":1"));
        let back: GraphInstance = serde_json::from_str(&line).unwrap();
        assert_eq!(back, g);
        let neg = gen_graph_labeled(2, 16, false, 3).unwrap();
        let line = serde_json::to_string(&neg).unwrap();
        assert!(line.contains("\"hops\":null"));
    }
}
