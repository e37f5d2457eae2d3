//! Geometric-graph snapshots: vertices are the current particles, with an
//! undirected edge between distinct particles at torus distance `<= radius`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::state::{Particle, SystemState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub radius: f64,
    pub vertices: Vec<Particle>,
    /// Unordered pairs stored as `(smaller id, larger id)`, sorted.
    pub edges: Vec<(u64, u64)>,
}

/// Build the geometric graph of `state` at `radius`. The state is re-indexed
/// when its cells are smaller than the radius.
pub fn snapshot(state: &SystemState, radius: f64) -> GraphSnapshot {
    let reindexed;
    let source = if radius > state.index().cell_side() {
        reindexed = state.reindexed(radius);
        &reindexed
    } else {
        state
    };
    let mut edges = Vec::new();
    source
        .for_each_pair_within(radius, |a, b| edges.push((a.id.min(b.id), a.id.max(b.id))))
        .expect("index cells cover the radius");
    edges.sort_unstable();
    let mut vertices = state.particles().to_vec();
    vertices.sort_unstable_by_key(|p| p.id);
    GraphSnapshot {
        radius,
        vertices,
        edges,
    }
}

/// Degree -> number of vertices with that degree.
pub fn degree_distribution(g: &GraphSnapshot) -> BTreeMap<usize, usize> {
    let degree = degrees(g);
    let mut hist = BTreeMap::new();
    for d in degree.values() {
        *hist.entry(*d).or_insert(0) += 1;
    }
    hist
}

/// Degree of every vertex, keyed by id.
pub fn degrees(g: &GraphSnapshot) -> BTreeMap<u64, usize> {
    let mut degree: BTreeMap<u64, usize> = g.vertices.iter().map(|v| (v.id, 0)).collect();
    for &(a, b) in &g.edges {
        *degree.get_mut(&a).expect("edge endpoint is a vertex") += 1;
        *degree.get_mut(&b).expect("edge endpoint is a vertex") += 1;
    }
    degree
}

struct DisjointSet {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Maximal connected vertex sets. Each set is sorted by id and the sets are
/// ordered by their smallest id.
pub fn connected_components(g: &GraphSnapshot) -> Vec<Vec<u64>> {
    let pos: BTreeMap<u64, usize> = g.vertices.iter().enumerate().map(|(i, v)| (v.id, i)).collect();
    let mut dsu = DisjointSet::new(g.vertices.len());
    for (a, b) in &g.edges {
        dsu.union(pos[a], pos[b]);
    }
    let mut groups: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (i, v) in g.vertices.iter().enumerate() {
        groups.entry(dsu.find(i)).or_default().push(v.id);
    }
    let mut out: Vec<Vec<u64>> = groups
        .into_values()
        .map(|mut c| {
            c.sort_unstable();
            c
        })
        .collect();
    out.sort_unstable_by_key(|c| c[0]);
    out
}

impl GraphSnapshot {
    /// `{radius, vertices: [{id, pos}], edges: [[i, j]]}`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("snapshot is serializable")
    }

    /// Edge list with header `i,j`.
    pub fn edges_csv(&self) -> String {
        let mut s = String::from("i,j\n");
        for (a, b) in &self.edges {
            writeln!(s, "{a},{b}").expect("writing to a String cannot fail");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Geometry, Params, Position};
    use crate::kernels::Model;
    use crate::rng::Stream;
    use std::collections::VecDeque;

    fn model() -> Model {
        Model::new(Geometry::default(), Params::reference()).unwrap()
    }

    fn graph_of(points: &[(f64, f64)], radius: f64) -> GraphSnapshot {
        let m = model();
        let pts: Vec<Position> = points.iter().map(|&(x, y)| Position::xy(x, y)).collect();
        snapshot(&SystemState::with_positions(&m, &pts), radius)
    }

    fn brute_edges(state: &SystemState, r: f64) -> Vec<(u64, u64)> {
        let ps = state.particles();
        let mut e = Vec::new();
        for i in 0..ps.len() {
            for j in i + 1..ps.len() {
                if state.geometry().distance(&ps[i].pos, &ps[j].pos) <= r {
                    e.push((ps[i].id.min(ps[j].id), ps[i].id.max(ps[j].id)));
                }
            }
        }
        e.sort_unstable();
        e
    }

    fn bfs_sizes(g: &GraphSnapshot) -> Vec<usize> {
        let ids: Vec<u64> = g.vertices.iter().map(|v| v.id).collect();
        let mut adj: BTreeMap<u64, Vec<u64>> = ids.iter().map(|&i| (i, Vec::new())).collect();
        for &(a, b) in &g.edges {
            adj.get_mut(&a).unwrap().push(b);
            adj.get_mut(&b).unwrap().push(a);
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut sizes = Vec::new();
        for &s in &ids {
            if !seen.insert(s) {
                continue;
            }
            let mut q = VecDeque::from([s]);
            let mut n = 0;
            while let Some(v) = q.pop_front() {
                n += 1;
                for &w in &adj[&v] {
                    if seen.insert(w) {
                        q.push_back(w);
                    }
                }
            }
            sizes.push(n);
        }
        sizes.sort_unstable();
        sizes
    }

    #[test]
    fn triangle() {
        let g = graph_of(&[(0.5, 0.5), (0.55, 0.5), (0.52, 0.54)], 0.1);
        assert_eq!(g.edges.len(), 3);
        assert_eq!(degree_distribution(&g), BTreeMap::from([(2, 3)]));
    }

    #[test]
    fn boundary_distance_gets_an_edge() {
        let g = graph_of(&[(0.25, 0.5), (0.5, 0.5)], 0.25);
        assert_eq!(g.edges, vec![(0, 1)]);
    }

    #[test]
    fn coincident_points_are_adjacent() {
        let g = graph_of(&[(0.3, 0.3), (0.3, 0.3)], 0.1);
        assert_eq!(g.edges, vec![(0, 1)]);
    }

    #[test]
    fn degree_examples() {
        let g = graph_of(&[(0.5, 0.5)], 0.1);
        assert_eq!(degree_distribution(&g), BTreeMap::from([(0, 1)]));
        let star = graph_of(&[(0.5, 0.5), (0.58, 0.5), (0.42, 0.5), (0.5, 0.58), (0.5, 0.42)], 0.1);
        assert_eq!(degree_distribution(&star), BTreeMap::from([(1, 4), (4, 1)]));
    }

    #[test]
    fn component_examples() {
        let g = graph_of(&[(0.1, 0.1), (0.15, 0.1), (0.6, 0.6), (0.62, 0.6)], 0.1);
        assert_eq!(connected_components(&g), vec![vec![0, 1], vec![2, 3]]);
        let empty = graph_of(&[], 0.1);
        assert!(connected_components(&empty).is_empty());
    }

    #[test]
    fn matches_brute_force_on_random_configurations() {
        let m = model();
        let mut rng = Stream::new(77, 0);
        for trial in 0..200 {
            let pts: Vec<Position> = (0..100).map(|_| m.sample_affinity_site(&mut rng)).collect();
            let s = SystemState::with_positions(&m, &pts);
            let r = if trial % 2 == 0 { 0.1 } else { 0.23 };
            let g = snapshot(&s, r);
            assert_eq!(g.edges, brute_edges(&s, r));
            let mut sizes: Vec<usize> = connected_components(&g).iter().map(Vec::len).collect();
            sizes.sort_unstable();
            assert_eq!(sizes, bfs_sizes(&g));
            let total: usize = degree_distribution(&g).iter().map(|(d, c)| d * c).sum();
            assert_eq!(total, 2 * g.edges.len());
            assert_eq!(snapshot(&s, r), g);
        }
    }

    #[test]
    fn exports() {
        let g = graph_of(&[(0.5, 0.5), (0.55, 0.5)], 0.1);
        assert_eq!(g.edges_csv(), "i,j\n0,1\n");
        let j = g.to_json();
        assert_eq!(j["edges"], serde_json::json!([[0, 1]]));
        assert_eq!(j["vertices"][1]["pos"], serde_json::json!([0.55, 0.5]));
    }
}
