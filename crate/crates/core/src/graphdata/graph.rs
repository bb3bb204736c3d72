use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Generation-time provenance for a graph.
///
/// `motif` and `base` index the planted motif and base families, `attr` is
/// the class whose one-hot pattern the node features carry (or `None` for
/// random features), and `gt_edges` lists the motif-internal edge indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMeta {
    pub motif: usize,
    pub base: usize,
    pub attr: Option<usize>,
    pub gt_edges: Vec<usize>,
    pub flipped: bool,
}

/// Undirected graph with node features and a class label.
///
/// Edges are stored once with `u < v`; self-loops only appear in the
/// normalized adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(u32, u32)>,
    features: Matrix,
    label: usize,
    meta: GraphMeta,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(u32, u32)>,
        features: Matrix,
        label: usize,
        meta: GraphMeta,
    ) -> Result<Self> {
        if features.rows() != num_nodes {
            return Err(Error::Shape(format!(
                "{} feature rows for {num_nodes} nodes",
                features.rows()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Domain("non-finite node feature".into()));
        }
        let mut canonical = Vec::with_capacity(edges.len());
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for (i, &(a, b)) in edges.iter().enumerate() {
            if a as usize >= num_nodes || b as usize >= num_nodes {
                return Err(Error::Domain(format!(
                    "edge {i} ({a},{b}) out of range for {num_nodes} nodes"
                )));
            }
            if a == b {
                return Err(Error::Domain(format!("edge {i} is a self-loop on {a}")));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(Error::Domain(format!("duplicate edge ({},{})", e.0, e.1)));
            }
            canonical.push(e);
        }
        if let Some(&bad) = meta.gt_edges.iter().find(|&&e| e >= canonical.len()) {
            return Err(Error::Domain(format!(
                "ground-truth edge {bad} out of range for {} edges",
                canonical.len()
            )));
        }
        Ok(Self {
            num_nodes,
            edges: canonical,
            features,
            label,
            meta,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn meta(&self) -> &GraphMeta {
        &self.meta
    }

    pub(crate) fn with_label(mut self, label: usize, flipped: bool) -> Self {
        self.label = label;
        self.meta.flipped = flipped;
        self
    }

    pub(crate) fn with_features(mut self, features: Matrix, attr: Option<usize>) -> Self {
        debug_assert_eq!(features.rows(), self.num_nodes);
        self.features = features;
        self.meta.attr = attr;
        self
    }

    /// Degree of each node counting a self-loop.
    pub fn degrees_with_self_loops(&self) -> Vec<usize> {
        let mut deg = vec![1usize; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u as usize] += 1;
            deg[v as usize] += 1;
        }
        deg
    }

    /// Relabels node `i` as `perm[i]`, keeping edge order.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.num_nodes {
            return Err(Error::Shape(format!(
                "permutation of length {} for {} nodes",
                perm.len(),
                self.num_nodes
            )));
        }
        let mut seen = vec![false; self.num_nodes];
        for &p in perm {
            if p >= self.num_nodes || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Domain("not a permutation".into()));
            }
        }
        let mut features = Matrix::zeros(self.num_nodes, self.features.cols());
        for (old, &new) in perm.iter().enumerate() {
            features.row_mut(new).copy_from_slice(self.features.row(old));
        }
        let edges = self
            .edges
            .iter()
            .map(|&(u, v)| (perm[u as usize] as u32, perm[v as usize] as u32))
            .collect();
        Graph::new(self.num_nodes, edges, features, self.label, self.meta.clone())
    }

    /// Whether every node is reachable from node 0.
    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u as usize].push(v as usize);
            adj[v as usize].push(u as usize);
        }
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !std::mem::replace(&mut seen[v], true) {
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Dense `D^-1/2 (A + I) D^-1/2` with degrees counting the self-loop.
pub fn normalize_adjacency(g: &Graph) -> Matrix {
    let n = g.num_nodes();
    let deg = g.degrees_with_self_loops();
    let mut a = Matrix::zeros(n, n);
    for u in 0..n {
        a.set(u, u, 1.0 / deg[u] as f64);
    }
    for &(u, v) in g.edges() {
        let (u, v) = (u as usize, v as usize);
        let w = 1.0 / ((deg[u] * deg[v]) as f64).sqrt();
        a.set(u, v, w);
        a.set(v, u, w);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(n: usize, edges: &[(u32, u32)]) -> Graph {
        Graph::new(n, edges.to_vec(), Matrix::zeros(n, 2), 0, GraphMeta::default()).unwrap()
    }

    #[test]
    fn single_node_is_self_loop() {
        assert_eq!(normalize_adjacency(&plain(1, &[])), Matrix::scalar(1.0));
    }

    #[test]
    fn single_edge_is_all_halves() {
        assert_eq!(normalize_adjacency(&plain(2, &[(0, 1)])), Matrix::filled(2, 2, 0.5));
    }

    #[test]
    fn triangle_is_all_thirds() {
        let a = normalize_adjacency(&plain(3, &[(0, 1), (1, 2), (0, 2)]));
        for v in a.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn normalized_adjacency_is_symmetric() {
        let a = normalize_adjacency(&plain(5, &[(0, 1), (1, 2), (2, 3), (1, 4)]));
        assert_eq!(a, a.transpose());
    }

    #[test]
    fn rejects_invalid_edges() {
        let f = Matrix::zeros(3, 1);
        let m = GraphMeta::default();
        assert!(Graph::new(3, vec![(0, 3)], f.clone(), 0, m.clone()).is_err());
        assert!(Graph::new(3, vec![(1, 1)], f.clone(), 0, m.clone()).is_err());
        assert!(Graph::new(3, vec![(0, 1), (1, 0)], f.clone(), 0, m.clone()).is_err());
        let bad_gt = GraphMeta {
            gt_edges: vec![1],
            ..m.clone()
        };
        assert!(Graph::new(3, vec![(0, 1)], f, 0, bad_gt).is_err());
        assert!(Graph::new(3, vec![], Matrix::zeros(2, 1), 0, m).is_err());
    }

    #[test]
    fn edges_are_canonicalized() {
        let g = plain(3, &[(2, 0), (1, 2)]);
        assert_eq!(g.edges(), &[(0, 2), (1, 2)]);
    }

    #[test]
    fn permutation_preserves_spectrum_invariants() {
        // trace of A^k is invariant under relabeling
        let g = plain(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]);
        let p = g.permute_nodes(&[3, 0, 4, 1, 2]).unwrap();
        let (a, b) = (normalize_adjacency(&g), normalize_adjacency(&p));
        let mut ak = a.clone();
        let mut bk = b.clone();
        for _ in 0..4 {
            let ta: f64 = (0..5).map(|i| ak.get(i, i)).sum();
            let tb: f64 = (0..5).map(|i| bk.get(i, i)).sum();
            assert!((ta - tb).abs() < 1e-12);
            ak = ak.matmul(&a).unwrap();
            bk = bk.matmul(&b).unwrap();
        }
    }
}
