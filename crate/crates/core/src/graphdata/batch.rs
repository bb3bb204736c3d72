use std::sync::Arc;

use super::graph::Graph;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Message, MessageList};

/// Block-diagonal union of several graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub num_nodes: usize,
    /// Merged edge list with node ids offset per member.
    pub edges: Vec<(u32, u32)>,
    pub features: Matrix,
    /// Member graph of each node; non-decreasing.
    pub graph_index: Vec<usize>,
    pub labels: Vec<usize>,
    /// `node_offsets[i]..node_offsets[i + 1]` are member `i`'s nodes.
    pub node_offsets: Vec<usize>,
    /// `edge_offsets[i]..edge_offsets[i + 1]` are member `i`'s edges.
    pub edge_offsets: Vec<usize>,
    members: Vec<Graph>,
}

impl Batch {
    pub fn new(graphs: &[Graph]) -> Result<Self> {
        Self::from_refs(&graphs.iter().collect::<Vec<_>>())
    }

    pub fn from_refs(graphs: &[&Graph]) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Domain("cannot batch an empty list".into()))?;
        let d = first.feature_dim();
        if let Some(g) = graphs.iter().find(|g| g.feature_dim() != d) {
            return Err(Error::Shape(format!(
                "feature dimension {} in a batch of dimension {d}",
                g.feature_dim()
            )));
        }
        let num_nodes: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let num_edges: usize = graphs.iter().map(|g| g.num_edges()).sum();
        let mut edges = Vec::with_capacity(num_edges);
        let mut features = Vec::with_capacity(num_nodes * d);
        let mut graph_index = Vec::with_capacity(num_nodes);
        let mut node_offsets = vec![0];
        let mut edge_offsets = vec![0];
        for (i, g) in graphs.iter().enumerate() {
            let off = *node_offsets.last().unwrap() as u32;
            edges.extend(g.edges().iter().map(|&(u, v)| (u + off, v + off)));
            features.extend_from_slice(g.features().data());
            graph_index.extend(std::iter::repeat_n(i, g.num_nodes()));
            node_offsets.push(off as usize + g.num_nodes());
            edge_offsets.push(edges.len());
        }
        Ok(Self {
            num_nodes,
            edges,
            features: Matrix::from_vec(num_nodes, d, features)?,
            graph_index,
            labels: graphs.iter().map(|g| g.label()).collect(),
            node_offsets,
            edge_offsets,
            members: graphs.iter().map(|&g| g.clone()).collect(),
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn members(&self) -> &[Graph] {
        &self.members
    }

    /// Recovers the member graphs from the merged arrays.
    pub fn unbatch(&self) -> Result<Vec<Graph>> {
        (0..self.num_graphs())
            .map(|i| {
                let (n0, n1) = (self.node_offsets[i], self.node_offsets[i + 1]);
                let (e0, e1) = (self.edge_offsets[i], self.edge_offsets[i + 1]);
                let d = self.features.cols();
                let feats = Matrix::from_vec(
                    n1 - n0,
                    d,
                    self.features.data()[n0 * d..n1 * d].to_vec(),
                )?;
                let edges = self.edges[e0..e1]
                    .iter()
                    .map(|&(u, v)| (u - n0 as u32, v - n0 as u32))
                    .collect();
                Graph::new(
                    n1 - n0,
                    edges,
                    feats,
                    self.labels[i],
                    self.members[i].meta().clone(),
                )
            })
            .collect()
    }

    /// Symmetric-normalized propagation over the edges with `keep[e]` set
    /// (all edges when `keep` is `None`), plus a self-loop on every node.
    ///
    /// Degrees count kept edges only. Message `edge` fields index the merged
    /// edge list, so a per-edge weight column can scale them.
    pub fn gcn_messages(&self, keep: Option<&[bool]>) -> MessageList {
        let kept = |e: usize| keep.is_none_or(|k| k[e]);
        let mut deg = vec![1usize; self.num_nodes];
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            if kept(e) {
                deg[u as usize] += 1;
                deg[v as usize] += 1;
            }
        }
        let mut messages = Vec::with_capacity(self.num_nodes + 2 * self.edges.len());
        for (u, &d) in deg.iter().enumerate() {
            messages.push(Message {
                src: u as u32,
                dst: u as u32,
                coef: 1.0 / d as f64,
                edge: None,
            });
        }
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            if !kept(e) {
                continue;
            }
            let coef = 1.0 / ((deg[u as usize] * deg[v as usize]) as f64).sqrt();
            messages.push(Message {
                src: u,
                dst: v,
                coef,
                edge: Some(e as u32),
            });
            messages.push(Message {
                src: v,
                dst: u,
                coef,
                edge: Some(e as u32),
            });
        }
        MessageList {
            num_nodes: self.num_nodes,
            messages,
        }
    }

    /// Readout segments: every node maps to its member graph.
    pub fn full_segments(&self) -> Arc<Vec<Option<usize>>> {
        Arc::new(self.graph_index.iter().map(|&g| Some(g)).collect())
    }

    /// Readout segments restricted to nodes incident to a kept edge.
    pub fn edge_induced_segments(&self, keep: &[bool]) -> Arc<Vec<Option<usize>>> {
        let mut touched = vec![false; self.num_nodes];
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            if keep[e] {
                touched[u as usize] = true;
                touched[v as usize] = true;
            }
        }
        Arc::new(
            touched
                .iter()
                .zip(&self.graph_index)
                .map(|(&t, &g)| t.then_some(g))
                .collect(),
        )
    }
}
