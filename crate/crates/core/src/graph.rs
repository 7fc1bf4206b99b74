//! Directed graphs with per-node and per-edge feature rows, and disjoint-union
//! batching.

use crate::error::{CgsError, Result};
use crate::tensor::Tensor;

/// Directed multigraph. Self-loops and parallel edges are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_feat: Tensor,
    edge_feat: Tensor,
    out_adjacency: Vec<Vec<(usize, usize)>>,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_feat: Tensor,
        edge_feat: Tensor,
    ) -> Result<Self> {
        if node_feat.shape().len() != 2 || node_feat.rows() != num_nodes {
            return Err(CgsError::dim("Graph::new node_feat", node_feat.shape(), &[num_nodes]));
        }
        if edge_feat.shape().len() != 2 || edge_feat.rows() != edges.len() {
            return Err(CgsError::dim("Graph::new edge_feat", edge_feat.shape(), &[edges.len()]));
        }
        let mut out_adjacency = vec![Vec::new(); num_nodes];
        for (e, &(s, d)) in edges.iter().enumerate() {
            for end in [s, d] {
                if end >= num_nodes {
                    return Err(CgsError::Validation(format!(
                        "edge {e} endpoint {end} >= num_nodes {num_nodes}"
                    )));
                }
            }
            out_adjacency[s].push((d, e));
        }
        Ok(Graph {
            num_nodes,
            edges,
            node_feat,
            edge_feat,
            out_adjacency,
        })
    }

    /// Graph whose node and edge features are a single constant column.
    pub fn unit_features(num_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let ne = edges.len();
        Graph::new(num_nodes, edges, Tensor::ones(&[num_nodes, 1]), Tensor::ones(&[ne, 1]))
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_feat(&self) -> &Tensor {
        &self.node_feat
    }

    pub fn edge_feat(&self) -> &Tensor {
        &self.edge_feat
    }

    pub fn node_feat_dim(&self) -> usize {
        self.node_feat.cols()
    }

    pub fn edge_feat_dim(&self) -> usize {
        self.edge_feat.cols()
    }

    /// `(neighbor, edge index)` pairs leaving node `i`.
    pub fn out_edges(&self, i: usize) -> &[(usize, usize)] {
        &self.out_adjacency[i]
    }

    pub fn out_degree(&self, i: usize) -> Result<usize> {
        self.out_adjacency
            .get(i)
            .map(Vec::len)
            .ok_or(CgsError::Index {
                op: "out_degree",
                index: i,
                bound: self.num_nodes,
            })
    }

    pub fn sources(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.1).collect()
    }

    /// Relabels node `i` as `perm[i]`. Edge order is kept, so edge rows are
    /// unchanged.
    pub fn permute_nodes(&self, perm: &[usize]) -> Result<Graph> {
        let p = self.num_nodes;
        let mut seen = vec![false; p];
        if perm.len() != p {
            return Err(CgsError::dim("permute_nodes", &[p], &[perm.len()]));
        }
        for &q in perm {
            if q >= p || std::mem::replace(&mut seen[q], true) {
                return Err(CgsError::Validation("not a permutation".into()));
            }
        }
        let f = self.node_feat.cols();
        let mut node_feat = Tensor::zeros(&[p, f]);
        for i in 0..p {
            node_feat.data_mut()[perm[i] * f..(perm[i] + 1) * f].copy_from_slice(self.node_feat.row(i));
        }
        let edges = self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        Graph::new(p, edges, node_feat, self.edge_feat.clone())
    }
}

/// Disjoint union of graphs, with offsets to recover the components.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    merged: Graph,
    node_offsets: Vec<usize>,
    edge_offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph]) -> Result<Self> {
        let fv = graphs.first().map_or(0, |g| g.node_feat_dim());
        let fe = graphs
            .iter()
            .find(|g| g.num_edges() > 0)
            .map_or_else(|| graphs.first().map_or(0, |g| g.edge_feat_dim()), |g| g.edge_feat_dim());
        let mut node_offsets = vec![0];
        let mut edge_offsets = vec![0];
        let mut edges = Vec::new();
        let mut nf = Vec::new();
        let mut ef = Vec::new();
        for g in graphs {
            if g.node_feat_dim() != fv {
                return Err(CgsError::dim("batch node features", &[fv], &[g.node_feat_dim()]));
            }
            if g.num_edges() > 0 && g.edge_feat_dim() != fe {
                return Err(CgsError::dim("batch edge features", &[fe], &[g.edge_feat_dim()]));
            }
            let off = *node_offsets.last().unwrap();
            edges.extend(g.edges.iter().map(|&(s, d)| (s + off, d + off)));
            nf.extend_from_slice(g.node_feat.data());
            ef.extend_from_slice(g.edge_feat.data());
            node_offsets.push(off + g.num_nodes);
            edge_offsets.push(edges.len());
        }
        let p = *node_offsets.last().unwrap();
        let ne = edges.len();
        let merged = Graph::new(p, edges, Tensor::new(&[p, fv], nf)?, Tensor::new(&[ne, fe], ef)?)?;
        Ok(GraphBatch {
            merged,
            node_offsets,
            edge_offsets,
        })
    }

    pub fn single(g: &Graph) -> Self {
        GraphBatch {
            merged: g.clone(),
            node_offsets: vec![0, g.num_nodes],
            edge_offsets: vec![0, g.num_edges()],
        }
    }

    pub fn merged(&self) -> &Graph {
        &self.merged
    }

    pub fn len(&self) -> usize {
        self.node_offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Starting node index of each component (without the trailing total).
    pub fn node_offsets(&self) -> &[usize] {
        &self.node_offsets[..self.len()]
    }

    pub fn node_range(&self, k: usize) -> std::ops::Range<usize> {
        self.node_offsets[k]..self.node_offsets[k + 1]
    }

    pub fn edge_range(&self, k: usize) -> std::ops::Range<usize> {
        self.edge_offsets[k]..self.edge_offsets[k + 1]
    }

    pub fn component(&self, k: usize) -> Result<Graph> {
        let nr = self.node_range(k);
        let er = self.edge_range(k);
        let edges = self.merged.edges[er.clone()]
            .iter()
            .map(|&(s, d)| (s - nr.start, d - nr.start))
            .collect();
        Graph::new(
            nr.len(),
            edges,
            self.merged.node_feat.slice_rows(nr.start, nr.end),
            self.merged.edge_feat.slice_rows(er.start, er.end),
        )
    }

    pub fn unbatch(&self) -> Result<Vec<Graph>> {
        (0..self.len()).map(|k| self.component(k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degrees() {
        let g = Graph::unit_features(2, vec![(0, 0)]).unwrap();
        assert_eq!(g.out_degree(0).unwrap(), 1);
        assert_eq!(g.out_degree(1).unwrap(), 0);
        assert!(matches!(g.out_degree(2), Err(CgsError::Index { .. })));
    }

    #[test]
    fn endpoint_out_of_range() {
        assert!(matches!(
            Graph::unit_features(2, vec![(0, 2)]),
            Err(CgsError::Validation(_))
        ));
    }

    #[test]
    fn batching_shifts_second_graph() {
        let a = Graph::unit_features(2, vec![(0, 1)]).unwrap();
        let b = Graph::unit_features(3, vec![(0, 2), (2, 1)]).unwrap();
        let batch = GraphBatch::new(&[&a, &b]).unwrap();
        assert_eq!(batch.merged().num_nodes(), 5);
        assert_eq!(batch.merged().edges(), &[(0, 1), (2, 4), (4, 3)]);
        assert_eq!(batch.node_offsets(), &[0, 2]);
        assert_eq!(batch.unbatch().unwrap(), vec![a.clone(), b]);

        let one = GraphBatch::new(&[&a]).unwrap();
        assert_eq!(one.node_offsets(), &[0]);
        assert_eq!(one.merged(), &a);
    }

    #[test]
    fn mixed_widths_rejected() {
        let a = Graph::unit_features(2, vec![(0, 1)]).unwrap();
        let b = Graph::new(1, vec![], Tensor::zeros(&[1, 2]), Tensor::zeros(&[0, 1])).unwrap();
        assert!(matches!(GraphBatch::new(&[&a, &b]), Err(CgsError::Dimension { .. })));
    }
}
