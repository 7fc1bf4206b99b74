//! Attention graph-network encoder that generates per-head transition logits
//! (edges) and bias values (nodes).
//!
//! One layer computes, per edge `e = (s -> d)` with input
//! `x_e = [h_s | h_d | e_e]`:
//!
//! ```text
//! m_e   = edge_mlp(x_e)
//! a_e   = sigmoid(attn_mlp(x_e))
//! agg_i = sum over edges with d = i of a_e * m_e
//! h_i'  = node_mlp([h_i | agg_i])
//! e_e'  = m_e
//! ```
//!
//! After the last layer both streams are projected linearly to `num_heads`
//! columns; column `m` drives head `m`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{concat, Activation, Tape, Var};
use crate::error::{CgsError, Result};
use crate::graph::Graph;
use crate::nn::{Bound, Linear, Mlp, ParamSet};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    /// Hidden width of the edge, attention and node MLPs.
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Width of node and edge embeddings passed between layers.
    pub embed_dim: usize,
    pub activation: Activation,
    pub node_in: usize,
    pub edge_in: usize,
}

impl EncoderConfig {
    /// Single layer, hidden 64 (pore-network diffusion setting).
    pub fn diffusion(num_heads: usize, node_in: usize, edge_in: usize) -> Self {
        EncoderConfig {
            num_layers: 1,
            hidden_dim: 64,
            num_heads,
            embed_dim: num_heads,
            activation: Activation::leaky_relu(),
            node_in,
            edge_in,
        }
    }

    /// Three layers, hidden 128 (graph value iteration setting).
    pub fn gvi(num_heads: usize, node_in: usize, edge_in: usize) -> Self {
        EncoderConfig {
            num_layers: 3,
            hidden_dim: 128,
            ..Self::diffusion(num_heads, node_in, edge_in)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.num_layers == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(CgsError::Config(
                "encoder needs at least one head, one layer and non-zero widths".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionGnLayer {
    edge_mlp: Mlp,
    attn_mlp: Mlp,
    node_mlp: Mlp,
    node_in: usize,
    edge_in: usize,
}

/// Index arrays for one graph on one tape.
pub struct GraphIndex {
    pub num_nodes: usize,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
}

impl GraphIndex {
    pub fn new(g: &Graph) -> Self {
        GraphIndex {
            num_nodes: g.num_nodes(),
            src: g.sources().into(),
            dst: g.targets().into(),
        }
    }
}

impl AttentionGnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        node_in: usize,
        edge_in: usize,
        hidden: usize,
        node_out: usize,
        edge_out: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let msg_in = 2 * node_in + edge_in;
        let edge_mlp = Mlp::new(params, &format!("{prefix}.edge"), &[msg_in, hidden, edge_out], activation, rng)?;
        let attn_mlp = Mlp::new(params, &format!("{prefix}.attn"), &[msg_in, hidden, 1], activation, rng)?;
        let node_mlp = Mlp::new(
            params,
            &format!("{prefix}.node"),
            &[node_in + edge_out, hidden, node_out],
            activation,
            rng,
        )?;
        Ok(AttentionGnLayer {
            edge_mlp,
            attn_mlp,
            node_mlp,
            node_in,
            edge_in,
        })
    }

    pub fn forward<'t>(
        &self,
        bound: &Bound<'t>,
        index: &GraphIndex,
        node_emb: Var<'t>,
        edge_emb: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (ns, es) = (node_emb.shape(), edge_emb.shape());
        if ns != [index.num_nodes, self.node_in] {
            return Err(CgsError::dim("layer_forward nodes", &ns, &[index.num_nodes, self.node_in]));
        }
        if es != [index.src.len(), self.edge_in] {
            return Err(CgsError::dim("layer_forward edges", &es, &[index.src.len(), self.edge_in]));
        }
        let hs = node_emb.gather_rows(index.src.clone())?;
        let hd = node_emb.gather_rows(index.dst.clone())?;
        let x = concat(&[hs, hd, edge_emb], 1)?;
        let msg = self.edge_mlp.forward(bound, x)?;
        let gate = self.attn_mlp.forward(bound, x)?.sigmoid()?;
        let agg = msg
            .scale_rows(gate)?
            .segment_sum(index.dst.clone(), index.num_nodes)?;
        let node_next = self.node_mlp.forward(bound, concat(&[node_emb, agg], 1)?)?;
        Ok((node_next, msg))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    layers: Vec<AttentionGnLayer>,
    node_proj: Linear,
    edge_proj: Linear,
}

impl Encoder {
    pub fn new(config: EncoderConfig, params: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        let (mut n_in, mut e_in) = (config.node_in, config.edge_in);
        for k in 0..config.num_layers {
            layers.push(AttentionGnLayer::new(
                params,
                &format!("encoder.layer{k}"),
                n_in,
                e_in,
                config.hidden_dim,
                config.embed_dim,
                config.embed_dim,
                config.activation,
                rng,
            )?);
            n_in = config.embed_dim;
            e_in = config.embed_dim;
        }
        let node_proj = Linear::new(params, "encoder.proj.node", 0, n_in, config.num_heads, rng);
        let edge_proj = Linear::new(params, "encoder.proj.edge", 0, e_in, config.num_heads, rng);
        Ok(Encoder {
            config,
            layers,
            node_proj,
            edge_proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Returns `(node_out [p x M], edge_out [E x M])`.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        g: &Graph,
        index: &GraphIndex,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if g.node_feat_dim() != self.config.node_in {
            return Err(CgsError::dim("encode node features", &[g.node_feat_dim()], &[self.config.node_in]));
        }
        if g.num_edges() > 0 && g.edge_feat_dim() != self.config.edge_in {
            return Err(CgsError::dim("encode edge features", &[g.edge_feat_dim()], &[self.config.edge_in]));
        }
        let mut h = tape.constant(g.node_feat().clone());
        let mut e = if g.num_edges() == 0 {
            tape.constant(crate::tensor::Tensor::zeros(&[0, self.config.edge_in]))
        } else {
            tape.constant(g.edge_feat().clone())
        };
        for layer in &self.layers {
            (h, e) = layer.forward(bound, index, h, e)?;
        }
        Ok((self.node_proj.forward(bound, h)?, self.edge_proj.forward(bound, e)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rng;
    use crate::tensor::Tensor;

    fn small_config(heads: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: heads,
            embed_dim: 4,
            activation: Activation::leaky_relu(),
            node_in: 1,
            edge_in: 1,
        }
    }

    #[test]
    fn output_shapes_follow_heads() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, rng::INIT);
        let enc = Encoder::new(small_config(1), &mut ps, &mut r).unwrap();
        let g = Graph::unit_features(3, vec![(0, 1), (1, 2), (2, 0), (0, 2)]).unwrap();
        let tape = Tape::new();
        let b = ps.bind(&tape);
        let (n, e) = enc.encode(&tape, &b, &g, &GraphIndex::new(&g)).unwrap();
        assert_eq!(n.shape(), vec![3, 1]);
        assert_eq!(e.shape(), vec![4, 1]);
    }

    #[test]
    fn edgeless_graph_aggregates_zero() {
        let mut ps = ParamSet::new();
        let mut r = rng::stream(0, rng::INIT);
        let layer = AttentionGnLayer::new(&mut ps, "l", 2, 1, 8, 3, 3, Activation::Tanh, &mut r).unwrap();
        let g = Graph::new(2, vec![], Tensor::ones(&[2, 2]), Tensor::zeros(&[0, 1])).unwrap();
        let tape = Tape::new();
        let b = ps.bind(&tape);
        let h = tape.constant(g.node_feat().clone());
        let e = tape.constant(Tensor::zeros(&[0, 1]));
        let (n, m) = layer.forward(&b, &GraphIndex::new(&g), h, e).unwrap();
        assert_eq!(m.shape(), vec![0, 3]);
        // same as running the node MLP on [h | 0]
        let x = tape.constant(Tensor::from_rows(&vec![vec![1.0, 1.0, 0.0, 0.0, 0.0]; 2]).unwrap());
        let expect = layer.node_mlp.forward(&b, x).unwrap();
        assert_eq!(n.value(), expect.value());
    }
}
