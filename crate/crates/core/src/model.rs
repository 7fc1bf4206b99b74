//! End-to-end model: encode, build contracting maps, solve, decode.

use serde_json::json;

use crate::autodiff::{concat, Activation, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::ProblemInstance;
use crate::encoder::{Encoder, EncoderConfig, GraphIndex};
use crate::error::{CgsError, Result};
use crate::exec::Execution;
use crate::graph::{Graph, GraphBatch};
use crate::nn::{Bound, Mlp, ParamSet};
use crate::problems::ProblemSpec;
use crate::rng;
use crate::solver::{fixed_point_layer, inverse_out_degree, BackwardMode, FixedPointResult, SolveMode, SolverConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Hidden widths of the per-node decoder MLP.
    pub decoder_hidden: Vec<usize>,
    pub out_dim: usize,
    pub solver: SolverConfig,
}

impl ModelConfig {
    /// Preset encoder for the problem family, decoder `[64, 32] -> 1`.
    pub fn for_problem(problem: &ProblemSpec, num_heads: usize, solver: SolverConfig) -> Self {
        let (node_in, edge_in) = problem.feature_dims();
        let encoder = match problem {
            ProblemSpec::Gvi(_) => EncoderConfig::gvi(num_heads, node_in, edge_in),
            ProblemSpec::Diffusion(_) => EncoderConfig::diffusion(num_heads, node_in, edge_in),
        };
        ModelConfig {
            encoder,
            decoder_hidden: vec![64, 32],
            out_dim: 1,
            solver,
        }
    }

    /// Decoder input is `[H*_i | node_feat_i]`.
    pub fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.encoder.num_heads + self.encoder.node_in];
        w.extend(&self.decoder_hidden);
        w.push(self.out_dim);
        w
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.solver.validate()?;
        if self.out_dim == 0 {
            return Err(CgsError::Config("decoder output width must be positive".into()));
        }
        Ok(())
    }
}

pub struct CgsModel {
    config: ModelConfig,
    params: ParamSet,
    encoder: Encoder,
    decoder: Mlp,
}

/// Output of one recorded forward pass.
pub struct Forward<'t> {
    pub prediction: Var<'t>,
    pub h_star: Var<'t>,
    pub fixed_point: FixedPointResult,
}

impl CgsModel {
    /// Fresh model; weights are drawn from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, rng::INIT);
        let encoder = Encoder::new(config.encoder.clone(), &mut params, &mut r)?;
        let decoder = Mlp::new(&mut params, "decoder", &config.decoder_widths(), config.encoder.activation, &mut r)?;
        Ok(CgsModel {
            config,
            params,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn solver_config_mut(&mut self) -> &mut SolverConfig {
        &mut self.config.solver
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Per-node decoder over `[H* | node features]`.
    pub fn decode<'t>(&self, bound: &Bound<'t>, h_star: Var<'t>, g: &Graph) -> Result<Var<'t>> {
        let feats = h_star.tape().constant(g.node_feat().clone());
        self.decoder.forward(bound, concat(&[h_star, feats], 1)?)
    }

    /// Records encode → maps → fixed point → decode on `tape`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        g: &Graph,
        batch: Option<&GraphBatch>,
        exec: Execution,
    ) -> Result<Forward<'t>> {
        let index = GraphIndex::new(g);
        let (node_out, edge_out) = self.encoder.encode(tape, bound, g, &index)?;
        let inv_deg = tape.constant(Tensor::column(inverse_out_degree(g)));
        let weights = edge_out.sigmoid()?.scale_rows(inv_deg)?;
        let (h_star, fixed_point) = fixed_point_layer(tape, g, batch, weights, node_out, &self.config.solver, exec)?;
        let prediction = self.decode(bound, h_star, g)?;
        Ok(Forward {
            prediction,
            h_star,
            fixed_point,
        })
    }

    /// Inference on one graph.
    pub fn predict(&self, g: &Graph) -> Result<(Tensor, FixedPointResult)> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let f = self.forward(&tape, &bound, g, None, Execution::Sequential)?;
        Ok((f.prediction.value(), f.fixed_point))
    }

    /// Inference on a disjoint union; returns one prediction block per graph.
    pub fn predict_batch(&self, graphs: &[&Graph]) -> Result<Vec<Tensor>> {
        let batch = GraphBatch::new(graphs)?;
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let f = self.forward(&tape, &bound, batch.merged(), Some(&batch), Execution::Sequential)?;
        let y = f.prediction.value();
        Ok((0..batch.len())
            .map(|k| {
                let r = batch.node_range(k);
                y.slice_rows(r.start, r.end)
            })
            .collect())
    }

    /// Records `scale * mean over graphs of per-graph MSE` for one group of
    /// instances on `tape`.
    fn record_loss<'t>(
        &self,
        tape: &'t Tape,
        bound: &Bound<'t>,
        instances: &[&ProblemInstance],
        scale: f64,
    ) -> Result<(Var<'t>, FixedPointResult)> {
        let graphs: Vec<&Graph> = instances.iter().map(|i| &i.graph).collect();
        let batch = GraphBatch::new(&graphs)?;
        let f = self.forward(tape, bound, batch.merged(), Some(&batch), Execution::Sequential)?;
        let targets: Vec<&Tensor> = instances.iter().map(|i| &i.node_target).collect();
        let target = tape.constant(Tensor::vstack(&targets)?);
        let mut weights = Vec::with_capacity(batch.merged().num_nodes());
        for k in 0..batch.len() {
            let n = batch.node_range(k).len();
            let w = scale / (instances.len() as f64 * (n * self.config.out_dim).max(1) as f64);
            weights.extend(std::iter::repeat(w).take(n));
        }
        let weights = tape.constant(Tensor::column(weights));
        let diff = f.prediction.sub(target)?;
        Ok((diff.mul(diff)?.scale_rows(weights)?.sum()?, f.fixed_point))
    }

    /// Loss value only.
    pub fn loss(&self, instances: &[&ProblemInstance]) -> Result<f64> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        Ok(self.record_loss(&tape, &bound, instances, 1.0)?.0.value().data()[0])
    }

    /// Loss `scale * mean over graphs of per-graph MSE` and its parameter
    /// gradients for one group of instances recorded on a single tape.
    pub fn loss_and_grads(&self, instances: &[&ProblemInstance], scale: f64) -> Result<(f64, Vec<Tensor>, FixedPointResult)> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let (loss, fixed_point) = self.record_loss(&tape, &bound, instances, scale)?;
        let grads = tape.backward(loss)?;
        let g = bound.vars().iter().map(|v| grads.wrt(*v)).collect();
        Ok((loss.value().data()[0], g, fixed_point))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let mut ck = Checkpoint::default();
        let meta = [
            ("encoder.layers", json!(c.encoder.num_layers)),
            ("encoder.hidden", json!(c.encoder.hidden_dim)),
            ("encoder.heads", json!(c.encoder.num_heads)),
            ("encoder.embed", json!(c.encoder.embed_dim)),
            ("encoder.activation", json!(c.encoder.activation.name())),
            ("encoder.node_in", json!(c.encoder.node_in)),
            ("encoder.edge_in", json!(c.encoder.edge_in)),
            ("decoder.hidden", json!(c.decoder_hidden)),
            ("decoder.out_dim", json!(c.out_dim)),
            ("solver.gamma", json!(c.solver.gamma)),
            ("solver.tol", json!(c.solver.tol)),
            ("solver.max_iter", json!(c.solver.max_iter)),
            ("solver.mode", json!(c.solver.mode.to_string())),
            ("solver.phi", json!(c.solver.phi.name())),
        ];
        for (k, v) in meta {
            ck.meta.insert(k.into(), v);
        }
        ck.tensors = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let decoder_hidden = ck
            .meta_value("decoder.hidden")?
            .as_array()
            .ok_or_else(|| CgsError::Validation("decoder.hidden is not a list".into()))?
            .iter()
            .map(|v| v.as_u64().map(|x| x as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| CgsError::Validation("decoder.hidden entries must be integers".into()))?;
        let config = ModelConfig {
            encoder: EncoderConfig {
                num_layers: ck.meta_usize("encoder.layers")?,
                hidden_dim: ck.meta_usize("encoder.hidden")?,
                num_heads: ck.meta_usize("encoder.heads")?,
                embed_dim: ck.meta_usize("encoder.embed")?,
                activation: Activation::parse(ck.meta_str("encoder.activation")?)?,
                node_in: ck.meta_usize("encoder.node_in")?,
                edge_in: ck.meta_usize("encoder.edge_in")?,
            },
            decoder_hidden,
            out_dim: ck.meta_usize("decoder.out_dim")?,
            solver: SolverConfig {
                gamma: ck.meta_f64("solver.gamma")?,
                tol: ck.meta_f64("solver.tol")?,
                max_iter: ck.meta_usize("solver.max_iter")?,
                mode: ck.meta_str("solver.mode")?.parse::<SolveMode>()?,
                backward_mode: BackwardMode::Implicit,
                phi: Activation::parse(ck.meta_str("solver.phi")?)?,
            },
        };
        let mut model = CgsModel::new(config, 0)?;
        model.params.load_from(|name| ck.tensor(name))?;
        Ok(model)
    }
}
