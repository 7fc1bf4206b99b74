//! Three-way gradient comparison on small random end-to-end instances:
//! implicit (adjoint) gradients, backpropagation through unrolled
//! iterations, and central finite differences.

use rand::seq::index::sample;
use rand::Rng as _;

use crate::autodiff::Activation;
use crate::dataset::{InstanceMeta, ProblemInstance, ProblemKind};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::exec::Execution;
use crate::graph::Graph;
use crate::model::{CgsModel, ModelConfig};
use crate::rng;
use crate::solver::{BackwardMode, SolveMode, SolverConfig};
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const UNROLL: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckCase {
    pub seed: u64,
    pub num_nodes: usize,
    pub num_heads: usize,
    pub gamma: f64,
    pub phi: Activation,
    pub implicit_vs_unrolled: f64,
    pub implicit_vs_fd: f64,
    pub unrolled_vs_fd: f64,
}

impl GradcheckCase {
    pub fn max_error(&self) -> f64 {
        self.implicit_vs_unrolled.max(self.implicit_vs_fd).max(self.unrolled_vs_fd)
    }

    pub fn passed(&self, threshold: f64) -> bool {
        self.max_error() <= threshold
    }
}

/// `||a - b||_inf / max(||a||_inf, ||b||_inf)` over the flattened vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Random graph with `p` nodes, one to three distinct successors each, and
/// a random regression target.
pub fn random_instance(p: usize, seed: u64) -> Result<ProblemInstance> {
    let mut r = rng::stream(seed, "gradcheck.graph");
    let mut edges = Vec::new();
    for i in 0..p {
        let k = r.gen_range(1..=p.min(3));
        for j in sample(&mut r, p, k).into_iter() {
            edges.push((i, j));
        }
    }
    let ne = edges.len();
    let nf = Tensor::new(&[p, 1], (0..p).map(|_| r.gen_range(-1.0..1.0)).collect())?;
    let ef = Tensor::new(&[ne, 1], (0..ne).map(|_| r.gen_range(-1.0..1.0)).collect())?;
    let graph = Graph::new(p, edges, nf, ef)?;
    let target = (0..p).map(|_| r.gen_range(-1.0..1.0)).collect();
    let meta = InstanceMeta {
        problem: ProblemKind::Gvi,
        alpha: None,
        mu: None,
        seed,
        spec: serde_json::Value::Null,
    };
    ProblemInstance::new(graph, target, meta)
}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Compares the three gradient routes on one seeded instance.
pub fn check_case(seed: u64, phi: Activation) -> Result<GradcheckCase> {
    let mut r = rng::stream(seed, "gradcheck.shape");
    let p = r.gen_range(2..=8);
    let heads = r.gen_range(1..=4);
    let gamma = r.gen_range(0.3..0.7);
    let inst = random_instance(p, seed)?;
    // smooth encoder, so finite differences only see kinks from phi itself
    let encoder = EncoderConfig {
        num_layers: 1,
        hidden_dim: 4,
        num_heads: heads,
        embed_dim: 3,
        activation: Activation::Tanh,
        node_in: 1,
        edge_in: 1,
    };
    let exact = SolverConfig {
        gamma,
        tol: 1e-14,
        max_iter: 400,
        mode: if phi == Activation::Identity {
            SolveMode::Direct
        } else {
            SolveMode::Iterative
        },
        backward_mode: BackwardMode::Implicit,
        phi,
    };
    let config = ModelConfig {
        encoder,
        decoder_hidden: vec![4],
        out_dim: 1,
        solver: exact.clone(),
    };
    let mut model = CgsModel::new(config, seed)?;
    let batch = [&inst];

    let implicit = flatten(&model.loss_and_grads(&batch, 1.0)?.1);

    *model.solver_config_mut() = SolverConfig {
        backward_mode: BackwardMode::Unrolled,
        max_iter: UNROLL,
        ..exact.clone()
    };
    let unrolled = flatten(&model.loss_and_grads(&batch, 1.0)?.1);

    *model.solver_config_mut() = exact;
    let mut fd = Vec::with_capacity(implicit.len());
    for k in 0..model.params().len() {
        for i in 0..model.params().values()[k].len() {
            let orig = model.params().values()[k].data()[i];
            model.params_mut().values_mut()[k].data_mut()[i] = orig + FD_STEP;
            let up = model.loss(&batch)?;
            model.params_mut().values_mut()[k].data_mut()[i] = orig - FD_STEP;
            let down = model.loss(&batch)?;
            model.params_mut().values_mut()[k].data_mut()[i] = orig;
            fd.push((up - down) / (2.0 * FD_STEP));
        }
    }

    Ok(GradcheckCase {
        seed,
        num_nodes: p,
        num_heads: heads,
        gamma,
        phi,
        implicit_vs_unrolled: relative_error(&implicit, &unrolled),
        implicit_vs_fd: relative_error(&implicit, &fd),
        unrolled_vs_fd: relative_error(&unrolled, &fd),
    })
}

/// `count` cases alternating identity and leaky-ReLU fixed-point maps.
pub fn run(count: usize, seed: u64, exec: Execution) -> Result<Vec<GradcheckCase>> {
    exec.map_range(count, |k| {
        let phi = if k % 2 == 0 {
            Activation::Identity
        } else {
            Activation::leaky_relu()
        };
        check_case(rng::derive_seed(seed, "gradcheck", k as u64), phi)
    })
    .into_iter()
    .collect()
}
