//! Graph value iteration on deterministic MDPs.
//!
//! States are nodes, actions are out-edges, and the reward of taking edge
//! `i -> j` is its single edge feature. The optimal value satisfies
//! `V_i = max_j (r_ij + alpha V_j)`.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{InstanceMeta, ProblemInstance, ProblemKind};
use crate::error::{CgsError, Result};
use crate::graph::Graph;
use crate::linalg;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GviSpec {
    pub n_s: usize,
    pub n_a: usize,
    pub alpha: f64,
    pub reward_low: f64,
    pub reward_high: f64,
    pub vi_tol: f64,
}

impl Default for GviSpec {
    fn default() -> Self {
        GviSpec {
            n_s: 20,
            n_a: 5,
            alpha: 0.9,
            reward_low: -1.0,
            reward_high: 1.0,
            vi_tol: 1e-3,
        }
    }
}

impl GviSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_a == 0 || self.n_a > self.n_s {
            return Err(CgsError::Config(format!(
                "need 1 <= n_a <= n_s, got n_a={} n_s={}",
                self.n_a, self.n_s
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CgsError::Config(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.reward_low < self.reward_high) {
            return Err(CgsError::Config("reward range is empty".into()));
        }
        if !(self.vi_tol > 0.0) {
            return Err(CgsError::Config("vi_tol must be positive".into()));
        }
        Ok(())
    }
}

/// `n_a` distinct uniformly drawn successors per state with uniform rewards.
/// Node features are the constant 1, edge features the reward.
pub fn random_mdp_graph(spec: &GviSpec, rng: &mut Rng) -> Result<Graph> {
    spec.validate()?;
    let mut edges = Vec::with_capacity(spec.n_s * spec.n_a);
    let mut rewards = Vec::with_capacity(spec.n_s * spec.n_a);
    for i in 0..spec.n_s {
        for j in sample(rng, spec.n_s, spec.n_a).into_iter() {
            edges.push((i, j));
            rewards.push(rng.gen_range(spec.reward_low..spec.reward_high));
        }
    }
    let ne = edges.len();
    Graph::new(
        spec.n_s,
        edges,
        Tensor::ones(&[spec.n_s, 1]),
        Tensor::new(&[ne, 1], rewards)?,
    )
}

fn reward(g: &Graph, e: usize) -> f64 {
    g.edge_feat().data()[e * g.edge_feat_dim()]
}

fn require_actions(g: &Graph) -> Result<()> {
    match (0..g.num_nodes()).find(|&i| g.out_edges(i).is_empty()) {
        Some(i) => Err(CgsError::Validation(format!("state {i} has no outgoing action"))),
        None => Ok(()),
    }
}

/// Value iteration from `V = 0` until the sweep difference is below `tol`.
pub fn value_iteration_oracle(g: &Graph, alpha: f64, tol: f64) -> Result<Tensor> {
    Ok(Tensor::column(value_iteration_trace(g, alpha, tol)?.pop().expect("at least one sweep")))
}

/// Every iterate of value iteration, starting with `V^1`.
pub fn value_iteration_trace(g: &Graph, alpha: f64, tol: f64) -> Result<Vec<Vec<f64>>> {
    require_actions(g)?;
    let p = g.num_nodes();
    let mut v = vec![0.0; p];
    let mut trace = Vec::new();
    for _ in 0..MAX_SWEEPS {
        let next: Vec<f64> = (0..p)
            .map(|i| {
                g.out_edges(i)
                    .iter()
                    .map(|&(j, e)| reward(g, e) + alpha * v[j])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let diff = next.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        v = next;
        trace.push(v.clone());
        if diff < tol {
            return Ok(trace);
        }
    }
    Err(CgsError::Solver("value iteration did not converge".into()))
}

/// Greedy successor per state; ties go to the lowest edge index.
pub fn greedy_policy(g: &Graph, values: &[f64], alpha: f64) -> Result<Vec<usize>> {
    require_actions(g)?;
    if values.len() != g.num_nodes() {
        return Err(CgsError::dim("greedy_policy", &[g.num_nodes()], &[values.len()]));
    }
    Ok((0..g.num_nodes())
        .map(|i| {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for &(j, e) in g.out_edges(i) {
                let q = reward(g, e) + alpha * values[j];
                if q > best.0 {
                    best = (q, j);
                }
            }
            best.1
        })
        .collect())
}

/// Exact values of a fixed deterministic policy: `(I - alpha P) V = r`.
pub fn evaluate_policy(g: &Graph, policy: &[usize], alpha: f64) -> Result<Vec<f64>> {
    let p = g.num_nodes();
    let mut a = Tensor::eye(p);
    let mut r = vec![0.0; p];
    for (i, &j) in policy.iter().enumerate() {
        let &(_, e) = g
            .out_edges(i)
            .iter()
            .find(|&&(d, _)| d == j)
            .ok_or_else(|| CgsError::Validation(format!("policy picks non-successor {j} at {i}")))?;
        a.data_mut()[i * p + j] -= alpha;
        r[i] = reward(g, e);
    }
    linalg::solve(&a, &r)
}

/// Policy iteration: exact evaluation plus greedy improvement until stable.
pub fn policy_iteration_oracle(g: &Graph, alpha: f64) -> Result<Tensor> {
    require_actions(g)?;
    let mut policy: Vec<usize> = (0..g.num_nodes()).map(|i| g.out_edges(i)[0].0).collect();
    for _ in 0..10_000 {
        let v = evaluate_policy(g, &policy, alpha)?;
        // switch only on strict improvement so equally good policies cannot cycle
        let mut changed = false;
        for (i, choice) in policy.iter_mut().enumerate() {
            let q = |j: usize, e: usize| reward(g, e) + alpha * v[j];
            let q_cur = v[i];
            if let Some(&(j, _)) = g
                .out_edges(i)
                .iter()
                .filter(|&&(j, e)| q(j, e) > q_cur + 1e-12 * (1.0 + q_cur.abs()))
                .max_by(|a, b| q(a.0, a.1).total_cmp(&q(b.0, b.1)))
            {
                *choice = j;
                changed = true;
            }
        }
        if !changed {
            return Ok(Tensor::column(v));
        }
    }
    Err(CgsError::Solver("policy iteration did not stabilize".into()))
}

/// Instance from an explicit MDP graph, labelled by value iteration.
pub fn instance_from_graph(g: Graph, spec: &GviSpec, seed: u64) -> Result<ProblemInstance> {
    let target = value_iteration_oracle(&g, spec.alpha, spec.vi_tol)?;
    let meta = InstanceMeta {
        problem: ProblemKind::Gvi,
        alpha: Some(spec.alpha),
        mu: None,
        seed,
        spec: serde_json::to_value(spec).expect("plain struct"),
    };
    ProblemInstance::new(g, target.into_data(), meta)
}

pub fn generate_gvi(spec: &GviSpec, seed: u64) -> Result<ProblemInstance> {
    let mut r = rng::stream(seed, "gvi");
    let g = random_mdp_graph(spec, &mut r)?;
    instance_from_graph(g, spec, seed)
}
