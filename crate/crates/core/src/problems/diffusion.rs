//! Steady single-phase flow through random pore networks.
//!
//! Pores are points in a cube joined to their `k` nearest neighbours by
//! cylindrical throats with conductance `pi r^4 / (8 mu l)`. Interior pressures
//! satisfy flux balance `sum_j g_ij (p_i - p_j) = 0`; inlet and outlet pores
//! are pinned.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{InstanceMeta, ProblemInstance, ProblemKind};
use crate::error::{CgsError, Result};
use crate::graph::Graph;
use crate::linalg;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const MAX_ATTEMPTS: u64 = 32;
const BOUNDARY_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub num_pores: usize,
    pub domain_width: f64,
    pub diameter_range: (f64, f64),
    pub mu: f64,
    pub boundary_pressure: f64,
    pub knn: usize,
}

impl Default for DiffusionSpec {
    fn default() -> Self {
        DiffusionSpec {
            num_pores: 50,
            domain_width: 0.1,
            diameter_range: (9.9e-3, 10.1e-3),
            mu: 1e-3,
            boundary_pressure: 101_325.0,
            knn: 4,
        }
    }
}

impl DiffusionSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.diameter_range;
        if self.num_pores < 4 {
            return Err(CgsError::Config(format!("need at least 4 pores, got {}", self.num_pores)));
        }
        if self.knn == 0 || self.knn >= self.num_pores {
            return Err(CgsError::Config(format!(
                "need 1 <= knn < num_pores, got knn={} num_pores={}",
                self.knn, self.num_pores
            )));
        }
        if !(self.domain_width > 0.0 && lo > 0.0 && lo <= hi && self.mu > 0.0 && self.boundary_pressure > 0.0) {
            return Err(CgsError::Config("physical quantities must be positive".into()));
        }
        Ok(())
    }

    fn boundary_count(&self) -> usize {
        ((self.num_pores as f64 * BOUNDARY_FRACTION).ceil() as usize).max(1)
    }
}

/// Hagen-Poiseuille throat conductance.
pub fn conductance(radius: f64, length: f64, mu: f64) -> f64 {
    std::f64::consts::PI * radius.powi(4) / (8.0 * mu * length)
}

/// A generated network with its physical quantities.
#[derive(Debug, Clone)]
pub struct PoreNetwork {
    pub positions: Vec<[f64; 3]>,
    pub diameters: Vec<f64>,
    /// Antiparallel directed edges, two per throat.
    pub edges: Vec<(usize, usize)>,
    /// Conductance per directed edge.
    pub conductance: Vec<f64>,
    pub dirichlet: BTreeMap<usize, f64>,
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl PoreNetwork {
    /// Samples one network; no connectivity guarantee.
    pub fn sample(spec: &DiffusionSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let n = spec.num_pores;
        let w = spec.domain_width;
        let (lo, hi) = spec.diameter_range;
        let positions: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.gen_range(0.0..w), rng.gen_range(0.0..w), rng.gen_range(0.0..w)])
            .collect();
        let diameters: Vec<f64> = (0..n)
            .map(|_| if lo < hi { rng.gen_range(lo..hi) } else { lo })
            .collect();

        let mut throats = BTreeSet::new();
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            order.sort_by(|&a, &b| {
                dist(&positions[i], &positions[a])
                    .total_cmp(&dist(&positions[i], &positions[b]))
                    .then(a.cmp(&b))
            });
            for &j in order.iter().take(spec.knn) {
                throats.insert((i.min(j), i.max(j)));
            }
        }
        let mut edges = Vec::with_capacity(2 * throats.len());
        let mut cond = Vec::with_capacity(2 * throats.len());
        for &(i, j) in &throats {
            let radius = 0.5 * diameters[i].min(diameters[j]);
            let c = conductance(radius, dist(&positions[i], &positions[j]), spec.mu);
            edges.extend([(i, j), (j, i)]);
            cond.extend([c, c]);
        }

        let mut by_x: Vec<usize> = (0..n).collect();
        by_x.sort_by(|&a, &b| positions[a][0].total_cmp(&positions[b][0]).then(a.cmp(&b)));
        let nb = spec.boundary_count();
        let mut dirichlet = BTreeMap::new();
        for &i in &by_x[..nb] {
            dirichlet.insert(i, spec.boundary_pressure);
        }
        for &i in &by_x[n - nb..] {
            dirichlet.insert(i, 0.0);
        }
        Ok(PoreNetwork {
            positions,
            diameters,
            edges,
            conductance: cond,
            dirichlet,
        })
    }

    pub fn num_pores(&self) -> usize {
        self.positions.len()
    }

    /// True when every pore is reachable from every other.
    pub fn is_connected(&self) -> bool {
        reachable(self.num_pores(), &self.edges, [0]).iter().all(|&r| r)
    }

    /// Plain graph with unit features, for oracle calls.
    pub fn graph(&self) -> Result<Graph> {
        Graph::unit_features(self.num_pores(), self.edges.clone())
    }
}

fn reachable(n: usize, edges: &[(usize, usize)], seeds: impl IntoIterator<Item = usize>) -> Vec<bool> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for s in seeds {
        if !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(i) = queue.pop_front() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

fn check_inputs(g: &Graph, cond: &[f64], dirichlet: &BTreeMap<usize, f64>) -> Result<()> {
    if cond.len() != g.num_edges() {
        return Err(CgsError::dim("diffusion conductances", &[g.num_edges()], &[cond.len()]));
    }
    if dirichlet.is_empty() {
        return Err(CgsError::Validation("no Dirichlet nodes".into()));
    }
    if let Some((&i, _)) = dirichlet.iter().find(|(&i, _)| i >= g.num_nodes()) {
        return Err(CgsError::Index {
            op: "diffusion_oracle",
            index: i,
            bound: g.num_nodes(),
        });
    }
    if cond.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(CgsError::Validation("conductances must be positive and finite".into()));
    }
    Ok(())
}

/// Pressures from the pinned weighted-Laplacian system. Each directed edge
/// `i -> j` contributes `g (p_i - p_j)` to the balance at `i`.
pub fn diffusion_oracle(g: &Graph, cond: &[f64], dirichlet: &BTreeMap<usize, f64>) -> Result<Tensor> {
    check_inputs(g, cond, dirichlet)?;
    let p = g.num_nodes();
    let seen = reachable(p, g.edges(), dirichlet.keys().copied());
    if let Some(i) = seen.iter().position(|&s| !s) {
        return Err(CgsError::Solver(format!(
            "node {i} lies in a component without Dirichlet nodes; system is singular"
        )));
    }
    let mut a = Tensor::zeros(&[p, p]);
    let mut rhs = vec![0.0; p];
    for (&(i, j), &c) in g.edges().iter().zip(cond) {
        if dirichlet.contains_key(&i) {
            continue;
        }
        let row = &mut a.data_mut()[i * p..(i + 1) * p];
        row[i] += c;
        row[j] -= c;
    }
    for (&i, &v) in dirichlet {
        a.data_mut()[i * p..(i + 1) * p].fill(0.0);
        a.set(i, i, 1.0);
        rhs[i] = v;
    }
    Ok(Tensor::column(linalg::solve(&a, &rhs)?))
}

/// Largest interior flux imbalance relative to `sum_j g_ij * max|p_bc|`.
pub fn flux_residual(g: &Graph, cond: &[f64], dirichlet: &BTreeMap<usize, f64>, pressure: &[f64]) -> f64 {
    let p = g.num_nodes();
    let mut net = vec![0.0; p];
    let mut scale = vec![0.0; p];
    for (&(i, j), &c) in g.edges().iter().zip(cond) {
        net[i] += c * (pressure[i] - pressure[j]);
        scale[i] += c;
    }
    let p_max = dirichlet.values().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    (0..p)
        .filter(|i| !dirichlet.contains_key(i) && scale[*i] > 0.0)
        .map(|i| net[i].abs() / (scale[i] * p_max))
        .fold(0.0, f64::max)
}

fn standardized_log(values: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = logs.len().max(1) as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let std = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    logs.iter()
        .map(|x| if std > 1e-12 { (x - mean) / std } else { 0.0 })
        .collect()
}

/// Model-facing instance: node features `[is_boundary, p_bc / P0]`, edge
/// feature standardized `ln g`, target pressure over its maximum.
pub fn instance_from_network(net: &PoreNetwork, spec: &DiffusionSpec, seed: u64) -> Result<ProblemInstance> {
    let plain = net.graph()?;
    let pressure = diffusion_oracle(&plain, &net.conductance, &net.dirichlet)?;
    let p_max = pressure.data().iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !(p_max > 0.0) {
        return Err(CgsError::Validation("pressure field has no positive maximum".into()));
    }
    let n = net.num_pores();
    let mut node_feat = Tensor::zeros(&[n, 2]);
    for (&i, &v) in &net.dirichlet {
        node_feat.set(i, 0, 1.0);
        node_feat.set(i, 1, v / spec.boundary_pressure);
    }
    let ne = net.edges.len();
    let edge_feat = Tensor::new(&[ne, 1], standardized_log(&net.conductance))?;
    let graph = Graph::new(n, net.edges.clone(), node_feat, edge_feat)?;
    let meta = InstanceMeta {
        problem: ProblemKind::Diffusion,
        alpha: None,
        mu: Some(spec.mu),
        seed,
        spec: serde_json::to_value(spec).expect("plain struct"),
    };
    ProblemInstance::new(graph, pressure.data().iter().map(|v| v / p_max).collect(), meta)
}

/// Draws networks from sub-seeds of `seed` until one is connected.
pub fn sample_connected(spec: &DiffusionSpec, seed: u64) -> Result<PoreNetwork> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut r = rng::substream(seed, "diffusion", attempt);
        let net = PoreNetwork::sample(spec, &mut r)?;
        if net.is_connected() {
            return Ok(net);
        }
        log::debug!("pore network seed {seed} attempt {attempt} disconnected, retrying");
    }
    Err(CgsError::Solver(format!(
        "no connected pore network after {MAX_ATTEMPTS} attempts (seed {seed}); raise knn"
    )))
}

pub fn generate_diffusion(spec: &DiffusionSpec, seed: u64) -> Result<ProblemInstance> {
    instance_from_network(&sample_connected(spec, seed)?, spec, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conductance_formula() {
        let g = conductance(5e-3, 1e-2, 1e-3);
        assert!((g - 2.454369260617026e-5).abs() < 1e-15);
    }

    fn chain(g1: f64, g2: f64) -> (Graph, Vec<f64>) {
        let g = Graph::unit_features(3, vec![(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap();
        (g, vec![g1, g1, g2, g2])
    }

    #[test]
    fn symmetric_midpoint() {
        let (g, c) = chain(1.0, 1.0);
        let bc = BTreeMap::from([(0, 1.0), (2, 0.0)]);
        let p = diffusion_oracle(&g, &c, &bc).unwrap();
        assert!((p.data()[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn chain_closed_form() {
        let (g1, g2, pl, pr) = (3.0, 0.5, 7.0, -2.0);
        let (g, c) = chain(g1, g2);
        let bc = BTreeMap::from([(0, pl), (2, pr)]);
        let p = diffusion_oracle(&g, &c, &bc).unwrap();
        assert!((p.data()[1] - (g1 * pl + g2 * pr) / (g1 + g2)).abs() < 1e-12);
        assert!(flux_residual(&g, &c, &bc, p.data()) < 1e-14);
    }

    #[test]
    fn floating_component_is_singular() {
        let g = Graph::unit_features(4, vec![(0, 1), (1, 0), (2, 3), (3, 2)]).unwrap();
        let bc = BTreeMap::from([(0, 1.0), (1, 0.0)]);
        assert!(matches!(diffusion_oracle(&g, &[1.0; 4], &bc), Err(CgsError::Solver(_))));
    }

    #[test]
    fn generated_targets_normalized() {
        let inst = generate_diffusion(&DiffusionSpec::default(), 3).unwrap();
        let t = inst.targets();
        assert!(t.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(t.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        assert_eq!(inst.graph.node_feat_dim(), 2);
        assert_eq!(inst, generate_diffusion(&DiffusionSpec::default(), 3).unwrap());
    }

    #[test]
    fn antiparallel_storage() {
        let mut r = rng::stream(0, "t");
        let net = PoreNetwork::sample(&DiffusionSpec::default(), &mut r).unwrap();
        for pair in net.edges.chunks(2) {
            assert_eq!(pair[0], (pair[1].1, pair[1].0));
        }
        assert_eq!(net.dirichlet.len(), 10);
    }
}
