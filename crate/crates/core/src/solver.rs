//! Contracting graph maps and their fixed points.
//!
//! For each head `m` the map is `H -> phi(gamma * A_m * H + B_m)` where
//! `[A_m]_{ij} = sigmoid(edge_logit) / outdeg(i)` on every edge `i -> j` and
//! `B_m` is the encoder's node output. Every row of `A_m` sums to at most one,
//! so with `0 < gamma < 1` and a non-expansive `phi` the map is a
//! `gamma`-contraction in the infinity norm and its fixed point is unique.
//!
//! `A_m` is held edge-wise (one weight per edge and head). Dense matrices are
//! only materialized for the direct solver, one graph component at a time.

use std::ops::Range;
use std::rc::Rc;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Activation, Tape, Var};
use crate::error::{CgsError, Result};
use crate::exec::Execution;
use crate::graph::{Graph, GraphBatch};
use crate::linalg::LuFactors;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackwardMode {
    Implicit,
    /// Backpropagation through `max_iter` recorded iterations. Test oracle only.
    Unrolled,
}

impl std::str::FromStr for SolveMode {
    type Err = CgsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(SolveMode::Direct),
            "iterative" => Ok(SolveMode::Iterative),
            other => Err(CgsError::Config(format!("unknown solver mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for SolveMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveMode::Direct => "direct",
            SolveMode::Iterative => "iterative",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub mode: SolveMode,
    pub backward_mode: BackwardMode,
    /// Elementwise map applied after the affine step. `Identity` gives the
    /// linear scheme; other choices must be non-expansive.
    pub phi: Activation,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            gamma: 0.5,
            tol: 1e-6,
            max_iter: 50,
            mode: SolveMode::Iterative,
            backward_mode: BackwardMode::Implicit,
            phi: Activation::Identity,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if !(self.tol > 0.0) {
            return Err(CgsError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(CgsError::Config("max_iter must be at least 1".into()));
        }
        if self.mode == SolveMode::Direct && self.phi != Activation::Identity {
            return Err(CgsError::Config(format!(
                "direct solve requires the identity map, got {}",
                self.phi.name()
            )));
        }
        check_phi(self.phi)?;
        if self.phi == Activation::Swish && self.gamma * SWISH_MAX_SLOPE >= 1.0 {
            return Err(CgsError::Config(format!(
                "swish has slope up to {SWISH_MAX_SLOPE}, so gamma must stay below {:.4}, got {}",
                1.0 / SWISH_MAX_SLOPE,
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Upper bound on the swish derivative; the map with swish contracts at rate
/// `gamma * SWISH_MAX_SLOPE`.
pub const SWISH_MAX_SLOPE: f64 = 1.0999;

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(CgsError::Config(format!("gamma must lie in (0, 1), got {gamma}")))
    }
}

fn check_phi(phi: Activation) -> Result<()> {
    match phi {
        Activation::Identity | Activation::Tanh | Activation::Swish => Ok(()),
        Activation::LeakyRelu(s) if s.abs() <= 1.0 => Ok(()),
        other => Err(CgsError::Config(format!(
            "{} is not a component-wise non-expansive activation",
            other.name()
        ))),
    }
}

/// Per-head transition weights and biases for one (possibly batched) graph.
#[derive(Debug, Clone)]
pub struct ContractingMapSet {
    num_nodes: usize,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    /// `[E x M]`, entry `(e, m)` is `[A_m]_{src(e), dst(e)}` contributed by edge `e`.
    weights: Tensor,
    /// `[p x M]`
    bias: Tensor,
    gamma: f64,
    phi: Activation,
    components: Vec<(Range<usize>, Range<usize>)>,
}

/// `1 / outdeg(src(e))` for every edge.
pub fn inverse_out_degree(g: &Graph) -> Vec<f64> {
    g.edges()
        .iter()
        .map(|&(s, _)| 1.0 / g.out_edges(s).len() as f64)
        .collect()
}

fn components_of(batch: Option<&GraphBatch>, g: &Graph) -> Vec<(Range<usize>, Range<usize>)> {
    match batch {
        Some(b) => (0..b.len()).map(|k| (b.node_range(k), b.edge_range(k))).collect(),
        None => vec![(0..g.num_nodes(), 0..g.num_edges())],
    }
}

impl ContractingMapSet {
    /// Builds the maps from raw encoder outputs.
    pub fn build(g: &Graph, node_out: &Tensor, edge_out: &Tensor, gamma: f64, phi: Activation) -> Result<Self> {
        Self::build_batched(g, None, node_out, edge_out, gamma, phi)
    }

    pub fn build_batched(
        g: &Graph,
        batch: Option<&GraphBatch>,
        node_out: &Tensor,
        edge_out: &Tensor,
        gamma: f64,
        phi: Activation,
    ) -> Result<Self> {
        check_gamma(gamma)?;
        check_phi(phi)?;
        if node_out.rows() != g.num_nodes() || edge_out.rows() != g.num_edges() || node_out.cols() != edge_out.cols() {
            return Err(CgsError::dim("build_maps", node_out.shape(), edge_out.shape()));
        }
        let heads = node_out.cols();
        let inv = inverse_out_degree(g);
        let mut w = edge_out.map(sigmoid);
        for (row, s) in w.data_mut().chunks_exact_mut(heads.max(1)).zip(&inv) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        Self::from_parts(g, batch, w, node_out.clone(), gamma, phi)
    }

    /// Wraps already-normalized edge weights.
    pub fn from_parts(
        g: &Graph,
        batch: Option<&GraphBatch>,
        weights: Tensor,
        bias: Tensor,
        gamma: f64,
        phi: Activation,
    ) -> Result<Self> {
        check_gamma(gamma)?;
        check_phi(phi)?;
        if weights.rows() != g.num_edges() || bias.rows() != g.num_nodes() || weights.cols() != bias.cols() {
            return Err(CgsError::dim("ContractingMapSet", weights.shape(), bias.shape()));
        }
        Ok(ContractingMapSet {
            num_nodes: g.num_nodes(),
            src: g.sources().into(),
            dst: g.targets().into(),
            weights,
            bias,
            gamma,
            phi,
            components: components_of(batch, g),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_heads(&self) -> usize {
        self.bias.cols()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn phi(&self) -> Activation {
        self.phi
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.src.iter().copied().zip(self.dst.iter().copied())
    }

    fn head_weights(&self, m: usize) -> Vec<f64> {
        self.weights.column_values(m)
    }

    fn head_bias(&self, m: usize) -> Vec<f64> {
        self.bias.column_values(m)
    }

    /// Dense `[p x p]` transition matrix of head `m`; parallel edges add up.
    pub fn dense_transition(&self, m: usize) -> Tensor {
        let p = self.num_nodes;
        let mut a = Tensor::zeros(&[p, p]);
        let heads = self.num_heads();
        for (e, (s, d)) in self.edges().enumerate() {
            a.data_mut()[s * p + d] += self.weights.data()[e * heads + m];
        }
        a
    }

    /// `out[i] = sum over edges i -> j of w_e * x[j]`
    fn spmv(&self, w: &[f64], x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for ((&s, &d), &we) in self.src.iter().zip(self.dst.iter()).zip(w) {
            out[s] += we * x[d];
        }
    }

    /// `out[j] = sum over edges i -> j of w_e * y[i]`
    fn spmv_transposed(&self, w: &[f64], y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for ((&s, &d), &we) in self.src.iter().zip(self.dst.iter()).zip(w) {
            out[d] += we * y[s];
        }
    }

    /// Applies every head's map once: `phi(gamma * A_m h_m + B_m)`.
    pub fn apply(&self, h: &Tensor) -> Result<Tensor> {
        if h.shape() != self.bias.shape() {
            return Err(CgsError::dim("apply map", h.shape(), self.bias.shape()));
        }
        let heads = self.num_heads();
        let mut out = Tensor::zeros(self.bias.shape());
        let mut buf = vec![0.0; self.num_nodes];
        for m in 0..heads {
            let w = self.head_weights(m);
            let b = self.head_bias(m);
            self.spmv(&w, &h.column_values(m), &mut buf);
            for i in 0..self.num_nodes {
                out.data_mut()[i * heads + m] = self.phi.eval(self.gamma * buf[i] + b[i]);
            }
        }
        Ok(out)
    }

    /// Checks entry range, edge support and row sums.
    pub fn validate(&self) -> Result<()> {
        let heads = self.num_heads();
        for m in 0..heads {
            let mut rows = vec![0.0; self.num_nodes];
            for (e, (s, _)) in self.edges().enumerate() {
                let w = self.weights.data()[e * heads + m];
                if !(0.0..=1.0).contains(&w) {
                    return Err(CgsError::Validation(format!("A entry {w} outside [0,1]")));
                }
                rows[s] += w;
            }
            if let Some(r) = rows.iter().find(|&&r| r > 1.0 + 1e-12) {
                return Err(CgsError::Validation(format!("row sum {r} exceeds 1")));
            }
        }
        Ok(())
    }
}

/// Converged hidden state of every head, concatenated column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    /// `[p x M]`
    pub h_star: Tensor,
    /// Map applications per head (0 for the direct solver).
    pub iterations: Vec<usize>,
    /// `||H - T(H)||_inf` per head at the returned iterate.
    pub residuals: Vec<f64>,
    /// False if some head hit `max_iter` with residual above `10 * tol`.
    pub converged: bool,
}

fn head_residual(maps: &ContractingMapSet, m: usize, h: &[f64]) -> f64 {
    let w = maps.head_weights(m);
    let b = maps.head_bias(m);
    let mut buf = vec![0.0; maps.num_nodes];
    maps.spmv(&w, h, &mut buf);
    h.iter()
        .zip(&buf)
        .zip(&b)
        .fold(0.0, |r, ((&x, &ax), &bi)| r.max((x - maps.phi.eval(maps.gamma * ax + bi)).abs()))
}

fn assemble(p: usize, heads: usize, columns: &[Vec<f64>]) -> Tensor {
    let mut data = vec![0.0; p * heads];
    for (m, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            data[i * heads + m] = *v;
        }
    }
    Tensor::new(&[p, heads], data).expect("assembled")
}

/// `H*_m = (I - gamma A_m)^{-1} B_m` by dense LU, block by block.
pub fn solve_direct(maps: &ContractingMapSet, exec: Execution) -> Result<FixedPointResult> {
    if maps.phi != Activation::Identity {
        return Err(CgsError::Unsupported(format!(
            "direct solve requires the identity map, got {}",
            maps.phi.name()
        )));
    }
    let heads = maps.num_heads();
    let jobs: Vec<(usize, usize)> = (0..maps.components.len())
        .flat_map(|k| (0..heads).map(move |m| (k, m)))
        .collect();
    let blocks = exec.map(&jobs, |&(k, m)| -> Result<Vec<f64>> {
        let (nodes, edges) = &maps.components[k];
        let n = nodes.len();
        let off = nodes.start;
        let mut a = Tensor::eye(n);
        for e in edges.clone() {
            let (s, d) = (maps.src[e] - off, maps.dst[e] - off);
            a.data_mut()[s * n + d] -= maps.gamma * maps.weights.data()[e * heads + m];
        }
        let b: Vec<f64> = nodes.clone().map(|i| maps.bias.data()[i * heads + m]).collect();
        LuFactors::factor(&a)?.solve_vec(&b)
    });
    let mut columns = vec![vec![0.0; maps.num_nodes]; heads];
    for (&(k, m), block) in jobs.iter().zip(blocks) {
        let start = maps.components[k].0.start;
        let block = block?;
        columns[m][start..start + block.len()].copy_from_slice(&block);
    }
    let residuals: Vec<f64> = (0..heads).map(|m| head_residual(maps, m, &columns[m])).collect();
    let h_star = assemble(maps.num_nodes, heads, &columns);
    if !h_star.is_finite() {
        return Err(CgsError::NonFinite("solve_direct"));
    }
    Ok(FixedPointResult {
        h_star,
        iterations: vec![0; heads],
        residuals,
        converged: true,
    })
}

/// Iterates one head's map from `x0` until the step difference drops below
/// `tol`. Returns `(iterate, map applications, last step difference)`.
fn iterate_head(
    maps: &ContractingMapSet,
    w: &[f64],
    b: &[f64],
    x0: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, usize, f64) {
    let p = maps.num_nodes;
    let mut x = x0;
    let mut buf = vec![0.0; p];
    let mut count = 0;
    let mut diff = f64::INFINITY;
    while count < max_iter {
        maps.spmv(w, &x, &mut buf);
        diff = 0.0;
        for i in 0..p {
            let next = maps.phi.eval(maps.gamma * buf[i] + b[i]);
            diff = diff.max((x[i] - next).abs());
            x[i] = next;
        }
        count += 1;
        if diff < tol {
            break;
        }
    }
    (x, count, diff)
}

/// Fixed-point iteration from `H0 = 0` (or `init`).
pub fn solve_iterative(
    maps: &ContractingMapSet,
    cfg: &SolverConfig,
    init: Option<&Tensor>,
    exec: Execution,
) -> Result<FixedPointResult> {
    cfg.validate()?;
    if let Some(h0) = init {
        if h0.shape() != maps.bias.shape() {
            return Err(CgsError::dim("solve_iterative init", h0.shape(), maps.bias.shape()));
        }
    }
    let heads = maps.num_heads();
    let runs = exec.map_range(heads, |m| {
        let x0 = init.map_or_else(|| vec![0.0; maps.num_nodes], |h| h.column_values(m));
        let (x, n, _) = iterate_head(maps, &maps.head_weights(m), &maps.head_bias(m), x0, cfg.tol, cfg.max_iter);
        let r = head_residual(maps, m, &x);
        (x, n, r)
    });
    let mut converged = true;
    for (m, (_, n, r)) in runs.iter().enumerate() {
        if *n >= cfg.max_iter && *r > 10.0 * cfg.tol {
            warn!("head {m}: fixed-point iteration stopped at max_iter={n} with residual {r:.3e}");
            converged = false;
        }
    }
    let columns: Vec<Vec<f64>> = runs.iter().map(|r| r.0.clone()).collect();
    let h_star = assemble(maps.num_nodes, heads, &columns);
    if !h_star.is_finite() {
        return Err(CgsError::NonFinite("solve_iterative"));
    }
    Ok(FixedPointResult {
        h_star,
        iterations: runs.iter().map(|r| r.1).collect(),
        residuals: runs.iter().map(|r| r.2).collect(),
        converged,
    })
}

pub fn solve(maps: &ContractingMapSet, cfg: &SolverConfig, exec: Execution) -> Result<FixedPointResult> {
    match cfg.mode {
        SolveMode::Direct => solve_direct(maps, exec),
        SolveMode::Iterative => solve_iterative(maps, cfg, None, exec),
    }
}

/// Gradients of the loss with respect to the map parameters.
#[derive(Debug, Clone)]
pub struct ImplicitGrads {
    /// `[E x M]`, aligned with [`ContractingMapSet::weights`].
    pub edge_weights: Tensor,
    /// `[p x M]`
    pub bias: Tensor,
    pub iterations: Vec<usize>,
    pub converged: bool,
}

impl ImplicitGrads {
    /// Dense `[p x p]` gradient for head `m`; zero off the edge support.
    pub fn dense_a(&self, maps: &ContractingMapSet, m: usize) -> Tensor {
        let p = maps.num_nodes;
        let heads = maps.num_heads();
        let mut g = Tensor::zeros(&[p, p]);
        // parallel edges share one matrix entry and carry identical gradients
        for (e, (s, d)) in maps.edges().enumerate() {
            g.data_mut()[s * p + d] = self.edge_weights.data()[e * heads + m];
        }
        g
    }
}

struct Adjoint {
    /// Adjoint solution `y`, `[p x M]`.
    y: Tensor,
    /// `phi'` at the pre-activation `gamma * A H* + B`, `[p x M]`.
    dphi: Tensor,
    iterations: Vec<usize>,
    converged: bool,
}

/// Solves `y = gamma * A^T (D y) + g` per head by the same fixed-point scheme
/// as the forward pass, with `D = diag(phi'(gamma * A H* + B))`.
fn solve_adjoint(
    maps: &ContractingMapSet,
    h_star: &Tensor,
    incoming: &Tensor,
    tol: f64,
    max_iter: usize,
) -> Result<Adjoint> {
    if h_star.shape() != maps.bias.shape() || incoming.shape() != maps.bias.shape() {
        return Err(CgsError::dim("implicit_backward", incoming.shape(), maps.bias.shape()));
    }
    let p = maps.num_nodes;
    let heads = maps.num_heads();
    let mut y_cols = Vec::with_capacity(heads);
    let mut d_cols = Vec::with_capacity(heads);
    let mut iterations = Vec::with_capacity(heads);
    let mut converged = true;
    let mut buf = vec![0.0; p];
    for m in 0..heads {
        let w = maps.head_weights(m);
        let b = maps.head_bias(m);
        maps.spmv(&w, &h_star.column_values(m), &mut buf);
        let dphi: Vec<f64> = (0..p).map(|i| maps.phi.derivative(maps.gamma * buf[i] + b[i])).collect();
        let g = incoming.column_values(m);
        let mut y = vec![0.0; p];
        let mut u = vec![0.0; p];
        let mut count = 0;
        let mut diff = f64::INFINITY;
        while count < max_iter {
            for i in 0..p {
                u[i] = dphi[i] * y[i];
            }
            maps.spmv_transposed(&w, &u, &mut buf);
            diff = 0.0;
            for i in 0..p {
                let next = maps.gamma * buf[i] + g[i];
                diff = diff.max((y[i] - next).abs());
                y[i] = next;
            }
            count += 1;
            if diff < tol {
                break;
            }
        }
        if count >= max_iter && diff > 10.0 * tol {
            warn!("head {m}: adjoint iteration stopped at max_iter={count} with step {diff:.3e}");
            converged = false;
        }
        iterations.push(count);
        y_cols.push(y);
        d_cols.push(dphi);
    }
    let y = assemble(p, heads, &y_cols);
    if !y.is_finite() {
        return Err(CgsError::NonFinite("adjoint solve"));
    }
    Ok(Adjoint {
        y,
        dphi: assemble(p, heads, &d_cols),
        iterations,
        converged,
    })
}

/// Implicit-function-theorem gradients of `L(H*)` with respect to the edge
/// weights and biases, given `dL/dH*`. Memory does not depend on how many
/// forward iterations were run.
pub fn implicit_backward(
    maps: &ContractingMapSet,
    h_star: &Tensor,
    incoming: &Tensor,
    cfg: &SolverConfig,
) -> Result<ImplicitGrads> {
    let adj = solve_adjoint(maps, h_star, incoming, cfg.tol, cfg.max_iter)?;
    let u = adj.y.zip_map(&adj.dphi, |y, d| y * d)?;
    let heads = maps.num_heads();
    let mut gw = Tensor::zeros(maps.weights.shape());
    for (e, (s, d)) in maps.edges().enumerate() {
        for m in 0..heads {
            gw.data_mut()[e * heads + m] = maps.gamma * u.data()[s * heads + m] * h_star.data()[d * heads + m];
        }
    }
    Ok(ImplicitGrads {
        edge_weights: gw,
        bias: u,
        iterations: adj.iterations,
        converged: adj.converged,
    })
}

/// Hook rule: rewrites `dL/dz` into the adjoint solution `y`. Backprop through
/// the recorded single step `z = phi(gamma A H* + B)` then yields `D y` for
/// `B` and `gamma (D y) H*^T` for `A`.
fn adjoint_rule(maps: Arc<ContractingMapSet>, h_star: Tensor, tol: f64, max_iter: usize) -> crate::autodiff::HookRule {
    Box::new(move |g: &Tensor| Ok(solve_adjoint(&maps, &h_star, g, tol, max_iter)?.y))
}

/// `out[i, m] = sum over edges i -> j of w[e, m] * h[j, m]`, recorded on the tape.
pub fn propagate<'t>(w: Var<'t>, h: Var<'t>, src: &Rc<[usize]>, dst: &Rc<[usize]>, num_nodes: usize) -> Result<Var<'t>> {
    w.mul(h.gather_rows(dst.clone())?)?.segment_sum(src.clone(), num_nodes)
}

/// Differentiable fixed-point layer.
///
/// `edge_weights` are the normalized `A` entries `[E x M]`, `bias` is
/// `[p x M]`. With [`BackwardMode::Implicit`] the fixed point is found off
/// the tape, one map application is re-recorded from it and a gradient hook
/// substitutes the adjoint solution. With [`BackwardMode::Unrolled`] exactly
/// `max_iter` applications from zero are recorded.
pub fn fixed_point_layer<'t>(
    tape: &'t Tape,
    g: &Graph,
    batch: Option<&GraphBatch>,
    edge_weights: Var<'t>,
    bias: Var<'t>,
    cfg: &SolverConfig,
    exec: Execution,
) -> Result<(Var<'t>, FixedPointResult)> {
    cfg.validate()?;
    let src: Rc<[usize]> = g.sources().into();
    let dst: Rc<[usize]> = g.targets().into();
    let p = g.num_nodes();
    let step = |h: Var<'t>| -> Result<Var<'t>> {
        let pre = propagate(edge_weights, h, &src, &dst, p)?.mul_scalar(cfg.gamma)?.add(bias)?;
        cfg.phi.apply(pre)
    };
    match cfg.backward_mode {
        BackwardMode::Implicit => {
            let maps = Arc::new(ContractingMapSet::from_parts(
                g,
                batch,
                edge_weights.value(),
                bias.value(),
                cfg.gamma,
                cfg.phi,
            )?);
            let result = solve(&maps, cfg, exec)?;
            let h_const = tape.constant(result.h_star.clone());
            let z = step(h_const)?;
            let z = if z.requires_grad() {
                z.hook(adjoint_rule(maps, result.h_star.clone(), cfg.tol, cfg.max_iter))?
            } else {
                z
            };
            Ok((z, result))
        }
        BackwardMode::Unrolled => {
            let heads = bias.shape()[1];
            let mut h = tape.constant(Tensor::zeros(&[p, heads]));
            for _ in 0..cfg.max_iter {
                h = step(h)?;
            }
            let hv = h.value();
            let maps = ContractingMapSet::from_parts(g, batch, edge_weights.value(), bias.value(), cfg.gamma, cfg.phi)?;
            let residuals = (0..heads).map(|m| head_residual(&maps, m, &hv.column_values(m))).collect();
            Ok((
                h,
                FixedPointResult {
                    h_star: hv,
                    iterations: vec![cfg.max_iter; heads],
                    residuals,
                    converged: true,
                },
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_map(a: f64, b: f64, gamma: f64) -> ContractingMapSet {
        let g = Graph::unit_features(1, vec![(0, 0)]).unwrap();
        ContractingMapSet::from_parts(&g, None, Tensor::new(&[1, 1], vec![a]).unwrap(), Tensor::new(&[1, 1], vec![b]).unwrap(), gamma, Activation::Identity).unwrap()
    }

    #[test]
    fn self_loop_logit_zero() {
        let g = Graph::unit_features(1, vec![(0, 0)]).unwrap();
        let maps = ContractingMapSet::build(&g, &Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 1]), 0.5, Activation::Identity).unwrap();
        assert_eq!(maps.dense_transition(0).data(), &[0.5]);
    }

    #[test]
    fn two_out_edges_divide_by_degree() {
        let g = Graph::unit_features(3, vec![(0, 1), (0, 2)]).unwrap();
        let logit = |s: f64| (s / (1.0 - s)).ln();
        let edge_out = Tensor::column(vec![logit(0.8), logit(0.4)]);
        let maps = ContractingMapSet::build(&g, &Tensor::zeros(&[3, 1]), &edge_out, 0.5, Activation::Identity).unwrap();
        let a = maps.dense_transition(0);
        assert!((a.get(0, 1) - 0.4).abs() < 1e-12);
        assert!((a.get(0, 2) - 0.2).abs() < 1e-12);
        assert!((a.row(0).iter().sum::<f64>() - 0.6).abs() < 1e-12);
        assert_eq!(a.row(1), &[0.0, 0.0, 0.0]);
        maps.validate().unwrap();
    }

    #[test]
    fn gamma_outside_unit_interval_is_config_error() {
        let g = Graph::unit_features(1, vec![(0, 0)]).unwrap();
        for gamma in [0.0, 1.0, -0.1, 1.5] {
            let r = ContractingMapSet::build(&g, &Tensor::zeros(&[1, 1]), &Tensor::zeros(&[1, 1]), gamma, Activation::Identity);
            assert!(matches!(r, Err(CgsError::Config(_))));
        }
    }

    #[test]
    fn swish_needs_gamma_margin() {
        let cfg = |gamma| SolverConfig {
            gamma,
            phi: Activation::Swish,
            ..SolverConfig::default()
        };
        cfg(0.9).validate().unwrap();
        assert!(matches!(cfg(0.95).validate(), Err(CgsError::Config(_))));
        // largest swish slope, near x = 2.4
        let slope = |x: f64| {
            let s = 1.0 / (1.0 + (-x).exp());
            s * (1.0 + x * (1.0 - s))
        };
        let peak = (0..10_000).map(|k| slope(k as f64 * 1e-3)).fold(0.0, f64::max);
        assert!(peak > 1.0 && peak <= SWISH_MAX_SLOPE);
    }

    #[test]
    fn direct_scalar_geometric_series() {
        let maps = scalar_map(1.0, 3.0, 0.5);
        let r = solve_direct(&maps, Execution::Sequential).unwrap();
        assert!((r.h_star.data()[0] - 6.0).abs() < 1e-14);
        assert_eq!(r.iterations, vec![0]);
    }

    #[test]
    fn zero_transition_returns_bias() {
        let maps = scalar_map(0.0, -2.5, 0.5);
        assert_eq!(solve_direct(&maps, Execution::Sequential).unwrap().h_star.data(), &[-2.5]);
    }

    #[test]
    fn direct_rejects_nonlinear() {
        let g = Graph::unit_features(1, vec![(0, 0)]).unwrap();
        let maps = ContractingMapSet::from_parts(&g, None, Tensor::ones(&[1, 1]), Tensor::ones(&[1, 1]), 0.5, Activation::Tanh).unwrap();
        assert!(matches!(solve_direct(&maps, Execution::Sequential), Err(CgsError::Unsupported(_))));
    }

    #[test]
    fn scalar_iteration_halves_step() {
        let maps = scalar_map(1.0, 1.0, 0.5);
        let cfg = SolverConfig::default();
        let r = solve_iterative(&maps, &cfg, None, Execution::Sequential).unwrap();
        // step n+1 differs by 0.5^n; first below 1e-6 at n = 20
        assert_eq!(r.iterations, vec![21]);
        assert!((r.h_star.data()[0] - 2.0).abs() < 1e-6);
        assert!(r.residuals[0] < cfg.tol);
    }

    #[test]
    fn zero_bias_converges_in_one_application() {
        let maps = scalar_map(1.0, 0.0, 0.5);
        let r = solve_iterative(&maps, &SolverConfig::default(), None, Execution::Sequential).unwrap();
        assert_eq!(r.iterations, vec![1]);
        assert_eq!(r.h_star.data(), &[0.0]);
    }

    #[test]
    fn scalar_implicit_gradients() {
        let maps = scalar_map(1.0, 3.0, 0.5);
        let h = solve_direct(&maps, Execution::Sequential).unwrap().h_star;
        let cfg = SolverConfig {
            tol: 1e-14,
            max_iter: 200,
            ..SolverConfig::default()
        };
        let g = implicit_backward(&maps, &h, &Tensor::ones(&[1, 1]), &cfg).unwrap();
        assert!((g.bias.data()[0] - 2.0).abs() < 1e-12);
        assert!((g.edge_weights.data()[0] - 6.0).abs() < 1e-12);

        let z = implicit_backward(&maps, &h, &Tensor::zeros(&[1, 1]), &cfg).unwrap();
        assert_eq!(z.bias.data(), &[0.0]);
        assert_eq!(z.edge_weights.data(), &[0.0]);
    }

    #[test]
    fn iteration_cap_is_a_warning_not_an_error() {
        let maps = scalar_map(1.0, 1.0, 0.9);
        let cfg = SolverConfig {
            gamma: 0.9,
            max_iter: 3,
            ..SolverConfig::default()
        };
        let r = solve_iterative(&maps, &cfg, None, Execution::Sequential).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, vec![3]);
    }

    #[test]
    fn sink_rows_stay_zero() {
        let g = Graph::unit_features(2, vec![(0, 1)]).unwrap();
        let maps = ContractingMapSet::build(&g, &Tensor::column(vec![1.0, 4.0]), &Tensor::zeros(&[1, 1]), 0.5, Activation::Identity).unwrap();
        let r = solve_direct(&maps, Execution::Sequential).unwrap();
        assert_eq!(r.h_star.data()[1], 4.0);
        assert!((r.h_star.data()[0] - (1.0 + 0.5 * 0.5 * 4.0)).abs() < 1e-14);
    }
}
