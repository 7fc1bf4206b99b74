//! Wall-time comparison of the direct and iterative fixed-point solvers on
//! random MDP-shaped graphs.

use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;

use crate::autodiff::Activation;
use crate::error::{CgsError, Result};
use crate::exec::Execution;
use crate::problems::gvi::{random_mdp_graph, GviSpec};
use crate::rng;
use crate::solver::{solve_direct, solve_iterative, ContractingMapSet, SolveMode, SolverConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub repeats: usize,
    pub modes: Vec<SolveMode>,
    pub n_a: usize,
    pub heads: usize,
    pub gamma: f64,
    pub tol: f64,
    /// Direct solves above this size are reported as skipped.
    pub max_direct: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![100, 200, 400, 800, 1600],
            repeats: 3,
            modes: vec![SolveMode::Direct, SolveMode::Iterative],
            n_a: 5,
            heads: 1,
            gamma: 0.5,
            tol: 1e-6,
            max_direct: 6000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub p: usize,
    pub mode: SolveMode,
    pub median_s: Option<f64>,
    pub repeats: usize,
    pub status: String,
}

pub const CSV_HEADER: &str = "p,mode,median_s,repeats,status";

impl BenchRow {
    pub fn to_csv(&self) -> String {
        let t = self.median_s.map(|t| format!("{t:.6e}")).unwrap_or_default();
        format!("{},{},{},{},{}", self.p, self.mode, t, self.repeats, self.status)
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Random maps on an `n_a`-regular MDP graph with `p` states.
pub fn random_maps(p: usize, n_a: usize, heads: usize, gamma: f64, seed: u64) -> Result<ContractingMapSet> {
    let spec = GviSpec {
        n_s: p,
        n_a: n_a.min(p),
        ..GviSpec::default()
    };
    let mut r = rng::stream(seed, "bench");
    let g = random_mdp_graph(&spec, &mut r)?;
    let ne = g.num_edges();
    let logits = Tensor::new(&[ne, heads], (0..ne * heads).map(|_| r.gen_range(-2.0..2.0)).collect())?;
    let bias = Tensor::new(&[p, heads], (0..p * heads).map(|_| r.gen_range(-1.0..1.0)).collect())?;
    ContractingMapSet::build(&g, &bias, &logits, gamma, Activation::Identity)
}

fn time_once(maps: &ContractingMapSet, mode: SolveMode, cfg: &SolverConfig) -> Result<f64> {
    let start = Instant::now();
    match mode {
        SolveMode::Direct => solve_direct(maps, Execution::Sequential)?,
        SolveMode::Iterative => solve_iterative(maps, cfg, None, Execution::Sequential)?,
    };
    Ok(start.elapsed().as_secs_f64())
}

pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 || cfg.sizes.is_empty() || cfg.modes.is_empty() {
        return Err(CgsError::Config("bench needs sizes, modes and at least one repeat".into()));
    }
    let solver = SolverConfig {
        gamma: cfg.gamma,
        tol: cfg.tol,
        max_iter: 10_000,
        ..SolverConfig::default()
    };
    solver.validate()?;
    let mut rows = Vec::new();
    for &p in &cfg.sizes {
        let maps = random_maps(p, cfg.n_a, cfg.heads, cfg.gamma, rng::derive_seed(cfg.seed, "bench", p as u64))?;
        for &mode in &cfg.modes {
            if mode == SolveMode::Direct && p > cfg.max_direct {
                rows.push(BenchRow {
                    p,
                    mode,
                    median_s: None,
                    repeats: 0,
                    status: "skipped".into(),
                });
                continue;
            }
            let mut times = Vec::with_capacity(cfg.repeats);
            let mut status = "ok".to_string();
            for _ in 0..cfg.repeats {
                match time_once(&maps, mode, &solver) {
                    Ok(t) => times.push(t),
                    Err(e) => {
                        log::warn!("bench p={p} {mode}: {e}");
                        status = "skipped".into();
                        break;
                    }
                }
            }
            let median_s = (status == "ok").then(|| median(&mut times));
            log::info!("bench p={p} {mode}: {median_s:?}");
            rows.push(BenchRow {
                p,
                mode,
                median_s,
                repeats: times.len(),
                status,
            });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

fn time_of(rows: &[BenchRow], p: usize, mode: SolveMode) -> Option<f64> {
    rows.iter().find(|r| r.p == p && r.mode == mode).and_then(|r| r.median_s)
}

/// `(p_small, p_large, direct ratio, iterative ratio)` for consecutive sizes
/// where both modes were timed.
pub fn growth_ratios(rows: &[BenchRow]) -> Vec<(usize, usize, f64, f64)> {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.p).collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
        .windows(2)
        .filter_map(|w| {
            let d = time_of(rows, w[1], SolveMode::Direct)? / time_of(rows, w[0], SolveMode::Direct)?;
            let i = time_of(rows, w[1], SolveMode::Iterative)? / time_of(rows, w[0], SolveMode::Iterative)?;
            Some((w[0], w[1], d, i))
        })
        .collect()
}

/// Human-readable growth and crossover summary.
pub fn summary(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    for (a, b, d, i) in growth_ratios(rows) {
        let _ = writeln!(s, "p {a} -> {b}: direct x{d:.2}, iterative x{i:.2}");
    }
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.p).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let faster: Vec<(usize, bool)> = sizes
        .iter()
        .filter_map(|&p| {
            let d = time_of(rows, p, SolveMode::Direct)?;
            let i = time_of(rows, p, SolveMode::Iterative)?;
            Some((p, i < d))
        })
        .collect();
    match faster.windows(2).find(|w| w[0].1 != w[1].1) {
        Some(w) => {
            let winner = if w[1].1 { "iterative" } else { "direct" };
            let _ = writeln!(s, "crossover between p={} and p={}: {winner} faster above", w[0].0, w[1].0);
        }
        None => match faster.first() {
            Some(&(_, it)) => {
                let winner = if it { "iterative" } else { "direct" };
                let _ = writeln!(s, "no crossover observed; {winner} faster at every measured size");
            }
            None => s.push_str("no size timed in both modes\n"),
        },
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rows_for_one_size() {
        let cfg = BenchConfig {
            sizes: vec![100],
            repeats: 1,
            ..BenchConfig::default()
        };
        let rows = run(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.status == "ok"));
        assert_eq!(to_csv(&rows).lines().count(), 3);
    }

    #[test]
    fn oversize_direct_is_skipped() {
        let cfg = BenchConfig {
            sizes: vec![50],
            repeats: 1,
            max_direct: 10,
            ..BenchConfig::default()
        };
        let rows = run(&cfg).unwrap();
        assert_eq!(rows[0].to_csv(), "50,direct,,0,skipped");
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
