//! Acceptance criteria C1-C8. Each test prints one PASS/FAIL line to stderr
//! (bypassing the test harness capture) and then asserts.
//!
//! The criteria run one at a time behind a shared lock so that timings and
//! the benchmark are not disturbed by the other criteria.

use std::io::Write;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use cgs_core::autodiff::{Activation, Tape};
use cgs_core::bench::{self, BenchConfig};
use cgs_core::checkpoint::Checkpoint;
use cgs_core::encoder::{EncoderConfig, GraphIndex};
use cgs_core::exec::Execution;
use cgs_core::gradcheck::{self, DEFAULT_THRESHOLD};
use cgs_core::model::{CgsModel, ModelConfig};
use cgs_core::problems::diffusion::{diffusion_oracle, flux_residual, sample_connected, DiffusionSpec};
use cgs_core::problems::gvi::{policy_iteration_oracle, random_mdp_graph, value_iteration_oracle, GviSpec};
use cgs_core::problems::ProblemSpec;
use cgs_core::rng;
use cgs_core::solver::{solve_direct, solve_iterative, ContractingMapSet, SolverConfig};
use cgs_core::train::{self, eval_set, evaluate, EvalReport, TrainConfig, TrainOutcome};
use cgs_core::Tensor;
use rand::Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: &str, name: &str, ok: bool, detail: &str, elapsed: Duration, limit: Duration) -> bool {
    let within = elapsed <= limit;
    let verdict = if ok && within { "PASS" } else { "FAIL" };
    let line = format!(
        "[acceptance] {id} {name}: {verdict} ({detail}; {:.1} s of {} s)\n",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    let mut err = std::io::stderr();
    let _ = err.write_all(line.as_bytes());
    let _ = err.flush();
    ok && within
}

fn inf(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Maps built from the outputs of a randomly initialized encoder on a random
/// graph.
fn encoder_maps(seed: u64, gamma: f64, phi: Activation) -> ContractingMapSet {
    let mut r = rng::substream(seed, "c1", 0);
    let p = r.gen_range(2..=30);
    let heads = r.gen_range(1..=4);
    let inst = gradcheck::random_instance(p, seed).unwrap();
    let config = ModelConfig {
        encoder: EncoderConfig {
            num_layers: r.gen_range(1..=2),
            hidden_dim: 8,
            num_heads: heads,
            embed_dim: heads,
            activation: Activation::leaky_relu(),
            node_in: 1,
            edge_in: 1,
        },
        decoder_hidden: vec![4],
        out_dim: 1,
        solver: SolverConfig::default(),
    };
    let model = CgsModel::new(config, seed).unwrap();
    let tape = Tape::new();
    let bound = model.params().bind_frozen(&tape);
    let g = &inst.graph;
    let (node_out, edge_out) = model.encoder().encode(&tape, &bound, g, &GraphIndex::new(g)).unwrap();
    ContractingMapSet::build(g, &node_out.value(), &edge_out.value(), gamma, phi).unwrap()
}

fn c1_check(seed: u64) -> Result<(), String> {
    let gamma = [0.3, 0.5, 0.7][seed as usize % 3];
    let phi = [Activation::Identity, Activation::leaky_relu(), Activation::Tanh][(seed as usize / 3) % 3];
    let maps = encoder_maps(seed, gamma, phi);
    maps.validate().map_err(|e| e.to_string())?;
    let p = maps.num_nodes();
    let heads = maps.num_heads();
    let support: std::collections::BTreeSet<(usize, usize)> = maps.edges().collect();
    for m in 0..heads {
        let a = maps.dense_transition(m);
        for i in 0..p {
            let row = a.row(i);
            if row.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(format!("row {i} of head {m} sums above 1"));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) || (v != 0.0 && !support.contains(&(i, j))) {
                    return Err(format!("A[{i},{j}] = {v} in head {m}"));
                }
            }
        }
    }
    let mut r = rng::substream(seed, "c1", 1);
    for _ in 0..10 {
        let x = random_tensor(&[p, heads], -5.0, 5.0, &mut r);
        let y = random_tensor(&[p, heads], -5.0, 5.0, &mut r);
        let lhs = maps.apply(&x).unwrap().max_abs_diff(&maps.apply(&y).unwrap()).unwrap();
        let rhs = gamma * x.max_abs_diff(&y).unwrap();
        if lhs > rhs + 1e-12 {
            return Err(format!("contraction violated: {lhs} > {rhs}"));
        }
    }
    let cfg = SolverConfig {
        gamma,
        phi,
        max_iter: 500,
        ..SolverConfig::default()
    };
    let start = random_tensor(&[p, heads], -10.0, 10.0, &mut r);
    let a = solve_iterative(&maps, &cfg, None, Execution::Sequential).map_err(|e| e.to_string())?;
    let b = solve_iterative(&maps, &cfg, Some(&start), Execution::Sequential).map_err(|e| e.to_string())?;
    let d = a.h_star.max_abs_diff(&b.h_star).unwrap();
    if !(a.converged && b.converged) || d > 10.0 * cfg.tol {
        return Err(format!("double start differs by {d}"));
    }
    Ok(())
}

#[test]
fn c1_contraction_and_uniqueness() {
    let _g = serial();
    let t = Instant::now();
    let failures: Vec<String> = (0..1000u64).filter_map(|s| c1_check(s).err().map(|e| format!("config {s}: {e}"))).collect();
    let ok = report(
        "C1",
        "contraction and uniqueness",
        failures.is_empty(),
        &format!("1000 configurations, {} failures", failures.len()),
        t.elapsed(),
        Duration::from_secs(60),
    );
    assert!(ok, "{:?}", &failures[..failures.len().min(5)]);
}

#[test]
fn c2_solver_equivalence() {
    let _g = serial();
    let t = Instant::now();
    let cfg = SolverConfig {
        tol: 1e-6,
        max_iter: 1000,
        ..SolverConfig::default()
    };
    let mut worst = 0.0f64;
    let mut max_iters = 0;
    let mut failures = Vec::new();
    for k in 0..200u64 {
        let mut r = rng::substream(k, "c2", 0);
        let p = r.gen_range(6..=50);
        let heads = r.gen_range(1..=4);
        let maps = bench::random_maps(p, 5, heads, cfg.gamma, k).unwrap();
        let d = solve_direct(&maps, Execution::Sequential).unwrap();
        let it = solve_iterative(&maps, &cfg, None, Execution::Sequential).unwrap();
        let diff = d.h_star.max_abs_diff(&it.h_star).unwrap();
        worst = worst.max(diff);
        for m in 0..heads {
            let b = maps.bias().column_values(m).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            // ||H_k - H_{k-1}|| <= gamma^(k-1) ||B|| from a zero start
            let bound = if b < cfg.tol { 1 } else { ((cfg.tol / b).ln() / cfg.gamma.ln()).floor() as usize + 2 };
            max_iters = max_iters.max(it.iterations[m]);
            if it.iterations[m] > bound {
                failures.push(format!("map {k} head {m}: {} iterations > {bound}", it.iterations[m]));
            }
        }
        if diff > 1e-5 || !it.converged {
            failures.push(format!("map {k}: direct vs iterative {diff}"));
        }
    }
    let ok = report(
        "C2",
        "solver equivalence",
        failures.is_empty(),
        &format!("200 maps, max diff {worst:.2e}, max iterations {max_iters}"),
        t.elapsed(),
        Duration::from_secs(30),
    );
    assert!(ok, "{failures:?}");
}

#[test]
fn c3_gradient_correctness() {
    let _g = serial();
    let t = Instant::now();
    let cases = gradcheck::run(50, 0, Execution::default()).unwrap();
    let worst = cases.iter().map(|c| c.max_error()).fold(0.0, f64::max);
    let in_range = cases.iter().all(|c| c.num_nodes <= 8 && c.num_heads <= 4);
    let passed = cases.iter().filter(|c| c.passed(DEFAULT_THRESHOLD)).count();
    let ok = report(
        "C3",
        "gradient correctness",
        cases.len() == 50 && in_range && passed == 50,
        &format!("{passed} of {} cases within 1e-4, max relative error {worst:.2e}", cases.len()),
        t.elapsed(),
        Duration::from_secs(120),
    );
    assert!(ok);
}

fn gvi_problem() -> ProblemSpec {
    ProblemSpec::Gvi(GviSpec::default())
}

fn gvi_train_config() -> TrainConfig {
    TrainConfig {
        total_steps: 2000,
        batch_size: 64,
        seed: 0,
        ..TrainConfig::default()
    }
}

/// One desk-scale GVI training run: outcome, metrics CSV and wall time.
fn gvi_run() -> (TrainOutcome, String, Duration) {
    let problem = gvi_problem();
    let config = ModelConfig::for_problem(&problem, 16, SolverConfig::default());
    let model = CgsModel::new(config, 0).unwrap();
    let mut csv = Vec::new();
    let t = Instant::now();
    let out = train::train(model, &problem, &gvi_train_config(), &mut csv).unwrap();
    (out, String::from_utf8(csv).unwrap(), t.elapsed())
}

static GVI_RUN: OnceLock<(TrainOutcome, String, Duration)> = OnceLock::new();

#[test]
fn c4_gvi_scaled_reproduction() {
    let _g = serial();
    let (out, _, elapsed) = GVI_RUN.get_or_init(gvi_run);
    let r = out.final_eval.as_ref().unwrap();
    let acc = r.policy_acc_mean.unwrap();
    let ok = report(
        "C4",
        "GVI scaled reproduction",
        r.mape.len() + r.mape_excluded == 100 && r.mape_mean <= 10.0 && acc >= 0.65,
        &format!(
            "MAPE {:.2} +- {:.2}%, policy accuracy {acc:.3} +- {:.3} on 100 held-out graphs",
            r.mape_mean,
            r.mape_std,
            r.policy_acc_std.unwrap()
        ),
        *elapsed,
        Duration::from_secs(45 * 60),
    );
    assert!(ok);
}

#[test]
fn c5_gvi_oracle_cross_check() {
    let _g = serial();
    let t = Instant::now();
    let mut worst = 0.0f64;
    for k in 0..50u64 {
        let mut r = rng::substream(k, "c5", 0);
        let n_s = r.gen_range(2..=20);
        let spec = GviSpec {
            n_s,
            n_a: r.gen_range(1..=5usize.min(n_s)),
            alpha: 0.9,
            ..GviSpec::default()
        };
        let g = random_mdp_graph(&spec, &mut r).unwrap();
        let vi = value_iteration_oracle(&g, spec.alpha, spec.vi_tol).unwrap();
        let pi = policy_iteration_oracle(&g, spec.alpha).unwrap();
        worst = worst.max(inf(vi.data(), pi.data()));
    }
    let ok = report(
        "C5",
        "GVI oracle cross-check",
        worst <= 0.01,
        &format!("50 MDPs, max |V_vi - V_pi| {worst:.2e}"),
        t.elapsed(),
        Duration::from_secs(10),
    );
    assert!(ok);
}

/// Mean over graphs of the per-graph MSE of the best constant predictor
/// (the mean of all held-out targets).
fn constant_mean_mse(instances: &[cgs_core::dataset::ProblemInstance]) -> f64 {
    let all: Vec<f64> = instances.iter().flat_map(|i| i.targets().to_vec()).collect();
    let c = all.iter().sum::<f64>() / all.len() as f64;
    instances
        .iter()
        .map(|i| i.targets().iter().map(|t| (t - c).powi(2)).sum::<f64>() / i.targets().len() as f64)
        .sum::<f64>()
        / instances.len() as f64
}

#[test]
fn c6_diffusion_physics_and_learning() {
    let _g = serial();
    let t = Instant::now();
    let mut worst_flux = 0.0f64;
    let mut worst_scale = 0.0f64;
    let mut principle = true;
    for k in 0..100u64 {
        let mut r = rng::substream(k, "c6", 0);
        let spec = DiffusionSpec {
            num_pores: r.gen_range(10..=100),
            ..DiffusionSpec::default()
        };
        let net = sample_connected(&spec, k).unwrap();
        let g = net.graph().unwrap();
        let p = diffusion_oracle(&g, &net.conductance, &net.dirichlet).unwrap();
        worst_flux = worst_flux.max(flux_residual(&g, &net.conductance, &net.dirichlet, p.data()));
        let lo = net.dirichlet.values().cloned().fold(f64::INFINITY, f64::min);
        let hi = net.dirichlet.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        let slack = 1e-9 * spec.boundary_pressure;
        principle &= p.data().iter().all(|&v| v >= lo - slack && v <= hi + slack);
        for c in [1e-3, 1e3] {
            let scaled: Vec<f64> = net.conductance.iter().map(|v| v * c).collect();
            let q = diffusion_oracle(&g, &scaled, &net.dirichlet).unwrap();
            worst_scale = worst_scale.max(p.max_abs_diff(&q).unwrap() / spec.boundary_pressure);
        }
    }

    let problem = ProblemSpec::Diffusion(DiffusionSpec::default());
    let cfg = TrainConfig {
        total_steps: 1000,
        batch_size: 32,
        eval_every: 1000,
        seed: 0,
        ..TrainConfig::default()
    };
    let model = CgsModel::new(ModelConfig::for_problem(&problem, 16, SolverConfig::default()), 0).unwrap();
    let out = train::train(model, &problem, &cfg, std::io::sink()).unwrap();
    let held_out = eval_set(&problem, &cfg).unwrap();
    let mse = evaluate(&out.model, &held_out, cfg.exec).unwrap().mse;
    let baseline = constant_mean_mse(&held_out);
    let ratio = mse / baseline;

    let ok = report(
        "C6",
        "diffusion physics and learning",
        worst_flux <= 1e-8 && principle && worst_scale <= 1e-10 && ratio <= 0.2,
        &format!(
            "flux residual {worst_flux:.1e}, maximum principle {}, scaling drift {worst_scale:.1e}, \
             model MSE {mse:.3e} = {:.1}% of constant-mean {baseline:.3e}",
            if principle { "held" } else { "violated" },
            100.0 * ratio
        ),
        t.elapsed(),
        Duration::from_secs(20 * 60),
    );
    assert!(ok);
}

#[test]
fn c7_runtime_benchmark() {
    let _g = serial();
    let t = Instant::now();
    let cfg = BenchConfig::default();
    let rows = bench::run(&cfg).unwrap();
    let csv = bench::to_csv(&rows);
    let complete = rows.len() == cfg.sizes.len() * 2 && rows.iter().all(|r| r.median_s.is_some());
    let ratios = bench::growth_ratios(&rows);
    let last = ratios.last().copied();
    let scaling = last.map_or(false, |(_, _, d, i)| d > i);
    let detail = match last {
        Some((a, b, d, i)) => format!("p {a} -> {b}: direct x{d:.2} vs iterative x{i:.2}, {} CSV lines", csv.lines().count()),
        None => "no timed pair".into(),
    };
    let ok = report("C7", "runtime benchmark", complete && scaling, &detail, t.elapsed(), Duration::from_secs(600));
    assert!(ok, "{csv}");
}

fn without_wall_time(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

fn zero_wall(mut r: EvalReport) -> EvalReport {
    r.wall_s = 0.0;
    r
}

#[test]
fn c8_determinism_and_persistence() {
    let _g = serial();
    let (first, csv, _) = GVI_RUN.get_or_init(gvi_run);
    let t = Instant::now();
    let (_, repeat, _) = gvi_run();
    let identical = without_wall_time(csv) == without_wall_time(&repeat);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gvi.ckpt");
    first.model.to_checkpoint().save(&path).unwrap();
    let loaded = CgsModel::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    let held_out = eval_set(&gvi_problem(), &gvi_train_config()).unwrap();
    let a = zero_wall(evaluate(&first.model, &held_out, Execution::Sequential).unwrap());
    let b = zero_wall(evaluate(&loaded, &held_out, Execution::Sequential).unwrap());
    let same_params = first.model.params() == loaded.params();

    let ok = report(
        "C8",
        "determinism and persistence",
        identical && a == b && same_params,
        &format!(
            "metrics CSV {} over {} lines (wall_s excluded), checkpoint evaluation {}",
            if identical { "identical" } else { "differs" },
            csv.lines().count(),
            if a == b && same_params { "identical" } else { "differs" }
        ),
        t.elapsed(),
        Duration::from_secs(45 * 60),
    );
    assert!(ok);
}
