//! Adam with cosine-annealed learning rate, on-the-fly sampled training
//! graphs, and per-graph evaluation metrics.

use std::io::Write;
use std::time::Instant;

use log::info;

use crate::dataset::{ProblemInstance, ProblemKind};
use crate::error::{CgsError, Result};
use crate::exec::Execution;
use crate::model::CgsModel;
use crate::problems::{greedy_policy, ProblemSpec};
use crate::rng;
use crate::tensor::Tensor;

/// Targets with magnitude at or below this are left out of MAPE.
pub const MAPE_EPS: f64 = 1e-8;

pub const CSV_HEADER: &str = "step,lr,train_mse,eval_mape_mean,eval_mape_std,eval_policy_acc,wall_s";

#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(CgsError::dim("adam_step", &[params.len()], &[grads.len()]));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(CgsError::dim("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Cosine annealing from `lr_init` at step 0 to `lr_min` at `total`; later
/// steps stay at `lr_min`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return if step == 0 && total == 0 { lr_init } else { lr_min };
    }
    let frac = step as f64 / total as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    /// Graphs per update.
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub eval_every: usize,
    pub seed: u64,
    /// A fresh training pool is drawn every this many updates.
    pub resample_every: usize,
    pub eval_size: usize,
    /// Graphs recorded per tape; chunks are the unit of parallel work.
    pub chunk: usize,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 64,
            lr_init: 1e-3,
            lr_min: 0.0,
            eval_every: 250,
            seed: 0,
            resample_every: 32,
            eval_size: 100,
            chunk: 16,
            exec: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.resample_every == 0 || self.chunk == 0 || self.eval_size == 0 {
            return Err(CgsError::Config(
                "batch_size, eval_every, resample_every, chunk and eval_size must be positive".into(),
            ));
        }
        if !(self.lr_init > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return Err(CgsError::Config(format!(
                "need 0 <= lr_min <= lr_init and lr_init > 0, got {} / {}",
                self.lr_min, self.lr_init
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Per-graph MAPE in percent; graphs without eligible targets are absent.
    pub mape: Vec<f64>,
    pub mape_mean: f64,
    pub mape_std: f64,
    /// Graphs left out of MAPE because every target was near zero.
    pub mape_excluded: usize,
    /// Per-graph greedy-policy agreement (value-iteration problems only).
    pub policy_acc: Option<Vec<f64>>,
    pub policy_acc_mean: Option<f64>,
    pub policy_acc_std: Option<f64>,
    /// Mean over graphs of per-graph MSE.
    pub mse: f64,
    pub wall_s: f64,
}

/// Percent error averaged over nodes with `|y| > MAPE_EPS`.
pub fn mape(pred: &[f64], target: &[f64]) -> Option<f64> {
    let (sum, n) = pred
        .iter()
        .zip(target)
        .filter(|(_, y)| y.abs() > MAPE_EPS)
        .fold((0.0, 0usize), |(s, n), (p, y)| (s + ((p - y) / y).abs(), n + 1));
    (n > 0).then(|| 100.0 * sum / n as f64)
}

/// Fraction of states whose greedy successor under `pred` matches the one
/// under `target`.
pub fn policy_accuracy(inst: &ProblemInstance, pred: &[f64]) -> Result<f64> {
    let alpha = inst
        .meta
        .alpha
        .ok_or_else(|| CgsError::Validation("policy accuracy needs a discount factor".into()))?;
    let a = greedy_policy(&inst.graph, pred, alpha)?;
    let b = greedy_policy(&inst.graph, inst.targets(), alpha)?;
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    Ok(same as f64 / a.len().max(1) as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn evaluate(model: &CgsModel, instances: &[ProblemInstance], exec: Execution) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(CgsError::Validation("evaluation set is empty".into()));
    }
    let start = Instant::now();
    let preds = exec.map(instances, |inst| model.predict(&inst.graph).map(|r| r.0));
    let mut mapes = Vec::with_capacity(instances.len());
    let mut excluded = 0;
    let mut mse = 0.0;
    let mut acc = Vec::new();
    let with_policy = instances.iter().all(|i| i.meta.problem == ProblemKind::Gvi);
    for (inst, pred) in instances.iter().zip(preds) {
        let pred = pred?;
        if pred.shape() != inst.node_target.shape() {
            return Err(CgsError::dim("evaluate", pred.shape(), inst.node_target.shape()));
        }
        let y = inst.targets();
        match mape(pred.data(), y) {
            Some(v) => mapes.push(v),
            None => excluded += 1,
        }
        mse += pred.data().iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len().max(1) as f64;
        if with_policy {
            acc.push(policy_accuracy(inst, pred.data())?);
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} graph(s) excluded from MAPE: all targets below {MAPE_EPS:e}");
    }
    let (mape_mean, mape_std) = mean_std(&mapes);
    let (policy_acc, policy_acc_mean, policy_acc_std) = if with_policy {
        let (m, s) = mean_std(&acc);
        (Some(acc), Some(m), Some(s))
    } else {
        (None, None, None)
    };
    Ok(EvalReport {
        mape: mapes,
        mape_mean,
        mape_std,
        mape_excluded: excluded,
        policy_acc,
        policy_acc_mean,
        policy_acc_std,
        mse: mse / instances.len() as f64,
        wall_s: start.elapsed().as_secs_f64(),
    })
}

/// One CSV row; evaluation fields are present on evaluation steps only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub eval: Option<(f64, f64, Option<f64>)>,
    pub wall_s: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let (m, s, a) = match self.eval {
            Some((m, s, a)) => (m.to_string(), s.to_string(), opt(a)),
            None => Default::default(),
        };
        format!("{},{},{},{},{},{},{:.3}", self.step, self.lr, self.train_mse, m, s, a, self.wall_s)
    }
}

pub struct TrainOutcome {
    pub model: CgsModel,
    pub rows: Vec<MetricsRow>,
    pub final_eval: Option<EvalReport>,
}

/// Instances `index * count .. (index + 1) * count` of a named stream.
pub fn sample_instances(
    problem: &ProblemSpec,
    seed: u64,
    stream: &str,
    round: usize,
    count: usize,
    exec: Execution,
) -> Result<Vec<ProblemInstance>> {
    exec.map_range(count, |k| {
        problem.generate(rng::derive_seed(seed, stream, (round * count + k) as u64))
    })
    .into_iter()
    .collect()
}

/// Held-out set drawn from the evaluation stream, disjoint from training data.
pub fn eval_set(problem: &ProblemSpec, cfg: &TrainConfig) -> Result<Vec<ProblemInstance>> {
    sample_instances(problem, cfg.seed, rng::EVAL, 0, cfg.eval_size, cfg.exec)
}

/// Mean per-graph loss over `batch` and its summed gradients. Chunks are
/// reduced in order, so the result does not depend on the thread count.
pub fn batch_loss_and_grads(
    model: &CgsModel,
    batch: &[ProblemInstance],
    chunk: usize,
    exec: Execution,
) -> Result<(f64, Vec<Tensor>, Vec<f64>)> {
    let groups: Vec<Vec<&ProblemInstance>> = batch.chunks(chunk.max(1)).map(|c| c.iter().collect()).collect();
    let total = batch.len() as f64;
    let parts = exec.map(&groups, |g| model.loss_and_grads(g, g.len() as f64 / total));
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    let mut residuals = Vec::new();
    for part in parts {
        let (l, g, fp) = part?;
        loss += l;
        residuals.extend(fp.residuals);
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.add_assign(b)?;
                }
            }
        }
    }
    let grads = grads.ok_or_else(|| CgsError::Validation("empty training batch".into()))?;
    Ok((loss, grads, residuals))
}

fn abort(step: usize, seed: u64, round: usize, gamma: f64, residuals: &[f64], why: &str) -> CgsError {
    let worst = residuals.iter().cloned().fold(0.0, f64::max);
    CgsError::Aborted(format!(
        "step {step}: {why}; seed {seed}, training round {round}, gamma {gamma}, max solver residual {worst:.3e}"
    ))
}

/// Runs `cfg.total_steps` Adam updates, writing one CSV row per step to
/// `csv` (header first).
pub fn train(
    mut model: CgsModel,
    problem: &ProblemSpec,
    cfg: &TrainConfig,
    mut csv: impl Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    problem.validate()?;
    let (node_in, edge_in) = problem.feature_dims();
    let enc = &model.config().encoder;
    if enc.node_in != node_in || enc.edge_in != edge_in {
        return Err(CgsError::dim("train feature widths", &[enc.node_in, enc.edge_in], &[node_in, edge_in]));
    }
    let write_err = |e: std::io::Error| CgsError::io("metrics csv", e);
    writeln!(csv, "{CSV_HEADER}").map_err(write_err)?;
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome {
            model,
            rows: Vec::new(),
            final_eval: None,
        });
    }
    let eval_data = eval_set(problem, cfg)?;
    let gamma = model.config().solver.gamma;
    let mut adam = AdamState::new(model.params().values());
    let mut pool: Vec<ProblemInstance> = Vec::new();
    let mut rows = Vec::with_capacity(cfg.total_steps);
    let mut final_eval = None;
    let start = Instant::now();

    for step in 0..cfg.total_steps {
        let round = step / cfg.resample_every;
        if step % cfg.resample_every == 0 {
            pool = sample_instances(problem, cfg.seed, rng::DATA, round, cfg.batch_size, cfg.exec)?;
        }
        let lr = cosine_lr(step, cfg.total_steps, cfg.lr_init, cfg.lr_min);
        let (loss, grads, residuals) = batch_loss_and_grads(&model, &pool, cfg.chunk, cfg.exec)
            .map_err(|e| abort(step, cfg.seed, round, gamma, &[], &e.to_string()))?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(abort(step, cfg.seed, round, gamma, &residuals, "non-finite loss or gradient"));
        }
        adam_step(model.params_mut().values_mut(), &grads, &mut adam, lr)?;

        let done = step + 1;
        let eval = if done % cfg.eval_every == 0 || done == cfg.total_steps {
            let report = evaluate(&model, &eval_data, cfg.exec)?;
            info!(
                "step {done}: lr {lr:.3e} train_mse {loss:.4e} eval mape {:.2}% +- {:.2}{}",
                report.mape_mean,
                report.mape_std,
                report.policy_acc_mean.map(|a| format!(" policy acc {a:.3}")).unwrap_or_default()
            );
            let row = (report.mape_mean, report.mape_std, report.policy_acc_mean);
            final_eval = Some(report);
            Some(row)
        } else {
            None
        };
        let row = MetricsRow {
            step: done,
            lr,
            train_mse: loss,
            eval,
            wall_s: start.elapsed().as_secs_f64(),
        };
        writeln!(csv, "{}", row.to_csv()).map_err(write_err)?;
        rows.push(row);
    }
    csv.flush().map_err(write_err)?;
    Ok(TrainOutcome {
        model,
        rows,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_lr() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut st, 0.01).unwrap();
        assert!((p[0].data()[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![Tensor::full(&[2, 2], 3.0)];
        let mut st = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(&[2, 2])], &mut st, 0.1).unwrap();
        }
        assert_eq!(p[0], Tensor::full(&[2, 2], 3.0));
    }

    #[test]
    fn adam_scalar_quadratic() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(&p);
        for _ in 0..100 {
            let g = Tensor::scalar(2.0 * (p[0].data()[0] - 3.0));
            adam_step(&mut p, &[g], &mut st, 0.1).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 0.5);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 0.1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
        assert_eq!(cosine_lr(150, 100, 1e-3, 1e-5), 1e-5);
    }

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 4.0]), Some(25.0));
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]), Some(0.0));
        assert_eq!(mape(&[1.0], &[0.0]), None);
    }

    #[test]
    fn csv_row_leaves_eval_blank() {
        let r = MetricsRow {
            step: 3,
            lr: 0.5,
            train_mse: 0.25,
            eval: None,
            wall_s: 1.0,
        };
        assert_eq!(r.to_csv(), "3,0.5,0.25,,,,1.000");
    }
}
