//! `cgs`: generate data, train, evaluate, check gradients and benchmark.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use cgs_core::autodiff::Activation;
use cgs_core::bench::{self, BenchConfig};
use cgs_core::checkpoint::Checkpoint;
use cgs_core::dataset::{read_jsonl, write_jsonl, ProblemKind};
use cgs_core::exec::Execution;
use cgs_core::gradcheck;
use cgs_core::model::{CgsModel, ModelConfig};
use cgs_core::problems::{DiffusionSpec, GviSpec, ProblemSpec};
use cgs_core::solver::{BackwardMode, SolveMode, SolverConfig};
use cgs_core::train::{self, TrainConfig};
use cgs_core::CgsError;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cgs", version, about = "Convergent graph solvers")]
struct Cli {
    /// Worker threads for data-parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write generated problem instances as JSONL.
    Gen(GenArgs),
    /// Train a model; writes a metrics CSV and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a JSONL dataset.
    Eval(EvalArgs),
    /// Compare implicit, unrolled and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Time direct and iterative fixed-point solves.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct ProblemArgs {
    /// Problem family: gvi or diffusion.
    #[arg(long, default_value = "gvi")]
    problem: ProblemKind,
    /// States per MDP (gvi).
    #[arg(long, default_value_t = 20)]
    ns: usize,
    /// Actions per state (gvi).
    #[arg(long, default_value_t = 5)]
    na: usize,
    /// Discount factor (gvi).
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    /// Pores per network (diffusion).
    #[arg(long, default_value_t = 50)]
    pores: usize,
    /// Nearest neighbours per pore (diffusion).
    #[arg(long, default_value_t = 4)]
    knn: usize,
}

impl ProblemArgs {
    fn spec(&self) -> ProblemSpec {
        match self.problem {
            ProblemKind::Gvi => ProblemSpec::Gvi(GviSpec {
                n_s: self.ns,
                n_a: self.na,
                alpha: self.alpha,
                ..GviSpec::default()
            }),
            ProblemKind::Diffusion => ProblemSpec::Diffusion(DiffusionSpec {
                num_pores: self.pores,
                knn: self.knn,
                ..DiffusionSpec::default()
            }),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Number of heads (independent contracting maps).
    #[arg(long, default_value_t = 16)]
    heads: usize,
    /// Encoder layers [default: 3 for gvi, 1 for diffusion].
    #[arg(long)]
    layers: Option<usize>,
    /// Encoder hidden width [default: 128 for gvi, 64 for diffusion].
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Fixed-point activation: identity, tanh, swish or leaky_relu[:slope].
    #[arg(long, default_value = "identity")]
    phi: String,
    /// direct or iterative.
    #[arg(long, default_value = "iterative")]
    solver_mode: SolveMode,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Graphs per update [default: 64 for gvi, 32 for diffusion].
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    lr_min: f64,
    #[arg(long, default_value_t = 32)]
    resample_every: usize,
    #[arg(long, default_value_t = 250)]
    eval_every: usize,
    #[arg(long, default_value_t = 100)]
    eval_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV path.
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
    /// Checkpoint output path.
    #[arg(long, default_value = "model.ckpt")]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL dataset to evaluate on.
    #[arg(long)]
    dataset: PathBuf,
    /// Report CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of random instances.
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = gradcheck::DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated node counts.
    #[arg(long, value_delimiter = ',', default_value = "100,200,400,800,1600")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Comma-separated solver modes.
    #[arg(long, value_delimiter = ',', default_value = "direct,iterative")]
    modes: Vec<SolveMode>,
    /// Actions per state of the random MDP graphs.
    #[arg(long, default_value_t = 5)]
    na: usize,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Raw CSV path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn echo(config: serde_json::Value) {
    println!("config {config}");
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn cmd_gen(a: &GenArgs, exec: Execution) -> anyhow::Result<()> {
    let spec = a.problem.spec();
    spec.validate()?;
    echo(json!({
        "command": "gen", "problem": a.problem.problem.to_string(), "spec": spec_json(&spec),
        "count": a.count, "seed": a.seed, "out": a.out,
    }));
    let instances = train::sample_instances(&spec, a.seed, cgs_core::rng::DATA, 0, a.count, exec)?;
    write_jsonl(&a.out, &instances)?;
    println!("wrote {} instances to {}", instances.len(), a.out.display());
    Ok(())
}

fn spec_json(spec: &ProblemSpec) -> serde_json::Value {
    match spec {
        ProblemSpec::Gvi(s) => serde_json::to_value(s).expect("plain struct"),
        ProblemSpec::Diffusion(s) => serde_json::to_value(s).expect("plain struct"),
    }
}

fn cmd_train(a: &TrainArgs, exec: Execution) -> anyhow::Result<()> {
    let spec = a.problem.spec();
    let solver = SolverConfig {
        gamma: a.gamma,
        tol: a.tol,
        max_iter: a.max_iter,
        mode: a.solver_mode,
        backward_mode: BackwardMode::Implicit,
        phi: Activation::parse(&a.phi)?,
    };
    let mut config = ModelConfig::for_problem(&spec, a.heads, solver);
    config.encoder.embed_dim = a.heads;
    if let Some(l) = a.layers {
        config.encoder.num_layers = l;
    }
    if let Some(h) = a.hidden {
        config.encoder.hidden_dim = h;
    }
    let default_batch = match a.problem.problem {
        ProblemKind::Gvi => 64,
        ProblemKind::Diffusion => 32,
    };
    let tcfg = TrainConfig {
        total_steps: a.steps,
        batch_size: a.batch_size.unwrap_or(default_batch),
        lr_init: a.lr,
        lr_min: a.lr_min,
        eval_every: a.eval_every,
        seed: a.seed,
        resample_every: a.resample_every,
        eval_size: a.eval_size,
        exec,
        ..TrainConfig::default()
    };
    config.validate()?;
    spec.validate()?;
    tcfg.validate()?;
    echo(json!({
        "command": "train", "problem": a.problem.problem.to_string(), "spec": spec_json(&spec),
        "encoder": config.encoder, "decoder_hidden": config.decoder_hidden, "solver": config.solver,
        "steps": tcfg.total_steps, "batch_size": tcfg.batch_size, "lr": tcfg.lr_init, "lr_min": tcfg.lr_min,
        "resample_every": tcfg.resample_every, "eval_every": tcfg.eval_every, "eval_size": tcfg.eval_size,
        "chunk": tcfg.chunk, "seed": tcfg.seed, "out": a.out, "checkpoint": a.checkpoint,
    }));
    let model = CgsModel::new(config, a.seed)?;
    let csv = create(&a.out)?;
    let outcome = match train::train(model, &spec, &tcfg, csv) {
        Ok(o) => o,
        Err(e @ CgsError::Aborted(_)) => {
            let diag = a.out.with_extension("abort.txt");
            std::fs::write(&diag, format!("{e}\n")).with_context(|| format!("cannot write {}", diag.display()))?;
            return Err(anyhow!(e).context(format!("diagnostic written to {}", diag.display())));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.model.to_checkpoint().save(&a.checkpoint)?;
    if let Some(r) = &outcome.final_eval {
        print_report(r);
    }
    println!("metrics: {}\ncheckpoint: {}", a.out.display(), a.checkpoint.display());
    Ok(())
}

fn print_report(r: &train::EvalReport) {
    println!(
        "graphs {}  MAPE {:.3}% +- {:.3}  MSE {:.4e}",
        r.mape.len() + r.mape_excluded,
        r.mape_mean,
        r.mape_std,
        r.mse
    );
    if let (Some(m), Some(s)) = (r.policy_acc_mean, r.policy_acc_std) {
        println!("policy accuracy {m:.4} +- {s:.4}");
    }
    if r.mape_excluded > 0 {
        println!("{} graph(s) had no target above the MAPE threshold", r.mape_excluded);
    }
}

fn cmd_eval(a: &EvalArgs, exec: Execution) -> anyhow::Result<()> {
    echo(json!({"command": "eval", "checkpoint": a.checkpoint, "dataset": a.dataset, "out": a.out}));
    let model = CgsModel::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let data = read_jsonl(&a.dataset)?;
    let enc = &model.config().encoder;
    if let Some(bad) = data.iter().position(|i| {
        i.graph.node_feat_dim() != enc.node_in || (i.graph.num_edges() > 0 && i.graph.edge_feat_dim() != enc.edge_in)
    }) {
        return Err(CgsError::Config(format!(
            "instance {bad} has feature widths incompatible with the checkpoint (node {}, edge {})",
            enc.node_in, enc.edge_in
        ))
        .into());
    }
    let r = train::evaluate(&model, &data, exec)?;
    print_report(&r);
    if let Some(out) = &a.out {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut f = create(out)?;
        writeln!(f, "graphs,mape_mean,mape_std,mape_excluded,policy_acc_mean,policy_acc_std,mse")?;
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            data.len(),
            r.mape_mean,
            r.mape_std,
            r.mape_excluded,
            opt(r.policy_acc_mean),
            opt(r.policy_acc_std),
            r.mse
        )?;
        f.flush()?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, exec: Execution) -> anyhow::Result<()> {
    echo(json!({"command": "gradcheck", "count": a.count, "seed": a.seed, "threshold": a.threshold}));
    let cases = gradcheck::run(a.count, a.seed, exec)?;
    println!("case  p  M  gamma   phi            impl/unroll  impl/fd      unroll/fd    result");
    let mut failed = 0;
    for (k, c) in cases.iter().enumerate() {
        let ok = c.passed(a.threshold);
        failed += usize::from(!ok);
        println!(
            "{k:>4} {:>2} {:>2}  {:.3}  {:<14} {:.3e}    {:.3e}    {:.3e}    {}",
            c.num_nodes,
            c.num_heads,
            c.gamma,
            c.phi.name(),
            c.implicit_vs_unrolled,
            c.implicit_vs_fd,
            c.unrolled_vs_fd,
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!("{} of {} cases within {:e}", cases.len() - failed, cases.len(), a.threshold);
    if failed > 0 {
        return Err(anyhow!("{failed} gradient check(s) exceeded the threshold"));
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        sizes: a.sizes.clone(),
        repeats: a.repeats,
        modes: a.modes.clone(),
        n_a: a.na,
        gamma: a.gamma,
        tol: a.tol,
        seed: a.seed,
        ..BenchConfig::default()
    };
    echo(json!({
        "command": "bench", "sizes": cfg.sizes, "repeats": cfg.repeats,
        "modes": cfg.modes.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
        "na": cfg.n_a, "heads": cfg.heads, "gamma": cfg.gamma, "tol": cfg.tol,
        "max_direct": cfg.max_direct, "seed": cfg.seed, "out": a.out,
    }));
    let rows = bench::run(&cfg)?;
    let csv = bench::to_csv(&rows);
    match &a.out {
        Some(p) => std::fs::write(p, &csv).with_context(|| format!("cannot write {}", p.display()))?,
        None => print!("{csv}"),
    }
    print!("{}", bench::summary(&rows));
    Ok(())
}

fn set_threads(n: usize) -> Execution {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("thread pool already initialised: {e}");
            }
        }
        Execution::Parallel
    }
    #[cfg(not(feature = "parallel"))]
    {
        if n > 1 {
            log::warn!("built without the parallel feature; --threads {n} ignored");
        }
        Execution::Sequential
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err
        .chain()
        .filter_map(|e| e.downcast_ref::<CgsError>())
        .any(CgsError::is_config);
    if config {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = set_threads(cli.threads);
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a, exec),
        Command::Train(a) => cmd_train(a, exec),
        Command::Eval(a) => cmd_eval(a, exec),
        Command::Gradcheck(a) => cmd_gradcheck(a, exec),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
