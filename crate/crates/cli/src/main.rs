use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use khjb::archive::{load_model, load_solution, save_model, save_solution};
use khjb::config::ExperimentConfig;
use khjb::dynamics::{generate_dataset, read_dataset, simulate_closed_loop, write_dataset, SimulationConfig};
use khjb::evaluation::{
    deployment_policy, rmse_to_reference, run_cost_bench, run_sweep, write_cost_csv, write_summary_json,
    write_sweep_csv, write_trajectory_csv, CostBenchSpec,
};
use khjb::generator::fit;
use khjb::hjb::{solve_fvp, write_value_policy_csv, HjbSolution};
use khjb::{Error, Result};

/// Learn the generator of a controlled diffusion and solve the kernel HJB problem.
#[derive(Parser, Debug)]
#[command(name = "khjb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample the state grid and write drift/diffusion labels to `dataset.csv`.
    GenData(Common),
    /// Fit the generator operators and write `model.bin`.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Dataset to fit (default: `<out>/dataset.csv`).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Solve the final-value problem and write `solution.bin` plus `value_policy.csv`.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Model archive (default: `<out>/model.bin`).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Evaluate a solved policy, or run a sweep over the whole pipeline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Model archive (default: `<out>/model.bin`).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Solution archive (default: `<out>/solution.bin`).
        #[arg(long)]
        solution: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment description (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `eval.jobs` from the config file.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides `output_dir` from the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Rmse,
    Rollout,
    CostBench,
    Sweep,
}

impl Common {
    /// File values, then flag overrides.
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(jobs) = self.jobs {
            cfg.eval.jobs = jobs;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.output_dir).map_err(|e| io_err(&cfg.output_dir, e))?;
        Ok(cfg)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Argument(_) => 2,
        e if e.is_numerical() => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(common) => gen_data(&common.load()?),
        Command::Fit { common, dataset } => {
            let cfg = common.load()?;
            let path = dataset.unwrap_or_else(|| cfg.output_dir.join("dataset.csv"));
            fit_model(&cfg, &path)
        }
        Command::Solve { common, model } => {
            let cfg = common.load()?;
            let path = model.unwrap_or_else(|| cfg.output_dir.join("model.bin"));
            solve(&cfg, &path)
        }
        Command::Eval {
            common,
            mode,
            model,
            solution,
        } => {
            let cfg = common.load()?;
            if mode == Mode::Sweep {
                return sweep(&cfg);
            }
            let model = model.unwrap_or_else(|| cfg.output_dir.join("model.bin"));
            let solution = solution.unwrap_or_else(|| cfg.output_dir.join("solution.bin"));
            let sol = load_pair(&cfg, &model, &solution)?;
            match mode {
                Mode::Rmse => rmse(&cfg, &sol),
                Mode::Rollout => rollout(&cfg, &sol),
                Mode::CostBench => cost_bench(&cfg, &sol),
                Mode::Sweep => unreachable!("handled above"),
            }
        }
    }
}

fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let data = generate_dataset(&cfg.system()?, &cfg.grid_spec()?, &cfg.stage_cost(), cfg.label_mode(), cfg.seed)?;
    let path = cfg.output_dir.join("dataset.csv");
    write_dataset(&path, &data, &cfg.config_hash())?;
    println!("N = {}", data.len());
    println!("wrote {}", path.display());
    Ok(())
}

fn warn_on_hash(what: &str, stored: &str, cfg: &ExperimentConfig) {
    if stored != cfg.config_hash() {
        log::warn!("{what} was produced under a different configuration (hash {stored})");
    }
}

fn fit_model(cfg: &ExperimentConfig, dataset: &Path) -> Result<()> {
    let (data, tag) = read_dataset(dataset)?;
    warn_on_hash("dataset", &tag, cfg);
    let model = fit(&data, &cfg.kernel, cfg.gamma, cfg.epsilon)?;
    println!("N = {}, n_x = {}, n_u = {}", model.len(), model.n_x(), model.n_u());
    println!("min eigenvalue estimate of K + N*gamma*I: {:.6e}", model.min_eigenvalue_estimate(50));
    if let Some(r) = model.report() {
        println!("{r:?}");
    }
    let path = cfg.output_dir.join("model.bin");
    let digest = save_model(&path, &model, &cfg.config_hash())?;
    println!("wrote {} (sha256 {digest})", path.display());
    Ok(())
}

fn solve(cfg: &ExperimentConfig, model_path: &Path) -> Result<()> {
    let archive = load_model(model_path)?;
    warn_on_hash("model", &archive.config_hash, cfg);
    let model = Arc::new(archive.model);
    let sol = solve_fvp(&model, &cfg.penalty, &cfg.hjb())?;
    let path = cfg.output_dir.join("solution.bin");
    save_solution(&path, &sol, &cfg.penalty, &archive.sha256, &cfg.config_hash())?;
    let grid = cfg.output_dir.join("value_policy.csv");
    write_value_policy_csv(&grid, &sol, &cfg.penalty, &model.points, cfg.eval.u_max.as_deref(), &cfg.config_hash())?;
    println!("wrote {} and {}", path.display(), grid.display());
    Ok(())
}

fn load_pair(cfg: &ExperimentConfig, model: &Path, solution: &Path) -> Result<HjbSolution> {
    let m = load_model(model)?;
    warn_on_hash("model", &m.config_hash, cfg);
    let s = load_solution(solution, Arc::new(m.model), &m.sha256)?;
    warn_on_hash("solution", &s.config_hash, cfg);
    if s.penalty != cfg.penalty {
        log::warn!("solution was computed with a different penalty than the configured one");
    }
    Ok(s.solution)
}

fn rmse(cfg: &ExperimentConfig, sol: &HjbSolution) -> Result<()> {
    let rc = cfg
        .eval
        .rmse
        .as_ref()
        .ok_or_else(|| Error::Config("rmse mode needs an [eval.rmse] section".into()))?;
    let lqr = cfg
        .lqr_reference()?
        .ok_or_else(|| Error::Config("rmse mode needs a linear system with a quadratic cost".into()))?;
    let grid = cfg.grid_spec()?;
    let lower = rc.lower.clone().unwrap_or_else(|| grid.lower());
    let upper = rc.upper.clone().unwrap_or_else(|| grid.upper());
    let policy = deployment_policy(sol, &cfg.penalty, cfg.eval.u_max.as_deref())?;
    let reference = |x: &[f64]| lqr.feedback(x);
    let value = rmse_to_reference(&policy, &reference, &lower, &upper, rc.n_points, cfg.seed)?;
    let path = cfg.output_dir.join("rmse.json");
    let json = serde_json::json!({
        "rmse": value,
        "n_points": rc.n_points,
        "config_hash": cfg.config_hash(),
    });
    std::fs::write(&path, serde_json::to_string_pretty(&json).expect("JSON value serializes") + "\n")
        .map_err(|e| io_err(&path, e))?;
    println!("rmse = {value:.6e}");
    Ok(())
}

fn rollout_section(cfg: &ExperimentConfig) -> Result<&khjb::config::RolloutConfig> {
    cfg.eval
        .rollout
        .as_ref()
        .ok_or_else(|| Error::Config("this mode needs an [eval.rollout] section".into()))
}

fn rollout(cfg: &ExperimentConfig, sol: &HjbSolution) -> Result<()> {
    let r = rollout_section(cfg)?;
    let spec = CostBenchSpec::from_config(cfg, r);
    let x0 = match &r.x0 {
        Some(x0) => x0.clone(),
        None => spec.initial_states(0).swap_remove(0),
    };
    let policy = deployment_policy(sol, &cfg.penalty, cfg.eval.u_max.as_deref())?;
    let mut sim = SimulationConfig::new(r.substep, (r.duration / r.substep).round() as usize)
        .with_hold(((r.control_period / r.substep).round() as usize).max(1))
        .with_circle_projection(cfg.grid.angle_axis);
    if r.noise {
        sim = sim.with_noise(cfg.seed);
    }
    let traj = simulate_closed_loop(&cfg.system()?, &policy, &spec.embedding.embed(&x0), &sim)?;
    let cost = khjb::dynamics::accumulated_cost(&traj, &cfg.stage_cost(), &cfg.penalty, r.substep);
    let path = cfg.output_dir.join("trajectory.csv");
    write_trajectory_csv(&path, &traj)?;
    println!("initial state {x0:?}");
    println!("final state {:?}", spec.embedding.unembed(traj.final_state()));
    println!("accumulated cost {cost:.6e}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cost_bench(cfg: &ExperimentConfig, sol: &HjbSolution) -> Result<()> {
    let spec = CostBenchSpec::from_config(cfg, rollout_section(cfg)?);
    let sys = cfg.system()?;
    let stage = cfg.stage_cost();
    let learned = deployment_policy(sol, &cfg.penalty, cfg.eval.u_max.as_deref())?;
    let n_u = sol.model().n_u();
    let zero = move |_: &[f64]| vec![0.0; n_u];
    let hash = cfg.config_hash();
    for (name, policy) in [("", &learned as &khjb::evaluation::Policy<'_>), ("baseline_", &zero)] {
        let rep = run_cost_bench(&sys, policy, &stage, &cfg.penalty, &spec)?;
        let csv = cfg.output_dir.join(format!("{name}costs.csv"));
        let json = cfg.output_dir.join(format!("{name}summary.json"));
        write_cost_csv(&csv, &rep.records)?;
        write_summary_json(&json, &rep.summary(&hash))?;
        let label = if name.is_empty() { "learned" } else { "zero-input" };
        println!(
            "{label:>10}: mean {:.6e}  std {:.6e}  excluded {}  max|u| {:.4}",
            rep.mean, rep.std, rep.n_excluded, rep.max_abs_input
        );
    }
    println!("wrote costs.csv, summary.json, baseline_costs.csv, baseline_summary.json");
    Ok(())
}

fn sweep(cfg: &ExperimentConfig) -> Result<()> {
    let sw = cfg
        .eval
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep mode needs an [eval.sweep] section".into()))?;
    let rc = cfg.eval.rmse.clone().unwrap_or(khjb::config::RmseConfig {
        lower: None,
        upper: None,
        n_points: 1000,
    });
    let lqr = cfg
        .lqr_reference()?
        .ok_or_else(|| Error::Config("sweeps need a linear system with a quadratic cost".into()))?;
    let grid = cfg.grid_spec()?;
    let lower = rc.lower.unwrap_or_else(|| grid.lower());
    let upper = rc.upper.unwrap_or_else(|| grid.upper());
    let reference = |x: &[f64]| lqr.feedback(x);
    let rows = run_sweep(cfg, sw, &reference, &lower, &upper, rc.n_points, cfg.seed, cfg.eval.jobs);
    let path = cfg.output_dir.join("sweep.csv");
    write_sweep_csv(&path, &rows)?;
    for r in &rows {
        match r.rmse {
            Some(v) => println!("{:>12.6e}  {v:.6e}", r.value),
            None => println!("{:>12.6e}  failed", r.value),
        }
    }
    println!("wrote {}", path.display());
    Ok(())
}
