//! Evaluation harness: policy RMSE against a reference, parameter sweeps and
//! closed-loop cost benchmarks, plus their CSV/JSON outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RolloutConfig, SweepConfig, SweepParameter};
use crate::dynamics::{
    accumulated_cost, generate_dataset, simulate_closed_loop, ControlAffineSystem, GeneratorDataset, SimulationConfig,
    StageCost, StateEmbedding, Trajectory,
};
use crate::error::{check_dims, Error, Result};
use crate::generator::{fit, GeneratorModel};
use crate::hjb::{smooth_input, solve_fvp, HjbSolution};
use crate::penalty::{ControlPenalty, Penalty};

/// A state-feedback law usable from several threads.
pub type Policy<'a> = dyn Fn(&[f64]) -> Vec<f64> + Sync + 'a;

/// Root mean squared distance between two policies over `n_points` states drawn
/// uniformly from the box `[lower, upper]`.
pub fn rmse_to_reference(
    policy: &Policy<'_>,
    reference: &Policy<'_>,
    lower: &[f64],
    upper: &[f64],
    n_points: usize,
    seed: u64,
) -> Result<f64> {
    check_dims("sampling box", lower.len(), upper.len())?;
    if n_points == 0 {
        return Err(Error::arg("rmse needs at least one sample"));
    }
    if lower.iter().zip(upper).any(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::arg("sampling box must satisfy lower <= upper"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; lower.len()];
    let mut sum = 0.0;
    for _ in 0..n_points {
        for (xi, (lo, hi)) in x.iter_mut().zip(lower.iter().zip(upper)) {
            *xi = rng.random_range(*lo..=*hi);
        }
        let (a, b) = (policy(&x), reference(&x));
        check_dims("reference policy output", a.len(), b.len())?;
        sum += a.iter().zip(&b).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok((sum / n_points as f64).sqrt())
}

/// Dataset, fitted generator and value function of one configuration.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub data: GeneratorDataset,
    pub model: Arc<GeneratorModel>,
    pub solution: HjbSolution,
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Pipeline> {
    let sys = cfg.system()?;
    let data = generate_dataset(&sys, &cfg.grid_spec()?, &cfg.stage_cost(), cfg.label_mode(), cfg.seed)?;
    let model = Arc::new(fit(&data, &cfg.kernel, cfg.gamma, cfg.epsilon)?);
    let solution = solve_fvp(&model, &cfg.penalty, &cfg.hjb())?;
    Ok(Pipeline { data, model, solution })
}

/// `u*(lambda(x))`, arctan-smoothed per channel when `u_max` is given.
pub fn deployment_policy<'a>(
    sol: &'a HjbSolution,
    penalty: &'a ControlPenalty,
    u_max: Option<&'a [f64]>,
) -> Result<impl Fn(&[f64]) -> Vec<f64> + Sync + 'a> {
    check_dims("penalty inputs", sol.model().n_u(), penalty.input_dim())?;
    if let Some(m) = u_max {
        check_dims("u_max", sol.model().n_u(), m.len())?;
        if m.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::arg("u_max must be positive"));
        }
    }
    let n_x = sol.model().n_x();
    Ok(move |x: &[f64]| {
        assert_eq!(x.len(), n_x, "policy queried with a state of the wrong dimension");
        let (_, lambda) = sol.evaluate(x).expect("state dimension checked above");
        let u = penalty.u_star(&lambda);
        match u_max {
            Some(m) => smooth_input(&u, m),
            None => u,
        }
    })
}

/// Runs `f(0..n)` on up to `jobs` threads; results keep index order.
pub fn parallel_map<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|v| v.expect("every index is processed"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    /// Missing when the pipeline failed for this value.
    pub rmse: Option<f64>,
}

/// Applies one swept value to a copy of the base configuration.
pub fn sweep_config(base: &ExperimentConfig, parameter: SweepParameter, value: f64) -> ExperimentConfig {
    let mut cfg = base.clone();
    match parameter {
        SweepParameter::Sigma => cfg.kernel.sigma = value,
        SweepParameter::GridCount => {
            for c in &mut cfg.grid.counts {
                *c = value as usize;
            }
        }
    }
    cfg
}

/// Runs the full pipeline for every swept value and scores `policy_at` against
/// `reference` on the box. Failures become missing entries; rows are sorted by value.
#[allow(clippy::too_many_arguments)]
pub fn run_sweep(
    base: &ExperimentConfig,
    sweep: &SweepConfig,
    reference: &Policy<'_>,
    lower: &[f64],
    upper: &[f64],
    n_points: usize,
    seed: u64,
    jobs: usize,
) -> Vec<SweepRow> {
    let mut rows = parallel_map(sweep.values.len(), jobs, |i| {
        let value = sweep.values[i];
        let cfg = sweep_config(base, sweep.parameter, value);
        let rmse = cfg.validate().and_then(|_| run_pipeline(&cfg)).and_then(|p| {
            let policy = deployment_policy(&p.solution, &cfg.penalty, None)?;
            rmse_to_reference(&policy, reference, lower, upper, n_points, seed)
        });
        match rmse {
            Ok(r) => SweepRow { value, rmse: Some(r) },
            Err(e) => {
                log::warn!("sweep value {value}: {e}");
                SweepRow { value, rmse: None }
            }
        }
    });
    rows.sort_by(|a, b| a.value.total_cmp(&b.value));
    rows
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostBenchSpec {
    /// Initial-state box in raw coordinates.
    pub init_lower: Vec<f64>,
    pub init_upper: Vec<f64>,
    pub embedding: StateEmbedding,
    pub n_initial: usize,
    pub runs: usize,
    pub duration: f64,
    pub control_period: f64,
    pub substep: f64,
    pub noise: bool,
    pub seed: u64,
    pub jobs: usize,
}

impl CostBenchSpec {
    pub fn from_config(cfg: &ExperimentConfig, r: &RolloutConfig) -> Self {
        Self {
            init_lower: r.init_lower.clone(),
            init_upper: r.init_upper.clone(),
            embedding: StateEmbedding {
                angle_axis: cfg.grid.angle_axis,
            },
            n_initial: r.n_initial,
            runs: r.runs,
            duration: r.duration,
            control_period: r.control_period,
            substep: r.substep,
            noise: r.noise,
            seed: cfg.seed,
            jobs: cfg.eval.jobs,
        }
    }

    fn simulation(&self, noise_seed: u64) -> SimulationConfig {
        let mut sim = SimulationConfig::new(self.substep, (self.duration / self.substep).round() as usize)
            .with_hold(((self.control_period / self.substep).round() as usize).max(1))
            .with_circle_projection(self.embedding.angle_axis);
        if self.noise {
            sim = sim.with_noise(noise_seed);
        }
        sim
    }

    /// Initial states of one run, in raw coordinates.
    pub fn initial_states(&self, run: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(run as u64);
        (0..self.n_initial)
            .map(|_| {
                self.init_lower
                    .iter()
                    .zip(&self.init_upper)
                    .map(|(lo, hi)| rng.random_range(*lo..=*hi))
                    .collect()
            })
            .collect()
    }

    fn validate(&self, sys: &ControlAffineSystem) -> Result<()> {
        check_dims("initial box", self.init_lower.len(), self.init_upper.len())?;
        check_dims(
            "embedded initial state",
            sys.n_x(),
            self.embedding.state_dim(self.init_lower.len()),
        )?;
        if !(self.substep > 0.0 && self.control_period >= self.substep && self.duration > 0.0) {
            return Err(Error::arg("need duration > 0 and control_period >= substep > 0"));
        }
        if self.init_lower.iter().zip(&self.init_upper).any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::arg("initial box must satisfy lower <= upper"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutRecord {
    pub run: usize,
    pub init_index: usize,
    pub initial_state: Vec<f64>,
    /// Raw coordinates; `None` for diverged rollouts.
    pub final_state: Option<Vec<f64>>,
    pub cost: Option<f64>,
    pub max_abs_input: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub mean: f64,
    pub std: f64,
    pub n_excluded: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostBenchReport {
    pub records: Vec<RolloutRecord>,
    /// Mean and standard deviation over the included rollouts.
    pub mean: f64,
    pub std: f64,
    pub n_excluded: usize,
    /// `(mean, std)` of each run.
    pub per_run: Vec<(f64, f64)>,
    pub max_abs_input: f64,
}

impl CostBenchReport {
    pub fn summary(&self, config_hash: &str) -> CostSummary {
        CostSummary {
            mean: self.mean,
            std: self.std,
            n_excluded: self.n_excluded,
            config_hash: config_hash.to_owned(),
        }
    }
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for a single value).
/// Empty input gives `NaN` for both.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Closed-loop rollouts from `runs x n_initial` initial states. Diverged rollouts
/// are counted in `n_excluded` and left out of the statistics.
pub fn run_cost_bench(
    sys: &ControlAffineSystem,
    policy: &Policy<'_>,
    stage_cost: &StageCost,
    penalty: &dyn Penalty,
    spec: &CostBenchSpec,
) -> Result<CostBenchReport> {
    spec.validate(sys)?;
    let starts: Vec<(usize, usize, Vec<f64>)> = (0..spec.runs)
        .flat_map(|run| {
            spec.initial_states(run)
                .into_iter()
                .enumerate()
                .map(move |(i, x)| (run, i, x))
        })
        .collect();
    let records = parallel_map(starts.len(), spec.jobs, |k| {
        let (run, init_index, raw) = &starts[k];
        let sim = spec.simulation(spec.seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let x0 = spec.embedding.embed(raw);
        let outcome: Result<Trajectory> = simulate_closed_loop(sys, policy, &x0, &sim);
        let (final_state, cost, max_abs_input) = match outcome {
            Ok(traj) => {
                let max_u = traj.inputs.iter().flatten().fold(0.0_f64, |m, u| m.max(u.abs()));
                let c = accumulated_cost(&traj, stage_cost, penalty, spec.substep);
                (Some(spec.embedding.unembed(traj.final_state())), Some(c), max_u)
            }
            Err(e) => {
                log::warn!("rollout run {run} init {init_index} excluded: {e}");
                (None, None, 0.0)
            }
        };
        RolloutRecord {
            run: *run,
            init_index: *init_index,
            initial_state: raw.clone(),
            final_state,
            cost: cost.filter(|c| c.is_finite()),
            max_abs_input,
        }
    });

    let included: Vec<f64> = records.iter().filter_map(|r| r.cost).collect();
    let (mean, std) = mean_std(&included);
    let per_run = (0..spec.runs)
        .map(|run| {
            let c: Vec<f64> = records.iter().filter(|r| r.run == run).filter_map(|r| r.cost).collect();
            mean_std(&c)
        })
        .collect();
    let max_abs_input = records.iter().fold(0.0_f64, |m, r| m.max(r.max_abs_input));
    Ok(CostBenchReport {
        n_excluded: records.len() - included.len(),
        records,
        mean,
        std,
        per_run,
        max_abs_input,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.16e}")).unwrap_or_default()
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for line in lines {
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// `value,rmse`, with an empty field for failed points.
pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let body = rows.iter().map(|r| format!("{:.16e},{}", r.value, fmt_opt(r.rmse)));
    write_lines(path, std::iter::once("value,rmse".to_owned()).chain(body))
}

/// `run,init_index,cost`, with an empty cost for excluded rollouts.
pub fn write_cost_csv(path: &Path, records: &[RolloutRecord]) -> Result<()> {
    let body = records
        .iter()
        .map(|r| format!("{},{},{}", r.run, r.init_index, fmt_opt(r.cost)));
    write_lines(path, std::iter::once("run,init_index,cost".to_owned()).chain(body))
}

/// `t,x_1..x_n,u_1..u_m`; the input column of the final state repeats the last input.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let n_x = traj.states.first().map_or(0, Vec::len);
    let n_u = traj.inputs.first().map_or(0, Vec::len);
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((1..=n_x).map(|i| format!("x_{i}")));
    header.extend((1..=n_u).map(|j| format!("u_{j}")));
    let body = traj.states.iter().enumerate().map(|(k, x)| {
        let u = traj.inputs.get(k).or(traj.inputs.last());
        std::iter::once(k as f64 * traj.dt)
            .chain(x.iter().copied())
            .chain(u.into_iter().flatten().copied())
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>()
            .join(",")
    });
    write_lines(path, std::iter::once(header.join(",")).chain(body))
}

pub fn write_summary_json(path: &Path, summary: &CostSummary) -> Result<()> {
    // NaN is not valid JSON; an all-excluded bench reports null statistics
    let value = serde_json::json!({
        "mean": summary.mean.is_finite().then_some(summary.mean),
        "std": summary.std.is_finite().then_some(summary.std),
        "n_excluded": summary.n_excluded,
        "config_hash": summary.config_hash,
    });
    let text = serde_json::to_string_pretty(&value).expect("JSON value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
