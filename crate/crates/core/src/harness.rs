//! Experiment orchestration: offline expert training, multi-seed sweeps,
//! confidence intervals and CSV artifacts.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::{ExperimentConfig, Mobility, Policy};
use crate::geometry::Role;
use crate::macsim::{MetricsLog, RunSpec, Simulation};
use crate::transfer::TransferBundle;
use crate::{Error, Result};

/// Outcome of offline expert training.
#[derive(Debug, Clone)]
pub struct ExpertTraining {
    pub bundle: TransferBundle,
    /// Mean expert reward per TTI.
    pub rewards: Vec<f64>,
    pub converged: bool,
}

/// Least-squares slope of `ys` against their index.
pub fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Running mean `c(t) = (1/t) sum_{i<=t} x_i`.
pub fn cumulative_mean(xs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    xs.iter()
        .enumerate()
        .map(|(i, x)| {
            acc += x;
            acc / (i + 1) as f64
        })
        .collect()
}

/// First TTI (1-based) from which the cumulative mean reward stays at or
/// above `fraction` of its final value.
pub fn tti_to_fraction(rewards: &[f64], fraction: f64) -> usize {
    let c = cumulative_mean(rewards);
    let Some(&last) = c.last() else { return 0 };
    let target = fraction * last;
    let mut t = c.len();
    while t > 0 && c[t - 1] >= target {
        t -= 1;
    }
    t + 1
}

/// Train the expert group with plain Q-learning until the cumulative mean
/// reward flattens or the budget runs out.
///
/// The bundle carries the table of the lowest-id expert gNB.
pub fn train_expert(cfg: &ExperimentConfig) -> Result<ExpertTraining> {
    let x = cfg.expert;
    let spec = RunSpec {
        policy: Policy::Qlearning,
        role: Role::Expert,
        mobility: Mobility::Stationary,
        load_mbps: 0.0,
        seed: x.seed,
    };
    let mut sim = Simulation::new(cfg, spec, None)?;
    let mut rewards = Vec::with_capacity(x.tti_budget);
    let mut cumulative = Vec::with_capacity(x.tti_budget);
    let mut converged = false;
    for _ in 0..x.tti_budget {
        sim.run_tti()?;
        let r = sim.log().records.last().expect("one record per TTI");
        rewards.push(r.gnbs.iter().map(|g| g.reward).sum::<f64>() / r.gnbs.len() as f64);
        let n = rewards.len() as f64;
        let prev = cumulative.last().copied().unwrap_or(0.0);
        cumulative.push(prev + (rewards[rewards.len() - 1] - prev) / n);
        if cumulative.len() >= x.window
            && slope(&cumulative[cumulative.len() - x.window..]).abs() < x.slope_tol
        {
            converged = true;
            break;
        }
    }
    if converged {
        info!("expert converged after {} TTIs", rewards.len());
    } else {
        warn!("expert did not converge within {} TTIs", x.tti_budget);
    }
    let agent = &sim.agents()[0];
    let bundle = TransferBundle::new(agent.table().clone(), *agent.actions(), converged)?;
    Ok(ExpertTraining {
        bundle,
        rewards,
        converged,
    })
}

/// Summary of one simulated run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub policy: Policy,
    pub mobility: Mobility,
    pub load_mbps: f64,
    pub seed: u64,
    pub sum_rate_mbps: f64,
    pub arrivals: u64,
    pub lost_packets: u64,
    pub loss_pct: f64,
    pub latencies_s: Vec<f64>,
    /// Mean learner reward per TTI.
    pub rewards: Vec<f64>,
    pub log: MetricsLog,
}

pub fn run_single(
    cfg: &ExperimentConfig,
    policy: Policy,
    mobility: Mobility,
    load_mbps: f64,
    seed: u64,
    bundle: Option<Arc<TransferBundle>>,
) -> Result<RunResult> {
    let spec = RunSpec {
        policy,
        role: Role::Learner,
        mobility,
        load_mbps,
        seed,
    };
    let bundle = if policy == Policy::Tql { bundle } else { None };
    let mut sim = Simulation::new(cfg, spec, bundle)?;
    let n = cfg.experiment.tti_count;
    sim.simulate(n)?;
    let log = sim.into_log();
    let seconds = n as f64 * cfg.mac.tti_s();
    let arrivals = log.arrivals();
    let lost = log.lost_packets();
    Ok(RunResult {
        policy,
        mobility,
        load_mbps,
        seed,
        sum_rate_mbps: log.delivered_bits() as f64 / seconds / 1e6,
        arrivals,
        lost_packets: lost,
        loss_pct: if arrivals == 0 {
            0.0
        } else {
            100.0 * lost as f64 / arrivals as f64
        },
        latencies_s: log.latencies.iter().map(|s| s.latency_s).collect(),
        rewards: log.mean_rewards(),
        log,
    })
}

/// Sample mean and 95% Student-t half-width; the half-width is NaN for a
/// single sample.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid degrees of freedom")
        .inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub policy: Policy,
    pub mobility: Mobility,
    pub load_mbps: f64,
    pub n_runs: usize,
    pub sum_rate_mbps_mean: f64,
    pub sum_rate_mbps_ci95: f64,
    pub lost_packets_mean: f64,
    pub lost_packets_ci95: f64,
    pub loss_pct_mean: f64,
    pub loss_pct_ci95: f64,
}

#[derive(Debug, Clone)]
pub struct LoadAggregate {
    pub row: AggregateRow,
    /// Latency samples of every run, in seed order.
    pub latencies_s: Vec<f64>,
    /// Per-TTI mean over runs of the cumulative mean reward.
    pub reward_curve: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AggregateResult {
    pub loads: Vec<LoadAggregate>,
    pub runs: Vec<RunResult>,
}

/// Reduce runs of one (policy, mobility, load) cell. Runs are ordered by
/// seed first, so the result does not depend on input order.
pub fn aggregate(runs: &[&RunResult]) -> Result<LoadAggregate> {
    let mut runs = runs.to_vec();
    runs.sort_by_key(|r| r.seed);
    let first = runs
        .first()
        .ok_or_else(|| Error::domain("cannot aggregate zero runs"))?;
    let pick = |f: fn(&RunResult) -> f64| runs.iter().map(|r| f(r)).collect::<Vec<f64>>();
    let (rate, rate_ci) = mean_ci95(&pick(|r| r.sum_rate_mbps));
    let (lost, lost_ci) = mean_ci95(&pick(|r| r.lost_packets as f64));
    let (pct, pct_ci) = mean_ci95(&pick(|r| r.loss_pct));
    let len = runs.iter().map(|r| r.rewards.len()).min().unwrap_or(0);
    let mut curve = vec![0.0; len];
    for r in &runs {
        for (c, v) in curve.iter_mut().zip(cumulative_mean(&r.rewards)) {
            *c += v;
        }
    }
    curve.iter_mut().for_each(|c| *c /= runs.len() as f64);
    Ok(LoadAggregate {
        row: AggregateRow {
            policy: first.policy,
            mobility: first.mobility,
            load_mbps: first.load_mbps,
            n_runs: runs.len(),
            sum_rate_mbps_mean: rate,
            sum_rate_mbps_ci95: rate_ci,
            lost_packets_mean: lost,
            lost_packets_ci95: lost_ci,
            loss_pct_mean: pct,
            loss_pct_ci95: pct_ci,
        },
        latencies_s: runs
            .iter()
            .flat_map(|r| r.latencies_s.iter().copied())
            .collect(),
        reward_curve: curve,
    })
}

/// Load the bundle a TQL run needs.
pub fn load_bundle(cfg: &ExperimentConfig) -> Result<Arc<TransferBundle>> {
    TransferBundle::load(&cfg.bundle_path()).map(Arc::new)
}

/// Execute every (load, seed) pair of the configured policy in parallel.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let e = &cfg.experiment;
    let bundle = match e.policy {
        Policy::Tql => Some(load_bundle(cfg)?),
        _ => None,
    };
    let jobs: Vec<(f64, u64)> = e
        .loads_mbps
        .iter()
        .flat_map(|&l| e.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|&(load, seed)| {
                run_single(cfg, e.policy, e.mobility, load, seed, bundle.clone()).map_err(|err| {
                    Error::Run {
                        seed,
                        source: Box::new(err),
                    }
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    if e.workers == 0 {
        work()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(e.workers)
            .build()
            .map_err(|err| Error::config("experiment.workers", err.to_string()))?
            .install(work)
    }
}

/// Run the configured experiment, aggregate per load and write CSVs under
/// `output_dir/<policy>_<mobility>/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<AggregateResult> {
    let runs = run_all(cfg)?;
    let mut loads = Vec::new();
    for &load in &cfg.experiment.loads_mbps {
        let cell: Vec<&RunResult> = runs.iter().filter(|r| r.load_mbps == load).collect();
        loads.push(aggregate(&cell)?);
    }
    let result = AggregateResult { loads, runs };
    write_artifacts(cfg, &result)?;
    Ok(result)
}

pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    let e = &cfg.experiment;
    e.output_dir
        .join(format!("{}_{}", e.policy.name(), e.mobility.name()))
}

fn load_tag(load: f64) -> String {
    format!("load{load}")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_artifacts(cfg: &ExperimentConfig, result: &AggregateResult) -> Result<()> {
    let dir = experiment_dir(cfg);
    let runs_dir = dir.join("runs");
    fs::create_dir_all(&runs_dir)?;
    for r in &result.runs {
        let stem = format!("{}_seed{}", load_tag(r.load_mbps), r.seed);
        r.log
            .write_tti_csv(create(&runs_dir.join(format!("{stem}_tti.csv")))?)?;
        r.log
            .write_latency_csv(create(&runs_dir.join(format!("{stem}_latency.csv")))?)?;
    }

    let mut agg = csv::Writer::from_writer(create(&dir.join("aggregate.csv"))?);
    for l in &result.loads {
        agg.serialize(&l.row)?;
    }
    agg.flush()?;

    let mut lat = csv::Writer::from_writer(create(&dir.join("latency_pooled.csv"))?);
    lat.write_record(["load_mbps", "latency_s"])?;
    for l in &result.loads {
        for s in &l.latencies_s {
            lat.write_record([l.row.load_mbps.to_string(), s.to_string()])?;
        }
    }
    lat.flush()?;

    let mut conv = csv::Writer::from_writer(create(&dir.join("convergence.csv"))?);
    conv.write_record(["load_mbps", "tti", "mean_cumulative_reward"])?;
    for l in &result.loads {
        for (t, c) in l.reward_curve.iter().enumerate() {
            conv.write_record([l.row.load_mbps.to_string(), t.to_string(), c.to_string()])?;
        }
    }
    conv.flush()?;
    Ok(())
}

/// Write the expert bundle and its reward curve.
pub fn write_expert(training: &ExpertTraining, bundle_path: &Path) -> Result<()> {
    if let Some(parent) = bundle_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    training.bundle.save(bundle_path)?;
    let curve_path = bundle_path.with_extension("rewards.csv");
    let mut w = csv::Writer::from_writer(create(&curve_path)?);
    w.write_record(["tti", "mean_reward", "cumulative_mean_reward"])?;
    for (t, (r, c)) in training
        .rewards
        .iter()
        .zip(cumulative_mean(&training.rewards))
        .enumerate()
    {
        w.write_record([t.to_string(), r.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
