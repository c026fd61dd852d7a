//! Trial runner, the normalized force integral, paired benchmarks and their
//! output files.
//!
//! One control cycle: read the noisy trocar pose, estimate the tip force
//! from the last joint torques, update the admittance reference, build the
//! task parameters, bound the step, solve, and command the result.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ResolvedTrial, TrialConfig};
use crate::error::{Error, Result};
use crate::force::{estimate_tip_force, AdmittanceState, ForceEstimate};
use crate::sim::{ContactKind, Observation, Simulation};
use crate::solver::{step_bounds, SqpSolver};
use crate::task::{total_objective, TaskParams};

/// Feasibility slack for recorded commands.
const BOUNDS_TOLERANCE: f64 = 1e-12;

/// One control cycle of a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub t: f64,
    pub q: Vec<f64>,
    /// True contact force magnitude, N.
    pub f_true: f64,
    /// Estimated tip force magnitude, N.
    pub f_est: f64,
    /// Unweighted cost terms at the commanded configuration.
    pub costs: [f64; 5],
    pub total_cost: f64,
    pub solve_ms: f64,
    pub sqp_iterations: usize,
    pub converged: bool,
    /// Whether the force-feedback term was part of this cycle's objective.
    pub ff_engaged: bool,
    pub contact: ContactKind,
    /// Distance of the trocar center from its rest position, m.
    pub trocar_displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub ff_enabled: bool,
    pub rows: Vec<TrialRow>,
    /// Completion time T, s.
    pub completion_time: f64,
    pub success: bool,
    /// Normalized force integral over [0, T], N.
    pub metric_m: f64,
    pub abort_cause: Option<String>,
    /// Cycles whose command left the step bounds.
    pub bounds_violations: usize,
    /// Substeps where contact forces were not exact opposites.
    pub action_reaction_violations: usize,
}

impl TrialRecord {
    pub fn aborted(&self) -> bool {
        self.abort_cause.is_some()
    }

    pub fn mean_solve_ms(&self) -> f64 {
        let solved: Vec<f64> = self.rows.iter().skip(1).map(|r| r.solve_ms).collect();
        if solved.is_empty() {
            0.0
        } else {
            solved.iter().sum::<f64>() / solved.len() as f64
        }
    }

    pub fn force_series(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.t, r.f_true)).collect()
    }
}

/// `M = (1/T) ∫₀ᵀ ‖f‖ dt` by the trapezoidal rule.
///
/// Samples after `T` are ignored; the integrand is linearly interpolated
/// when `T` falls between samples.
pub fn metric_m(series: &[(f64, f64)], t_end: f64) -> Result<f64> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    if !(t_end > 0.0) {
        return Err(Error::InvalidParameter("T must be positive".into()));
    }
    let mut integral = 0.0;
    for pair in series.windows(2) {
        let ((t0, f0), (t1, f1)) = (pair[0], pair[1]);
        if t0 >= t_end {
            break;
        }
        if t1 <= t_end {
            integral += 0.5 * (f0 + f1) * (t1 - t0);
        } else {
            let f_end = f0 + (f1 - f0) * (t_end - t0) / (t1 - t0);
            integral += 0.5 * (f0 + f_end) * (t_end - t0);
        }
    }
    Ok(integral / t_end)
}

/// Runs one closed-loop docking trial.
pub fn run_trial(config: &TrialConfig) -> Result<TrialRecord> {
    let trial = config.resolve()?;
    Ok(run_resolved(&trial))
}

/// Runs a trial that has already been resolved. Failures inside the loop
/// end the trial and are reported in `abort_cause`.
pub fn run_resolved(trial: &ResolvedTrial) -> TrialRecord {
    let mut record = TrialRecord {
        seed: trial.seed,
        ff_enabled: trial.ff_enabled,
        rows: Vec::new(),
        completion_time: trial.t_max,
        success: false,
        metric_m: 0.0,
        abort_cause: None,
        bounds_violations: 0,
        action_reaction_violations: 0,
    };
    if let Err(e) = control_loop(trial, &mut record) {
        record.abort_cause = Some(e.to_string());
        record.completion_time = record.rows.last().map_or(0.0, |r| r.t);
    }
    let series = record.force_series();
    record.metric_m = if record.completion_time > 0.0 {
        metric_m(&series, record.completion_time).unwrap_or(0.0)
    } else {
        0.0
    };
    record
}

fn control_loop(trial: &ResolvedTrial, record: &mut TrialRecord) -> Result<()> {
    let chain = &trial.chain;
    let dt = trial.sim.dt;
    let mut sim = Simulation::new(
        chain.clone(),
        trial.limits.clone(),
        trial.trocar.clone(),
        trial.endoscope,
        trial.noise,
        trial.sim,
        trial.q0.clone(),
    )?;
    let mut solver = SqpSolver::new(trial.solver.clone())?;
    let mut admittance = AdmittanceState::new(chain.tip_position(trial.q0.as_slice())?, trial.admittance)?;

    let mut obs = sim.observe()?;
    record.rows.push(row(0.0, &obs, &sim, None, [0.0; 5], 0.0, 0.0, false));
    let steps = (trial.t_max / dt).round() as usize;

    for k in 1..=steps {
        let estimate = match estimate_tip_force(chain, obs.q_c.as_slice(), &obs.tau_ext, trial.estimator_damping) {
            Ok(e) => e,
            Err(Error::ForceUnobservable) => ForceEstimate::zero(),
            Err(e) => return Err(e),
        };
        let tip = chain.tip_position(obs.q_c.as_slice())?;
        if trial.ff_enabled {
            admittance = admittance.update(&tip, &estimate, dt);
        }

        let m = &obs.measurement;
        let goal = m.center + m.axis * (trial.sim.insertion_depth + trial.goal_overshoot);
        let mut params = TaskParams::new(m.center, m.axis, goal, obs.q_c.clone())?.with_weights(trial.weights)?;
        params.epsilon_c5 = trial.epsilon_c5;
        let engaged = trial.ff_enabled && admittance.is_engaged();
        if engaged {
            params = params.with_force_feedback(admittance.r);
        }

        let bounds = step_bounds(&trial.limits, &obs.q_c, dt)?.bounds;
        let outcome = solver.solve(chain, &params, &bounds)?;
        if !bounds.contains(&outcome.q_star, BOUNDS_TOLERANCE) {
            record.bounds_violations += 1;
        }
        let report = total_objective(&outcome.q_star, &params, chain)?;

        obs = sim.step(&outcome.q_star)?;
        record.action_reaction_violations += obs.action_reaction_violations;
        let t = k as f64 * dt;
        let mut r = row(
            t,
            &obs,
            &sim,
            Some(&estimate),
            report.values,
            report.total,
            outcome.solve_time.as_secs_f64() * 1e3,
            engaged,
        );
        r.sqp_iterations = outcome.iterations;
        r.converged = outcome.converged;
        record.rows.push(r);

        if obs.success {
            record.success = true;
            record.completion_time = t;
            return Ok(());
        }
    }
    record.completion_time = steps as f64 * dt;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn row(
    t: f64,
    obs: &Observation,
    sim: &Simulation,
    estimate: Option<&ForceEstimate>,
    costs: [f64; 5],
    total_cost: f64,
    solve_ms: f64,
    ff_engaged: bool,
) -> TrialRow {
    TrialRow {
        t,
        q: obs.q_c.iter().copied().collect(),
        f_true: obs.true_force_norm,
        f_est: estimate.map_or(0.0, |e| e.f_ext.norm()),
        costs,
        total_cost,
        solve_ms,
        sqp_iterations: 0,
        converged: true,
        ff_engaged,
        contact: obs.contact.kind,
        trocar_displacement: sim.trocar_displacement(),
    }
}

/// Statistics of one benchmark arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub ff_enabled: bool,
    pub trials: usize,
    pub success_count: usize,
    /// Seeds whose trial succeeded, aligned with `m_values`.
    pub seeds: Vec<u64>,
    pub m_values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std_dev: f64,
    /// Seeds of trials that aborted or timed out.
    pub failed_seeds: Vec<u64>,
}

impl ArmSummary {
    pub fn from_records<'a>(ff_enabled: bool, records: impl IntoIterator<Item = &'a TrialRecord>) -> Self {
        let mut summary = Self {
            ff_enabled,
            trials: 0,
            success_count: 0,
            seeds: Vec::new(),
            m_values: Vec::new(),
            mean: 0.0,
            std_dev: 0.0,
            failed_seeds: Vec::new(),
        };
        for r in records.into_iter().filter(|r| r.ff_enabled == ff_enabled) {
            summary.trials += 1;
            if r.success && !r.aborted() {
                summary.success_count += 1;
                summary.seeds.push(r.seed);
                summary.m_values.push(r.metric_m);
            } else {
                summary.failed_seeds.push(r.seed);
            }
        }
        let (mean, std_dev) = mean_and_sample_std(&summary.m_values);
        summary.mean = mean;
        summary.std_dev = std_dev;
        summary
    }
}

pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub with_ff: ArmSummary,
    pub without_ff: ArmSummary,
    /// Mean M with force feedback over mean M without; absent if the latter is zero.
    pub ratio_of_means: Option<f64>,
}

impl BenchSummary {
    pub fn from_records(records: &[TrialRecord]) -> Self {
        let with_ff = ArmSummary::from_records(true, records);
        let without_ff = ArmSummary::from_records(false, records);
        let ratio_of_means = (without_ff.mean > 0.0 && with_ff.success_count > 0).then(|| with_ff.mean / without_ff.mean);
        Self {
            with_ff,
            without_ff,
            ratio_of_means,
        }
    }
}

/// Paired trials: every seed runs once without and once with force feedback.
/// Trials run in parallel; records come back ordered by seed, then arm.
pub fn run_bench(config: &TrialConfig, seeds: &[u64]) -> Result<(BenchSummary, Vec<TrialRecord>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("bench needs at least one seed".into()));
    }
    // Surface config errors once, before fanning out.
    config.resolve()?;
    let jobs: Vec<(u64, bool)> = seeds.iter().flat_map(|&s| [(s, false), (s, true)]).collect();
    let records = jobs
        .par_iter()
        .map(|&(seed, ff)| run_trial(&config.clone().with_seed(seed).with_ff(ff)))
        .collect::<Result<Vec<_>>>()?;
    Ok((BenchSummary::from_records(&records), records))
}

pub fn ff_label(enabled: bool) -> &'static str {
    if enabled {
        "on"
    } else {
        "off"
    }
}

pub fn trial_file_name(seed: u64, ff_enabled: bool) -> String {
    format!("trial_{seed}_{}.jsonl", ff_label(ff_enabled))
}

/// One JSON object per row, one row per line.
pub fn write_trial_jsonl(record: &TrialRecord, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in &record.rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trial_jsonl(path: impl AsRef<Path>) -> Result<Vec<TrialRow>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok(rows)
}

/// A line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryLine {
    pub seed: u64,
    pub ff_enabled: bool,
    pub success: bool,
    pub completion_time: f64,
    pub metric_m: f64,
    pub mean_solve_ms: Option<f64>,
}

impl SummaryLine {
    pub fn from_record(record: &TrialRecord, with_timing: bool) -> Self {
        Self {
            seed: record.seed,
            ff_enabled: record.ff_enabled,
            success: record.success,
            completion_time: record.completion_time,
            metric_m: record.metric_m,
            mean_solve_ms: with_timing.then(|| record.mean_solve_ms()),
        }
    }
}

/// Seventeen significant digits.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `seed,ff,success,T_s,M_N,mean_solve_ms`. Wall-clock timing is
/// only written when `with_timing` is set; otherwise the column is empty and
/// the file is a pure function of config and seeds.
pub fn write_summary_csv(records: &[TrialRecord], path: impl AsRef<Path>, with_timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seed", "ff", "success", "T_s", "M_N", "mean_solve_ms"])?;
    for r in records {
        let line = SummaryLine::from_record(r, with_timing);
        w.write_record([
            line.seed.to_string(),
            ff_label(line.ff_enabled).to_string(),
            line.success.to_string(),
            fmt_f64(line.completion_time),
            fmt_f64(line.metric_m),
            line.mean_solve_ms.map(fmt_f64).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv(path: impl AsRef<Path>) -> Result<Vec<SummaryLine>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let bad = |what: &str| Error::Config(format!("summary.csv: bad {what} field"));
        let number = |i: usize, what: &str| field(i).parse::<f64>().map_err(|_| bad(what));
        lines.push(SummaryLine {
            seed: field(0).parse().map_err(|_| bad("seed"))?,
            ff_enabled: field(1) == "on",
            success: field(2).parse().map_err(|_| bad("success"))?,
            completion_time: number(3, "T_s")?,
            metric_m: number(4, "M_N")?,
            mean_solve_ms: if field(5).is_empty() { None } else { Some(number(5, "mean_solve_ms")?) },
        });
    }
    Ok(lines)
}

/// Writes every trial file, `summary.csv` and `bench_summary.json` into `dir`.
pub fn write_bench_outputs(dir: impl AsRef<Path>, summary: &BenchSummary, records: &[TrialRecord], with_timing: bool) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for r in records {
        write_trial_jsonl(r, dir.join(trial_file_name(r.seed, r.ff_enabled)))?;
    }
    write_summary_csv(records, dir.join("summary.csv"), with_timing)?;
    let mut out = BufWriter::new(File::create(dir.join("bench_summary.json"))?);
    serde_json::to_writer_pretty(&mut out, summary)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
