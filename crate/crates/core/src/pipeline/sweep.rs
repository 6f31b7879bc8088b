//! Ablation sweeps: one distill + eval per (value, seed) cell.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::data::build_dataset;
use super::run::{distill_to_dir, ensure_dir, load_teacher, write_json, MetricsRecord};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::synthetic_pose::{Dataset, ToyPoseNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[serde(rename = "t_s")]
    StartTime,
    LatentDim,
    InferSteps,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::StartTime => "t_s",
            SweepAxis::LatentDim => "latent_dim",
            SweepAxis::InferSteps => "infer_steps",
        }
    }

    /// Copy of `cfg` with this axis set to `value`, validated.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        let as_count = |field: &str| {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::config(field, format!("sweep value {value} is not a positive integer")))
            }
        };
        match self {
            SweepAxis::StartTime => c.agent.t_s = value,
            SweepAxis::LatentDim => c.autoencoder.latent_dim = Some(as_count("autoencoder.latent_dim")?),
            SweepAxis::InferSteps => c.agent.n_infer_steps = as_count("agent.n_infer_steps")?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t_s" => Ok(SweepAxis::StartTime),
            "latent_dim" => Ok(SweepAxis::LatentDim),
            "infer_steps" => Ok(SweepAxis::InferSteps),
            _ => Err(Error::config("axis", format!("unknown sweep axis `{s}`"))),
        }
    }
}

/// Threshold reported in sweep tables: 0.1 when configured, else the first.
pub fn primary_tau(taus: &[f64]) -> f64 {
    taus.iter().copied().find(|&t| t == 0.1).unwrap_or(taus[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub seed: u64,
    pub pck: f64,
    pub energy_pre: Option<f64>,
    pub energy_post: Option<f64>,
    pub rec_mse: Option<f64>,
    pub agent_evals_per_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seeds: usize,
    pub tau: f64,
    pub mean_pck: f64,
    /// Sample standard deviation across seeds; 0 for a single seed.
    pub std_pck: f64,
    pub mean_energy_post: Option<f64>,
    pub mean_rec_mse: Option<f64>,
    pub agent_evals_per_sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
    pub rows: Vec<SweepRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

/// Aggregates cells per value, keeping the order values first appear in.
pub fn summarize(cells: &[SweepCell], tau: f64) -> Vec<SweepRow> {
    let mut values: Vec<f64> = Vec::new();
    for c in cells {
        if !values.contains(&c.value) {
            values.push(c.value);
        }
    }
    values
        .into_iter()
        .map(|value| {
            let group: Vec<&SweepCell> = cells.iter().filter(|c| c.value == value).collect();
            let pcks: Vec<f64> = group.iter().map(|c| c.pck).collect();
            let m = mean(&pcks);
            let std = if pcks.len() > 1 {
                (pcks.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (pcks.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            SweepRow {
                value,
                seeds: group.len(),
                tau,
                mean_pck: m,
                std_pck: std,
                mean_energy_post: mean_opt(group.iter().map(|c| c.energy_post)),
                mean_rec_mse: mean_opt(group.iter().map(|c| c.rec_mse)),
                agent_evals_per_sample: group[0].agent_evals_per_sample,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cell_of(value: f64, seed: u64, tau: f64, rec: &MetricsRecord) -> SweepCell {
    let e = &rec.eval;
    SweepCell {
        value,
        seed,
        pck: e.pck[&format!("{tau}")],
        energy_pre: e.energy_pre,
        energy_post: e.energy_post,
        rec_mse: e.rec_mse,
        agent_evals_per_sample: e.agent_evals_per_sample,
    }
}

/// Runs every (value, seed) cell against one teacher and dataset, up to
/// `jobs` cells at a time. `sweep_cells.csv` is rewritten after each batch
/// so completed cells survive a later failure, which aborts the sweep.
pub fn sweep_with(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    teacher: &ToyPoseNet,
    ds: &Dataset,
    out: &Path,
    jobs: usize,
) -> Result<SweepReport> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::config("values", "sweep needs at least one value and one seed"));
    }
    let configs = values
        .iter()
        .map(|&v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(out)?;
    let tau = primary_tau(&cfg.eval.taus);
    let plan: Vec<(usize, u64)> = (0..values.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let mut cells = Vec::with_capacity(plan.len());
    for batch in plan.chunks(jobs.max(1)) {
        let results: Vec<Result<MetricsRecord>> = std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .iter()
                .map(|&(i, seed)| {
                    let dir = out.join(format!("{}={}", axis.name(), values[i])).join(format!("seed{seed}"));
                    let c = &configs[i];
                    scope.spawn(move || distill_to_dir(c, seed, teacher, ds, &dir))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::numeric("sweep cell panicked"))))
                .collect()
        });
        let mut failure = None;
        for (&(i, seed), r) in batch.iter().zip(results) {
            match r {
                Ok(rec) => cells.push(cell_of(values[i], seed, tau, &rec)),
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        write_csv(&out.join("sweep_cells.csv"), &cells)?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    let rows = summarize(&cells, tau);
    write_csv(&out.join("sweep_summary.csv"), &rows)?;
    write_json(
        &out.join("sweep.json"),
        &serde_json::json!({ "axis": axis, "values": values, "seeds": seeds, "config_hash": cfg.hash() }),
    )?;
    Ok(SweepReport { axis, cells, rows })
}

/// [`sweep_with`] loading the teacher from disk and building the dataset.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    seeds: &[u64],
    teacher_ckpt: &Path,
    out: &Path,
    jobs: usize,
) -> Result<SweepReport> {
    let teacher = load_teacher(&Checkpoint::load(teacher_ckpt)?, cfg)?;
    let ds = build_dataset(&cfg.data)?;
    sweep_with(cfg, axis, values, seeds, &teacher, &ds, out, jobs)
}
