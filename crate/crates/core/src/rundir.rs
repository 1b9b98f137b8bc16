//! On-disk layout of pipeline inputs and run artifacts.
//!
//! Inputs directory:
//! `reference_init.cft`, `reference_attention.cft`, optional
//! `reference_features.cft`, and the same three names with a `target_{n}_`
//! prefix for `n = 0, 1, …` (numbering stops at the first missing init).
//!
//! Run directory: `config.cfg`, `stage_log.json`, masks, masses, costs,
//! plans, `saliency.cft`, and one tensor per trajectory state
//! (`reference_step_{t:03}.cft`, `target_{n}_step_{t:03}.cft`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::to_canonical_string;
use crate::mask::AttentionStack;
use crate::matrix::TokenMatrix;
use crate::pipeline::{PipelineInputs, RunArtifacts, Stage, SubjectInputs};
use crate::scalar::Real;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const STAGE_LOG: &str = "stage_log.json";

fn prefix_of(target: Option<usize>) -> String {
    match target {
        None => "reference".into(),
        Some(n) => format!("target_{n}"),
    }
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).map_err(|source| Error::Write { path, source })
}

fn read_text(path: PathBuf) -> Result<String> {
    fs::read_to_string(&path).map_err(|source| Error::Read { path, source })
}

fn load_subject(dir: &Path, target: Option<usize>) -> Result<SubjectInputs<f64>> {
    let prefix = prefix_of(target);
    let init = read_tensor(dir.join(format!("{prefix}_init.cft")))?.to_tokens()?;
    let attention =
        AttentionStack::from_tensor(&read_tensor(dir.join(format!("{prefix}_attention.cft")))?)?;
    let features_path = dir.join(format!("{prefix}_features.cft"));
    let features = if features_path.exists() {
        Some(read_tensor(features_path)?.to_tokens()?)
    } else {
        None
    };
    Ok(SubjectInputs {
        init,
        attention,
        features,
    })
}

pub fn load_inputs(dir: impl AsRef<Path>) -> Result<PipelineInputs<f64>> {
    let dir = dir.as_ref();
    let reference = load_subject(dir, None)?;
    let mut targets = Vec::new();
    while dir.join(format!("target_{}_init.cft", targets.len())).exists() {
        targets.push(load_subject(dir, Some(targets.len()))?);
    }
    if targets.is_empty() {
        return Err(Error::Read {
            path: dir.join("target_0_init.cft"),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no target inputs"),
        });
    }
    Ok(PipelineInputs { reference, targets })
}

fn save_subject<T: Real>(dir: &Path, target: Option<usize>, s: &SubjectInputs<T>) -> Result<()> {
    let prefix = prefix_of(target);
    write_tensor(
        &Tensor::from_matrix(&s.init),
        dir.join(format!("{prefix}_init.cft")),
    )?;
    write_tensor(
        &s.attention.to_tensor(),
        dir.join(format!("{prefix}_attention.cft")),
    )?;
    if let Some(f) = &s.features {
        write_tensor(
            &Tensor::from_matrix(f),
            dir.join(format!("{prefix}_features.cft")),
        )?;
    }
    Ok(())
}

pub fn save_inputs<T: Real>(inputs: &PipelineInputs<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    save_subject(dir, None, &inputs.reference)?;
    for (n, t) in inputs.targets.iter().enumerate() {
        save_subject(dir, Some(n), t)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub step: usize,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub total_steps: usize,
    pub t_switch: usize,
    pub alpha: f64,
    pub targets: usize,
    pub selection: Vec<usize>,
    pub reference_threshold: f64,
    pub target_thresholds: Vec<f64>,
    pub degenerate_masks: Vec<String>,
    pub stages: Vec<StageEntry>,
}

impl StageLog {
    pub fn from_artifacts<T: Real>(run: &RunArtifacts<T>) -> Self {
        let mut degenerate_masks = Vec::new();
        if run.reference_region.otsu.degenerate {
            degenerate_masks.push("reference".into());
        }
        for (n, r) in run.target_regions.iter().enumerate() {
            if r.otsu.degenerate {
                degenerate_masks.push(format!("target_{n}"));
            }
        }
        Self {
            total_steps: run.config.total_steps,
            t_switch: run.config.t_switch,
            alpha: run.config.alpha,
            targets: run.target_trajectories.len(),
            selection: run.selection.indices().to_vec(),
            reference_threshold: run.reference_region.otsu.threshold.to_f64_lossy(),
            target_thresholds: run
                .target_regions
                .iter()
                .map(|r| r.otsu.threshold.to_f64_lossy())
                .collect(),
            degenerate_masks,
            stages: run
                .stages
                .iter()
                .enumerate()
                .map(|(i, &stage)| StageEntry { step: i + 1, stage })
                .collect(),
        }
    }
}

pub fn write_run<T: Real>(run: &RunArtifacts<T>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::Write {
        path: dir.to_path_buf(),
        source,
    })?;
    write_text(dir.join("config.cfg"), &run.config.to_text())?;
    let log = to_canonical_string(&StageLog::from_artifacts(run))
        .map_err(|e| Error::Validation(format!("stage log: {e}")))?;
    write_text(dir.join(STAGE_LOG), &log)?;

    write_tensor(
        &run.reference_region.mask().to_tensor(),
        dir.join("reference_mask.cft"),
    )?;
    write_tensor(
        &Tensor::from_slice(run.reference_region.masses.weights())?,
        dir.join("reference_mass.cft"),
    )?;
    write_tensor(&Tensor::from_slice(&run.saliency)?, dir.join("saliency.cft"))?;
    for (n, region) in run.target_regions.iter().enumerate() {
        write_tensor(
            &region.mask().to_tensor(),
            dir.join(format!("target_{n}_mask.cft")),
        )?;
        write_tensor(
            &Tensor::from_slice(region.masses.weights())?,
            dir.join(format!("target_{n}_mass.cft")),
        )?;
        write_tensor(
            &Tensor::from_matrix(run.plans[n].matrix()),
            dir.join(format!("plan_{n}.cft")),
        )?;
        write_tensor(
            &Tensor::from_matrix(run.costs[n].matrix()),
            dir.join(format!("cost_{n}.cft")),
        )?;
    }
    for (t, state) in run.reference_trajectory.iter().enumerate() {
        write_tensor(
            &Tensor::from_matrix(state),
            dir.join(format!("reference_step_{t:03}.cft")),
        )?;
    }
    for (n, trajectory) in run.target_trajectories.iter().enumerate() {
        for (t, state) in trajectory.iter().enumerate() {
            write_tensor(
                &Tensor::from_matrix(state),
                dir.join(format!("target_{n}_step_{t:03}.cft")),
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanResidual {
    pub target: usize,
    pub row_residual: f64,
    pub col_residual: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepNorms {
    pub step: usize,
    pub reference: f64,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub stages: Vec<StageEntry>,
    pub plan_residuals: Vec<PlanResidual>,
    pub feature_norms: Vec<StepNorms>,
}

fn frobenius(m: &TokenMatrix<f64>) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Stage log, plan marginal residuals (as stored, in `f32`) and per-step
/// Frobenius norms of every trajectory state.
pub fn build_report(dir: impl AsRef<Path>) -> Result<RunReport> {
    let dir = dir.as_ref();
    let log: StageLog = serde_json::from_str(&read_text(dir.join(STAGE_LOG))?)
        .map_err(|e| Error::Format(format!("{STAGE_LOG}: {e}")))?;
    let a: Vec<f64> = read_tensor(dir.join("reference_mass.cft"))?.to_vector()?;

    let mut plan_residuals = Vec::with_capacity(log.targets);
    for n in 0..log.targets {
        let plan: TokenMatrix<f64> = read_tensor(dir.join(format!("plan_{n}.cft")))?.to_matrix()?;
        let cost: TokenMatrix<f64> = read_tensor(dir.join(format!("cost_{n}.cft")))?.to_matrix()?;
        let b: Vec<f64> = read_tensor(dir.join(format!("target_{n}_mass.cft")))?.to_vector()?;
        if plan.rows() != a.len() || plan.cols() != b.len() {
            return Err(Error::Corruption(format!(
                "plan_{n} does not match the stored masses"
            )));
        }
        let worst = |sums: Vec<f64>, want: &[f64]| {
            sums.iter()
                .zip(want)
                .fold(0.0f64, |m, (s, w)| m.max((s - w).abs()))
        };
        let objective = plan
            .data()
            .iter()
            .zip(cost.data())
            .map(|(t, c)| t * c)
            .sum();
        plan_residuals.push(PlanResidual {
            target: n,
            row_residual: worst(plan.row_sums(), &a),
            col_residual: worst(plan.col_sums(), &b),
            objective,
        });
    }

    let mut feature_norms = Vec::with_capacity(log.total_steps + 1);
    for t in 0..=log.total_steps {
        let load = |name: String| -> Result<f64> {
            Ok(frobenius(&read_tensor(dir.join(name))?.to_matrix()?))
        };
        let reference = load(format!("reference_step_{t:03}.cft"))?;
        let targets = (0..log.targets)
            .map(|n| load(format!("target_{n}_step_{t:03}.cft")))
            .collect::<Result<Vec<_>>>()?;
        feature_norms.push(StepNorms {
            step: t,
            reference,
            targets,
        });
    }
    Ok(RunReport {
        stages: log.stages,
        plan_residuals,
        feature_norms,
    })
}
