//! Two-stage schedule over a deterministic toy denoiser.
//!
//! Pass 1 harvests final-step features (or takes them from the caller) and
//! derives masks, masses, transport plans and OT saliency once. Pass 2 walks
//! the denoising steps: steps `1..=t_switch` run identity transport on every
//! target, later steps run identity refinement. The reference image always
//! follows the vanilla trajectory.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{extract_subject, AttentionStack, SubjectRegion};
use crate::matrix::TokenMatrix;
use crate::ot::{
    compose_features, cost_matrix, saliency_scores, solve_ot, transport_features, CostMatrix,
    TransportMode, TransportPlan,
};
use crate::refine::{attention, refine_attention, select_top_alpha, AttentionBundle, SelectionSet};
use crate::scalar::Real;

/// Weight of the attention update inside one toy block.
pub const ATTENTION_MIX: f64 = 0.1;
/// Amplitude of the per-step offset added by the toy denoiser.
pub const OFFSET_SCALE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub total_steps: usize,
    pub t_switch: usize,
    pub alpha: f64,
    pub transport_mode: TransportMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            total_steps: 50,
            t_switch: 10,
            alpha: 0.5,
            transport_mode: TransportMode::Barycentric,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Parameter("total_steps must be positive".into()));
        }
        if self.t_switch > self.total_steps {
            return Err(Error::Parameter(format!(
                "t_switch {} exceeds total_steps {}",
                self.t_switch, self.total_steps
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Parameter(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Stage run at 1-based step `t`.
    pub fn stage(&self, t: usize) -> Stage {
        if t <= self.t_switch {
            Stage::IdentityTransport
        } else {
            Stage::IdentityRefinement
        }
    }

    /// Flat `key = value` text; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parameter(format!("line {}: expected key = value", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Parameter(format!("line {}: invalid {what} {value:?}", lineno + 1))
            };
            match key {
                "total_steps" => cfg.total_steps = value.parse().map_err(|_| bad(key))?,
                "t_switch" => cfg.t_switch = value.parse().map_err(|_| bad(key))?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad(key))?,
                "transport_mode" => cfg.transport_mode = TransportMode::from_str(value)?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
                other => {
                    return Err(Error::Parameter(format!(
                        "line {}: unknown key {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "total_steps = {}", self.total_steps).unwrap();
        writeln!(s, "t_switch = {}", self.t_switch).unwrap();
        writeln!(s, "alpha = {}", self.alpha).unwrap();
        writeln!(s, "transport_mode = {}", self.transport_mode).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "IT")]
    IdentityTransport,
    #[serde(rename = "IR")]
    IdentityRefinement,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::IdentityTransport => "IT",
            Stage::IdentityRefinement => "IR",
        }
    }
}

/// Affine map `x ↦ x·A_stepᵀ + c_step` applied to every token row.
///
/// `A_step` is a Householder reflection (orthogonal, so norms are preserved)
/// and `c_step` a small offset, both drawn from ChaCha20 keyed by `seed`
/// with `step` as the stream id.
pub fn toy_denoise_step<T: Real>(x: &TokenMatrix<T>, step: usize, seed: u64) -> TokenMatrix<T> {
    let d = x.cols();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let vnorm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if vnorm > 0.0 {
        v.iter_mut().for_each(|a| *a /= vnorm);
    }
    let offset: Vec<T> = (0..d)
        .map(|_| T::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * OFFSET_SCALE))
        .collect();
    let v: Vec<T> = v.into_iter().map(T::from_f64_lossy).collect();
    let two = T::one() + T::one();

    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let proj = crate::scalar::dot(row, &v);
        for ((o, &xi), (&vi, &ci)) in out.row_mut(r).iter_mut().zip(row).zip(v.iter().zip(&offset)) {
            *o = xi - two * proj * vi + ci;
        }
    }
    out
}

fn mix<T: Real>(x: &TokenMatrix<T>, update: &TokenMatrix<T>) -> TokenMatrix<T> {
    let w = T::from_f64_lossy(ATTENTION_MIX);
    let mut out = x.clone();
    for (o, (&a, &u)) in out
        .data_mut()
        .iter_mut()
        .zip(x.data().iter().zip(update.data()))
    {
        *o = a + w * (u - a);
    }
    out
}

/// One vanilla toy step: self-attention update, then the affine denoiser.
pub fn vanilla_step<T: Real>(x: &TokenMatrix<T>, step: usize, seed: u64) -> Result<TokenMatrix<T>> {
    let z = attention(x, x, x)?;
    Ok(toy_denoise_step(&mix(x, &z), step, seed))
}

/// Runs the vanilla toy trajectory, returning every state (initial included).
pub fn vanilla_trajectory<T: Real>(
    init: &TokenMatrix<T>,
    cfg: &PipelineConfig,
) -> Result<Vec<TokenMatrix<T>>> {
    let mut states = Vec::with_capacity(cfg.total_steps + 1);
    states.push(init.clone());
    for step in 0..cfg.total_steps {
        let next = vanilla_step(states.last().expect("non-empty"), step, cfg.seed)?;
        states.push(next);
    }
    Ok(states)
}

/// Inputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectInputs<T> {
    /// Initial latent tokens for pass 2.
    pub init: TokenMatrix<T>,
    /// Image-text cross-attention recorded for the subject tokens.
    pub attention: AttentionStack<T>,
    /// Final-step features from pass 1; harvested with the toy denoiser when absent.
    pub features: Option<TokenMatrix<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineInputs<T> {
    pub reference: SubjectInputs<T>,
    pub targets: Vec<SubjectInputs<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts<T> {
    pub config: PipelineConfig,
    /// States `0..=total_steps` of the reference image.
    pub reference_trajectory: Vec<TokenMatrix<T>>,
    /// States `0..=total_steps` for each target.
    pub target_trajectories: Vec<Vec<TokenMatrix<T>>>,
    pub reference_region: SubjectRegion<T>,
    pub target_regions: Vec<SubjectRegion<T>>,
    pub costs: Vec<CostMatrix<T>>,
    pub plans: Vec<TransportPlan<T>>,
    pub saliency: Vec<T>,
    pub selection: SelectionSet,
    /// `stages[t − 1]` is the stage that ran at step `t`.
    pub stages: Vec<Stage>,
}

impl<T: Real> RunArtifacts<T> {
    pub fn final_targets(&self) -> Vec<&TokenMatrix<T>> {
        self.target_trajectories
            .iter()
            .map(|t| t.last().expect("trajectory has the initial state"))
            .collect()
    }
}

fn validate_subject<T: Real>(s: &SubjectInputs<T>, what: &str) -> Result<()> {
    s.init.ensure_finite(what)?;
    if s.attention.tokens() != s.init.rows() {
        return Err(Error::Shape(format!(
            "{what}: attention covers {} tokens, features have {}",
            s.attention.tokens(),
            s.init.rows()
        )));
    }
    if let Some(f) = &s.features {
        if (f.rows(), f.cols()) != (s.init.rows(), s.init.cols()) {
            return Err(Error::Shape(format!(
                "{what}: harvested features do not match the initial tokens"
            )));
        }
    }
    Ok(())
}

pub fn run_pipeline<T: Real>(
    cfg: &PipelineConfig,
    inputs: &PipelineInputs<T>,
) -> Result<RunArtifacts<T>> {
    cfg.validate()?;
    if inputs.targets.is_empty() {
        return Err(Error::Empty("pipeline needs at least one target".into()));
    }
    validate_subject(&inputs.reference, "reference")?;
    for (n, t) in inputs.targets.iter().enumerate() {
        validate_subject(t, &format!("target {n}"))?;
        if t.init.cols() != inputs.reference.init.cols() {
            return Err(Error::Shape(format!(
                "target {n} feature width differs from the reference"
            )));
        }
    }

    // Pass 1: final-step features, masks, masses, plans.
    let harvest = |s: &SubjectInputs<T>| -> Result<TokenMatrix<T>> {
        match &s.features {
            Some(f) => Ok(f.clone()),
            None => Ok(vanilla_trajectory(&s.init, cfg)?
                .pop()
                .expect("non-empty trajectory")),
        }
    };
    let reference_features = harvest(&inputs.reference)?;
    let reference_region = SubjectRegion::from_attention(&inputs.reference.attention)?;
    let reference_subject = extract_subject(&reference_features, reference_region.mask())?;

    let mut target_regions = Vec::with_capacity(inputs.targets.len());
    let mut costs = Vec::with_capacity(inputs.targets.len());
    let mut plans = Vec::with_capacity(inputs.targets.len());
    for target in &inputs.targets {
        let features = harvest(target)?;
        let region = SubjectRegion::from_attention(&target.attention)?;
        let subject = extract_subject(&features, region.mask())?;
        let cost = cost_matrix(&reference_subject, &subject)?;
        let plan = solve_ot(&reference_region.masses, &region.masses, &cost)?;
        target_regions.push(region);
        costs.push(cost);
        plans.push(plan);
    }
    let saliency = saliency_scores(&plans, &costs)?;
    let selection = select_top_alpha(&saliency, cfg.alpha)?;

    // Pass 2: staged schedule.
    let mut reference_trajectory = vec![inputs.reference.init.clone()];
    let mut target_trajectories: Vec<Vec<TokenMatrix<T>>> = inputs
        .targets
        .iter()
        .map(|t| vec![t.init.clone()])
        .collect();
    let mut stages = Vec::with_capacity(cfg.total_steps);

    for t in 1..=cfg.total_steps {
        let step = t - 1;
        let stage = cfg.stage(t);
        stages.push(stage);
        let x_ref = reference_trajectory.last().expect("non-empty").clone();
        let ref_subject = extract_subject(&x_ref, reference_region.mask())?;

        for (n, trajectory) in target_trajectories.iter_mut().enumerate() {
            let x = trajectory.last().expect("non-empty");
            let next = match stage {
                Stage::IdentityTransport => {
                    let moved = transport_features(&plans[n], &ref_subject, cfg.transport_mode)?;
                    let composed = compose_features(x, target_regions[n].mask(), &moved)?;
                    vanilla_step(&composed, step, cfg.seed)?
                }
                Stage::IdentityRefinement => {
                    let bundle = AttentionBundle::new(
                        x.clone(),
                        x.clone(),
                        x.clone(),
                        ref_subject.clone(),
                        ref_subject.clone(),
                    )?;
                    let z = refine_attention(&bundle, &selection)?;
                    toy_denoise_step(&mix(x, &z), step, cfg.seed)
                }
            };
            trajectory.push(next);
        }
        reference_trajectory.push(vanilla_step(&x_ref, step, cfg.seed)?);
    }

    Ok(RunArtifacts {
        config: cfg.clone(),
        reference_trajectory,
        target_trajectories,
        reference_region,
        target_regions,
        costs,
        plans,
        saliency,
        selection,
        stages,
    })
}
