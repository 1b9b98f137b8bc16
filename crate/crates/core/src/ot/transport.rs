use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SubjectMask;
use crate::matrix::TokenMatrix;
use crate::ot::cost::CostMatrix;
use crate::ot::simplex::TransportPlan;
use crate::scalar::Scalar;

/// How target rows are assembled from the plan's columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    /// `row j = Σ_i T(i,j)·s_i`: rows are scaled by the target mass `b_j`.
    Literal,
    /// `row j = Σ_i T(i,j)·s_i / Σ_i T(i,j)`: a convex combination of
    /// reference rows with the original feature scale.
    #[default]
    Barycentric,
}

impl FromStr for TransportMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "barycentric" => Ok(Self::Barycentric),
            other => Err(Error::Parameter(format!(
                "transport mode must be literal or barycentric, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for TransportMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::Barycentric => "barycentric",
        })
    }
}

/// Per-target mixing weights over reference rows (one row per target token).
pub fn transport_weights<T: Scalar>(
    plan: &TransportPlan<T>,
    mode: TransportMode,
) -> Result<TokenMatrix<T>> {
    let mut weights = plan.matrix().transpose();
    if mode == TransportMode::Barycentric {
        for j in 0..weights.rows() {
            let row = weights.row_mut(j);
            let mass = row.iter().fold(T::zero(), |acc, &w| acc + w);
            if mass <= T::zero() {
                return Err(Error::Validation(format!(
                    "target token {j} receives no mass"
                )));
            }
            for w in row.iter_mut() {
                *w = *w / mass;
            }
        }
    }
    Ok(weights)
}

/// Target subject features composed from reference subject features.
pub fn transport_features<T: Scalar>(
    plan: &TransportPlan<T>,
    reference: &TokenMatrix<T>,
    mode: TransportMode,
) -> Result<TokenMatrix<T>> {
    if plan.sources() != reference.rows() {
        return Err(Error::Shape(format!(
            "plan has {} sources, reference has {} rows",
            plan.sources(),
            reference.rows()
        )));
    }
    transport_weights(plan, mode)?.matmul(reference)
}

/// Writes transported rows into the masked positions of `x`.
pub fn compose_features<T: Scalar>(
    x: &TokenMatrix<T>,
    mask: &SubjectMask,
    transported: &TokenMatrix<T>,
) -> Result<TokenMatrix<T>> {
    let mask = mask.clone().repaired();
    crate::mask::scatter_subject(x, &mask, transported)
}

/// `s_i = Σ_n Σ_j T_n(i,j)·(1 − C_n(i,j))`.
pub fn saliency_scores<T: Scalar>(
    plans: &[TransportPlan<T>],
    costs: &[CostMatrix<T>],
) -> Result<Vec<T>> {
    if plans.is_empty() {
        return Err(Error::Empty("no transport plans".into()));
    }
    if plans.len() != costs.len() {
        return Err(Error::Shape(format!(
            "{} plans but {} cost matrices",
            plans.len(),
            costs.len()
        )));
    }
    let sources = plans[0].sources();
    let mut scores = vec![T::zero(); sources];
    for (n, (plan, cost)) in plans.iter().zip(costs).enumerate() {
        if plan.sources() != sources
            || (cost.rows(), cost.cols()) != (plan.sources(), plan.targets())
        {
            return Err(Error::Shape(format!(
                "plan/cost pair {n} does not match {sources} reference tokens"
            )));
        }
        for (i, s) in scores.iter_mut().enumerate() {
            for j in 0..plan.targets() {
                *s = *s + plan.get(i, j) * (T::one() - cost.get(i, j));
            }
        }
    }
    Ok(scores)
}
