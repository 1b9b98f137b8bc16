//! Subject-consistent generation engine.
//!
//! Subject masks come from layer-averaged image-text cross-attention and
//! Otsu thresholding ([`mask`]). Early denoising steps replace each target's
//! subject features with reference features moved along an exact optimal
//! transport plan ([`ot`]); later steps let each target attend to itself and
//! to the most transport-salient reference tokens only ([`refine`]).
//! [`pipeline`] runs that schedule over a toy denoiser, and [`eval`]
//! implements the pairwise evaluation protocol with Procrustes pose
//! diversity.
//!
//! The numeric code is generic over [`Scalar`] / [`Real`]; the aliases below
//! fix the common instantiations.

pub mod error;
pub mod eval;
pub mod json;
pub mod mask;
pub mod matrix;
pub mod ot;
pub mod pipeline;
pub mod refine;
pub mod rundir;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use eval::{
    dataset_average, embedding_consistency, filter_common, pairwise_average, pose_distance,
    procrustes_align, tau_sweep, valid_intersection, AlignmentResult, ConsistencyKind, DistanceFrame, EmbeddingSet,
    KeypointSet, PoseOptions, RotationConstraint,
};
pub use mask::{
    average_attention, extract_subject, importance_weights, otsu_threshold, AttentionStack,
    ProbabilityVector, SaliencyMap, SubjectMask, SubjectRegion,
};
pub use matrix::TokenMatrix;
pub use ot::{
    compose_features, cost_matrix, saliency_scores, solve_ot, transport_features, CostMatrix,
    TransportMode, TransportPlan,
};
pub use pipeline::{run_pipeline, toy_denoise_step, PipelineConfig, RunArtifacts, Stage};
pub use refine::{
    cross_image_scores, filter_and_renormalize, refine_attention, select_top_alpha,
    AttentionBundle, Normalization, SelectionSet,
};
pub use scalar::{Rational, Real, Scalar};
pub use tensor::{flatten_spatial, read_tensor, write_tensor, Tensor};

pub type TokenMatrix64 = TokenMatrix<f64>;
pub type TokenMatrix32 = TokenMatrix<f32>;
pub type TokenMatrixExact = TokenMatrix<Rational>;

pub type CostMatrix64 = CostMatrix<f64>;
pub type CostMatrix32 = CostMatrix<f32>;
pub type CostMatrixExact = CostMatrix<Rational>;

pub type TransportPlan64 = TransportPlan<f64>;
pub type TransportPlan32 = TransportPlan<f32>;
pub type TransportPlanExact = TransportPlan<Rational>;

pub type ProbabilityVector64 = ProbabilityVector<f64>;
pub type ProbabilityVectorExact = ProbabilityVector<Rational>;

pub type AttentionStack64 = AttentionStack<f64>;
pub type AttentionBundle64 = AttentionBundle<f64>;
pub type AttentionBundle32 = AttentionBundle<f32>;

pub type KeypointSet64 = KeypointSet<f64>;
pub type EmbeddingSet64 = EmbeddingSet<f64>;

pub type RunArtifacts64 = RunArtifacts<f64>;
