//! Identity transport: cosine costs between subject features, exact optimal
//! transport plans, feature composition and OT-based saliency.

pub mod cost;
pub mod simplex;
pub mod transport;

pub use cost::{cost_matrix, CostMatrix};
pub use simplex::{solve_ot, solve_ot_with, SimplexOptions, TransportPlan, BALANCE_TOLERANCE};
pub use transport::{
    compose_features, saliency_scores, transport_features, transport_weights, TransportMode,
};
