//! Aspect-robust sentiment classification lab.
//!
//! The crate trains small aspect-conditioned classifiers under three regimes
//! (plain cross-entropy, adversarial training on augmented data, and the
//! invariance-regularized CRR objective), generates spurious-content
//! augmentations from an aspect/opinion-phrase bank, scores robustness with
//! variant-grouped metrics, and ships a synthetic causal benchmark where
//! interventions on spurious tokens are exact and measurable.
//!
//! Numeric code is generic over the scalar type via `num_traits::Float`;
//! concrete `f32`/`f64` aliases live at the crate root.

pub mod aspect_bank;
pub mod augment;
pub mod causal_sim;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod objective;
pub mod saliency;
pub mod seeding;
pub mod text;
pub mod trainer;

/// Scalar bound used by every generic numeric type in the crate.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + num_traits::ToPrimitive + std::fmt::Debug + 'static
{
}
impl<T> Scalar for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + num_traits::ToPrimitive
        + std::fmt::Debug
        + 'static
{
}

pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type PredictionDist32 = model::PredictionDist<f32>;
pub type PredictionDist64 = model::PredictionDist<f64>;
pub type LossConfig32 = objective::LossConfig<f32>;
pub type LossConfig64 = objective::LossConfig<f64>;
