pub mod filters;
pub mod harness;
pub mod models;
pub mod online_em;
pub mod reference;
mod scalar;
pub mod statespace;

pub use scalar::Scalar;

pub type Ensemble64 = statespace::Ensemble<f64>;
pub type Ensemble32 = statespace::Ensemble<f32>;
pub type SpdMatrix64 = statespace::SpdMatrix<f64>;
pub type SpdMatrix32 = statespace::SpdMatrix<f32>;
pub type OnlineEm64 = online_em::OnlineEm<f64>;
pub type OnlineEm32 = online_em::OnlineEm<f32>;
pub type SufficientStats64 = online_em::SufficientStats<f64>;
pub type SufficientStats32 = online_em::SufficientStats<f32>;
