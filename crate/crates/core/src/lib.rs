//! EM estimation of the model error covariance `Q` in state-space models
//! `x_k = M(x_{k−1}) + β_k`, `y_k = H(x_k) + ε_k`, with particle-filter
//! E-steps and a fixed-point M-step, plus Kalman and ensemble Kalman baselines.

pub mod cli;
pub mod em;
pub mod experiments;
pub mod filters;
pub mod models;
pub mod numerics;
