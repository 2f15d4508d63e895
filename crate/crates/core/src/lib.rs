//! Margin-equipped α-divergence losses (Q-Margin, A3M, A3M with prototype
//! re-initialization) built on a bisection α-softargmax solver, together with
//! a small verification pipeline: synthetic identities, a prototype-head
//! trainer, FRR@FAR/DET evaluation and posterior sparsity diagnostics.

pub mod alpha;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod synthdata;
pub mod trainer;

pub use alpha::{
    alpha_softargmax, alpha_softmax, divergence, f_conj_prime, f_prime, f_value, root_find_tau,
    AlphaParams, LogitVector, PosteriorDistribution, ReferenceMeasure,
};
pub use error::{Error, Result};
pub use losses::{
    a3m_loss, apply_arcface_margin, apply_cosface_margin, baseline_ce_loss, build_q_margin_measure,
    fy_loss, q_margin_loss, CosineVector, LossOutput, MarginConfig, MarginMode,
};
