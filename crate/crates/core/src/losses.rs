//! Margin losses over cosine similarities against normalized prototypes.
//!
//! Four modes share one interface:
//!
//! * `q_margin`: α-divergence Fenchel-Young loss on `s·c` with the margin
//!   carried by the reference measure, `q_y = exp(−s·m)`.
//! * `a3m`: α-divergence Fenchel-Young loss on ArcFace-modified logits with a
//!   uniform reference measure.
//! * `cosface`, `arcface`: cross-entropy baselines on margin-modified logits.
//!
//! Every loss reports `∂l/∂θ` on its logits; [`cosine_gradient`] carries it
//! back to the raw cosines.

use serde::{Deserialize, Serialize};

use crate::alpha::{
    alpha_softargmax, divergence, softmax_value_at, AlphaParams, LogitVector,
    PosteriorDistribution, ReferenceMeasure,
};
use crate::error::{Error, Result};

/// Lower/upper clamp applied to the arccos argument of the angular margin.
pub const ARCFACE_CLAMP: f64 = 1.0 - 1e-7;

/// Slack allowed on cosine inputs beyond `[-1, 1]` (rounding in dot products).
pub const COSINE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    QMargin,
    A3m,
    #[serde(rename = "cosface")]
    CosFace,
    #[serde(rename = "arcface")]
    ArcFace,
}

impl MarginMode {
    /// Whether the mode uses the α-divergence solver (and thus has a sparse
    /// posterior).
    pub fn is_alpha(&self) -> bool {
        matches!(self, MarginMode::QMargin | MarginMode::A3m)
    }

    pub fn name(&self) -> &'static str {
        match self {
            MarginMode::QMargin => "q_margin",
            MarginMode::A3m => "a3m",
            MarginMode::CosFace => "cosface",
            MarginMode::ArcFace => "arcface",
        }
    }
}

impl std::str::FromStr for MarginMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q_margin" => Ok(MarginMode::QMargin),
            "a3m" => Ok(MarginMode::A3m),
            "cosface" => Ok(MarginMode::CosFace),
            "arcface" => Ok(MarginMode::ArcFace),
            other => Err(Error::InvalidParameter(format!(
                "unknown margin mode {other:?}"
            ))),
        }
    }
}

/// Exponential ramp of the margin from 0 to its target between two epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    pub start_epoch: usize,
    pub end_epoch: usize,
}

impl AnnealSchedule {
    /// Residual fraction of the ramp left at its start (`1 − ratio` decays from
    /// 1 to this value geometrically).
    const RAMP_FLOOR: f64 = 1e-3;

    /// Fraction of the target margin in effect at a (fractional) epoch.
    pub fn ratio(&self, epoch: f64) -> f64 {
        let start = self.start_epoch as f64;
        let end = self.end_epoch as f64;
        if epoch <= start {
            return 0.0;
        }
        if epoch >= end {
            return 1.0;
        }
        let t = (epoch - start) / (end - start);
        (1.0 - Self::RAMP_FLOOR.powf(t)) / (1.0 - Self::RAMP_FLOOR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
    pub mode: MarginMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anneal: Option<AnnealSchedule>,
}

impl MarginConfig {
    pub fn new(mode: MarginMode, scale: f64, margin: f64) -> Result<Self> {
        let cfg = Self {
            scale,
            margin,
            mode,
            anneal: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scale must be > 0, got {}",
                self.scale
            )));
        }
        if !(self.margin >= 0.0 && self.margin < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "margin must lie in [0, 1), got {}",
                self.margin
            )));
        }
        if let Some(a) = self.anneal {
            if a.start_epoch >= a.end_epoch {
                return Err(Error::InvalidParameter(format!(
                    "anneal start {} must precede end {}",
                    a.start_epoch, a.end_epoch
                )));
            }
        }
        Ok(())
    }

    /// Margin in effect at a (fractional) epoch under the anneal schedule.
    pub fn effective_margin(&self, epoch: f64) -> f64 {
        match self.anneal {
            Some(a) => self.margin * a.ratio(epoch),
            None => self.margin,
        }
    }

    /// A copy with the margin replaced and no schedule, as handed to the
    /// stateless loss functions.
    pub fn with_margin(&self, margin: f64) -> Self {
        Self {
            margin,
            anneal: None,
            ..*self
        }
    }

    fn expect_mode(&self, allowed: &[MarginMode], op: &str) -> Result<()> {
        if allowed.contains(&self.mode) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "{op} called with mode {}",
                self.mode.name()
            )))
        }
    }
}

/// Cosine similarities between one embedding and every prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineVector(Vec<f64>);

impl CosineVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(j) = values
            .iter()
            .position(|c| !(c.is_finite() && c.abs() <= 1.0 + COSINE_SLACK))
        {
            return Err(Error::Domain(format!(
                "cosine {j} = {} outside [-1, 1]",
                values[j]
            )));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_logits: Vec<f64>,
    pub posterior: PosteriorDistribution,
}

fn check_label(y: usize, k: usize) -> Result<()> {
    if y >= k {
        return Err(Error::IndexOutOfRange { index: y, len: k });
    }
    Ok(())
}

fn p_minus_onehot(p: &PosteriorDistribution, y: usize) -> Vec<f64> {
    let mut g = p.to_dense();
    g[y] -= 1.0;
    g
}

/// Fenchel-Young loss `softmax_f(θ) + D_f(e_y : q) − θ_y` with gradient
/// `p* − e_y`.
pub fn fy_loss(
    theta: &LogitVector,
    y: usize,
    q: &ReferenceMeasure,
    params: &AlphaParams,
) -> Result<LossOutput> {
    let k = theta.len();
    check_label(y, k)?;
    let p = alpha_softargmax(theta, q, params)?;
    let mut onehot = vec![0.0; k];
    onehot[y] = 1.0;
    let value = softmax_value_at(theta, q, &p, params)? + divergence(&onehot, q, params)?
        - theta.as_slice()[y];
    Ok(LossOutput {
        value,
        grad_logits: p_minus_onehot(&p, y),
        posterior: p,
    })
}

/// Reference measure with the target class down-weighted to `exp(−s·m)`.
pub fn build_q_margin_measure(y: usize, k: usize, cfg: &MarginConfig) -> Result<ReferenceMeasure> {
    check_label(y, k)?;
    let mut q = vec![1.0; k];
    q[y] = (-cfg.scale * cfg.margin).exp();
    ReferenceMeasure::new(q)
}

fn scaled(c: &[f64], s: f64) -> Result<LogitVector> {
    LogitVector::new(c.iter().map(|v| s * v).collect())
}

pub fn q_margin_loss(
    c: &CosineVector,
    y: usize,
    cfg: &MarginConfig,
    params: &AlphaParams,
) -> Result<LossOutput> {
    cfg.expect_mode(&[MarginMode::QMargin], "q_margin_loss")?;
    let q = build_q_margin_measure(y, c.len(), cfg)?;
    fy_loss(&scaled(c.as_slice(), cfg.scale)?, y, &q, params)
}

fn clamp_for_acos(c: f64) -> f64 {
    c.clamp(-ARCFACE_CLAMP, ARCFACE_CLAMP)
}

/// Replaces the target cosine by `cos(arccos(c_y) + m)`.
pub fn apply_arcface_margin(c: &CosineVector, y: usize, m: f64) -> Result<CosineVector> {
    check_label(y, c.len())?;
    let mut out = c.0.clone();
    if m != 0.0 {
        out[y] = (clamp_for_acos(out[y]).acos() + m).cos();
    }
    Ok(CosineVector(out))
}

/// Replaces the target cosine by `c_y − m`.
pub fn apply_cosface_margin(c: &CosineVector, y: usize, m: f64) -> Result<CosineVector> {
    check_label(y, c.len())?;
    let mut out = c.0.clone();
    out[y] -= m;
    Ok(CosineVector(out))
}

pub fn a3m_loss(
    c: &CosineVector,
    y: usize,
    cfg: &MarginConfig,
    params: &AlphaParams,
) -> Result<LossOutput> {
    cfg.expect_mode(&[MarginMode::A3m], "a3m_loss")?;
    let cm = apply_arcface_margin(c, y, cfg.margin)?;
    fy_loss(
        &scaled(cm.as_slice(), cfg.scale)?,
        y,
        &ReferenceMeasure::ones(c.len()),
        params,
    )
}

/// Cross-entropy of the ordinary softargmax over `logits`.
fn cross_entropy(logits: &[f64], y: usize) -> Result<LossOutput> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|t| (t - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let value = max + z.ln() - logits[y];
    let p: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let posterior = PosteriorDistribution::from_dense(&p)?;
    let mut grad = p;
    grad[y] -= 1.0;
    Ok(LossOutput {
        value,
        grad_logits: grad,
        posterior,
    })
}

/// ArcFace/CosFace: cross-entropy over the margin-modified scaled cosines.
pub fn baseline_ce_loss(c: &CosineVector, y: usize, cfg: &MarginConfig) -> Result<LossOutput> {
    cfg.expect_mode(
        &[MarginMode::CosFace, MarginMode::ArcFace],
        "baseline_ce_loss",
    )?;
    let logits = margin_logits(c, y, cfg)?;
    cross_entropy(logits.as_slice(), y)
}

/// The logits a mode feeds to its loss: `s·c` for Q-Margin, `s·c'` with the
/// mode's geometric margin otherwise.
pub fn margin_logits(c: &CosineVector, y: usize, cfg: &MarginConfig) -> Result<LogitVector> {
    let cm = match cfg.mode {
        MarginMode::QMargin => {
            check_label(y, c.len())?;
            c.clone()
        }
        MarginMode::CosFace => apply_cosface_margin(c, y, cfg.margin)?,
        MarginMode::A3m | MarginMode::ArcFace => apply_arcface_margin(c, y, cfg.margin)?,
    };
    scaled(cm.as_slice(), cfg.scale)
}

/// Dispatches on `cfg.mode`.
pub fn evaluate_loss(
    c: &CosineVector,
    y: usize,
    cfg: &MarginConfig,
    params: &AlphaParams,
) -> Result<LossOutput> {
    match cfg.mode {
        MarginMode::QMargin => q_margin_loss(c, y, cfg, params),
        MarginMode::A3m => a3m_loss(c, y, cfg, params),
        MarginMode::CosFace | MarginMode::ArcFace => baseline_ce_loss(c, y, cfg),
    }
}

/// `dc'_y/dc_y` of the target-cosine transform.
pub fn margin_derivative(c_y: f64, cfg: &MarginConfig) -> f64 {
    match cfg.mode {
        MarginMode::A3m | MarginMode::ArcFace if cfg.margin != 0.0 => {
            let phi = clamp_for_acos(c_y).acos();
            (phi + cfg.margin).sin() / phi.sin()
        }
        _ => 1.0,
    }
}

/// Maps `∂l/∂θ` to `∂l/∂c` through the scale and the target margin.
pub fn cosine_gradient(
    c: &CosineVector,
    y: usize,
    cfg: &MarginConfig,
    grad_logits: &[f64],
) -> Vec<f64> {
    let mut g: Vec<f64> = grad_logits.iter().map(|v| cfg.scale * v).collect();
    g[y] *= margin_derivative(c.as_slice()[y], cfg);
    g
}
