//! Desk-scale trainer for an MLP embedder with a normalized prototype head.

use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alpha::AlphaParams;
use crate::error::{Error, Result};
use crate::evalkit::{cosines, sparsity_report, SparsityReport};
use crate::losses::{cosine_gradient, evaluate_loss, CosineVector, MarginConfig};
use crate::model::{Embed, Model, PrototypeMatrix};
use crate::synthdata::{normalize_in_place, random_unit, Dataset};

/// Solver settings as they appear in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaConfig {
    pub alpha: f64,
    #[serde(default = "default_bisect_tol")]
    pub bisect_tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_bisect_tol() -> f64 {
    AlphaParams::DEFAULT_BISECT_TOL
}

fn default_max_iters() -> usize {
    AlphaParams::DEFAULT_MAX_ITERS
}

impl AlphaConfig {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            bisect_tol: default_bisect_tol(),
            max_iters: default_max_iters(),
        }
    }

    pub fn params(&self) -> Result<AlphaParams> {
        AlphaParams::with_tolerances(self.alpha, self.bisect_tol, self.max_iters)
    }
}

/// One step of a step-wise learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrStep {
    pub epoch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Learning rate from each listed epoch onward; must start at epoch 0.
    pub lr_schedule: Vec<LrStep>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Re-initialize prototypes once this many epochs have completed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reinit_epoch: Option<usize>,
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_emb_dim")]
    pub emb_dim: usize,
    pub loss: MarginConfig,
    pub alpha: AlphaConfig,
}

fn default_batch_size() -> usize {
    64
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_hidden() -> usize {
    64
}

fn default_emb_dim() -> usize {
    32
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.hidden == 0 || self.emb_dim < 2 {
            return bad("hidden must be >= 1 and emb_dim >= 2".into());
        }
        match self.lr_schedule.first() {
            Some(s) if s.epoch == 0 => {}
            _ => return bad("lr_schedule must start at epoch 0".into()),
        }
        if self
            .lr_schedule
            .windows(2)
            .any(|w| w[0].epoch >= w[1].epoch)
        {
            return bad("lr_schedule epochs must be strictly increasing".into());
        }
        if self
            .lr_schedule
            .iter()
            .any(|s| !(s.lr > 0.0 && s.lr.is_finite()))
        {
            return bad("learning rates must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if let Some(r) = self.reinit_epoch {
            if r == 0 || r >= self.epochs {
                return bad(format!(
                    "reinit_epoch {r} must lie in [1, epochs={})",
                    self.epochs
                ));
            }
        }
        self.loss.validate()?;
        self.alpha.params()?;
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|s| s.epoch <= epoch)
            .last()
            .map(|s| s.lr)
            .unwrap_or(self.lr_schedule[0].lr)
    }
}

/// Unit-norm embeddings with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// `c_ij = ⟨e_i, w_j⟩` for every sample of the batch.
pub fn forward_cosines(batch: &EmbeddingBatch, w: &PrototypeMatrix) -> Result<Vec<CosineVector>> {
    batch.embeddings.iter().map(|e| cosines(e, w)).collect()
}

/// Gradients aligned with [`Model::params`]: `w1, b1, w2, b2, head`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub [Vec<f64>; 5]);

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self(model.params().map(|p| vec![0.0; p.len()]))
    }

    pub fn head(&self) -> &[f64] {
        &self.0[4]
    }

    fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Activations and loss outputs of one forward pass over a batch.
pub struct BatchForward {
    pub loss: f64,
    caches: Vec<crate::model::ForwardCache>,
    cosines: Vec<CosineVector>,
    /// `∂l_i/∂θ_i` per sample (not yet divided by the batch size).
    pub grad_logits: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean loss over the rows `idx` of `data`, with margin `cfg.margin`.
pub fn forward_batch(
    model: &Model,
    data: &Dataset,
    idx: &[usize],
    cfg: &MarginConfig,
    params: &AlphaParams,
) -> Result<BatchForward> {
    let w = model.prototypes()?;
    let mut out = BatchForward {
        loss: 0.0,
        caches: Vec::with_capacity(idx.len()),
        cosines: Vec::with_capacity(idx.len()),
        grad_logits: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        let cache = model.embedder.forward(data.row(i));
        let c = cosines(&cache.e, &w)?;
        let l = evaluate_loss(&c, data.label(i), cfg, params)?;
        out.loss += l.value;
        out.caches.push(cache);
        out.cosines.push(c);
        out.grad_logits.push(l.grad_logits);
    }
    out.loss /= idx.len() as f64;
    Ok(out)
}

/// Chain rule from per-sample logit gradients to every parameter of the mean
/// batch loss: scale and margin, dot product, both normalizations, then the
/// two dense layers.
pub fn backward(
    model: &Model,
    data: &Dataset,
    idx: &[usize],
    fwd: &BatchForward,
    grad_logits: &[Vec<f64>],
    cfg: &MarginConfig,
) -> Result<Gradients> {
    let emb = &model.embedder;
    let (d, k, hdim, din) = (emb.d_emb, model.k, emb.hidden, emb.d_in);
    if grad_logits.len() != idx.len() {
        return Err(Error::DimensionMismatch {
            expected: idx.len(),
            got: grad_logits.len(),
        });
    }
    let w = model.prototypes()?;
    let mut g = Gradients::zeros_like(model);
    // ∂L/∂w_j accumulated before the head normalization.
    let mut dw = vec![0.0; k * d];
    let inv_b = 1.0 / idx.len() as f64;

    for (n, &i) in idx.iter().enumerate() {
        let cache = &fwd.caches[n];
        if grad_logits[n].len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: grad_logits[n].len(),
            });
        }
        let gc: Vec<f64> = cosine_gradient(&fwd.cosines[n], data.label(i), cfg, &grad_logits[n])
            .into_iter()
            .map(|v| v * inv_b)
            .collect();

        let mut de = vec![0.0; d];
        for (j, &gj) in gc.iter().enumerate() {
            if gj == 0.0 {
                continue;
            }
            let wj = w.row(j);
            for t in 0..d {
                de[t] += gj * wj[t];
                dw[j * d + t] += gj * cache.e[t];
            }
        }
        // e = z/|z|  =>  ∂L/∂z = (I − e eᵀ) ∂L/∂e / |z|
        let proj = dot(&cache.e, &de);
        let dz: Vec<f64> = (0..d)
            .map(|t| (de[t] - cache.e[t] * proj) / cache.z_norm)
            .collect();

        let mut dh = vec![0.0; hdim];
        for (r, &dzr) in dz.iter().enumerate() {
            g.0[3][r] += dzr;
            let row = &emb.w2[r * hdim..(r + 1) * hdim];
            let grow = &mut g.0[2][r * hdim..(r + 1) * hdim];
            for ((gw, dhc), (&wc, &hc)) in grow
                .iter_mut()
                .zip(dh.iter_mut())
                .zip(row.iter().zip(&cache.h))
            {
                *gw += dzr * hc;
                *dhc += wc * dzr;
            }
        }
        let x = data.row(i);
        for (r, (&dhr, &hr)) in dh.iter().zip(&cache.h).enumerate() {
            let da = dhr * (1.0 - hr * hr);
            g.0[1][r] += da;
            for (gw, &xc) in g.0[0][r * din..(r + 1) * din].iter_mut().zip(x) {
                *gw += da * xc;
            }
        }
    }

    let norms = model.head_norms();
    for j in 0..k {
        let wj = w.row(j);
        let gj = &dw[j * d..(j + 1) * d];
        let proj = dot(wj, gj);
        for t in 0..d {
            g.0[4][j * d + t] = (gj[t] - wj[t] * proj) / norms[j];
        }
    }
    if !g.is_finite() {
        return Err(Error::NonFiniteGradient("backward pass".into()));
    }
    Ok(g)
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ v + (g + λ θ)`, `θ ← θ − η v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: [Vec<f64>; 5],
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: model.params().map(|p| vec![0.0; p.len()]),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, lr: f64) {
        for ((param, grad), buf) in model
            .params_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(&mut self.buffers)
        {
            for ((p, g), v) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= lr * *v;
            }
        }
    }

    /// Zeroes the head's momentum buffer.
    pub fn reset_head(&mut self) {
        self.buffers[4].iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn head_buffer(&self) -> &[f64] {
        &self.buffers[4]
    }
}

/// Backward pass, one optimizer step, and re-projection of the head rows.
#[allow(clippy::too_many_arguments)]
pub fn backward_step(
    model: &mut Model,
    opt: &mut Sgd,
    data: &Dataset,
    idx: &[usize],
    fwd: &BatchForward,
    grad_logits: &[Vec<f64>],
    cfg: &MarginConfig,
    lr: f64,
) -> Result<()> {
    let g = backward(model, data, idx, fwd, grad_logits, cfg)?;
    opt.step(model, &g, lr);
    model.renormalize_head();
    Ok(())
}

/// Per-identity sums of embeddings, L2-normalized. Identities with a zero sum
/// (or no samples) are redrawn uniformly on the sphere.
pub fn reinitialize_prototypes<E: Embed, R: rand::Rng>(
    data: &Dataset,
    embedder: &E,
    k: usize,
    rng: &mut R,
) -> Result<PrototypeMatrix> {
    let d = embedder.output_dim();
    if data.num_ids() > k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: data.num_ids(),
        });
    }
    let mut sums = vec![0.0; k * d];
    for i in 0..data.len() {
        let e = embedder.embed(data.row(i));
        let y = data.label(i);
        for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(&e) {
            *s += v;
        }
    }
    for j in 0..k {
        let row = &mut sums[j * d..(j + 1) * d];
        if normalize_in_place(row) <= 1e-12 {
            warn!("identity {j} has a zero embedding sum; drawing a random prototype");
            row.copy_from_slice(&random_unit(rng, d));
        }
    }
    PrototypeMatrix::new(sums, k, d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub margin: f64,
    pub report: SparsityReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub epochs: Vec<EpochMetrics>,
    pub events: Vec<String>,
}

impl MetricsLog {
    pub const CSV_HEADER: &'static str =
        "epoch,loss,misalignment_ids,misalignment_images,posterior_sparsity,onehot_fraction";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for m in &self.epochs {
            let r = &m.report;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                m.epoch,
                m.loss,
                r.misaligned_identity_fraction,
                r.misaligned_image_fraction,
                r.posterior_sparsity,
                r.onehot_fraction
            );
        }
        out
    }
}

/// Runs the epoch loop. All randomness derives from `cfg.seed`.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<(Model, MetricsLog)> {
    cfg.validate()?;
    let params = cfg.alpha.params()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(
        &mut rng,
        data.dim(),
        cfg.hidden,
        cfg.emb_dim,
        data.num_ids(),
    );
    let mut opt = Sgd::new(&model, cfg.momentum, cfg.weight_decay);
    let mut log = MetricsLog::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let n_batches = data.len().div_ceil(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let progress = epoch as f64 + b as f64 / n_batches as f64;
            let step_cfg = cfg.loss.with_margin(cfg.loss.effective_margin(progress));
            let fwd = forward_batch(&model, data, idx, &step_cfg, &params)?;
            loss_sum += fwd.loss * idx.len() as f64;
            let grads = fwd.grad_logits.clone();
            backward_step(&mut model, &mut opt, data, idx, &fwd, &grads, &step_cfg, lr)?;
        }
        let done = epoch + 1;
        let margin = cfg.loss.effective_margin(done as f64);
        let report = sparsity_report(
            data,
            &model.embedder,
            &model.prototypes()?,
            &cfg.loss.with_margin(margin),
            &params,
        )?;
        let metrics = EpochMetrics {
            epoch: done,
            loss: loss_sum / data.len() as f64,
            margin,
            report,
        };
        info!(
            "epoch {done}: loss {:.6} misaligned {:.4} sparsity {:.4}",
            metrics.loss, report.misaligned_image_fraction, report.posterior_sparsity
        );
        log.epochs.push(metrics);

        if cfg.reinit_epoch == Some(done) {
            let w = reinitialize_prototypes(data, &model.embedder, model.k, &mut rng)?;
            model.set_prototypes(w)?;
            opt.reset_head();
            let after = sparsity_report(
                data,
                &model.embedder,
                &model.prototypes()?,
                &cfg.loss.with_margin(margin),
                &params,
            )?;
            let event = format!(
                "reinit epoch={done} misaligned_images_before={} misaligned_images_after={}",
                report.misaligned_image_fraction, after.misaligned_image_fraction
            );
            info!("{event}");
            log.events.push(event);
        }
    }
    Ok((model, log))
}
