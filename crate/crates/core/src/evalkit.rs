//! Verification metrics and posterior diagnostics.
//!
//! Thresholds follow one convention throughout: a trial is accepted when its
//! score is `>= t`. FAR is the accepted fraction of impostor trials, FRR the
//! rejected fraction of genuine trials.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alpha::{AlphaParams, PosteriorDistribution};
use crate::error::{Error, Result};
use crate::losses::{evaluate_loss, CosineVector, MarginConfig};
use crate::model::{Embed, PrototypeMatrix};
use crate::synthdata::Dataset;

/// One verification trial between two dataset rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trial {
    pub i: usize,
    pub j: usize,
    pub same: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl TrialScoreSet {
    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::Empty(format!(
                "need genuine and impostor scores (got {} / {})",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self
            .genuine
            .iter()
            .chain(&self.impostor)
            .any(|s| !s.is_finite())
        {
            return Err(Error::Domain("scores must be finite".into()));
        }
        Ok(())
    }
}

/// Samples distinct genuine and impostor pairs; deterministic in `seed`.
///
/// Genuine pairs need an identity with at least two rows; requests beyond the
/// number of available distinct pairs are capped.
pub fn make_trials(
    labels: &[u32],
    n_genuine: usize,
    n_impostor: usize,
    seed: u64,
) -> Result<Vec<Trial>> {
    let n = labels.len();
    if n < 2 {
        return Err(Error::Empty(
            "need at least two rows to build trials".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_id: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    let groups: Vec<&Vec<usize>> = by_id.values().filter(|g| g.len() >= 2).collect();
    let genuine_avail: usize = groups.iter().map(|g| g.len() * (g.len() - 1) / 2).sum();
    let impostor_avail = n * (n - 1) / 2
        - by_id
            .values()
            .map(|g| g.len() * (g.len() - 1) / 2)
            .sum::<usize>();

    let mut seen = std::collections::HashSet::new();
    let mut trials = Vec::with_capacity(n_genuine + n_impostor);
    let target_g = n_genuine.min(genuine_avail);
    while trials.len() < target_g {
        let g = groups[rng.random_range(0..groups.len())];
        let a = g[rng.random_range(0..g.len())];
        let b = g[rng.random_range(0..g.len())];
        if a != b && seen.insert((a.min(b), a.max(b))) {
            trials.push(Trial {
                i: a.min(b),
                j: a.max(b),
                same: true,
            });
        }
    }
    let target_i = target_g + n_impostor.min(impostor_avail);
    while trials.len() < target_i {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if labels[a] != labels[b] && seen.insert((a.min(b), a.max(b))) {
            trials.push(Trial {
                i: a.min(b),
                j: a.max(b),
                same: false,
            });
        }
    }
    Ok(trials)
}

/// Writes `i,j,same` lines (`same` is 0 or 1).
pub fn save_trials(trials: &[Trial], path: &Path) -> Result<()> {
    let mut out = String::from("i,j,same\n");
    for t in trials {
        out.push_str(&format!("{},{},{}\n", t.i, t.j, u8::from(t.same)));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path)?;
    let mut trials = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (lineno == 0 && line.starts_with('i')) {
            continue;
        }
        let bad = || {
            Error::Parse(format!(
                "{}:{}: expected i,j,same",
                path.display(),
                lineno + 1
            ))
        };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(bad());
        }
        let i = f[0].parse().map_err(|_| bad())?;
        let j = f[1].parse().map_err(|_| bad())?;
        let same = match f[2] {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(bad()),
        };
        trials.push(Trial { i, j, same });
    }
    Ok(trials)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine score of each trial, routed by its same-identity flag.
pub fn score_trials<E: Embed>(
    dataset: &Dataset,
    embedder: &E,
    trials: &[Trial],
) -> Result<TrialScoreSet> {
    if embedder.input_dim() != dataset.dim() {
        return Err(Error::DimensionMismatch {
            expected: embedder.input_dim(),
            got: dataset.dim(),
        });
    }
    let n = dataset.len();
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut scores = TrialScoreSet::default();
    for t in trials {
        for idx in [t.i, t.j] {
            if idx >= n {
                return Err(Error::IndexOutOfRange { index: idx, len: n });
            }
            if cache[idx].is_none() {
                cache[idx] = Some(embedder.embed(dataset.row(idx)));
            }
        }
        let s = dot(cache[t.i].as_ref().unwrap(), cache[t.j].as_ref().unwrap());
        if t.same {
            scores.genuine.push(s);
        } else {
            scores.impostor.push(s);
        }
    }
    Ok(scores)
}

/// Result of an FRR@FAR query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FarOutcome {
    Attained {
        frr: f64,
        threshold: f64,
        /// FAR actually realised at `threshold` (≤ target).
        far: f64,
    },
    /// No impostor-score threshold reaches the target; `min_far` is the
    /// smallest FAR the impostor set can resolve.
    Unattainable { min_far: f64 },
}

impl FarOutcome {
    pub fn frr(&self) -> Option<f64> {
        match self {
            FarOutcome::Attained { frr, .. } => Some(*frr),
            FarOutcome::Unattainable { .. } => None,
        }
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of entries of an ascending slice that are `< t`.
fn count_below(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|s| *s < t)
}

/// Smallest impostor score `t` whose FAR (impostors `>= t`) is at most
/// `far_target`, and the FRR (genuines `< t`) there.
pub fn frr_at_far(scores: &TrialScoreSet, far_target: f64) -> Result<FarOutcome> {
    scores.check()?;
    if !(far_target > 0.0 && far_target <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "far_target must lie in (0, 1], got {far_target}"
        )));
    }
    let imp = sorted(&scores.impostor);
    let gen = sorted(&scores.genuine);
    let n_imp = imp.len() as f64;
    // FAR at impostor score t is (n - #below(t))/n; it decreases with t, so
    // walk distinct values upward and stop at the first that qualifies.
    let mut idx = 0;
    while idx < imp.len() {
        let t = imp[idx];
        let far = (imp.len() - idx) as f64 / n_imp;
        if far <= far_target {
            let frr = count_below(&gen, t) as f64 / gen.len() as f64;
            return Ok(FarOutcome::Attained {
                frr,
                threshold: t,
                far,
            });
        }
        idx = imp.partition_point(|s| *s <= t);
    }
    let top = imp[imp.len() - 1];
    let min_far = (imp.len() - count_below(&imp, top)) as f64 / n_imp;
    Ok(FarOutcome::Unattainable { min_far })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub far: f64,
    pub frr: f64,
    pub threshold: f64,
}

/// Operating points at every distinct score, ordered by FAR ascending.
pub fn det_points(scores: &TrialScoreSet) -> Result<Vec<DetPoint>> {
    scores.check()?;
    let imp = sorted(&scores.impostor);
    let gen = sorted(&scores.genuine);
    let mut thresholds: Vec<f64> = imp.iter().chain(&gen).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    Ok(thresholds
        .into_iter()
        .map(|t| DetPoint {
            far: (imp.len() - count_below(&imp, t)) as f64 / imp.len() as f64,
            frr: count_below(&gen, t) as f64 / gen.len() as f64,
            threshold: t,
        })
        .collect())
}

/// Writes `far,frr,threshold` rows.
pub fn write_det_csv(points: &[DetPoint], path: &Path) -> Result<()> {
    let mut out = String::from("far,frr,threshold\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.far, p.frr, p.threshold));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Mean FRR over `log10(FAR)` in `[far_lo, far_hi]`, by the trapezoid rule on
/// `n_grid` log-spaced points. FRR at each grid point is the step value from
/// [`frr_at_far`]; grid points below the impostor resolution are skipped.
pub fn mean_frr_log_far(
    scores: &TrialScoreSet,
    far_lo: f64,
    far_hi: f64,
    n_grid: usize,
) -> Result<f64> {
    if !(far_lo > 0.0 && far_lo < far_hi && far_hi <= 1.0) || n_grid < 2 {
        return Err(Error::InvalidParameter(format!(
            "need 0 < far_lo < far_hi <= 1 and n_grid >= 2 (got {far_lo}, {far_hi}, {n_grid})"
        )));
    }
    let (a, b) = (far_lo.log10(), far_hi.log10());
    let mut pts = Vec::with_capacity(n_grid);
    for i in 0..n_grid {
        let x = a + (b - a) * i as f64 / (n_grid - 1) as f64;
        if let Some(frr) = frr_at_far(scores, 10f64.powf(x).min(1.0))?.frr() {
            pts.push((x, frr));
        }
    }
    if pts.len() < 2 {
        return Err(Error::InvalidParameter(
            "FAR interval lies below the impostor resolution".into(),
        ));
    }
    let area: f64 = pts
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
        .sum();
    Ok(area / (pts[pts.len() - 1].0 - pts[0].0))
}

/// Relative FRR reduction of `system` over `baseline`, averaged over log-FAR.
pub fn avg_relative_improvement(
    baseline: &TrialScoreSet,
    system: &TrialScoreSet,
    far_lo: f64,
    far_hi: f64,
    n_grid: usize,
) -> Result<f64> {
    let base = mean_frr_log_far(baseline, far_lo, far_hi, n_grid)?;
    let sys = mean_frr_log_far(system, far_lo, far_hi, n_grid)?;
    if base == 0.0 {
        return Err(Error::Domain(
            "baseline FRR is zero over the interval".into(),
        ));
    }
    Ok((base - sys) / base)
}

/// Exact-zero posterior statistics over a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SparsityReport {
    pub misaligned_identity_fraction: f64,
    pub misaligned_image_fraction: f64,
    pub posterior_sparsity: f64,
    pub onehot_fraction: f64,
}

impl fmt::Display for SparsityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "misaligned_identity_fraction = {}",
            self.misaligned_identity_fraction
        )?;
        writeln!(
            f,
            "misaligned_image_fraction = {}",
            self.misaligned_image_fraction
        )?;
        writeln!(f, "posterior_sparsity = {}", self.posterior_sparsity)?;
        write!(f, "onehot_fraction = {}", self.onehot_fraction)
    }
}

/// Aggregates `(label, posterior)` pairs. Identities that never occur are not
/// counted toward the identity fraction.
pub fn summarize_posteriors<'a, I>(items: I) -> Result<SparsityReport>
where
    I: IntoIterator<Item = (usize, &'a PosteriorDistribution)>,
{
    let mut n = 0usize;
    let mut misaligned = 0usize;
    let mut onehot = 0usize;
    let mut zero_frac = 0.0;
    // identity -> (examples, misaligned examples)
    let mut per_id: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for (y, p) in items {
        if y >= p.k() {
            return Err(Error::IndexOutOfRange {
                index: y,
                len: p.k(),
            });
        }
        n += 1;
        let entry = per_id.entry(y).or_default();
        entry.0 += 1;
        if p.prob(y) == 0.0 {
            misaligned += 1;
            entry.1 += 1;
        }
        if p.support_len() == 1 {
            onehot += 1;
        }
        zero_frac += p.zero_count() as f64 / p.k() as f64;
    }
    if n == 0 {
        return Err(Error::Empty("no posteriors to summarize".into()));
    }
    let ids = per_id.len() as f64;
    let all_bad = per_id.values().filter(|(c, m)| c == m).count() as f64;
    Ok(SparsityReport {
        misaligned_identity_fraction: all_bad / ids,
        misaligned_image_fraction: misaligned as f64 / n as f64,
        posterior_sparsity: zero_frac / n as f64,
        onehot_fraction: onehot as f64 / n as f64,
    })
}

/// Cosines of one embedding against every prototype.
pub fn cosines(e: &[f64], w: &PrototypeMatrix) -> Result<CosineVector> {
    if e.len() != w.dim() {
        return Err(Error::DimensionMismatch {
            expected: w.dim(),
            got: e.len(),
        });
    }
    CosineVector::new(
        (0..w.k())
            .map(|j| dot(e, w.row(j)).clamp(-1.0, 1.0))
            .collect(),
    )
}

/// Evaluates the loss posterior for every example and summarizes exact zeros.
pub fn sparsity_report<E: Embed>(
    dataset: &Dataset,
    embedder: &E,
    w: &PrototypeMatrix,
    loss: &MarginConfig,
    params: &AlphaParams,
) -> Result<SparsityReport> {
    if dataset.num_ids() > w.k() {
        return Err(Error::DimensionMismatch {
            expected: w.k(),
            got: dataset.num_ids(),
        });
    }
    let mut posts = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        let c = cosines(&embedder.embed(dataset.row(i)), w)?;
        let y = dataset.label(i);
        posts.push((y, evaluate_loss(&c, y, loss, params)?.posterior));
    }
    summarize_posteriors(posts.iter().map(|(y, p)| (*y, p)))
}
