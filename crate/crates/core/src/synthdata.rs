//! Synthetic identities on the unit hypersphere and the dataset file format.
//!
//! Binary layout (all little-endian):
//!
//! ```text
//! magic   [u8; 4]  = b"AMDS"
//! version u32      = 1
//! n       u64      number of rows
//! d       u64      row dimension
//! k       u64      number of identities
//! points  f64[n*d] row-major
//! labels  u32[n]
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"AMDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 * 3;

/// Unit-norm tolerance for dataset rows.
pub const UNIT_TOL: f64 = 1e-6;

/// How many samples each identity receives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SampleCounts {
    Fixed {
        per_id: usize,
    },
    /// `⌈fraction_few · k⌉` identities get `n_few` samples, the rest `n_many`.
    LongTail {
        n_many: usize,
        fraction_few: f64,
        n_few: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub k: usize,
    pub d: usize,
    pub samples: SampleCounts,
    /// Effective concentration; samples are `normalize(mean + N(0, I)/√κ)`.
    pub noise_kappa: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidParameter(format!(
                "k must be >= 2, got {}",
                self.k
            )));
        }
        if self.d < 2 {
            return Err(Error::InvalidParameter(format!(
                "d must be >= 2, got {}",
                self.d
            )));
        }
        if self.noise_kappa.is_nan() || self.noise_kappa <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise_kappa must be > 0, got {}",
                self.noise_kappa
            )));
        }
        match self.samples {
            SampleCounts::Fixed { per_id: 0 } => {
                Err(Error::InvalidParameter("per_id must be >= 1".into()))
            }
            SampleCounts::LongTail {
                n_many,
                fraction_few,
                n_few,
            } => {
                if n_many == 0 || n_few == 0 {
                    return Err(Error::InvalidParameter("sample counts must be >= 1".into()));
                }
                if !(0.0..=1.0).contains(&fraction_few) {
                    return Err(Error::InvalidParameter(format!(
                        "fraction_few must lie in [0, 1], got {fraction_few}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Number of long-tail identities.
    pub fn few_shot_count(&self) -> usize {
        match self.samples {
            SampleCounts::Fixed { .. } => 0,
            SampleCounts::LongTail { fraction_few, .. } => {
                ((fraction_few * self.k as f64).ceil() as usize).min(self.k)
            }
        }
    }
}

/// Unit-norm points with identity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: Vec<f64>,
    labels: Vec<u32>,
    d: usize,
    k: usize,
}

impl Dataset {
    /// Validates shape, unit rows, label range and that every identity has at
    /// least one sample.
    pub fn new(points: Vec<f64>, labels: Vec<u32>, d: usize, k: usize) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::InvalidParameter("d and k must be positive".into()));
        }
        if points.len() != labels.len() * d {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * d,
                got: points.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::Empty("dataset has no rows".into()));
        }
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= k {
                return Err(Error::IndexOutOfRange { index: l, len: k });
            }
            counts[l] += 1;
            let norm = points[i * d..(i + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::Domain(format!("row {i} has norm {norm}")));
            }
        }
        if let Some(id) = counts.iter().position(|c| *c == 0) {
            return Err(Error::Domain(format!("identity {id} has no samples")));
        }
        Ok(Self {
            points,
            labels,
            d,
            k,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn num_ids(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn id_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }
}

pub(crate) fn normalize_in_place(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

/// A point drawn uniformly on the unit sphere in `d` dimensions.
pub(crate) fn random_unit<R: rand::Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        if normalize_in_place(&mut v) > 1e-12 {
            return v;
        }
    }
}

/// Draws identity means uniformly on the sphere, then perturbs and
/// re-normalizes each sample. Deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.k).map(|_| random_unit(&mut rng, spec.d)).collect();

    let counts: Vec<usize> = match spec.samples {
        SampleCounts::Fixed { per_id } => vec![per_id; spec.k],
        SampleCounts::LongTail { n_many, n_few, .. } => {
            let mut ids: Vec<usize> = (0..spec.k).collect();
            ids.shuffle(&mut rng);
            let mut counts = vec![n_many; spec.k];
            for &id in &ids[..spec.few_shot_count()] {
                counts[id] = n_few;
            }
            counts
        }
    };

    let sigma = 1.0 / spec.noise_kappa.sqrt();
    let total: usize = counts.iter().sum();
    let mut points = Vec::with_capacity(total * spec.d);
    let mut labels = Vec::with_capacity(total);
    for (id, (&n, mean)) in counts.iter().zip(&means).enumerate() {
        for _ in 0..n {
            let mut x: Vec<f64> = mean
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + sigma * z
                })
                .collect();
            if normalize_in_place(&mut x) <= 1e-12 {
                x = mean.clone();
            }
            points.extend_from_slice(&x);
            labels.push(id as u32);
        }
    }
    Dataset::new(points, labels, spec.d, spec.k)
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut buf =
        Vec::with_capacity(HEADER_LEN + dataset.points.len() * 8 + dataset.labels.len() * 4);
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(dataset.d as u64).to_le_bytes());
    buf.extend_from_slice(&(dataset.k as u64).to_le_bytes());
    for v in &dataset.points {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for l in &dataset.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Little-endian cursor over a byte buffer that reports truncation against
/// the originating path.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    pub(crate) fn need(&self, n: usize) -> Result<()> {
        let needed = self
            .pos
            .checked_add(n)
            .ok_or_else(|| Error::CorruptHeader {
                path: self.path.to_path_buf(),
                reason: "size overflow".into(),
            })?;
        if needed > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                needed,
                found: self.bytes.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        self.need(N)?;
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    pub(crate) fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        self.need(
            n.checked_mul(8)
                .ok_or_else(|| self.corrupt("size overflow"))?,
        )?;
        Ok((0..n)
            .map(|_| f64::from_le_bytes(self.take().expect("length checked")))
            .collect())
    }

    pub(crate) fn u32_vec(&mut self, n: usize) -> Result<Vec<u32>> {
        self.need(
            n.checked_mul(4)
                .ok_or_else(|| self.corrupt("size overflow"))?,
        )?;
        Ok((0..n)
            .map(|_| u32::from_le_bytes(self.take().expect("length checked")))
            .collect())
    }

    pub(crate) fn corrupt(&self, reason: &str) -> Error {
        Error::CorruptHeader {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    pub(crate) fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.corrupt(&format!(
                "{} trailing bytes after payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub(crate) fn checked_usize(v: u64, r: &Reader<'_>, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| r.corrupt(&format!("{what} = {v} does not fit in memory")))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    let magic: [u8; 4] = r.take()?;
    if magic != DATASET_MAGIC {
        return Err(r.corrupt(&format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let n = r.u64()?;
    let n = checked_usize(n, &r, "n")?;
    let d = r.u64()?;
    let d = checked_usize(d, &r, "d")?;
    let k = r.u64()?;
    let k = checked_usize(k, &r, "k")?;
    if d == 0 || k == 0 {
        return Err(r.corrupt("zero dimension or identity count"));
    }
    let points = r.f64_vec(n.checked_mul(d).ok_or_else(|| r.corrupt("n*d overflows"))?)?;
    let labels = r.u32_vec(n)?;
    r.expect_end()?;
    Dataset::new(points, labels, d, k)
}

/// Reads `label,x_1,...,x_d` rows; rows are L2-normalized on import and `k`
/// is one past the largest label. Blank lines and `#` comments are skipped.
pub fn import_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut d = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label: u32 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| Error::Parse(format!("{}:{}: bad label", path.display(), lineno + 1)))?;
        let mut row = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        match d {
            None => d = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.len(),
                })
            }
            _ => {}
        }
        if row.iter().any(|v| !v.is_finite()) || normalize_in_place(&mut row) == 0.0 {
            return Err(Error::Domain(format!(
                "{}:{}: row must be finite and nonzero",
                path.display(),
                lineno + 1
            )));
        }
        points.extend(row);
        labels.push(label);
    }
    let d = d.ok_or_else(|| Error::Empty(format!("{} has no rows", path.display())))?;
    let k = labels.iter().max().map(|m| *m as usize + 1).unwrap_or(0);
    Dataset::new(points, labels, d, k)
}
