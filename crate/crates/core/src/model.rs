//! Feed-forward embedder and normalized prototype head.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic   [u8; 4] = b"AMCK"
//! version u32     = 1
//! d_in, hidden, d_emb, k : u64
//! w1 f64[hidden*d_in], b1 f64[hidden], w2 f64[d_emb*hidden], b2 f64[d_emb],
//! head f64[k*d_emb]
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::synthdata::{checked_usize, normalize_in_place, random_unit, Reader};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Maps an input row to a unit-norm embedding.
pub trait Embed {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn embed(&self, x: &[f64]) -> Vec<f64>;
}

/// L2-normalizes its input unchanged otherwise.
#[derive(Debug, Clone, Copy)]
pub struct IdentityEmbedder {
    pub dim: usize,
}

impl Embed for IdentityEmbedder {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut e = x.to_vec();
        normalize_in_place(&mut e);
        e
    }
}

/// `k` unit-norm prototype rows of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMatrix {
    rows: Vec<f64>,
    k: usize,
    d: usize,
}

impl PrototypeMatrix {
    pub const UNIT_TOL: f64 = 1e-6;

    pub fn new(rows: Vec<f64>, k: usize, d: usize) -> Result<Self> {
        if rows.len() != k * d {
            return Err(Error::DimensionMismatch {
                expected: k * d,
                got: rows.len(),
            });
        }
        for j in 0..k {
            let n = rows[j * d..(j + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if (n - 1.0).abs() > Self::UNIT_TOL {
                return Err(Error::Domain(format!("prototype {j} has norm {n}")));
            }
        }
        Ok(Self { rows, k, d })
    }

    /// Normalizes each row of `raw`; zero rows are rejected.
    pub fn from_unnormalized(mut raw: Vec<f64>, k: usize, d: usize) -> Result<Self> {
        if raw.len() != k * d {
            return Err(Error::DimensionMismatch {
                expected: k * d,
                got: raw.len(),
            });
        }
        for j in 0..k {
            if normalize_in_place(&mut raw[j * d..(j + 1) * d]) == 0.0 {
                return Err(Error::Domain(format!("prototype {j} is zero")));
            }
        }
        Ok(Self { rows: raw, k, d })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.rows[j * self.d..(j + 1) * self.d]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.rows
    }
}

/// Two-layer perceptron with tanh hidden units and L2-normalized output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEmbedder {
    pub d_in: usize,
    pub hidden: usize,
    pub d_emb: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub h: Vec<f64>,
    pub z_norm: f64,
    pub e: Vec<f64>,
}

impl MlpEmbedder {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, hidden: usize, d_emb: usize) -> Self {
        let mut glorot = |fan_in: usize, fan_out: usize| -> Vec<f64> {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out)
                .map(|_| rng.random_range(-a..a))
                .collect()
        };
        let w1 = glorot(d_in, hidden);
        let w2 = glorot(hidden, d_emb);
        Self {
            d_in,
            hidden,
            d_emb,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; d_emb],
        }
    }

    pub fn forward(&self, x: &[f64]) -> ForwardCache {
        debug_assert_eq!(x.len(), self.d_in);
        let h: Vec<f64> = (0..self.hidden)
            .map(|r| {
                let row = &self.w1[r * self.d_in..(r + 1) * self.d_in];
                (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[r]).tanh()
            })
            .collect();
        let mut e: Vec<f64> = (0..self.d_emb)
            .map(|r| {
                let row = &self.w2[r * self.hidden..(r + 1) * self.hidden];
                row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + self.b2[r]
            })
            .collect();
        let z_norm = normalize_in_place(&mut e);
        ForwardCache { h, z_norm, e }
    }
}

impl Embed for MlpEmbedder {
    fn input_dim(&self) -> usize {
        self.d_in
    }

    fn output_dim(&self) -> usize {
        self.d_emb
    }

    fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).e
    }
}

/// Embedder plus raw head weights. Head rows are kept on the unit sphere
/// between optimizer steps; the forward pass normalizes them regardless.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub embedder: MlpEmbedder,
    pub head: Vec<f64>,
    pub k: usize,
}

impl Model {
    pub fn init<R: Rng>(rng: &mut R, d_in: usize, hidden: usize, d_emb: usize, k: usize) -> Self {
        let embedder = MlpEmbedder::init(rng, d_in, hidden, d_emb);
        let head = (0..k).flat_map(|_| random_unit(rng, d_emb)).collect();
        Self { embedder, head, k }
    }

    pub fn d_emb(&self) -> usize {
        self.embedder.d_emb
    }

    pub fn head_norms(&self) -> Vec<f64> {
        let d = self.d_emb();
        self.head
            .chunks(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn prototypes(&self) -> Result<PrototypeMatrix> {
        PrototypeMatrix::from_unnormalized(self.head.clone(), self.k, self.d_emb())
    }

    pub fn set_prototypes(&mut self, w: PrototypeMatrix) -> Result<()> {
        if w.k() != self.k || w.dim() != self.d_emb() {
            return Err(Error::DimensionMismatch {
                expected: self.k * self.d_emb(),
                got: w.k() * w.dim(),
            });
        }
        self.head = w.into_inner();
        Ok(())
    }

    /// Projects every head row back onto the unit sphere.
    pub fn renormalize_head(&mut self) {
        let d = self.d_emb();
        for row in self.head.chunks_mut(d) {
            normalize_in_place(row);
        }
    }

    pub fn params(&self) -> [&Vec<f64>; 5] {
        let e = &self.embedder;
        [&e.w1, &e.b1, &e.w2, &e.b2, &self.head]
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 5] {
        let e = &mut self.embedder;
        [&mut e.w1, &mut e.b1, &mut e.w2, &mut e.b2, &mut self.head]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let e = &self.embedder;
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [e.d_in, e.hidden, e.d_emb, self.k] {
            buf.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for p in self.params() {
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Reader::new(&bytes, path);
        let magic: [u8; 4] = r.take()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(r.corrupt(&format!("bad magic {magic:?}")));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut dims = [0usize; 4];
        for (slot, name) in dims.iter_mut().zip(["d_in", "hidden", "d_emb", "k"]) {
            let v = r.u64()?;
            *slot = checked_usize(v, &r, name)?;
            if *slot == 0 {
                return Err(r.corrupt(&format!("{name} is zero")));
            }
        }
        let [d_in, hidden, d_emb, k] = dims;
        let size = |a: usize, b: usize| a.checked_mul(b).ok_or_else(|| r.corrupt("size overflow"));
        let (n1, n2, nh) = (size(hidden, d_in)?, size(d_emb, hidden)?, size(k, d_emb)?);
        let w1 = r.f64_vec(n1)?;
        let b1 = r.f64_vec(hidden)?;
        let w2 = r.f64_vec(n2)?;
        let b2 = r.f64_vec(d_emb)?;
        let head = r.f64_vec(nh)?;
        r.expect_end()?;
        Ok(Self {
            embedder: MlpEmbedder {
                d_in,
                hidden,
                d_emb,
                w1,
                b1,
                w2,
                b2,
            },
            head,
            k,
        })
    }
}
