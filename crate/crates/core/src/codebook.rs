//! Learned code vectors, nearest-code quantization and the VQ loss.
//!
//! Feature tensors are channels-first `[N, c, h, w, d]`; index grids are
//! `[N, h, w, d]` in the same spatial order.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{mse, Tensor};

#[derive(Clone, Debug)]
pub struct Codebook {
    /// `[K, c]` trainable table.
    pub codes: Tensor,
}

/// Nearest-code selection for a feature tensor.
#[derive(Clone, Debug)]
pub struct CodeAssignment {
    pub indices: Vec<usize>,
    /// `[N, h, w, d]`.
    pub grid: Vec<usize>,
    /// Selected code vectors `[N, c, h, w, d]`, differentiable w.r.t. the codebook.
    pub quantized: Tensor,
}

impl Codebook {
    pub fn from_table(codes: Tensor) -> Result<Self> {
        let s = codes.shape();
        if s.len() != 2 || s[0] < 2 || s[1] == 0 {
            return Err(Error::Parameter(format!("codebook must be [K >= 2, c >= 1], got {s:?}")));
        }
        if codes.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("codebook holds non-finite values".into()));
        }
        codes.set_requires_grad(true);
        Ok(Codebook { codes })
    }

    /// `K` codes with i.i.d. normal entries of standard deviation `scale`.
    pub fn random(k: usize, c: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Parameter(e.to_string()))?;
        let data = (0..k * c).map(|_| normal.sample(&mut rng)).collect();
        Self::from_table(Tensor::param(&[k, c], data)?)
    }

    /// Codes drawn from the feature vectors of a batch (without replacement
    /// when there are enough), with a little noise so repeats stay distinct.
    pub fn from_features(features: &Tensor, k: usize, seed: u64) -> Result<Self> {
        let (vectors, c) = feature_vectors(features)?;
        let n = vectors.len() / c;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = if n >= k {
            sample(&mut rng, n, k).into_vec()
        } else {
            (0..k).map(|i| i % n).collect()
        };
        let mean = vectors.iter().sum::<f64>() / vectors.len() as f64;
        let sd = (vectors.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vectors.len() as f64).sqrt();
        let jitter = Normal::new(0.0, 1e-3 * sd.max(1e-6)).expect("positive sd");
        let mut table = Vec::with_capacity(k * c);
        for &p in &picks {
            for ch in 0..c {
                table.push(vectors[p * c + ch] + jitter.sample(&mut rng));
            }
        }
        Self::from_table(Tensor::param(&[k, c], table)?)
    }

    /// Move every code with a zero count onto a randomly chosen feature
    /// vector (plus a little noise). Returns how many codes moved.
    pub fn restart_unused(&self, counts: &[u64], features: &Tensor, seed: u64) -> Result<usize> {
        if counts.len() != self.size() {
            return Err(Error::Shape(format!("{} usage counts for {} codes", counts.len(), self.size())));
        }
        let (vectors, c) = feature_vectors(features)?;
        if c != self.dim() {
            return Err(Error::dim("channel", format!("features have {c} channels, codes {}", self.dim())));
        }
        let n = vectors.len() / c;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = {
            let mean = vectors.iter().sum::<f64>() / vectors.len() as f64;
            (vectors.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vectors.len() as f64).sqrt()
        };
        let jitter = Normal::new(0.0, 1e-2 * sd.max(1e-6)).expect("positive sd");
        let mut table = self.codes.data_mut();
        let mut moved = 0;
        for (k, _) in counts.iter().enumerate().filter(|(_, &n)| n == 0) {
            let p = rng.gen_range(0..n);
            for ch in 0..c {
                table[k * c + ch] = vectors[p * c + ch] + jitter.sample(&mut rng);
            }
            moved += 1;
        }
        Ok(moved)
    }

    pub fn size(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.codes.shape()[1]
    }

    pub fn code(&self, n: usize) -> Vec<f64> {
        let c = self.dim();
        self.codes.data()[n * c..(n + 1) * c].to_vec()
    }

    /// Code vectors for given indices over a `[N, h, w, d]` grid.
    pub fn lookup(&self, indices: &[usize], grid: &[usize]) -> Result<Tensor> {
        self.codes.gather_codes(indices, grid)
    }
}

/// Channels-last copy of `[N, c, ...]` features: one `c`-vector per position.
fn feature_vectors(features: &Tensor) -> Result<(Vec<f64>, usize)> {
    let s = features.shape();
    if s.len() < 3 {
        return Err(Error::dim("rank", format!("features must be [N, c, ...], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let spatial: usize = s[2..].iter().product();
    let data = features.data();
    let mut out = vec![0.0; n * c * spatial];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..spatial {
                out[(b * spatial + p) * c + ch] = data[(b * c + ch) * spatial + p];
            }
        }
    }
    Ok((out, c))
}

/// Index of the code with the smallest squared distance; ties go to the lowest index.
pub fn nearest_code(vector: &[f64], table: &[f64], c: usize) -> usize {
    let mut best = (0, f64::INFINITY);
    for (n, code) in table.chunks_exact(c).enumerate() {
        let d: f64 = vector.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (n, d);
        }
    }
    best.0
}

/// Nearest-code indices for every position of `features`.
pub fn nearest_indices(features: &Tensor, book: &Codebook) -> Result<(Vec<usize>, Vec<usize>)> {
    let s = features.shape().to_vec();
    let (vectors, c) = feature_vectors(features)?;
    if c != book.dim() {
        return Err(Error::dim("channel", format!("features have {c} channels, codebook {}", book.dim())));
    }
    let table = book.codes.data();
    let indices = vectors.chunks_exact(c).map(|v| nearest_code(v, &table, c)).collect();
    let mut grid = vec![s[0]];
    grid.extend_from_slice(&s[2..]);
    Ok((indices, grid))
}

pub fn quantize_nearest(features: &Tensor, book: &Codebook) -> Result<CodeAssignment> {
    let (indices, grid) = nearest_indices(features, book)?;
    let quantized = book.lookup(&indices, &grid)?;
    Ok(CodeAssignment {
        indices,
        grid,
        quantized,
    })
}

impl CodeAssignment {
    /// Decoder input: forward value of the codes, gradient copied to `features`.
    pub fn straight_through(&self, features: &Tensor) -> Result<Tensor> {
        features.straight_through(&self.quantized)
    }
}

/// `mse(I, Î) + mse(sg[Z], Z̃) + mse(sg[Z̃], Z)`.
pub fn vq_loss(image: &Tensor, recon: &Tensor, z: &Tensor, z_q: &Tensor) -> Result<Tensor> {
    let rec = mse(image, recon)?;
    let codebook = mse(&z.detach(), z_q)?;
    let commit = mse(&z_q.detach(), z)?;
    rec.add(&codebook)?.add(&commit)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodeUsage {
    pub counts: Vec<u64>,
}

impl CodeUsage {
    pub fn used(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.used() as f64 / self.counts.len() as f64
    }
}

/// Histogram of code indices over a stream of assignments.
pub fn codebook_usage<'a>(k: usize, stream: impl IntoIterator<Item = &'a [usize]>) -> CodeUsage {
    let mut counts = vec![0u64; k];
    for indices in stream {
        for &i in indices {
            counts[i] += 1;
        }
    }
    CodeUsage { counts }
}
