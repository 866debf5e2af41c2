//! The high-quality feature dictionary: a trainable `(M, C)` codebook,
//! nearest-entry quantization and the two codebook training terms.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::gemm::{gemm, MatRef};
use crate::tensor::{Tape, Tensor, Var};

/// Parameter name of the codebook inside a [`crate::ParamStore`].
pub const ENTRIES: &str = "dictionary.entries";

/// Entries drawn i.i.d. uniform on `[-1/M, 1/M]`.
pub fn codebook_init(m: usize, c: usize, seed: u64) -> Result<Tensor> {
    if m < 2 || c < 1 {
        return Err(Error::invalid("codebook_init", format!("need M >= 2 and C >= 1, got M={m}, C={c}")));
    }
    let bound = 1.0 / m as f64;
    Ok(Tensor::rand_uniform([m, c], -bound, bound, &mut Rng::seed(seed)))
}

/// Read-only view of a codebook with cached squared norms.
#[derive(Clone, Debug)]
pub struct Codebook {
    entries: Tensor,
    norms: Vec<f64>,
}

/// Result of assigning every position to its nearest entry.
#[derive(Clone, Debug)]
pub struct Quantization {
    /// Selected rows, in the input's shape.
    pub quantized: Tensor,
    pub indices: Vec<usize>,
    /// Exact squared distance to the selected entry.
    pub distances: Vec<f64>,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        let [m, _] = match *entries.shape() {
            [m, c] => [m, c],
            _ => return Err(Error::invalid("codebook", format!("entries must be (M, C), got {:?}", entries.shape()))),
        };
        if m < 2 {
            return Err(Error::invalid("codebook", "need at least 2 entries"));
        }
        if !entries.is_finite() {
            return Err(Error::NonFinite { op: "codebook" });
        }
        let norms = entries.data().chunks(entries.shape()[1]).map(sq_norm).collect();
        Ok(Self { entries, norms })
    }

    pub fn init(m: usize, c: usize, seed: u64) -> Result<Self> {
        Self::new(codebook_init(m, c, seed)?)
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        let c = self.dim();
        &self.entries.data()[m * c..(m + 1) * c]
    }

    /// Nearest entry per position along the last axis; ties go to the
    /// lowest index.
    ///
    /// Candidates are ranked with the expanded form `|z|^2 - 2 z.d + |d|^2`
    /// (one GEMM for all positions); entries within rounding distance of the
    /// best are then re-ranked with the exact difference form, so the result
    /// always equals an exhaustive search.
    pub fn quantize(&self, z: &Tensor) -> Result<Quantization> {
        let c = self.dim();
        if z.shape().last() != Some(&c) {
            return Err(Error::shape("quantize", z.shape(), self.entries.shape()));
        }
        let m = self.size();
        let n = z.numel() / c;
        let mut dots = vec![0.0; n * m];
        let e = &self.entries;
        gemm(MatRef::row_major(z.data(), n, c), MatRef::row_major(e.data(), m, c).t(), &mut dots, 0.0);
        let max_norm = self.norms.iter().cloned().fold(0.0, f64::max);

        let mut indices = Vec::with_capacity(n);
        let mut distances = Vec::with_capacity(n);
        let mut quantized = Vec::with_capacity(z.numel());
        for (i, zi) in z.data().chunks(c).enumerate() {
            let zn = sq_norm(zi);
            let approx: Vec<f64> = (0..m).map(|j| zn - 2.0 * dots[i * m + j] + self.norms[j]).collect();
            let best = approx.iter().cloned().fold(f64::INFINITY, f64::min);
            let slack = 1e-9 * (1.0 + zn + max_norm);
            let mut pick = (usize::MAX, f64::INFINITY);
            for (j, &a) in approx.iter().enumerate() {
                if a <= best + slack {
                    let d = sq_dist(zi, self.row(j));
                    if d < pick.1 {
                        pick = (j, d);
                    }
                }
            }
            indices.push(pick.0);
            distances.push(pick.1);
            quantized.extend_from_slice(self.row(pick.0));
        }
        Ok(Quantization {
            quantized: Tensor::new(z.shape().to_vec(), quantized)?,
            indices,
            distances,
        })
    }
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Entry selection counts, one bin per codebook row.
pub fn usage_histogram(indices: &[usize], m: usize) -> Vec<usize> {
    let mut hist = vec![0; m];
    for &i in indices {
        hist[i] += 1;
    }
    hist
}

pub fn distinct_used(indices: &[usize], m: usize) -> usize {
    usage_histogram(indices, m).iter().filter(|&&n| n > 0).count()
}

/// Gathers the selected rows of the codebook variable and lays them out in
/// `shape` (the encoder output's shape).
pub fn lookup(tape: &mut Tape, entries: Var, indices: &[usize], shape: &[usize]) -> Result<Var> {
    let rows = tape.gather_rows(entries, indices)?;
    tape.reshape(rows, shape)
}

/// `(L'_d, L'_c)`: the dictionary term moves the entries toward the frozen
/// encoder output; the commitment term moves the encoder toward the frozen
/// entries. Both are mean-reduced.
pub fn dict_losses(tape: &mut Tape, z_h: Var, z_p: Var) -> Result<(Var, Var)> {
    if tape.shape(z_h) != tape.shape(z_p) {
        return Err(Error::shape("dict_losses", tape.shape(z_h), tape.shape(z_p)));
    }
    let zh_frozen = tape.detach(z_h);
    let zp_frozen = tape.detach(z_p);
    let dict = tape.mse(zh_frozen, z_p)?;
    let commit = tape.mse(z_h, zp_frozen)?;
    Ok((dict, commit))
}

/// Forward value of `z_p`; gradient copied to `z_h` only.
pub fn straight_through(tape: &mut Tape, z_h: Var, z_p: Var) -> Result<Var> {
    tape.straight_through(z_h, z_p)
}
