//! Multi-head self- and cross-attention blocks.
//!
//! Queries come from the degraded features; keys and values come from the
//! same features (self-attention) or from the prior (cross-attention). No
//! positional encoding is applied, so every block is equivariant under a
//! permutation of spatial positions.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, NORM_EPS};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Params, Tape, Tensor, Var};

/// Which input is added back before normalisation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Residual {
    /// Add the prior features (the default cross-attention design).
    #[default]
    Prior,
    /// Add the degraded query features instead (ablation variant).
    Degraded,
}

/// Switches for the post-attention stages; disabling both leaves
/// `Z_mh + residual`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockMode {
    pub norm: bool,
    pub ffn: bool,
}

impl Default for BlockMode {
    fn default() -> Self {
        Self { norm: true, ffn: true }
    }
}

impl BlockMode {
    pub fn pass_through() -> Self {
        Self { norm: false, ffn: false }
    }
}

/// Block output plus the attention weights `(B, N_h, L_q, L_kv)`.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub weights: Var,
}

/// Scaled dot-product attention split over `heads` channel groups.
///
/// Accepts `(L, C)` or `(B, L, C)` inputs and returns the mixed values in
/// the query's shape together with the softmax weights `(B, N_h, L_q, L_kv)`.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let q_shape = tape.shape(q).to_vec();
    let (b, lq, c) = batch_dims("attend", &q_shape)?;
    let (bk, lk, ck) = batch_dims("attend", tape.shape(k))?;
    if tape.shape(k) != tape.shape(v) {
        return Err(Error::shape("attend", tape.shape(k), tape.shape(v)));
    }
    if bk != b || ck != c {
        return Err(Error::shape("attend", &q_shape, tape.shape(k)));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid("attend", format!("{c} channels not divisible by {heads} heads")));
    }
    let ch = c / heads;
    let split = |tape: &mut Tape, x: Var, l: usize| -> Result<Var> {
        let x = tape.reshape(x, &[b, l, heads, ch])?;
        tape.permute(x, &[0, 2, 1, 3])
    };
    let qh = split(tape, q, lq)?;
    let kh = split(tape, k, lk)?;
    let vh = split(tape, v, lk)?;
    let kt = tape.permute(kh, &[0, 1, 3, 2])?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / (ch as f64).sqrt())?;
    let weights = tape.softmax(scores, 3)?;
    let mixed = tape.matmul(weights, vh)?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let out = tape.reshape(mixed, &q_shape)?;
    Ok((out, weights))
}

fn batch_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [l, c] => Ok((1, l, c)),
        [b, l, c] => Ok((b, l, c)),
        _ => Err(Error::invalid(op, format!("expected (L, C) or (B, L, C), got {shape:?}"))),
    }
}

/// One attention block: projections, multi-head attention, output
/// projection, residual, layer norm and a two-conv feed-forward stage.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub residual: Residual,
    pub mode: BlockMode,
    ffn1: Conv2d,
    ffn2: Conv2d,
}

impl AttentionBlock {
    pub fn new(name: impl Into<String>, channels: usize, heads: usize) -> Result<Self> {
        let name = name.into();
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid("attention", format!("{channels} channels not divisible by {heads} heads")));
        }
        Ok(Self {
            ffn1: Conv2d::new(format!("{name}.ffn.conv1"), channels, channels, 3, 1),
            ffn2: Conv2d::new(format!("{name}.ffn.conv2"), channels, channels, 3, 1),
            name,
            channels,
            heads,
            residual: Residual::Prior,
            mode: BlockMode::default(),
        })
    }

    pub fn with_residual(mut self, residual: Residual) -> Self {
        self.residual = residual;
        self
    }

    pub fn with_mode(mut self, mode: BlockMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn param(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        let c = self.channels;
        let std = 1.0 / (c as f64).sqrt();
        for p in ["q", "k", "v", "o"] {
            store.insert(self.param(&format!("w_{p}")), Tensor::randn([c, c], std, rng));
            store.insert(self.param(&format!("b_{p}")), Tensor::zeros([c]));
        }
        store.insert(self.param("norm.gain"), Tensor::ones([c]));
        store.insert(self.param("norm.bias"), Tensor::zeros([c]));
        self.ffn1.init(store, rng);
        self.ffn2.init(store, rng);
    }

    /// Self-attention: queries, keys and values all from `z_d`.
    pub fn mhsa(&self, tape: &mut Tape, p: Params<'_>, z_d: Var) -> Result<BlockOutput> {
        self.run(tape, p, z_d, z_d)
    }

    /// Cross-attention: queries from `z_d`, keys and values from `z_p`.
    pub fn mhca(&self, tape: &mut Tape, p: Params<'_>, z_d: Var, z_p: Var) -> Result<BlockOutput> {
        if tape.shape(z_d) != tape.shape(z_p) {
            return Err(Error::shape("mhca", tape.shape(z_d), tape.shape(z_p)));
        }
        self.run(tape, p, z_d, z_p)
    }

    fn project(&self, tape: &mut Tape, p: Params<'_>, x: Var, which: &str) -> Result<Var> {
        let w = p.var(tape, &self.param(&format!("w_{which}")))?;
        let b = p.var(tape, &self.param(&format!("b_{which}")))?;
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    /// Accepts `(L, C)`, `(H, W, C)` or `(B, H, W, C)` maps.
    fn run(&self, tape: &mut Tape, p: Params<'_>, query: Var, prior: Var) -> Result<BlockOutput> {
        let shape = tape.shape(query).to_vec();
        let map = match *shape.as_slice() {
            [l, c] => [1, 1, l, c],
            [h, w, c] => [1, h, w, c],
            [b, h, w, c] => [b, h, w, c],
            _ => return Err(Error::invalid("attention", format!("unsupported feature shape {shape:?}"))),
        };
        if map[3] != self.channels {
            return Err(Error::shape("attention", &shape, &[self.channels]));
        }
        let seq = [map[0], map[1] * map[2], map[3]];
        let zq = tape.reshape(query, &seq)?;
        let zp = tape.reshape(prior, &seq)?;

        let q = self.project(tape, p, zq, "q")?;
        let k = self.project(tape, p, zp, "k")?;
        let v = self.project(tape, p, zp, "v")?;
        let (mixed, weights) = attend(tape, q, k, v, self.heads)?;
        let z_mh = self.project(tape, p, mixed, "o")?;

        let residual = match self.residual {
            Residual::Prior => zp,
            Residual::Degraded => zq,
        };
        let mut h = tape.add(z_mh, residual)?;
        if self.mode.norm {
            let g = p.var(tape, &self.param("norm.gain"))?;
            let b = p.var(tape, &self.param("norm.bias"))?;
            h = tape.layer_norm(h, g, b, NORM_EPS)?;
        }
        if self.mode.ffn {
            h = tape.reshape(h, &map)?;
            h = self.ffn1.forward(tape, p, h)?;
            h = tape.silu(h)?;
            h = self.ffn2.forward(tape, p, h)?;
        }
        let out = tape.reshape(h, &shape)?;
        Ok(BlockOutput { out, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape.to_vec(), 1.0, &mut Rng::seed(seed))
    }

    /// Per-head double loop over queries and keys.
    fn naive_attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Vec<f64> {
        let (lq, c) = (q.shape()[0], q.shape()[1]);
        let lk = k.shape()[0];
        let ch = c / heads;
        let mut out = vec![0.0; lq * c];
        for h in 0..heads {
            for i in 0..lq {
                let mut s = vec![0.0; lk];
                for (j, sj) in s.iter_mut().enumerate() {
                    let mut dot = 0.0;
                    for t in 0..ch {
                        dot += q.data()[i * c + h * ch + t] * k.data()[j * c + h * ch + t];
                    }
                    *sj = dot / (ch as f64).sqrt();
                }
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for t in 0..ch {
                    out[i * c + h * ch + t] = (0..lk).map(|j| e[j] / z * v.data()[j * c + h * ch + t]).sum();
                }
            }
        }
        out
    }

    fn naive_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (l, c) = (x.shape()[0], x.shape()[1]);
        let n = w.shape()[1];
        let mut out = vec![0.0; l * n];
        for i in 0..l {
            for j in 0..n {
                out[i * n + j] = b.data()[j] + (0..c).map(|t| x.data()[i * c + t] * w.data()[t * n + j]).sum::<f64>();
            }
        }
        Tensor::new(vec![l, n], out).unwrap()
    }

    #[test]
    fn attend_matches_naive_reference() {
        let (q, k, v) = (rand(&[3, 8], 0), rand(&[5, 8], 1), rand(&[5, 8], 2));
        let mut tape = Tape::new();
        let vars = [q.clone(), k.clone(), v.clone()].map(|t| tape.constant(t));
        let (out, w) = attend(&mut tape, vars[0], vars[1], vars[2], 2).unwrap();
        let want = naive_attend(&q, &k, &v, 2);
        let got = tape.value(out).data();
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        assert_eq!(tape.shape(w), [1, 2, 3, 5]);
    }

    #[test]
    fn single_key_broadcasts_value() {
        let (q, k, v) = (rand(&[4, 6], 3), rand(&[1, 6], 4), rand(&[1, 6], 5));
        let mut tape = Tape::new();
        let vars = [q, k, v.clone()].map(|t| tape.constant(t));
        let (out, _) = attend(&mut tape, vars[0], vars[1], vars[2], 3).unwrap();
        for row in tape.value(out).data().chunks(6) {
            assert_eq!(row, v.data());
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = rand(&[2, 4], 6);
        let k = Tensor::new(vec![3, 4], [0.3, -0.1, 0.7, 0.2].repeat(3)).unwrap();
        let v = rand(&[3, 4], 7);
        let mut tape = Tape::new();
        let vars = [q, k, v.clone()].map(|t| tape.constant(t));
        let (out, w) = attend(&mut tape, vars[0], vars[1], vars[2], 2).unwrap();
        assert!(tape.value(w).data().iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        for row in tape.value(out).data().chunks(4) {
            for (j, x) in row.iter().enumerate() {
                let mean = (0..3).map(|i| v.data()[i * 4 + j]).sum::<f64>() / 3.0;
                assert!((x - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attend_rejects_bad_heads() {
        let mut tape = Tape::new();
        let x = tape.constant(rand(&[2, 6], 0));
        assert!(attend(&mut tape, x, x, x, 4).is_err());
        assert!(AttentionBlock::new("a", 6, 4).is_err());
    }

    fn block(seed: u64) -> (AttentionBlock, ParamStore) {
        let b = AttentionBlock::new("mhca1", 8, 2).unwrap();
        let mut store = ParamStore::new();
        b.init(&mut store, &mut Rng::seed(seed));
        (b, store)
    }

    #[test]
    fn mhca_matches_naive_composition() {
        let (b, store) = block(0);
        let b = b.with_mode(BlockMode { norm: true, ffn: false });
        let (zd, zp) = (rand(&[4, 8], 10), rand(&[4, 8], 11));
        let mut tape = Tape::new();
        let (d, pr) = (tape.constant(zd.clone()), tape.constant(zp.clone()));
        let got = b.mhca(&mut tape, Params::frozen(&store), d, pr).unwrap();

        let g = |n: &str| store.get(&format!("mhca1.{n}")).unwrap().clone();
        let q = naive_affine(&zd, &g("w_q"), &g("b_q"));
        let k = naive_affine(&zp, &g("w_k"), &g("b_k"));
        let v = naive_affine(&zp, &g("w_v"), &g("b_v"));
        let mixed = Tensor::new(vec![4, 8], naive_attend(&q, &k, &v, 2)).unwrap();
        let z_mh = naive_affine(&mixed, &g("w_o"), &g("b_o"));
        let mut want = Vec::new();
        for (row, prow) in z_mh.data().chunks(8).zip(zp.data().chunks(8)) {
            let h: Vec<f64> = row.iter().zip(prow).map(|(a, b)| a + b).collect();
            let mean = h.iter().sum::<f64>() / 8.0;
            let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 8.0;
            let rstd = 1.0 / (var + NORM_EPS).sqrt();
            want.extend(h.iter().map(|x| (x - mean) * rstd));
        }
        let err = tape.value(got.out).data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn zero_value_path_leaves_residual() {
        let (b, mut store) = block(1);
        for n in ["w_v", "b_v"] {
            let name = format!("mhca1.{n}");
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, Tensor::zeros(shape)).unwrap();
        }
        let b = b.with_mode(BlockMode::pass_through());
        let (zd, zp) = (rand(&[2, 3, 8], 2), rand(&[2, 3, 8], 3));
        let mut tape = Tape::new();
        let (d, p) = (tape.constant(zd.clone()), tape.constant(zp.clone()));
        let out = b.mhca(&mut tape, Params::frozen(&store), d, p).unwrap().out;
        assert!(tape.value(out).max_abs_diff(&zp) == 0.0);
        let out = b.clone().with_residual(Residual::Degraded).mhca(&mut tape, Params::frozen(&store), d, p).unwrap().out;
        assert!(tape.value(out).max_abs_diff(&zd) == 0.0);
        let out = b.mhsa(&mut tape, Params::frozen(&store), d).unwrap().out;
        assert!(tape.value(out).max_abs_diff(&zd) == 0.0);
    }

    #[test]
    fn mhsa_is_permutation_equivariant() {
        let (b, store) = block(2);
        let z = rand(&[6, 8], 4);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut zp = Vec::new();
        for &i in &perm {
            zp.extend_from_slice(&z.data()[i * 8..(i + 1) * 8]);
        }
        let zp = Tensor::new(vec![6, 8], zp).unwrap();
        // FFN convs mix neighbours, so equivariance holds for the token-wise part.
        let b = b.with_mode(BlockMode { norm: true, ffn: false });
        let mut tape = Tape::new();
        let (x, xp) = (tape.constant(z), tape.constant(zp));
        let a = b.mhsa(&mut tape, Params::frozen(&store), x).unwrap().out;
        let ap = b.mhsa(&mut tape, Params::frozen(&store), xp).unwrap().out;
        let (a, ap) = (tape.value(a).data(), tape.value(ap).data());
        for (r, &i) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((ap[r * 8 + j] - a[i * 8 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_gradients_check() {
        let (b, store) = block(3);
        let inputs = [rand(&[4, 8], 5), rand(&[4, 8], 6)];
        let err = grad_check(
            |t, v| Ok(b.mhca(t, Params::frozen(&store), v[0], v[1])?.out),
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
