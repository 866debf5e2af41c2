//! Synthetic degradation: Gaussian blur, bilinear downsampling, additive
//! Gaussian noise, block-DCT JPEG simulation and bilinear upsampling back
//! to the original size, applied in that order.
//!
//! Images are `(H, W, C)` tensors in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{resize_bilinear, Tensor};

/// Below this blur is skipped.
pub const MIN_SIGMA: f64 = 0.1;
const BLOCK: usize = 8;

/// Standard JPEG luminance quantization table (row-major, natural order).
pub const LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// One degradation draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub sigma: f64,
    pub r: f64,
    pub delta: f64,
    pub q: f64,
    pub seed: u64,
}

impl DegradationSpec {
    /// Leaves an image unchanged up to DCT round-off.
    pub fn identity() -> Self {
        Self {
            sigma: 0.0,
            r: 1.0,
            delta: 0.0,
            q: 100.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma >= 0.0 && self.r >= 1.0 && self.delta >= 0.0 && (1.0..=100.0).contains(&self.q);
        if !ok || ![self.sigma, self.r, self.delta, self.q].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("degradation", format!("invalid spec {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for DegradationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sigma={},r={},delta={},q={},seed={}",
            self.sigma, self.r, self.delta, self.q, self.seed
        )
    }
}

impl FromStr for DegradationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: String| Error::invalid("degradation spec", msg);
        let mut spec = Self::identity();
        let mut seen = [false; 5];
        for part in s.trim().split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {part:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || value.parse::<f64>().map_err(|_| bad(format!("bad number {value:?} for {key}")));
            let slot = match key {
                "sigma" => {
                    spec.sigma = num()?;
                    0
                }
                "r" => {
                    spec.r = num()?;
                    1
                }
                "delta" => {
                    spec.delta = num()?;
                    2
                }
                "q" => {
                    spec.q = num()?;
                    3
                }
                "seed" => {
                    spec.seed = value.parse().map_err(|_| bad(format!("bad seed {value:?}")))?;
                    4
                }
                _ => return Err(bad(format!("unknown key {key:?}"))),
            };
            seen[slot] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(bad(format!("all of sigma, r, delta, q, seed are required in {s:?}")));
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Closed sampling intervals; draws are continuous uniform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationRanges {
    pub sigma: (f64, f64),
    pub r: (f64, f64),
    pub delta: (f64, f64),
    pub q: (f64, f64),
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            sigma: (0.2, 10.0),
            r: (1.0, 8.0),
            delta: (0.0, 20.0),
            q: (60.0, 100.0),
        }
    }
}

impl DegradationRanges {
    /// Draws a spec for an image of side `size`, capping `r` so the
    /// downsampled image still holds one JPEG block.
    pub fn sample(&self, rng: &mut Rng, size: usize) -> DegradationSpec {
        let r_max = self.r.1.min(size as f64 / BLOCK as f64).max(self.r.0);
        DegradationSpec {
            sigma: rng.uniform_in(self.sigma.0, self.sigma.1),
            r: rng.uniform_in(self.r.0, r_max),
            delta: rng.uniform_in(self.delta.0, self.delta.1),
            q: rng.uniform_in(self.q.0, self.q.1),
            seed: rng.next_u64(),
        }
    }
}

fn hwc(op: &'static str, img: &Tensor) -> Result<[usize; 3]> {
    match *img.shape() {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::invalid(op, format!("expected (H, W, C) image, got {:?}", img.shape()))),
    }
}

/// Normalised taps `exp(-x²/2σ²)` for `x` in `[-ceil(3σ), ceil(3σ)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric reflection (`... 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Separable Gaussian blur with symmetric boundary reflection.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let [h, w, c] = hwc("gaussian_blur", img)?;
    if sigma < MIN_SIGMA {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let x = img.data();
    let mut tmp = vec![0.0; x.len()];
    for y in 0..h {
        for xo in 0..w {
            for (t, kv) in k.iter().enumerate() {
                let sx = reflect(xo as isize + t as isize - radius, w);
                let (src, dst) = ((y * w + sx) * c, (y * w + xo) * c);
                for ch in 0..c {
                    tmp[dst + ch] += kv * x[src + ch];
                }
            }
        }
    }
    let mut out = vec![0.0; x.len()];
    for y in 0..h {
        for (t, kv) in k.iter().enumerate() {
            let sy = reflect(y as isize + t as isize - radius, h);
            let (src, dst) = (sy * w * c, y * w * c);
            for (o, v) in out[dst..dst + w * c].iter_mut().zip(&tmp[src..src + w * c]) {
                *o += kv * v;
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// I.i.d. Gaussian noise with standard deviation `delta / 255`.
pub fn add_noise(img: &Tensor, delta: f64, rng: &mut Rng) -> Tensor {
    let std = delta / 255.0;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v += std * rng.normal();
    }
    out
}

/// Effective quantization table for quality `q`: libjpeg's integer
/// scaling of the luminance table with `q` rounded to an integer.
pub fn quant_table(q: f64) -> Result<[f64; 64]> {
    if !(1.0..=100.0).contains(&q) {
        return Err(Error::invalid("jpeg_sim", format!("quality {q} outside [1, 100]")));
    }
    let q = q.round() as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    Ok(LUMA_TABLE.map(|b| ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64))
}

fn dct_matrix() -> [[f64; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    for (u, row) in m.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / (2 * BLOCK) as f64).cos();
        }
    }
    m
}

/// `D · B · Dᵀ` (or `Dᵀ · B · D` when `inverse`).
fn transform(block: &[[f64; BLOCK]; BLOCK], d: &[[f64; BLOCK]; BLOCK], inverse: bool) -> [[f64; BLOCK]; BLOCK] {
    let at = |i: usize, j: usize| if inverse { d[j][i] } else { d[i][j] };
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            tmp[i][j] = (0..BLOCK).map(|k| at(i, k) * block[k][j]).sum();
        }
    }
    let mut out = [[0.0; BLOCK]; BLOCK];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            out[i][j] = (0..BLOCK).map(|k| tmp[i][k] * at(j, k)).sum();
        }
    }
    out
}

/// Block-DCT compression round trip applied to every channel on the
/// 0–255 scale. Edge blocks are padded by replication. An all-ones table
/// (quality 100) skips the rounding step.
pub fn jpeg_sim(img: &Tensor, q: f64) -> Result<Tensor> {
    let [h, w, c] = hwc("jpeg_sim", img)?;
    let table = quant_table(q)?;
    if h < BLOCK || w < BLOCK {
        return Err(Error::invalid("jpeg_sim", format!("{h}x{w} image smaller than one {BLOCK}x{BLOCK} block")));
    }
    let lossless = table.iter().all(|&t| t == 1.0);
    let d = dct_matrix();
    let x = img.data();
    let mut out = x.to_vec();
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            for ch in 0..c {
                let mut block = [[0.0; BLOCK]; BLOCK];
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let (y, xx) = ((by + i).min(h - 1), (bx + j).min(w - 1));
                        *v = x[(y * w + xx) * c + ch] * 255.0 - 128.0;
                    }
                }
                let mut coef = transform(&block, &d, false);
                if !lossless {
                    for (i, row) in coef.iter_mut().enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            let t = table[i * BLOCK + j];
                            *v = (*v / t).round() * t;
                        }
                    }
                }
                let rec = transform(&coef, &d, true);
                for (i, row) in rec.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        let (y, xx) = (by + i, bx + j);
                        if y < h && xx < w {
                            out[(y * w + xx) * c + ch] = (v + 128.0) / 255.0;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// A degraded image and the number of values clamped into `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Degraded {
    pub image: Tensor,
    pub clamped: usize,
}

/// Blur, downsample by `r`, add noise, compress, upsample back, clamp.
pub fn degrade(img: &Tensor, spec: &DegradationSpec) -> Result<Degraded> {
    spec.validate()?;
    let [h, w, _] = hwc("degrade", img)?;
    let blurred = gaussian_blur(img, spec.sigma)?;
    let (dh, dw) = ((h as f64 / spec.r).round() as usize, (w as f64 / spec.r).round() as usize);
    if dh < BLOCK || dw < BLOCK {
        return Err(Error::invalid(
            "degrade",
            format!("downsampled size {dh}x{dw} is smaller than one JPEG block"),
        ));
    }
    let small = resize_bilinear(&blurred, dh, dw)?;
    let noisy = add_noise(&small, spec.delta, &mut Rng::seed(spec.seed));
    let compressed = jpeg_sim(&noisy, spec.q)?;
    let mut out = resize_bilinear(&compressed, h, w)?;
    let mut clamped = 0;
    for v in out.data_mut() {
        if *v < 0.0 || *v > 1.0 {
            clamped += 1;
            *v = v.clamp(0.0, 1.0);
        }
    }
    Ok(Degraded { image: out, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(size: usize) -> Tensor {
        let mut d = Vec::new();
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                d.extend([0.5 + 0.3 * (6.0 * u).sin() * v, 0.4 + 0.2 * u, 0.3 + 0.4 * (u * v)]);
            }
        }
        Tensor::new(vec![size, size, 3], d).unwrap()
    }

    #[test]
    fn blur_identity_and_constants() {
        let img = smooth(16);
        assert!(gaussian_blur(&img, 0.0).unwrap().bit_eq(&img));
        let c = Tensor::full([12, 12, 3], 0.37);
        let b = gaussian_blur(&c, 2.5).unwrap();
        assert!(b.max_abs_diff(&c) < 1e-14);
    }

    #[test]
    fn blur_impulse_matches_kernel_formula() {
        let mut img = Tensor::zeros([21, 21, 1]);
        img.data_mut()[10 * 21 + 10] = 1.0;
        let b = gaussian_blur(&img, 1.0).unwrap();
        let z: f64 = (-3..=3).map(|x: i32| (-(x * x) as f64 / 2.0).exp()).sum();
        for dx in -3i32..=3 {
            let want = (-(dx * dx) as f64 / 2.0).exp() / z / z;
            let got = b.data()[10 * 21 + (10 + dx) as usize];
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_preserves_mean() {
        let img = smooth(20);
        let b = gaussian_blur(&img, 3.3).unwrap();
        let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
        assert!((mean(&img) - mean(&b)).abs() < 1e-6);
    }

    #[test]
    fn quality_table_mapping() {
        assert!(quant_table(100.0).unwrap().iter().all(|&v| v == 1.0));
        assert_eq!(quant_table(50.0).unwrap()[0], 16.0);
        assert_eq!(quant_table(75.0).unwrap()[0], 8.0);
        assert_eq!(quant_table(10.0).unwrap()[0], 80.0);
        assert!(quant_table(0.5).is_err() && quant_table(101.0).is_err());
    }

    #[test]
    fn jpeg_passthrough_and_constant_bound() {
        let img = smooth(16);
        assert!(jpeg_sim(&img, 100.0).unwrap().max_abs_diff(&img) < 1e-9);
        for q in [95.0, 75.0, 60.0, 30.0] {
            let c = Tensor::full([16, 16, 3], 0.43);
            let t00 = quant_table(q).unwrap()[0];
            let err = jpeg_sim(&c, q).unwrap().max_abs_diff(&c);
            assert!(err * 255.0 <= t00 / 2.0 / 8.0 + 1e-9, "q {q}: {err}");
        }
    }

    #[test]
    fn jpeg_quality_sweep_is_monotone() {
        let img = smooth(32);
        let mut last = f64::INFINITY;
        for q in [95.0, 85.0, 75.0, 65.0] {
            let out = jpeg_sim(&img, q).unwrap();
            let mse = out.data().iter().zip(img.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / img.numel() as f64;
            let psnr = -10.0 * mse.log10();
            assert!(psnr <= last + 1e-12);
            last = psnr;
        }
    }

    #[test]
    fn identity_spec_reproduces_input() {
        let img = smooth(32);
        let out = degrade(&img, &DegradationSpec::identity()).unwrap();
        assert!(out.image.max_abs_diff(&img) < 1e-9);
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn noise_std_matches_delta() {
        let img = Tensor::full([256, 256, 3], 0.5);
        let spec = DegradationSpec { delta: 20.0, seed: 9, ..DegradationSpec::identity() };
        let out = degrade(&img, &spec).unwrap();
        let d: Vec<f64> = out.image.data().iter().zip(img.data()).map(|(a, b)| a - b).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        let want = 20.0 / 255.0;
        assert!((0.9 * want..=1.1 * want).contains(&std), "{std}");
    }

    #[test]
    fn deterministic_and_small_images_rejected() {
        let img = smooth(32);
        let spec: DegradationSpec = "sigma=1.5,r=2.5,delta=7,q=70,seed=3".parse().unwrap();
        let a = degrade(&img, &spec).unwrap();
        assert!(a.image.bit_eq(&degrade(&img, &spec).unwrap().image));
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let tiny = DegradationSpec { r: 5.0, ..spec };
        assert!(degrade(&img, &tiny).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = DegradationSpec { sigma: 2.25, r: 3.5, delta: 11.0, q: 72.5, seed: 42 };
        assert_eq!(spec.to_string().parse::<DegradationSpec>().unwrap(), spec);
        assert!("sigma=1,r=2".parse::<DegradationSpec>().is_err());
        assert!("sigma=1,r=2,delta=0,q=70,seed=1,x=2".parse::<DegradationSpec>().is_err());
    }

    #[test]
    fn sampling_respects_ranges_and_block_cap() {
        let ranges = DegradationRanges::default();
        let mut rng = Rng::seed(0);
        for _ in 0..200 {
            let s = ranges.sample(&mut rng, 32);
            assert!((0.2..=10.0).contains(&s.sigma) && (1.0..=4.0).contains(&s.r));
            assert!((0.0..=20.0).contains(&s.delta) && (60.0..=100.0).contains(&s.q));
            degrade(&smooth(32), &s).unwrap();
        }
    }
}
