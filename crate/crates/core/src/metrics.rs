//! Image quality metrics: PSNR, SSIM, identity angle (IDD) and a Fréchet
//! distance over stand-in identity features (FFD).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::losses::IdentityNet;
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Diagonal load added to a singular covariance.
pub const FFD_RIDGE: f64 = 1e-6;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("psnr", a, b)?;
    if a.numel() == 0 {
        return Err(Error::invalid("psnr", "empty image"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Rec.601 luma of an `(H, W, 3)` image, or the single channel of `(H, W, 1)`.
pub fn to_gray(img: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let [h, w, c] = match *img.shape() {
        [h, w, c] if c == 1 || c == 3 => [h, w, c],
        _ => return Err(Error::invalid("to_gray", format!("expected (H, W, 1|3), got {:?}", img.shape()))),
    };
    let gray = if c == 1 {
        img.data().to_vec()
    } else {
        img.data().chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect()
    };
    Ok((h, w, gray))
}

/// Normalised 11×11 Gaussian window, row-major.
pub fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    let mut out = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for gy in &g {
        for gx in &g {
            out.push(gy * gx / (total * total));
        }
    }
    out
}

/// Separable weighted sum over every valid window position.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = g.iter().enumerate().map(|(t, gv)| gv * x[y * w + xo + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = g.iter().enumerate().map(|(t, gv)| gv * rows[(yo + t) * ow + xo]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma channels over valid windows.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (h, w, x) = to_gray(a)?;
    let (_, _, y) = to_gray(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("{h}x{w} image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    if x == y {
        return Ok(1.0);
    }
    let r = (SSIM_WINDOW / 2) as f64;
    let g1: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.into_iter().map(|v| v / total).collect();
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
    let mx = filter_valid(&x, h, w, &g1);
    let my = filter_valid(&y, h, w, &g1);
    let sxx = filter_valid(&prod(&x, &x), h, w, &g1);
    let syy = filter_valid(&prod(&y, &y), h, w, &g1);
    let sxy = filter_valid(&prod(&x, &y), h, w, &g1);
    let n = mx.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        acc += (2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2) / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
    }
    Ok(acc / n as f64)
}

/// Angle between two embeddings after unit normalisation, in `[0, π]`.
/// Computed as `2·atan2(|u−v|, |u+v|)`, which equals the arccosine of the
/// cosine similarity without its loss of precision near 0 and π.
pub fn embedding_angle(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("embedding_angle", &[u.len()], &[v.len()]));
    }
    let unit = |e: &[f64]| -> Result<Vec<f64>> {
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("idd", "zero or non-finite embedding"));
        }
        Ok(e.iter().map(|x| x / n).collect())
    };
    let (u, v) = (unit(u)?, unit(v)?);
    if u == v {
        return Ok(0.0);
    }
    let diff = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let sum = u.iter().zip(&v).map(|(a, b)| (a + b) * (a + b)).sum::<f64>().sqrt();
    Ok(2.0 * diff.atan2(sum))
}

/// Identity distance between two `(H, W, 3)` images under `net`.
pub fn idd(a: &Tensor, b: &Tensor, net: &IdentityNet) -> Result<f64> {
    same_shape("idd", a, b)?;
    let batch = stack(&[a, b])?;
    let e = net.embed_tensor(&batch)?;
    let d = e.shape()[1];
    embedding_angle(&e.data()[..d], &e.data()[d..])
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::invalid("stack", "no tensors"))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        same_shape("stack", first, t)?;
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    /// Sample statistics with the unbiased `n − 1` covariance.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::invalid("ffd", format!("need at least 2 samples, got {n}")));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(Error::invalid("ffd", "features must share one nonzero dimension"));
        }
        let m = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mean = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

/// Fréchet distance with diagnostics from the matrix square root.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frechet {
    pub value: f64,
    /// Total magnitude of negative eigenvalues clamped to zero.
    pub clamped: f64,
    /// Whether a ridge of [`FFD_RIDGE`] was added to either covariance.
    pub regularized: bool,
}

fn is_singular(cov: &DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(cov.clone());
    let scale = cov.trace().abs().max(1.0);
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min) <= 1e-12 * scale
}

/// PSD square root through the symmetric eigendecomposition.
fn sqrt_psd(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clamped = 0.0;
    let roots = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            clamped -= l;
            0.0
        } else {
            l.sqrt()
        }
    });
    let q = &eig.eigenvectors;
    (q * DMatrix::from_diagonal(&roots) * q.transpose(), clamped)
}

/// `|μA − μB|² + Tr(ΣA + ΣB − 2 (ΣA ΣB)^½)`. The trace of the cross term
/// is taken as `Tr((S ΣB S)^½)` with `S = ΣA^½`, a symmetric matrix with
/// the same spectrum as `ΣA ΣB`.
pub fn frechet_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<Frechet> {
    if a.mean.len() != b.mean.len() || a.cov.shape() != b.cov.shape() {
        return Err(Error::invalid("ffd", "feature dimensions differ"));
    }
    let d = a.mean.len();
    let regularized = is_singular(&a.cov) || is_singular(&b.cov);
    let ridge = DMatrix::<f64>::identity(d, d) * if regularized { FFD_RIDGE } else { 0.0 };
    let (ca, cb) = (&a.cov + &ridge, &b.cov + &ridge);
    let (s, clamp_a) = sqrt_psd(&ca);
    let (_, clamp_b) = sqrt_psd(&cb);
    let inner = &s * &cb * &s;
    let sym = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clamped = clamp_a + clamp_b;
    let mut cross = 0.0;
    for l in eig.eigenvalues.iter() {
        if *l < 0.0 {
            clamped -= l;
        } else {
            cross += l.sqrt();
        }
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let value = mean_term + ca.trace() + cb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "ffd" });
    }
    Ok(Frechet { value, clamped, regularized })
}

/// Fréchet distance between two feature sets (one row per sample).
pub fn ffd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Frechet> {
    frechet_from_stats(&GaussianStats::from_features(a)?, &GaussianStats::from_features(b)?)
}

/// Per-image scores of restored images against references, aligned with
/// `names`, plus the set-level FFD.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub names: Vec<String>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub idd: Vec<f64>,
    pub ffd: Option<Frechet>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

impl MetricReport {
    /// Scores `outputs[i]` against `references[i]`. FFD needs two or more
    /// images on each side.
    pub fn compute(names: Vec<String>, outputs: &[Tensor], references: &[Tensor], net: &IdentityNet) -> Result<Self> {
        if outputs.len() != references.len() || names.len() != outputs.len() {
            return Err(Error::invalid(
                "metrics",
                format!("{} names, {} outputs, {} references", names.len(), outputs.len(), references.len()),
            ));
        }
        let mut report = Self { names, psnr: vec![], ssim: vec![], idd: vec![], ffd: None };
        let mut feats = (Vec::new(), Vec::new());
        for (o, r) in outputs.iter().zip(references) {
            report.psnr.push(psnr(o, r)?);
            report.ssim.push(ssim(o, r)?);
            let e = net.embed_tensor(&stack(&[o, r])?)?;
            let d = e.shape()[1];
            report.idd.push(embedding_angle(&e.data()[..d], &e.data()[d..])?);
            feats.0.push(e.data()[..d].to_vec());
            feats.1.push(e.data()[d..].to_vec());
        }
        if outputs.len() >= 2 {
            report.ffd = Some(ffd(&feats.0, &feats.1)?);
        }
        Ok(report)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(&self.ssim)
    }

    pub fn mean_idd(&self) -> f64 {
        mean(&self.idd)
    }

    /// `name,psnr,ssim,idd` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,ssim,idd\n");
        for i in 0..self.len() {
            s.push_str(&format!("{},{},{},{}\n", self.names[i], self.psnr[i], self.ssim[i], self.idd[i]));
        }
        s
    }

    pub fn summary(&self) -> String {
        let ffd = self.ffd.map_or("n/a".to_string(), |f| format!("{:.6}", f.value));
        format!(
            "images={} psnr={:.4} ssim={:.4} idd={:.4} ffd={}",
            self.len(),
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_idd(),
            ffd
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn gradient(size: usize) -> Tensor {
        let mut d = Vec::new();
        for y in 0..size {
            for x in 0..size {
                let v = (x + 2 * y) as f64 / (3 * size) as f64;
                d.extend([v, 0.5 * v + 0.2, 1.0 - v]);
            }
        }
        Tensor::new(vec![size, size, 3], d).unwrap()
    }

    /// Direct per-window double loop with the 2-D window.
    fn ssim_naive(a: &Tensor, b: &Tensor) -> f64 {
        let (h, w, x) = to_gray(a).unwrap();
        let (_, _, y) = to_gray(b).unwrap();
        let win = ssim_window();
        let k = SSIM_WINDOW;
        let mut total = 0.0;
        let mut count = 0;
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = (oy + i) * w + ox + j;
                        mx += win[i * k + j] * x[p];
                        my += win[i * k + j] * y[p];
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = (oy + i) * w + ox + j;
                        let g = win[i * k + j];
                        vx += g * (x[p] - mx).powi(2);
                        vy += g * (y[p] - my).powi(2);
                        cxy += g * (x[p] - mx) * (y[p] - my);
                    }
                }
                total += (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn psnr_values() {
        let a = gradient(8).map(|v| v * 0.8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Tensor::zeros([4, 4, 3])).is_err());
    }

    #[test]
    fn ssim_identity_and_oracle() {
        let a = gradient(16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = a.map(|v| v + 0.05);
        assert!((ssim(&a, &b).unwrap() - ssim_naive(&a, &b)).abs() < 1e-10);
        let inv = a.map(|v| 1.0 - v);
        let s = ssim(&a, &inv).unwrap();
        assert!(s < 1.0 && s >= -1.0);
        assert!(ssim(&Tensor::zeros([8, 8, 3]), &Tensor::zeros([8, 8, 3])).is_err());
    }

    #[test]
    fn ssim_random_pairs_match_oracle() {
        let mut rng = Rng::seed(5);
        for _ in 0..3 {
            let a = Tensor::rand_uniform([14, 17, 3], 0.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform([14, 17, 3], 0.0, 1.0, &mut rng);
            assert!((ssim(&a, &b).unwrap() - ssim_naive(&a, &b)).abs() < 1e-10);
        }
    }

    #[test]
    fn angle_cases() {
        let u = [1.0, 2.0, -0.5];
        assert_eq!(embedding_angle(&u, &u).unwrap(), 0.0);
        let a = embedding_angle(&[1.0, 0.0], &[0.0, 3.0]).unwrap();
        assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let v = [0.3, -1.0, 0.7];
        assert!((embedding_angle(&u, &v).unwrap() - embedding_angle(&v, &u).unwrap()).abs() < 1e-12);
        assert!((embedding_angle(&u, &[-1.0, -2.0, 0.5]).unwrap() - std::f64::consts::PI).abs() < 1e-15);
        assert!(embedding_angle(&u, &[0.0; 3]).is_err());
    }

    #[test]
    fn idd_of_identical_images_is_zero() {
        let net = IdentityNet::new();
        let a = gradient(32);
        assert_eq!(idd(&a, &a, &net).unwrap(), 0.0);
        let b = a.map(|v| 1.0 - v);
        let d = idd(&a, &b, &net).unwrap();
        assert!(d > 0.0 && d <= std::f64::consts::PI);
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let a = GaussianStats { mean: DVector::from_vec(vec![0.0]), cov: DMatrix::from_vec(1, 1, vec![1.0]) };
        let b = GaussianStats { mean: DVector::from_vec(vec![1.0]), cov: DMatrix::from_vec(1, 1, vec![1.0]) };
        assert!((frechet_from_stats(&a, &b).unwrap().value - 1.0).abs() < 1e-8);
        let c = GaussianStats { mean: DVector::from_vec(vec![3.0]), cov: DMatrix::from_vec(1, 1, vec![4.0]) };
        // (0 - 3)² + (1 - 2)²
        assert!((frechet_from_stats(&a, &c).unwrap().value - 10.0).abs() < 1e-8);
    }

    #[test]
    fn frechet_sets() {
        let mut rng = Rng::seed(2);
        let set = |rng: &mut Rng, shift: f64| -> Vec<Vec<f64>> {
            (0..40).map(|_| (0..4).map(|j| rng.normal() * (1.0 + j as f64) + shift).collect()).collect()
        };
        let a = set(&mut rng, 0.0);
        let b = set(&mut rng, 0.5);
        let same = ffd(&a, &a).unwrap();
        assert!(same.value.abs() < 1e-8 && !same.regularized);
        let ab = ffd(&a, &b).unwrap().value;
        assert!(ab > 0.0 && (ab - ffd(&b, &a).unwrap().value).abs() < 1e-8);
        let few: Vec<Vec<f64>> = a[..3].to_vec();
        assert!(ffd(&few, &b).unwrap().regularized);
        assert!(ffd(&a[..1], &b).is_err());
    }

    #[test]
    fn report_alignment() {
        let net = IdentityNet::new();
        let refs = vec![gradient(16), gradient(16).map(|v| v * 0.5)];
        let outs = vec![refs[0].clone(), refs[1].map(|v| v + 0.02)];
        let r = MetricReport::compute(vec!["a".into(), "b".into()], &outs, &refs, &net).unwrap();
        assert_eq!(r.psnr[0], PSNR_CAP);
        assert_eq!(r.ssim[0], 1.0);
        assert_eq!(r.idd[0], 0.0);
        assert!(r.ffd.is_some());
        assert_eq!(r.to_csv().lines().count(), 3);
        assert!(MetricReport::compute(vec!["a".into()], &outs, &refs, &net).is_err());
    }
}
