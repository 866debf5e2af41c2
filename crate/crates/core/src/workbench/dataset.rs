//! Procedural face-like images: a vertical background gradient, a skin
//! ellipse, two dark eye blobs and a mouth arc, with jittered geometry and
//! colours. Eyes and mouth are placed inside the regional crop boxes.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::RoiBoxes;
use crate::rng::Rng;
use crate::tensor::{CropBox, Tensor};

use super::image_io::{read_image, write_image};

pub const MANIFEST: &str = "manifest.txt";
/// Sub-samples per pixel axis when rendering.
const AA: usize = 4;

type Rgb = [f64; 3];

/// Layout of one synthetic face in normalised coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceSpec {
    pub seed: u64,
    pub bg_top: Rgb,
    pub bg_bottom: Rgb,
    pub skin: Rgb,
    /// Face ellipse centre and radii.
    pub face: [f64; 4],
    pub eye_color: Rgb,
    pub left_eye: [f64; 2],
    pub right_eye: [f64; 2],
    pub eye_radius: f64,
    pub mouth_color: Rgb,
    /// Centre, half width, curvature depth and half thickness.
    pub mouth: [f64; 5],
}

fn jitter_color(rng: &mut Rng, base: Rgb, amount: f64) -> Rgb {
    base.map(|c| (c + rng.uniform_in(-amount, amount)).clamp(0.0, 1.0))
}

/// A point drawn inside `bx` shrunk by `margin` on every side.
fn inside(rng: &mut Rng, bx: CropBox, margin: f64) -> [f64; 2] {
    let [x0, y0, x1, y1] = bx;
    let mid = |a: f64, b: f64| (a + b) / 2.0;
    let (lx, hx) = ((x0 + margin).min(mid(x0, x1)), (x1 - margin).max(mid(x0, x1)));
    let (ly, hy) = ((y0 + margin).min(mid(y0, y1)), (y1 - margin).max(mid(y0, y1)));
    [rng.uniform_in(lx, hx), rng.uniform_in(ly, hy)]
}

impl FaceSpec {
    pub fn sample(seed: u64, roi: &RoiBoxes) -> Self {
        let mut rng = Rng::seed(seed);
        let eye_radius = rng.uniform_in(0.045, 0.06);
        let bg_top = jitter_color(&mut rng, [0.45, 0.6, 0.8], 0.15);
        let bg_bottom = jitter_color(&mut rng, [0.55, 0.5, 0.6], 0.15);
        let skin = jitter_color(&mut rng, [0.85, 0.68, 0.55], 0.08);
        let face = [
            0.5 + rng.uniform_in(-0.02, 0.02),
            0.55 + rng.uniform_in(-0.02, 0.02),
            rng.uniform_in(0.36, 0.42),
            rng.uniform_in(0.42, 0.46),
        ];
        let eye_color = jitter_color(&mut rng, [0.1, 0.08, 0.08], 0.06);
        let margin = eye_radius + 0.01;
        let left_eye = inside(&mut rng, roi.left_eye, margin);
        let right_eye = inside(&mut rng, roi.right_eye, margin);
        let mouth_color = jitter_color(&mut rng, [0.7, 0.25, 0.28], 0.08);
        let [mx0, my0, mx1, my1] = roi.mouth;
        let half_width = rng.uniform_in(0.25, 0.4) * (mx1 - mx0);
        let depth = rng.uniform_in(0.0, 0.3) * (my1 - my0);
        let thickness = rng.uniform_in(0.025, 0.035);
        let cx = rng.uniform_in(mx0 + half_width + 0.01, mx1 - half_width - 0.01);
        let cy = rng.uniform_in(my0 + thickness + 0.01, my1 - depth - thickness - 0.01);
        Self {
            seed,
            bg_top,
            bg_bottom,
            skin,
            face,
            eye_color,
            left_eye,
            right_eye,
            eye_radius,
            mouth_color,
            mouth: [cx, cy, half_width, depth, thickness],
        }
    }

    fn color_at(&self, x: f64, y: f64) -> Rgb {
        let [cx, cy, hw, depth, th] = self.mouth;
        let eye = |c: [f64; 2]| (x - c[0]).powi(2) + (y - c[1]).powi(2) <= self.eye_radius.powi(2);
        if eye(self.left_eye) || eye(self.right_eye) {
            return self.eye_color;
        }
        let u = (x - cx) / hw;
        if u.abs() <= 1.0 && (y - (cy + depth * (1.0 - u * u))).abs() <= th {
            return self.mouth_color;
        }
        let [fx, fy, rx, ry] = self.face;
        if ((x - fx) / rx).powi(2) + ((y - fy) / ry).powi(2) <= 1.0 {
            return self.skin;
        }
        let t = y.clamp(0.0, 1.0);
        std::array::from_fn(|c| self.bg_top[c] * (1.0 - t) + self.bg_bottom[c] * t)
    }

    /// Box-filtered `(size, size, 3)` rendering.
    pub fn render(&self, size: usize) -> Tensor {
        let mut data = Vec::with_capacity(size * size * 3);
        let n = (AA * AA) as f64;
        for py in 0..size {
            for px in 0..size {
                let mut acc = [0.0; 3];
                for sy in 0..AA {
                    for sx in 0..AA {
                        let x = (px as f64 + (sx as f64 + 0.5) / AA as f64) / size as f64;
                        let y = (py as f64 + (sy as f64 + 0.5) / AA as f64) / size as f64;
                        let c = self.color_at(x, y);
                        (0..3).for_each(|k| acc[k] += c[k]);
                    }
                }
                data.extend(acc.map(|a| a / n));
            }
        }
        Tensor::new(vec![size, size, 3], data).expect("sized buffer")
    }
}

impl fmt::Display for FaceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(",");
        write!(
            f,
            "seed={} face={} left_eye={} right_eye={} eye_r={:.4} mouth={}",
            self.seed,
            p(&self.face),
            p(&self.left_eye),
            p(&self.right_eye),
            self.eye_radius,
            p(&self.mouth)
        )
    }
}

pub fn image_name(i: usize) -> String {
    format!("face_{i:04}.ppm")
}

/// Writes `n` faces and a manifest with one `name spec` line per image.
/// Image `i` uses seed `seed·1_000_003 + i`.
pub fn gen_data(dir: &Path, n: usize, size: usize, seed: u64, roi: &RoiBoxes) -> Result<Vec<PathBuf>> {
    if n == 0 || size == 0 || size % 32 != 0 {
        return Err(Error::invalid("gen_data", format!("need n >= 1 and size divisible by 32, got n={n} size={size}")));
    }
    roi.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let spec = FaceSpec::sample(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), roi);
        let name = image_name(i);
        let path = dir.join(&name);
        write_image(&path, &spec.render(size))?;
        manifest.push_str(&format!("{name} {spec}\n"));
        paths.push(path);
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(paths)
}

/// Images listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let name = line.split_whitespace().next().expect("non-empty line").to_string();
        let img = read_image(&dir.join(&name))?;
        out.push((name, img));
    }
    if out.is_empty() {
        return Err(Error::invalid("load_dataset", format!("{} lists no images", dir.join(MANIFEST).display())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_files_and_manifest() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let roi = RoiBoxes::default();
        let pa = gen_data(a.path(), 3, 32, 0, &roi).unwrap();
        gen_data(b.path(), 3, 32, 0, &roi).unwrap();
        for p in &pa {
            let name = p.file_name().unwrap();
            assert_eq!(std::fs::read(p).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        }
        let manifest = std::fs::read_to_string(a.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest.lines().count(), 3);
        assert_eq!(load_dataset(a.path()).unwrap().len(), 3);
        assert!(gen_data(a.path(), 2, 40, 0, &roi).is_err());
    }

    #[test]
    fn faces_differ_across_seeds() {
        let roi = RoiBoxes::default();
        let a = FaceSpec::sample(1, &roi).render(32);
        let b = FaceSpec::sample(2, &roi).render(32);
        assert!(a.max_abs_diff(&b) > 0.05);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
