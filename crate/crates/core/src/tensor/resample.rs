//! Bilinear resampling with half-pixel-centre alignment.
//!
//! Output pixel `o` along an axis of input extent `n` sampled from the window
//! `[lo, hi)` (in input pixels) reads source coordinate
//! `lo + (o + 0.5) * (hi - lo) / out - 0.5`, clamped to `[0, n - 1]`.
//! Resizing 4 → 2 therefore samples at 0.5 and 2.5, i.e. the means of
//! pixels (0, 1) and (2, 3).

use super::value::Tensor;
use crate::error::{Error, Result};

/// Two-tap interpolation weights along one axis.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w1: Vec<f64>,
}

impl AxisTaps {
    fn new(n: usize, lo: f64, hi: f64, out: usize) -> Self {
        let step = (hi - lo) / out as f64;
        let mut taps = AxisTaps {
            i0: Vec::with_capacity(out),
            i1: Vec::with_capacity(out),
            w1: Vec::with_capacity(out),
        };
        let max = (n - 1) as f64;
        for o in 0..out {
            let src = (lo + (o as f64 + 0.5) * step - 0.5).clamp(0.0, max);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            taps.i0.push(i0);
            taps.i1.push(i1);
            taps.w1.push(src - i0 as f64);
        }
        taps
    }
}

/// Precomputed sampling plan for an NHWC tensor.
#[derive(Clone, Debug)]
pub(crate) struct ResamplePlan {
    pub in_shape: [usize; 4],
    pub out_h: usize,
    pub out_w: usize,
    pub ys: AxisTaps,
    pub xs: AxisTaps,
}

/// Normalised crop box `(x0, y0, x1, y1)` with coordinates in `[0, 1]`.
pub type CropBox = [f64; 4];

impl ResamplePlan {
    pub fn new(in_shape: &[usize], bx: CropBox, out_h: usize, out_w: usize) -> Result<Self> {
        let [n, h, w, c] = match *in_shape {
            [n, h, w, c] => [n, h, w, c],
            _ => return Err(Error::invalid("resample", format!("expected NHWC, got {in_shape:?}"))),
        };
        let [x0, y0, x1, y1] = bx;
        let valid = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && b > a;
        if !valid(x0, x1) || !valid(y0, y1) {
            return Err(Error::invalid("resample", format!("degenerate or out-of-range box {bx:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resample", "zero output size"));
        }
        Ok(Self {
            in_shape: [n, h, w, c],
            out_h,
            out_w,
            ys: AxisTaps::new(h, y0 * h as f64, y1 * h as f64, out_h),
            xs: AxisTaps::new(w, x0 * w as f64, x1 * w as f64, out_w),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.in_shape[0], self.out_h, self.out_w, self.in_shape[3]]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let [n, h, w, c] = self.in_shape;
        let mut out = vec![0.0; n * self.out_h * self.out_w * c];
        let mut o = 0;
        for b in 0..n {
            let img = &x[b * h * w * c..(b + 1) * h * w * c];
            for oy in 0..self.out_h {
                let (y0, y1, wy) = (self.ys.i0[oy], self.ys.i1[oy], self.ys.w1[oy]);
                for ox in 0..self.out_w {
                    let (x0, x1, wx) = (self.xs.i0[ox], self.xs.i1[ox], self.xs.w1[ox]);
                    let p00 = (y0 * w + x0) * c;
                    let p01 = (y0 * w + x1) * c;
                    let p10 = (y1 * w + x0) * c;
                    let p11 = (y1 * w + x1) * c;
                    for ch in 0..c {
                        let top = img[p00 + ch] * (1.0 - wx) + img[p01 + ch] * wx;
                        let bot = img[p10 + ch] * (1.0 - wx) + img[p11 + ch] * wx;
                        out[o] = top * (1.0 - wy) + bot * wy;
                        o += 1;
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`ResamplePlan::forward`], accumulated into `gx`.
    pub fn backward(&self, g: &[f64], gx: &mut [f64]) {
        let [n, h, w, c] = self.in_shape;
        let mut o = 0;
        for b in 0..n {
            let img = &mut gx[b * h * w * c..(b + 1) * h * w * c];
            for oy in 0..self.out_h {
                let (y0, y1, wy) = (self.ys.i0[oy], self.ys.i1[oy], self.ys.w1[oy]);
                for ox in 0..self.out_w {
                    let (x0, x1, wx) = (self.xs.i0[ox], self.xs.i1[ox], self.xs.w1[ox]);
                    for ch in 0..c {
                        let gv = g[o];
                        o += 1;
                        img[(y0 * w + x0) * c + ch] += gv * (1.0 - wy) * (1.0 - wx);
                        img[(y0 * w + x1) * c + ch] += gv * (1.0 - wy) * wx;
                        img[(y1 * w + x0) * c + ch] += gv * wy * (1.0 - wx);
                        img[(y1 * w + x1) * c + ch] += gv * wy * wx;
                    }
                }
            }
        }
    }
}

/// Bilinear resize of an `(H, W, C)` or `(N, H, W, C)` tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    crop_resize(x, [0.0, 0.0, 1.0, 1.0], out_h, out_w)
}

/// Bilinear crop of the normalised box `bx`, resampled to `out_h × out_w`.
pub fn crop_resize(x: &Tensor, bx: CropBox, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (shape4, squeeze) = match *x.shape() {
        [h, w, c] => (vec![1, h, w, c], true),
        [n, h, w, c] => (vec![n, h, w, c], false),
        _ => return Err(Error::invalid("resample", format!("expected HWC or NHWC, got {:?}", x.shape()))),
    };
    let plan = ResamplePlan::new(&shape4, bx, out_h, out_w)?;
    let mut out_shape = plan.out_shape();
    if squeeze {
        out_shape.remove(0);
    }
    Ok(Tensor::from_parts(out_shape, plan.forward(x.data())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_to_two_averages_pairs() {
        let x = Tensor::new([1, 4, 1], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        let y = resize_bilinear(&x, 1, 2).unwrap();
        assert_eq!(y.data(), &[1.0, 5.0]);
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::new([3, 3, 1], (0..9).map(f64::from).collect()).unwrap();
        let y = resize_bilinear(&x, 3, 3).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn rejects_degenerate_box() {
        let x = Tensor::zeros([4, 4, 1]);
        assert!(crop_resize(&x, [0.5, 0.2, 0.5, 0.4], 2, 2).is_err());
    }
}
