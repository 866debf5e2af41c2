//! 8-bit RGB image files as `(H, W, 3)` tensors in `[0, 1]`.
//!
//! Binary PPM (P6, maxval 255) is always available; `.png` needs the
//! `png` feature.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.into() }
}

/// Rounds to the nearest 8-bit level after clamping.
pub fn to_bytes(img: &Tensor) -> Vec<u8> {
    img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Result<Tensor> {
    Tensor::new(vec![h, w, 3], bytes.iter().map(|&b| b as f64 / 255.0).collect())
}

fn rgb_dims(path: &Path, img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w, 3] => Ok((h, w)),
        ref s => Err(image_err(path, format!("expected (H, W, 3) tensor, got {s:?}"))),
    }
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = rgb_dims(Path::new("<ppm>"), img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(to_bytes(img));
    Ok(out)
}

/// Parses P6 with maxval 255, allowing `#` comments in the header.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(image_err(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(image_err(path, format!("unsupported PPM magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| image_err(path, format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(image_err(path, format!("maxval {maxval} unsupported (need 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(image_err(path, format!("raster has {} bytes, expected {need}", bytes.len().saturating_sub(pos))));
    }
    from_bytes(h, w, &bytes[pos..pos + need])
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    if is_png(path) {
        return read_png(path);
    }
    let bytes = std::fs::read(path).map_err(|e| image_err(path, e.to_string()))?;
    decode_ppm(&bytes, path)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    if is_png(path) {
        return write_png(path, img);
    }
    std::fs::write(path, encode_ppm(img)?).map_err(|e| image_err(path, e.to_string()))
}

/// Single-channel map as a gray PPM, min-max normalised unless constant.
pub fn write_gray_map(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let rgb: Vec<f64> = values.iter().flat_map(|v| [(v - lo) / span; 3]).collect();
    write_image(path, &Tensor::new(vec![h, w, 3], rgb)?)
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    from_bytes(h as usize, w as usize, img.as_raw())
}

#[cfg(feature = "png")]
fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = rgb_dims(path, img)?;
    let buf = image::RgbImage::from_raw(w as u32, h as u32, to_bytes(img))
        .ok_or_else(|| image_err(path, "buffer size mismatch"))?;
    buf.save(path).map_err(|e| image_err(path, e.to_string()))
}

#[cfg(not(feature = "png"))]
fn read_png(path: &Path) -> Result<Tensor> {
    Err(image_err(path, "PNG support needs the `png` feature"))
}

#[cfg(not(feature = "png"))]
fn write_png(path: &Path, _img: &Tensor) -> Result<()> {
    Err(image_err(path, "PNG support needs the `png` feature"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levels() -> Tensor {
        let d = (0..4 * 5 * 3).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
        Tensor::new(vec![4, 5, 3], d).unwrap()
    }

    #[test]
    fn ppm_round_trip_on_levels() {
        let img = levels();
        let back = decode_ppm(&encode_ppm(&img).unwrap(), Path::new("x.ppm")).unwrap();
        assert!(back.bit_eq(&img));
    }

    #[test]
    fn header_comments_and_errors() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        let img = decode_ppm(&bytes, Path::new("c.ppm")).unwrap();
        assert_eq!(img.shape(), &[1, 2, 3]);
        assert_eq!(img.data()[0], 1.0);
        assert!(decode_ppm(b"P3\n1 1\n255\n", Path::new("a")).is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00", Path::new("a")).is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n", Path::new("a")).is_err());
    }

    #[test]
    fn files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/img.ppm");
        write_image(&path, &levels()).unwrap();
        assert!(read_image(&path).unwrap().bit_eq(&levels()));
        assert!(read_image(&dir.path().join("missing.ppm")).is_err());
    }

    #[cfg(feature = "png")]
    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        write_image(&path, &levels()).unwrap();
        assert!(read_image(&path).unwrap().bit_eq(&levels()));
    }
}
