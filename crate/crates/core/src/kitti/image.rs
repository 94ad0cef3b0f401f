use std::io::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar RGB image with channel values in `[0, 1]`, stored `3×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self { height, width, data }
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Dimension(format!(
                "{height}×{width} RGB image needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, self.height, self.width], self.data.clone()).expect("planar layout")
    }

    /// Snaps every value to the nearest multiple of 1/255, clamped to `[0, 1]`.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Binary PPM (`P6`, maxval 255).
    pub fn write_ppm(&self, mut out: impl std::io::Write) -> Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let plane = self.height * self.width;
        let mut bytes = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for c in 0..3 {
                bytes.push((self.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Parse("PPM header truncated".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(Error::Parse("not a binary PPM (P6) file".into()));
        }
        let mut num = |what: &str| -> Result<usize> {
            let t = token()?;
            t.parse().map_err(|_| Error::Parse(format!("PPM {what}: bad value {t:?}")))
        };
        let width = num("width")?;
        let height = num("height")?;
        let maxval = num("maxval")?;
        if maxval != 255 {
            return Err(Error::Parse(format!("PPM maxval {maxval} unsupported (need 255)")));
        }
        let body = &bytes[(pos + 1).min(bytes.len())..];
        let plane = width * height;
        if body.len() != 3 * plane {
            return Err(Error::Parse(format!("PPM body has {} bytes, expected {}", body.len(), 3 * plane)));
        }
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = f64::from(body[3 * i + c]) / 255.0;
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_ppm(&mut out).expect("in-memory write");
        out.flush().ok();
        out
    }
}

/// Illumination change `y = clamp(a·x + b, 0, 255)` on the 0–255 scale,
/// returned renormalized to `[0, 1]`.
pub fn perturb_illumination(image: &Image, a: f64, b: f64) -> Image {
    let mut out = image.clone();
    for v in &mut out.data {
        *v = (a * (*v * 255.0) + b).clamp(0.0, 255.0) / 255.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(level: f64) -> Image {
        Image::filled(2, 3, [level / 255.0; 3])
    }

    #[test]
    fn illumination_fixtures() {
        let img = gray(100.0);
        let same = perturb_illumination(&img, 1.0, 0.0);
        for (a, b) in same.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        let light = perturb_illumination(&img, 3.0, 5.0);
        assert!(light.data().iter().all(|&v| v == 1.0));
        let dark = perturb_illumination(&img, 0.3, 5.0);
        assert!(dark.data().iter().all(|&v| (v * 255.0 - 35.0).abs() < 1e-9));
    }

    #[test]
    fn ppm_roundtrip_is_exact_after_quantize() {
        let mut img = Image::from_planar(2, 2, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        img.quantize();
        let bytes = img.to_ppm_bytes();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(Image::read_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_header_comments_and_errors() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        let img = Image::read_ppm(&bytes).unwrap();
        assert_eq!((img.get(0, 0, 0), img.get(1, 0, 0), img.get(2, 0, 0)), (1.0, 0.0, 0.2));
        assert!(Image::read_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(Image::read_ppm(b"P6\n2 2\n255\n\x00\x00").is_err());
    }
}
