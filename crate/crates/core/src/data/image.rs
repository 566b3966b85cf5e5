//! RGB images and their on-disk containers (binary PPM and raw `CTEN`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Channel-major `[3, H, W]` pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::shape("image", format!("{height}x{width} needs {} values", 3 * height * width)));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; 3 * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    /// Edge-clamped read.
    pub fn get_clamped(&self, c: usize, y: isize, x: isize) -> f32 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(c, y, x)
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(self.data.iter().map(|&v| T::of(f64::from(v))).collect(), &[3, self.height, self.width])
            .expect("consistent image")
    }

    /// Rounds to 8 bits, as stored in a PPM.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f32::from(to_byte(v)) / 255.0).collect(),
        }
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                out.push(to_byte(img.get(c, y, x)));
            }
        }
    }
    out
}

fn ppm_err(detail: impl Into<String>) -> Error {
    Error::format("ppm", detail)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(ppm_err("bad magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ppm_err("malformed header"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ppm_err("header value overflows"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(ppm_err(format!("maxval {maxval} unsupported, only 255")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ppm_err("missing separator after header"));
    }
    pos += 1;
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| ppm_err("dimensions overflow"))?;
    let px = bytes
        .get(pos..)
        .filter(|rest| rest.len() == n)
        .ok_or_else(|| ppm_err(format!("expected {n} payload bytes")))?;
    let mut img = Image::filled(height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                img.set(c, y, x, f32::from(px[(y * width + x) * 3 + c]) / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn encode_cten(img: &Image) -> Vec<u8> {
    let mut out = b"CTEN".to_vec();
    out.push(3);
    for d in [3, img.height, img.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cten(bytes: &[u8]) -> Result<Image> {
    let err = |d: &str| Error::format("cten", d);
    if bytes.len() < 17 || &bytes[..4] != b"CTEN" {
        return Err(err("bad magic or truncated header"));
    }
    if bytes[4] != 3 {
        return Err(err("rank must be 3"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c != 3 {
        return Err(err("expected 3 channels"));
    }
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| err("dimensions overflow"))?;
    let payload = &bytes[17..];
    if Some(payload.len()) != n.checked_mul(4) {
        return Err(err("payload size mismatch"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Image::new(h, w, data)
}

/// Decodes by content: `P6` PPM or `CTEN`.
pub fn decode_image_bytes(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(b"CTEN") {
        decode_cten(bytes)
    } else {
        Err(Error::format("image", "unrecognized magic"))
    }
}

pub fn decode_image(path: &Path) -> Result<Image> {
    decode_image_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Normalization applied after resizing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn resize_bilinear(img: &Image, size: usize) -> Image {
    if img.height == size && img.width == size {
        return img.clone();
    }
    let mut out = Image::filled(size, size, 0.0);
    let sy = img.height as f64 / size as f64;
    let sx = img.width as f64 / size as f64;
    for y in 0..size {
        let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = (fy - y0 as f64).min(1.0) as f32;
        for x in 0..size {
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = (fx - x0 as f64).min(1.0) as f32;
            for c in 0..3 {
                let top = img.get(c, y0, x0) * (1.0 - wx) + img.get(c, y0, x1) * wx;
                let bot = img.get(c, y1, x0) * (1.0 - wx) + img.get(c, y1, x1) * wx;
                out.set(c, y, x, top * (1.0 - wy) + bot * wy);
            }
        }
    }
    out
}

/// Resize to `size` and standardize per channel.
pub fn preprocess(img: &Image, size: usize, norm: &Normalization) -> Image {
    let mut out = resize_bilinear(img, size);
    let plane = size * size;
    for c in 0..3 {
        for v in &mut out.data[c * plane..(c + 1) * plane] {
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
    }
    out
}

/// Stacks preprocessed images into `[B, 3, S, S]`.
pub fn batch_tensor<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::shape("batch_tensor", "empty batch"));
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::shape("batch_tensor", "images differ in size"));
        }
        data.extend(img.data.iter().map(|&v| T::of(f64::from(v))));
    }
    Tensor::new(data, &[images.len(), 3, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| (i % 251) as f32 / 250.0).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn white_pixel_ppm() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(img.data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn ppm_roundtrip_of_quantized_image() {
        let img = ramp(5, 7).quantized();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        let commented = b"P6 # note\n2 1 255\n\x00\x10\x20\x30\x40\x50";
        assert_eq!(decode_ppm(commented).unwrap().width, 2);
    }

    #[test]
    fn ppm_rejections() {
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n1 2 3").is_err());
        assert!(decode_ppm(b"P6\n99999999999999999999 1\n255\n").is_err());
        assert!(decode_ppm(b"P6\n4294967296 4294967296\n255\n").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    }

    #[test]
    fn cten_roundtrip_is_bit_exact() {
        let mut img = ramp(4, 3);
        img.data[5] = 0.1 + 1e-7;
        let back = decode_cten(&encode_cten(&img)).unwrap();
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(decode_image_bytes(b"JUNKJUNK").is_err());
        let mut bad = encode_cten(&img);
        bad.pop();
        assert!(decode_cten(&bad).is_err());
    }

    #[test]
    fn resize_identity_and_average() {
        let img = ramp(6, 6);
        assert_eq!(resize_bilinear(&img, 6), img);
        let sq = Image::new(2, 2, vec![0.0, 0.2, 0.4, 0.6, 1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.3, 0.3]).unwrap();
        let one = resize_bilinear(&sq, 1);
        let expect = [0.3, 1.0, 0.2];
        for (a, b) in one.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_standardizes_to_zero() {
        let img = Image::filled(4, 4, 0.3);
        let norm = Normalization {
            mean: [0.3; 3],
            std: [1.0; 3],
        };
        assert!(preprocess(&img, 4, &norm).data.iter().all(|v| *v == 0.0));
    }
}
