//! Per-token cross-attention maps over the patch grid, written as PGM.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::Detector;
use crate::rng::Rng;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub bank: &'static str,
    pub token: usize,
    /// Head-averaged weights over the patches, row-major on the grid.
    pub weights: Vec<f64>,
    pub grid: usize,
}

impl AttentionMap {
    pub fn file_name(&self) -> String {
        format!("{}_{:02}.pgm", self.bank, self.token)
    }
}

/// Head-averaged maps of every bank token for sample `index` of a batch.
pub fn attention_maps(det: &Detector<f32>, levels: &Tensor<f32>, index: usize) -> Result<Vec<AttentionMap>> {
    let n = levels.dim(2);
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::shape("attention_maps", format!("{n} patches do not form a square grid")));
    }
    let (_, attn) = no_grad(|| det.prompt_features(levels, false, &mut Rng::new(0)))?;
    let banks = [("real", attn.real), ("fake", attn.fake), ("context", attn.context)];
    let mut out = Vec::new();
    for (bank, weights) in banks {
        let Some(w) = weights else {
            if bank == "context" && det.bank.context.is_none() {
                continue;
            }
            return Err(Error::Structural(
                "attention export needs the visual-to-text cross-attention stage".into(),
            ));
        };
        let (b, h, t, k) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        if index >= b {
            return Err(Error::Usage(format!("sample {index} outside batch of {b}")));
        }
        let data = w.data();
        for tok in 0..t {
            let mut mean = vec![0.0f64; k];
            for head in 0..h {
                let row = &data[((index * h + head) * t + tok) * k..][..k];
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += f64::from(v);
                }
            }
            mean.iter_mut().for_each(|m| *m /= h as f64);
            out.push(AttentionMap {
                bank,
                token: tok,
                weights: mean,
                grid,
            });
        }
    }
    Ok(out)
}

/// Min-max scaling to bytes; a flat map becomes uniform 128.
pub fn normalize_map(weights: &[f64]) -> Vec<u8> {
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; weights.len()];
    }
    weights
        .iter()
        .map(|&w| ((w - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(pixels: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |d: &str| Error::format("pgm", d);
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes.get(pos..pos + w * h).ok_or_else(|| bad("truncated pixels"))?;
    Ok((w, h, body.to_vec()))
}

/// Writes one PGM per bank token for sample `index` into `out_dir`.
pub fn export_attention_maps(
    det: &Detector<f32>,
    levels: &Tensor<f32>,
    index: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let maps = attention_maps(det, levels, index)?;
    let mut paths = Vec::with_capacity(maps.len());
    for m in &maps {
        let path = out_dir.join(m.file_name());
        fs::write(&path, encode_pgm(&normalize_map(&m.weights), m.grid, m.grid)).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
