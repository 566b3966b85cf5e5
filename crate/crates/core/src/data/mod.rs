//! Sample manifests, image decoding, synthetic corpora and perturbations.

pub mod image;
pub mod perturb;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use image::{decode_image, preprocess, Image, Normalization};
pub use perturb::{perturb, PerturbKind, Perturbation};
pub use synth::{synthesize_dataset, Family, SynthSpec};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    /// 0 = real, 1 = fake.
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<String>,
    #[serde(default)]
    pub domain: String,
}

/// Parses a JSON-lines manifest; blank lines are skipped, unknown keys ignored.
pub fn load_manifest(path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if rec.label > 1 {
            return Err(err(format!("label {} is not 0 or 1", rec.label)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Loads every record's image, resolving relative paths against `base`.
pub fn load_images(records: &[SampleRecord], base: &Path) -> Result<Vec<Image>> {
    records
        .iter()
        .map(|r| {
            let p = if r.path.is_absolute() { r.path.clone() } else { base.join(&r.path) };
            decode_image(&p)
        })
        .collect()
}

/// Records and decoded images of a manifest.
pub fn load_dataset(manifest: &Path) -> Result<(Vec<SampleRecord>, Vec<Image>)> {
    let records = load_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let images = load_images(&records, base)?;
    Ok((records, images))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let p = Path::new("m.jsonl");
        assert!(parse_manifest("", p).unwrap().is_empty());
        let line = r#"{"path":"a.ppm","label":1,"video_id":"v0","domain":"patch_swap","extra":3}"#;
        let recs = parse_manifest(&format!("{line}\n{line}\n"), p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].video_id.as_deref(), Some("v0"));
        assert_eq!(recs[0], recs[1]);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let p = Path::new("m.jsonl");
        let text = "{\"path\":\"a\",\"label\":0}\n{\"path\":\"b\"}\n";
        match parse_manifest(text, p) {
            Err(Error::Manifest { line, detail, .. }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("label"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_manifest("{not json", p), Err(Error::Manifest { line: 1, .. })));
        assert!(parse_manifest("{\"path\":\"a\",\"label\":2}", p).is_err());
    }
}
