//! Run configuration: one JSON document with a section per subsystem.
//!
//! A user file is deep-merged over the selected profile's defaults and then
//! decoded strictly, so unknown keys and type errors report their key path.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::objective::LossConfig;
use crate::prompt::PromptConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Usage(format!("unknown profile `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub test_manifests: Vec<PathBuf>,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Images encoded for attention export.
    pub attention_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            attention_samples: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub backbone: BackboneConfig,
    pub prompts: PromptConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::default(),
            Profile::Paper => Self {
                profile,
                backbone: BackboneConfig::paper(),
                prompts: PromptConfig::default(),
                fusion: FusionConfig {
                    heads: 32,
                    ..FusionConfig::default()
                },
                train: TrainConfig {
                    lr: 1e-3,
                    epochs: 20,
                    ..TrainConfig::default()
                },
                ..Self::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prompts.validate(self.backbone.context_length)?;
        let heads = self.fusion.heads;
        for (what, width) in [("text", self.backbone.text_width), ("vision", self.backbone.vision_width)] {
            if heads == 0 || width % heads != 0 {
                return Err(Error::config(
                    "fusion.heads",
                    format!("{heads} heads do not divide the {what} width {width}"),
                ));
            }
        }
        if let Some(depth) = self.loss.depth {
            let len = self.similarity_len();
            if depth == 0 || depth + 1 > len {
                return Err(Error::config(
                    "loss.depth",
                    format!("depth {depth} needs {} similarity entries, have {len}", depth + 1),
                ));
            }
        }
        self.train.validate()?;
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    /// Length of the similarity vector under this configuration.
    pub fn similarity_len(&self) -> usize {
        let context = self.prompts.composition != crate::prompt::Composition::NoContext;
        2 + usize::from(context) + usize::from(self.loss.prior_prompt)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("configuration serializes")
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
pub fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => deep_merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Decodes `text` over the profile defaults and validates the result.
pub fn resolve_str(text: &str, profile: Profile) -> Result<RunConfig> {
    let mut merged = RunConfig::for_profile(profile).to_json();
    if !text.trim().is_empty() {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::config("<root>", e.to_string()))?;
        if !user.is_object() {
            return Err(Error::config("<root>", "configuration must be a JSON object"));
        }
        deep_merge(&mut merged, user);
    }
    merged["profile"] = serde_json::to_value(profile).expect("profile serializes");
    let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads an optional configuration file; `None` yields the profile defaults.
pub fn resolve_config(path: Option<&Path>, profile: Profile) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    resolve_str(&text, profile)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_desk_defaults() {
        assert_eq!(resolve_str("", Profile::Desk).unwrap(), RunConfig::default());
        assert_eq!(resolve_str("{}", Profile::Desk).unwrap(), RunConfig::default());
    }

    #[test]
    fn oversized_context_names_prompts_m() {
        match resolve_str(r#"{"prompts": {"M": 64}}"#, Profile::Desk) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "prompts.M"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_and_mistyped_keys_report_paths() {
        match resolve_str(r#"{"train": {"epochz": 3}}"#, Profile::Desk) {
            Err(Error::Config { key, detail }) => {
                assert_eq!(key, "train.epochz");
                assert!(detail.contains("epochz"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
        match resolve_str(r#"{"train": {"lr": "fast"}}"#, Profile::Desk) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "train.lr"),
            other => panic!("{other:?}"),
        }
        assert!(resolve_str(r#"{"bogus": 1}"#, Profile::Desk).is_err());
        assert!(resolve_str("[1]", Profile::Desk).is_err());
    }

    #[test]
    fn merge_keeps_untouched_siblings() {
        let cfg = resolve_str(r#"{"train": {"epochs": 3}, "backbone": {"tap_blocks": [8]}}"#, Profile::Desk).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.backbone.tap_blocks, vec![8]);
        assert_eq!(cfg.backbone.vision_width, 64);
    }

    #[test]
    fn paper_profile_values() {
        let cfg = resolve_str("", Profile::Paper).unwrap();
        assert_eq!((cfg.prompts.k_r, cfg.prompts.k_f, cfg.prompts.m), (2, 2, 16));
        assert_eq!(cfg.fusion.heads, 32);
        assert_eq!(cfg.backbone.tap_blocks, vec![4, 8, 12, 16, 20, 24]);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.epochs, 20);
        assert_eq!(cfg.profile, Profile::Paper);
    }

    #[test]
    fn constraint_violations() {
        assert!(resolve_str(r#"{"train": {"epochs": 0}}"#, Profile::Desk).is_err());
        assert!(resolve_str(r#"{"train": {"lr": 0.0}}"#, Profile::Desk).is_err());
        match resolve_str(r#"{"fusion": {"heads": 5}}"#, Profile::Desk) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "fusion.heads"),
            other => panic!("{other:?}"),
        }
        match resolve_str(r#"{"loss": {"depth": 4}}"#, Profile::Desk) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "loss.depth"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = resolve_str(r#"{"prompts": {"arrangement": "split"}}"#, Profile::Desk).unwrap();
        let again = resolve_str(&cfg.to_json().to_string(), Profile::Desk).unwrap();
        assert_eq!(cfg, again);
    }
}
