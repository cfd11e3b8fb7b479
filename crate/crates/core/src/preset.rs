//! Named architecture presets, stored as JSON.
//!
//! ```json
//! { "name": "tokenformer-desk", "arm": "tokenformer", "model": { "n_layer": 2, ... } }
//! ```
//!
//! `model` holds a [`ModelConfig`] for the Tokenformer arm and a
//! [`TransformerConfig`] for the Transformer arm. The bundled presets are
//! compiled in; any other file path is read from disk.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::TransformerConfig;
use crate::error::{Error, Result};
use crate::lm::Arm;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arm", content = "model", rename_all = "lowercase")]
pub enum ArchConfig {
    Tokenformer(ModelConfig),
    Transformer(TransformerConfig),
}

impl ArchConfig {
    pub fn arm(&self) -> Arm {
        match self {
            ArchConfig::Tokenformer(_) => Arm::Tokenformer,
            ArchConfig::Transformer(_) => Arm::Transformer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ArchConfig::Tokenformer(c) => c.validate(),
            ArchConfig::Transformer(c) => c.validate(),
        }
    }

    pub fn tokenformer(&self) -> Result<&ModelConfig> {
        match self {
            ArchConfig::Tokenformer(c) => Ok(c),
            ArchConfig::Transformer(_) => Err(Error::Config("expected a tokenformer config".into())),
        }
    }

    pub fn transformer(&self) -> Result<&TransformerConfig> {
        match self {
            ArchConfig::Transformer(c) => Ok(c),
            ArchConfig::Tokenformer(_) => Err(Error::Config("expected a transformer config".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    #[serde(flatten)]
    pub arch: ArchConfig,
}

const BUNDLED: [(&str, &str); 12] = [
    ("tokenformer-150m", include_str!("../presets/tokenformer-150m.json")),
    ("tokenformer-450m", include_str!("../presets/tokenformer-450m.json")),
    ("tokenformer-900m", include_str!("../presets/tokenformer-900m.json")),
    ("tokenformer-1.5b", include_str!("../presets/tokenformer-1.5b.json")),
    ("tokenformer-124m", include_str!("../presets/tokenformer-124m.json")),
    ("tokenformer-354m", include_str!("../presets/tokenformer-354m.json")),
    ("tokenformer-757m", include_str!("../presets/tokenformer-757m.json")),
    ("tokenformer-1.4b", include_str!("../presets/tokenformer-1.4b.json")),
    ("tokenformer-desk", include_str!("../presets/tokenformer-desk.json")),
    ("tokenformer-desk-128", include_str!("../presets/tokenformer-desk-128.json")),
    ("transformer-desk", include_str!("../presets/transformer-desk.json")),
    ("transformer-desk-128", include_str!("../presets/transformer-desk-128.json")),
];

/// The four parameter-reuse sizes, smallest first.
pub const REUSE_LADDER: [&str; 4] = ["tokenformer-124m", "tokenformer-354m", "tokenformer-757m", "tokenformer-1.4b"];

impl Preset {
    pub fn names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Preset = serde_json::from_str(text)?;
        p.arch.validate()?;
        Ok(p)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("no preset named {name:?}")))?;
        Self::from_json(text)
    }

    /// A bundled preset name, or else a path to a preset file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if Self::names().any(|n| n == name_or_path) {
            return Self::bundled(name_or_path);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            let known: Vec<&str> = Self::names().collect();
            return Err(Error::Config(format!(
                "{name_or_path:?} is neither a preset ({}) nor a file",
                known.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_preset_parses() {
        for name in Preset::names() {
            let p = Preset::bundled(name).unwrap();
            assert_eq!(p.name, name);
            assert!(name.starts_with(&p.arch.arm().to_string()));
        }
    }

    #[test]
    fn reuse_ladder_shares_fixed_dimensions() {
        let cfgs: Vec<ModelConfig> =
            REUSE_LADDER.iter().map(|n| Preset::bundled(n).unwrap().arch.tokenformer().unwrap().clone()).collect();
        let pairs: Vec<(usize, usize)> = cfgs.iter().map(|c| (c.n_q, c.n_ffn)).collect();
        assert_eq!(pairs, [(576, 2304), (2140, 8560), (4850, 19400), (8620, 34480)]);
        for c in &cfgs {
            assert_eq!((c.n_layer, c.d_model, c.n_head), (12, 768, 12));
        }
    }

    #[test]
    fn desk_preset_matches_constructor() {
        let p = Preset::bundled("tokenformer-desk").unwrap();
        assert_eq!(p.arch, ArchConfig::Tokenformer(ModelConfig::desk()));
    }

    #[test]
    fn unknown_names_and_bad_json_fail() {
        assert!(Preset::resolve("no-such-preset").is_err());
        assert!(Preset::from_json(r#"{"name":"x","arm":"mamba","model":{}}"#).is_err());
        let zero_heads =
            r#"{"name":"x","arm":"transformer","model":{"n_layer":1,"d_model":8,"n_head":0,"n_vocab":4,"max_seq":4}}"#;
        assert!(Preset::from_json(zero_heads).is_err());
    }

    #[test]
    fn preset_files_resolve_by_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mine.json");
        let p = Preset::bundled("transformer-desk").unwrap();
        std::fs::write(&path, serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(Preset::resolve(path.to_str().unwrap()).unwrap(), p);
    }
}
