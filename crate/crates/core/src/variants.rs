//! Built-in model variants, shipped as TOML documents under `configs/variants`.

use std::path::Path;

use crate::decoder::ModelConfig;
use crate::error::{Error, Result};

const BUILTIN: &[(&str, &str)] = &[
    ("nano", include_str!("../configs/variants/nano.toml")),
    ("b0", include_str!("../configs/variants/b0.toml")),
    ("b2", include_str!("../configs/variants/b2.toml")),
    ("b5", include_str!("../configs/variants/b5.toml")),
];

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN.iter().map(|(n, _)| *n)
}

pub fn parse_variant(text: &str) -> Result<ModelConfig> {
    let cfg: ModelConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid variant document: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A built-in name (case-insensitive) or a path to a variant file.
pub fn load_variant(name_or_path: &str) -> Result<ModelConfig> {
    let key = name_or_path.to_ascii_lowercase();
    if let Some((_, text)) = BUILTIN.iter().find(|(n, _)| *n == key) {
        return parse_variant(text);
    }
    let path = Path::new(name_or_path);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return parse_variant(&text);
    }
    Err(Error::Config(format!(
        "unknown variant {name_or_path:?}; built-ins are {}",
        builtin_names().collect::<Vec<_>>().join(", ")
    )))
}
