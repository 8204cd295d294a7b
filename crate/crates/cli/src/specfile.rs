//! Plain-text model descriptions: one `key = value` per line.
//!
//! Rendering always emits every key in one fixed order, so the text form
//! embedded in containers is canonical and byte-stable.

use std::fmt;

use moeq_core::model::ModelSpec;

/// Canonical key order. `num_shared_experts`, `first_layer_dense`, and
/// `seed` may be omitted from hand-written files and default to 0 / false
/// / 0; rendering writes all nine.
pub const SPEC_KEYS: [&str; 9] = [
    "vocab_size",
    "hidden_dim",
    "ffnn_dim",
    "num_layers",
    "num_experts",
    "top_k",
    "num_shared_experts",
    "first_layer_dense",
    "seed",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpecFileError {
    BadLine(String),
    UnknownKey(String),
    DuplicateKey(String),
    BadValue { key: String, value: String },
    MissingKey(&'static str),
}

impl fmt::Display for SpecFileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpecFileError::BadLine(line) => write!(f, "expected `key = value`, got `{line}`"),
            SpecFileError::UnknownKey(key) => write!(f, "unknown key `{key}`"),
            SpecFileError::DuplicateKey(key) => write!(f, "key `{key}` given twice"),
            SpecFileError::BadValue { key, value } => {
                write!(f, "bad value `{value}` for key `{key}`")
            }
            SpecFileError::MissingKey(key) => write!(f, "missing required key `{key}`"),
        }
    }
}

impl std::error::Error for SpecFileError {}

pub fn render_spec(spec: &ModelSpec) -> String {
    format!(
        "vocab_size = {}\nhidden_dim = {}\nffnn_dim = {}\nnum_layers = {}\n\
         num_experts = {}\ntop_k = {}\nnum_shared_experts = {}\n\
         first_layer_dense = {}\nseed = {}\n",
        spec.vocab_size,
        spec.hidden_dim,
        spec.ffnn_dim,
        spec.num_layers,
        spec.num_experts,
        spec.top_k,
        spec.num_shared_experts,
        spec.first_layer_dense,
        spec.seed,
    )
}

/// Parses the key-value form. Blank lines and `#` comments are skipped;
/// every key may appear at most once. The result is not yet validated
/// against the model's structural rules.
pub fn parse_spec(text: &str) -> Result<ModelSpec, SpecFileError> {
    let mut seen: Vec<(&str, &str)> = Vec::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| SpecFileError::BadLine(line.to_string()))?;
        let (key, value) = (key.trim(), value.trim());
        if !SPEC_KEYS.contains(&key) {
            return Err(SpecFileError::UnknownKey(key.to_string()));
        }
        if seen.iter().any(|(k, _)| *k == key) {
            return Err(SpecFileError::DuplicateKey(key.to_string()));
        }
        seen.push((key, value));
    }

    let lookup = |key: &str| seen.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
    let count = |key: &'static str| -> Result<usize, SpecFileError> {
        let value = lookup(key).ok_or(SpecFileError::MissingKey(key))?;
        value.parse().map_err(|_| SpecFileError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        })
    };

    let num_shared_experts = match lookup("num_shared_experts") {
        Some(_) => count("num_shared_experts")?,
        None => 0,
    };
    let first_layer_dense = match lookup("first_layer_dense") {
        Some(v) => v.parse().map_err(|_| SpecFileError::BadValue {
            key: "first_layer_dense".to_string(),
            value: v.to_string(),
        })?,
        None => false,
    };
    let seed = match lookup("seed") {
        Some(v) => v.parse().map_err(|_| SpecFileError::BadValue {
            key: "seed".to_string(),
            value: v.to_string(),
        })?,
        None => 0,
    };

    Ok(ModelSpec {
        vocab_size: count("vocab_size")?,
        hidden_dim: count("hidden_dim")?,
        ffnn_dim: count("ffnn_dim")?,
        num_layers: count("num_layers")?,
        num_experts: count("num_experts")?,
        top_k: count("top_k")?,
        num_shared_experts,
        first_layer_dense,
        seed,
    })
}
