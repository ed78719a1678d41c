//! Key-value config files mapped onto `TrainConfig`.
//!
//! Format: one `key = value` per line, `#` comments, blank lines ignored.
//! Unknown keys are rejected by name.

use std::path::Path;

use tfanet_core::error::{Error, Result};
use tfanet_core::train::TrainConfig;

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "steps",
    "batch_size",
    "learning_rate",
    "weight_decay",
    "grad_clip",
    "decay_at",
    "train_samples",
    "val_samples",
    "input_hw",
    "base_channels",
    "text_dim",
    "max_len",
    "scan_state_dim",
    "scan_feature_dim",
    "scan_directions",
    "kernel_tokens",
    "decoder_channels",
    "kernel_sizes",
    "epsilon",
    "variant",
];

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse value `{value}`")))
}

fn parse_csv(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|p| parse(key, p)).collect()
}

/// Apply one `key = value` assignment. Unknown keys are named in the error.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "seed" => cfg.seed = parse(key, value)?,
        "steps" => cfg.steps = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "learning_rate" => cfg.learning_rate = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        "grad_clip" => cfg.grad_clip = parse(key, value)?,
        "decay_at" => cfg.decay_at = parse(key, value)?,
        "train_samples" => cfg.train_samples = parse(key, value)?,
        "val_samples" => cfg.val_samples = parse(key, value)?,
        "input_hw" => cfg.model.input_hw = parse(key, value)?,
        "base_channels" => cfg.model.base_channels = parse(key, value)?,
        "text_dim" => cfg.model.text_dim = parse(key, value)?,
        "max_len" => cfg.model.max_len = parse(key, value)?,
        "scan_state_dim" => cfg.model.scan.state_dim = parse(key, value)?,
        "scan_feature_dim" => cfg.model.scan.feature_dim = parse(key, value)?,
        "scan_directions" => cfg.model.scan.directions = parse(key, value)?,
        "kernel_tokens" => cfg.model.kernel_tokens = parse(key, value)?,
        "decoder_channels" => cfg.model.decoder_channels = parse(key, value)?,
        "kernel_sizes" => cfg.model.kernel_sizes = parse_csv(key, value)?,
        "epsilon" => cfg.model.epsilon = parse(key, value)?,
        "variant" => cfg.model.variant = value.trim().parse()?,
        other => {
            return Err(Error::Config(format!(
                "unknown config key `{other}` (known keys: {})",
                KNOWN_KEYS.join(", ")
            )))
        }
    }
    Ok(())
}

/// Parse a whole config file over the defaults.
pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    let mut cfg = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "{}:{}: expected `key = value`, got `{raw}`",
                path.display(),
                lineno + 1
            ))
        })?;
        apply(&mut cfg, key.trim(), value)?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tfanet_core::model::Variant;

    #[test]
    fn applies_known_keys() {
        let mut cfg = TrainConfig::default();
        apply(&mut cfg, "steps", "42").unwrap();
        apply(&mut cfg, "learning_rate", "0.01").unwrap();
        apply(&mut cfg, "kernel_sizes", "1,3").unwrap();
        apply(&mut cfg, "variant", "softmax").unwrap();
        assert_eq!(cfg.steps, 42);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.model.kernel_sizes, vec![1, 3]);
        assert_eq!(cfg.model.variant, Variant::SoftmaxAttention);
    }

    #[test]
    fn rejects_unknown_key_by_name() {
        let mut cfg = TrainConfig::default();
        let err = apply(&mut cfg, "learnig_rate", "0.01").unwrap_err();
        assert!(err.to_string().contains("learnig_rate"), "{err}");
    }

    #[test]
    fn rejects_bad_value_naming_key() {
        let mut cfg = TrainConfig::default();
        let err = apply(&mut cfg, "steps", "three").unwrap_err();
        assert!(err.to_string().contains("steps"), "{err}");
    }
}
