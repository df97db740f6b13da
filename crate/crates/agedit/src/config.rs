//! Training configuration files (TOML, flat keys, every key optional).

use std::path::Path;

use agedit_core::train::TrainConfig;
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};
use crate::format::{read_text, write_file};

/// Every key with its meaning; the order here is the order of `--help`.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("stage", "training stage: \"I\" (noise loss) or \"II\" (noise + age loss)"),
    ("lambda", "weight of the age loss in stage II (>= 0)"),
    ("learning_rate", "Adam step size"),
    ("batch_size", "samples per optimizer step"),
    ("steps", "optimizer steps in this stage"),
    ("seed", "seed for initialization, batches, timesteps and noise"),
    ("enable_age_branch", "age-embedding and age-phrase cross-attention branches"),
    ("enable_id_branch", "identity-embedding cross-attention branch"),
    ("enable_acg", "train the age guidance head in stage II"),
    ("sampler", "\"ddim\" (deterministic) or \"ddpm\" (ancestral)"),
    ("sample_steps", "sampler steps for ddim"),
    ("T", "diffusion timesteps"),
    ("beta_min", "first noise rate of the linear schedule"),
    ("beta_max", "last noise rate of the linear schedule"),
    ("joint_from_scratch", "allow stage II without a stage-I checkpoint"),
    ("acg_target", "\"probe\" (frozen age probe on z0) or \"ground_truth\""),
    ("acg_noise", "noise read by the guidance head: \"predicted\" or \"true\""),
    ("d_model", "token width"),
    ("blocks", "transformer blocks"),
    ("ff_hidden", "feed-forward hidden width"),
    ("m_id", "tokens produced from the identity embedding"),
    ("m_age", "tokens produced from the age embedding"),
];

pub fn parse_config(text: &str) -> AppResult<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| AppError::Config(e.message().to_string()))?;
    cfg.validate().map_err(|e| AppError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> AppResult<TrainConfig> {
    parse_config(&read_text(path)?).map_err(|e| match e {
        AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn config_to_toml(cfg: &TrainConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

pub fn save_config(path: &Path, cfg: &TrainConfig) -> AppResult<()> {
    write_file(path, config_to_toml(cfg).as_bytes())
}

/// SHA-256 of the canonical JSON form.
pub fn config_digest(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// The defaults table printed by `--help`.
pub fn defaults_table() -> String {
    let defaults = toml::Value::try_from(TrainConfig::default()).expect("config serializes");
    let mut out = String::from("Training config keys (TOML; every key optional):\n");
    for (key, doc) in KEY_DOCS {
        let value = defaults.get(key).map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("  {key:<20} = {value:<10} # {doc}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), TrainConfig::default());
    }

    #[test]
    fn negative_lambda_names_field() {
        match parse_config("lambda = -1.0") {
            Err(AppError::Config(m)) => assert!(m.contains("lambda"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_type_mismatches_are_rejected() {
        assert!(matches!(parse_config("lamda = 0.1"), Err(AppError::Config(_))));
        assert!(matches!(parse_config("steps = \"many\""), Err(AppError::Config(_))));
        assert!(matches!(parse_config("stage = \"III\""), Err(AppError::Config(_))));
    }

    #[test]
    fn round_trip_keeps_digest() {
        let cfg = parse_config("stage = \"II\"\nlambda = 0.25\nT = 100\nsample_steps = 10\nsampler = \"ddpm\"").unwrap();
        let back = parse_config(&config_to_toml(&cfg)).unwrap();
        assert_eq!(config_digest(&back), config_digest(&cfg));
        assert_eq!(back, cfg);
    }

    #[test]
    fn table_lists_every_key() {
        let table = defaults_table();
        let defaults = toml::Value::try_from(TrainConfig::default()).unwrap();
        for key in defaults.as_table().unwrap().keys() {
            assert!(KEY_DOCS.iter().any(|(k, _)| k == key), "undocumented key {key}");
            assert!(table.contains(key.as_str()));
        }
    }
}
