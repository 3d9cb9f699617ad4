//! Layered settings: built-in defaults, then a user TOML file, then CLI
//! flags — later layers win key by key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::LESS_THINK_PHRASE;
use crate::error::{Error, Result};
use crate::llm::EndpointConfig;
use crate::segment::ChatTemplate;

const DEFAULT_TOML: &str = include_str!("../assets/default_config.toml");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointSection {
    pub main: EndpointConfig,
    pub judge: EndpointConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeSection {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    #[serde(default = "default_less_think_phrase")]
    pub less_think_phrase: String,
}

fn default_less_think_phrase() -> String {
    LESS_THINK_PHRASE.to_string()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSection {
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub max_epochs: usize,
    pub effective_batch: usize,
    pub weight_decay: f64,
    pub mu_floor: f64,
    pub seed: u64,
    pub lr_grid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdkSection {
    pub pool: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvidersSection {
    pub embedder: String,
    pub nli: String,
    pub judge: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathsSection {
    pub runs_dir: PathBuf,
    pub cache_dir: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalSection {
    #[serde(default)]
    pub max_examples_per_set: Option<usize>,
}

/// The full settings tree mirrored by the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Settings {
    pub endpoint: EndpointSection,
    pub template: ChatTemplate,
    pub decode: DecodeSection,
    pub training: TrainingSection,
    pub idk: IdkSection,
    pub providers: ProvidersSection,
    pub paths: PathsSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl Default for Settings {
    fn default() -> Self {
        toml::from_str(DEFAULT_TOML).expect("built-in defaults parse")
    }
}

impl Settings {
    /// Defaults overlaid with the user's file: any key present in the file
    /// replaces the default, everything else stays.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Validation(format!("cannot read config file {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn from_toml(user_toml: &str) -> Result<Self> {
        let mut base: toml::Value = toml::from_str(DEFAULT_TOML).expect("built-in defaults parse");
        let user: toml::Value = toml::from_str(user_toml)
            .map_err(|e| Error::Validation(format!("config parse error: {e}")))?;
        merge_toml(&mut base, user);
        base.try_into()
            .map_err(|e| Error::Validation(format!("config error: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.idk.pool.is_empty() {
            return Err(Error::Validation("idk.pool must not be empty".into()));
        }
        if self.training.lr_grid.is_empty() {
            return Err(Error::Validation(
                "training.lr_grid must not be empty".into(),
            ));
        }
        if !(self.training.mu_floor > 0.0 && self.training.mu_floor < 1.0) {
            return Err(Error::Validation(format!(
                "training.mu_floor must lie in (0, 1), got {}",
                self.training.mu_floor
            )));
        }
        if self.training.effective_batch == 0 {
            return Err(Error::Validation(
                "training.effective_batch must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Recursively overlay `user` onto `base`: tables merge key by key, every
/// other value (including arrays) replaces wholesale.
fn merge_toml(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(base_map), toml::Value::Table(user_map)) => {
            for (key, user_value) in user_map {
                match base_map.get_mut(&key) {
                    Some(base_value) => merge_toml(base_value, user_value),
                    None => {
                        base_map.insert(key, user_value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn built_in_defaults_parse_and_validate() {
        let settings = Settings::default();
        settings.validate().unwrap();
        assert_eq!(settings.training.max_epochs, 5);
        assert_eq!(settings.training.effective_batch, 32);
        assert_eq!(settings.training.weight_decay, 0.01);
        assert_eq!(settings.training.mu_floor, 0.6);
        assert_eq!(settings.training.lr_grid, vec![1e-5, 2e-6, 1e-6]);
        assert_eq!(settings.decode.less_think_phrase, LESS_THINK_PHRASE);
        assert_eq!(settings.idk.pool.len(), 10);
        assert_eq!(settings.eval.max_examples_per_set, None);
    }

    #[test]
    fn user_file_overrides_only_named_keys() {
        let settings =
            Settings::from_toml("[training]\nseed = 99\n\n[paths]\nruns_dir = \"elsewhere\"\n")
                .unwrap();
        assert_eq!(settings.training.seed, 99);
        // Sibling keys in the same table keep their defaults.
        assert_eq!(settings.training.max_epochs, 5);
        assert_eq!(settings.paths.runs_dir, PathBuf::from("elsewhere"));
        assert_eq!(settings.paths.cache_dir, PathBuf::from("cache"));
    }

    #[test]
    fn endpoint_overrides_merge_into_defaults() {
        let settings = Settings::from_toml(
            "[endpoint.main]\nmodel = \"big-model\"\ncredential_env = \"MAIN_KEY\"\n",
        )
        .unwrap();
        assert_eq!(settings.endpoint.main.model, "big-model");
        assert_eq!(
            settings.endpoint.main.credential_env.as_deref(),
            Some("MAIN_KEY")
        );
        assert_eq!(settings.endpoint.main.retry_budget, 2);
        assert_eq!(settings.endpoint.judge.model, "offline-stub");
    }

    #[test]
    fn arrays_replace_rather_than_append() {
        let settings = Settings::from_toml("[training]\nlr_grid = [3e-6]\n").unwrap();
        assert_eq!(settings.training.lr_grid, vec![3e-6]);
    }

    #[test]
    fn missing_file_error_names_the_path() {
        let err = Settings::load(Path::new("/nonexistent/settings.toml")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/settings.toml"));
    }

    #[test]
    fn malformed_toml_is_a_validation_error() {
        let err = Settings::from_toml("not valid [ toml").unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn settings_round_trip_through_toml() {
        let settings = Settings::default();
        let text = toml::to_string(&settings).unwrap();
        let reparsed = Settings::from_toml(&text).unwrap();
        assert_eq!(reparsed.training.seed, settings.training.seed);
        assert_eq!(reparsed.idk.pool, settings.idk.pool);
    }

    #[test]
    fn empty_idk_pool_fails_validation() {
        let settings = Settings::from_toml("[idk]\npool = []\n").unwrap();
        assert!(settings.validate().is_err());
    }
}
