use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use lineage_core::classify::{HttpClassifier, ReplayClassifier, StubClassifier};
use lineage_core::probe::{DirectoryGenerator, HttpGenerator};
use lineage_core::simulator::{
    make_lineage, LineageParams, SimClassifier, SimGenerator, SimModelSpec,
};
use lineage_core::{
    build_default_catalogue, load_catalogue, AttributionConfig, Classifier, Generator,
    PromptCatalogue, RetryPolicy,
};
use serde::{Deserialize, Serialize};

/// Everything a run needs besides the command line. Credentials never live
/// here: the HTTP generator names an environment variable instead.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub catalogue: Option<PathBuf>,
    pub model_id: Option<String>,
    pub generator: GeneratorConfig,
    pub classifier: ClassifierConfig,
    pub plan: PlanConfig,
    pub attribution: AttributionConfig,
    pub base_models: Vec<String>,
    pub output_dir: PathBuf,
    pub unit_price: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            catalogue: None,
            model_id: None,
            generator: GeneratorConfig::default(),
            classifier: ClassifierConfig::default(),
            plan: PlanConfig::default(),
            attribution: AttributionConfig::default(),
            base_models: Vec::new(),
            output_dir: PathBuf::from("out"),
            unit_price: 0.04,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorConfig {
    Http {
        endpoint: String,
        /// Name of the environment variable holding the API key.
        #[serde(default)]
        api_key_env: Option<String>,
    },
    Directory {
        path: PathBuf,
    },
    Simulator {
        #[serde(default)]
        spec: Option<PathBuf>,
        #[serde(default)]
        lineage_seed: u64,
    },
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::Simulator {
            spec: None,
            lineage_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierConfig {
    Http {
        endpoint: String,
    },
    Stub {
        #[serde(default)]
        seed: u64,
    },
    Replay {
        fixture: PathBuf,
    },
    #[default]
    Simulator,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub n_per_prompt: usize,
    pub seed_base: u64,
    pub parallelism: usize,
    pub max_missing: usize,
    pub retry: RetryPolicy,
    pub width: u32,
    pub height: u32,
    pub timeout_secs: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            n_per_prompt: lineage_core::probe::DEFAULT_SAMPLES_PER_PROMPT,
            seed_base: 0,
            parallelism: 4,
            max_missing: 0,
            retry: RetryPolicy::default(),
            width: 1024,
            height: 1024,
            timeout_secs: 120,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        if cfg.unit_price.is_nan() || cfg.unit_price < 0.0 {
            bail!("unit_price must be non-negative");
        }
        Ok(cfg)
    }

    pub fn catalogue(&self) -> Result<PromptCatalogue> {
        match &self.catalogue {
            Some(path) => Ok(load_catalogue(path)?),
            None => Ok(build_default_catalogue()),
        }
    }

    pub fn generator(
        &self,
        model_id: &str,
        catalogue: &PromptCatalogue,
    ) -> Result<Box<dyn Generator>> {
        let timeout = Duration::from_secs(self.plan.timeout_secs);
        Ok(match &self.generator {
            GeneratorConfig::Http {
                endpoint,
                api_key_env,
            } => {
                let key = match api_key_env {
                    Some(var) => Some(
                        std::env::var(var)
                            .with_context(|| format!("environment variable {var} is not set"))?,
                    ),
                    None => None,
                };
                Box::new(HttpGenerator::new(endpoint, key, timeout)?)
            }
            GeneratorConfig::Directory { path } => Box::new(DirectoryGenerator::new(path)),
            GeneratorConfig::Simulator { spec, lineage_seed } => {
                let spec = match spec {
                    Some(path) => SimModelSpec::load(path)?,
                    None => make_lineage(
                        model_id,
                        *lineage_seed,
                        catalogue,
                        &LineageParams::default(),
                    )?,
                };
                Box::new(SimGenerator::new(spec))
            }
        })
    }

    pub fn classifier(&self) -> Result<Box<dyn Classifier>> {
        let timeout = Duration::from_secs(self.plan.timeout_secs);
        Ok(match &self.classifier {
            ClassifierConfig::Http { endpoint } => {
                Box::new(HttpClassifier::new(endpoint, timeout)?)
            }
            ClassifierConfig::Stub { seed } => Box::new(StubClassifier::seeded(*seed)),
            ClassifierConfig::Replay { fixture } => Box::new(
                ReplayClassifier::from_file(fixture)
                    .with_context(|| format!("cannot load fixture {}", fixture.display()))?,
            ),
            ClassifierConfig::Simulator => Box::new(SimClassifier),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.unit_price, 0.04);
        assert_eq!(cfg.plan.n_per_prompt, 30);
        assert!(matches!(cfg.classifier, ClassifierConfig::Simulator));
    }

    #[test]
    fn tagged_backends_parse() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"generator": {"kind": "http", "endpoint": "http://x", "api_key_env": "KEY"},
                "classifier": {"kind": "replay", "fixture": "f.json"},
                "attribution": {"metric": "jsd"}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.generator, GeneratorConfig::Http { .. }));
        assert_eq!(cfg.attribution.metric, lineage_core::Metric::Jsd);
        assert!(serde_json::from_str::<RunConfig>(r#"{"api_key": "secret"}"#).is_err());
    }
}
