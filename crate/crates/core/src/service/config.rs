use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::BackendProfile;
use crate::preprocess::PreprocessConfig;
use crate::response::{Budgets, RetrievalSettings, Thresholds, WorkingHours};
use crate::retrieval::RepoRoutes;
use crate::store::{SplitMethod, DEFAULT_DIM};

/// Environment variable that overrides the config path.
pub const CONFIG_ENV: &str = "HXD_CONFIG";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorePaths {
    pub rejection: PathBuf,
    pub response: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    Mock {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        endpoint: String,
        dim: usize,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

fn default_timeout_secs() -> u64 {
    30
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Mock { dim: DEFAULT_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WebSearchConfig {
    pub endpoint: String,
    #[serde(default = "default_max_results")]
    pub max_results: usize,
    #[serde(default = "default_fetch_timeout")]
    pub fetch_timeout_secs: u64,
}

fn default_max_results() -> usize {
    crate::retrieval::DEFAULT_MAX_WEB_RESULTS
}

fn default_fetch_timeout() -> u64 {
    crate::retrieval::DEFAULT_FETCH_TIMEOUT.as_secs()
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

fn default_workers() -> usize {
    4
}

fn default_backend_timeout() -> u64 {
    60
}

/// Everything the service needs at boot. Only `thresholds` and
/// `working_hours` can change afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Trace log and reply states live here.
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    pub store_paths: StorePaths,
    pub backends: Vec<BackendProfile>,
    #[serde(default = "default_backend_timeout")]
    pub backend_timeout_secs: u64,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub working_hours: WorkingHours,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub retrieval: RetrievalSettings,
    #[serde(default)]
    pub paging_enabled: bool,
    #[serde(default)]
    pub routes: RepoRoutes,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub splitter: SplitMethod,
    #[serde(default)]
    pub web_search: Option<WebSearchConfig>,
    /// Moderation service URL.
    #[serde(default)]
    pub moderation: Option<String>,
    /// Webhook receiving send/recall events.
    #[serde(default)]
    pub im_webhook: Option<String>,
    #[serde(default)]
    pub ocr_endpoint: Option<String>,
    /// Directory of `<id>.v<N>.txt` prompt overrides.
    #[serde(default)]
    pub prompts_dir: Option<PathBuf>,
    /// Use the few-shot variant of the question-scoring prompt.
    #[serde(default)]
    pub scoring_examples: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl ServiceConfig {
    /// JSON when the extension is `.json`, TOML otherwise. Relative paths
    /// are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&raw, path.extension().is_some_and(|e| e == "json"))?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(raw: &str, json: bool) -> Result<Self> {
        if json {
            serde_json::from_str(raw).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(raw).map_err(|e| Error::Config(e.to_string()))
        }
    }

    /// `explicit`, else `$HXD_CONFIG`. The environment wins when both are set.
    pub fn locate(explicit: Option<&Path>) -> Result<PathBuf> {
        if let Some(env) = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()) {
            return Ok(PathBuf::from(env));
        }
        explicit
            .map(Path::to_owned)
            .ok_or_else(|| Error::Config(format!("no config given; pass --config or set {CONFIG_ENV}")))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.store_paths.rejection);
        fix(&mut self.store_paths.response);
        if let Some(d) = &mut self.prompts_dir {
            fix(d);
        }
        for route in self.routes.values_mut() {
            fix(&mut route.search_root);
        }
        for b in &mut self.backends {
            if let Some(rest) = b.endpoint.strip_prefix("scripted:") {
                let p = Path::new(rest);
                if rest != "demo" && p.is_relative() {
                    b.endpoint = format!("scripted:{}", base.join(p).display());
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.store_paths.rejection == self.store_paths.response {
            return Err(Error::Config(format!(
                "rejection and response stores share the path {}",
                self.store_paths.rejection.display()
            )));
        }
        if self.backends.is_empty() {
            return Err(Error::Config("at least one backend is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for b in &self.backends {
            b.validate()?;
            if !names.insert(&b.name) {
                return Err(Error::Config(format!("duplicate backend name {}", b.name)));
            }
        }
        self.thresholds.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.working_hours.validate()?;
        self.preprocess.validate()?;
        self.budgets.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        Ok(())
    }

    pub fn retrieval_settings(&self) -> RetrievalSettings {
        RetrievalSettings {
            paging_enabled: self.paging_enabled || self.retrieval.paging_enabled,
            ..self.retrieval.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOML: &str = r#"
listen = "127.0.0.1:0"

[store_paths]
rejection = "stores/rejection"
response = "stores/response"

[[backends]]
name = "local"
endpoint = "scripted:demo"
max_tokens = 16000
capabilities = ["scoring", "generation"]
cost_rank = 1

[thresholds]
similarity = 0.4
question = 7

[working_hours]
start_minute = 540
end_minute = 1080
timezone = "Asia/Shanghai"

[routes.openmmlab-dev]
repo_name = "mmdeploy"
search_root = "repos/mmdeploy"
doc_domains = ["mmdeploy.readthedocs.io"]
"#;

    #[test]
    fn toml_parses_with_defaults() {
        let cfg = ServiceConfig::parse(TOML, false).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.thresholds.similarity, 0.4);
        assert_eq!(cfg.thresholds.question, 7);
        assert_eq!(cfg.thresholds.security, 7);
        assert_eq!(cfg.budgets.budget_tokens, 16_000);
        assert_eq!(cfg.embedding, EmbeddingConfig::Mock { dim: 384 });
        assert_eq!(cfg.routes["openmmlab-dev"].repo_name, "mmdeploy");
        assert!(!cfg.paging_enabled);
    }

    #[test]
    fn json_equivalent() {
        let cfg = ServiceConfig::parse(TOML, false).unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ServiceConfig::parse(&json, true).unwrap(), cfg);
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gqa.toml");
        std::fs::write(&path, TOML).unwrap();
        let cfg = ServiceConfig::load(&path).unwrap();
        assert_eq!(cfg.store_paths.rejection, dir.path().join("stores/rejection"));
        assert_eq!(cfg.routes["openmmlab-dev"].search_root, dir.path().join("repos/mmdeploy"));
        assert_eq!(cfg.backends[0].endpoint, "scripted:demo");
    }

    #[test]
    fn validation_failures() {
        let same = TOML.replace("stores/response", "stores/rejection");
        assert!(ServiceConfig::parse(&same, false).unwrap().validate().is_err());
        let bad_q = TOML.replace("question = 7", "question = 11");
        assert!(ServiceConfig::parse(&bad_q, false).unwrap().validate().is_err());
        let bad_tz = TOML.replace("Asia/Shanghai", "Nowhere/Land");
        assert!(ServiceConfig::parse(&bad_tz, false).unwrap().validate().is_err());
        assert!(ServiceConfig::load(Path::new("/definitely/not/here.toml")).is_err());
    }
}
