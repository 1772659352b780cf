//! Run configuration: one JSON file, command-line overrides on top.
//!
//! Precedence is flag > file > default. Secrets never live in the file;
//! HTTP sections name an environment variable holding the token.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use farsight::backends::http::{HttpEmbeddingProvider, HttpPolicyProvider};
use farsight::backends::{EmbeddingProvider, ImageRef, PolicyProvider, ProviderConfig};
use farsight::data::BuildConfig;
use farsight::search::SearchConfig;
use farsight::segmenter::SegmentationRules;
use farsight::simlab::{
    make_chain_mdp, make_random_mdp, make_trap_mdp, sim_as_providers, SimMdp,
};
use farsight::value::{Optimizer, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub search: Option<SearchConfig>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub data: Option<DataSection>,
    #[serde(default)]
    pub segmenter: Option<SegmenterSection>,
}

/// Policy provider, embedding provider, and the shared simulator MDP when
/// any section is sim-backed.
pub type ResolvedProviders = (
    Arc<dyn PolicyProvider>,
    Arc<dyn EmbeddingProvider>,
    Option<SimMdp>,
);

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProvidersConfig {
    /// Shared simulator definition, used by any section with kind "sim".
    #[serde(default)]
    pub sim: Option<SimSpec>,
    #[serde(default)]
    pub policy: Option<ProviderSpec>,
    #[serde(default)]
    pub embedding: Option<ProviderSpec>,
    #[serde(default)]
    pub judge: Option<ProviderSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default)]
    pub suite: Option<SimSuite>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Loads a serialized MDP instead of generating one.
    #[serde(default)]
    pub mdp_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SimSuite {
    Trap,
    Chain,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProviderSpec {
    Sim,
    Http {
        endpoint_url: String,
        model_id: String,
        #[serde(default)]
        auth_token_env: Option<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        #[serde(default = "default_backoff_ms")]
        retry_backoff_ms: u64,
        /// Embedding endpoints only: declared dimensions of the halves.
        #[serde(default)]
        text_dim: Option<usize>,
        #[serde(default)]
        image_dim: Option<usize>,
    },
}

fn default_timeout_ms() -> u64 {
    60_000
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    250
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_architecture")]
    pub architecture: String,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
}

fn default_architecture() -> String {
    "linear".to_string()
}
fn default_hidden_dim() -> usize {
    256
}
fn default_gamma() -> f64 {
    0.9
}
fn default_lr() -> f64 {
    5e-5
}
fn default_batch() -> usize {
    1024
}
fn default_epochs() -> usize {
    3
}
fn default_optimizer() -> Optimizer {
    Optimizer::AdaptiveMoment
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            architecture: default_architecture(),
            hidden_dim: default_hidden_dim(),
            init_seed: 0,
            gamma: default_gamma(),
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            shuffle_seed: 0,
            optimizer: default_optimizer(),
        }
    }
}

impl TrainSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            shuffle_seed: self.shuffle_seed,
            optimizer: self.optimizer,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_responses_per_pair")]
    pub responses_per_pair: usize,
    #[serde(default = "default_data_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default = "default_max_new_units")]
    pub max_new_units: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_responses_per_pair() -> usize {
    5
}
fn default_data_temperatures() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9]
}
fn default_max_new_units() -> u32 {
    64
}
fn default_in_flight() -> usize {
    6
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            responses_per_pair: default_responses_per_pair(),
            temperatures: default_data_temperatures(),
            max_new_units: default_max_new_units(),
            max_in_flight: default_in_flight(),
        }
    }
}

impl DataSection {
    pub fn build_config(&self, seed: u64) -> BuildConfig {
        BuildConfig {
            responses_per_pair: self.responses_per_pair,
            temperatures: self.temperatures.clone(),
            seed,
            max_new_units: self.max_new_units,
            max_in_flight: self.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SegmenterSection {
    #[serde(default)]
    pub abbreviations_path: Option<PathBuf>,
    #[serde(default)]
    pub min_sentence_chars: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::config(format!("invalid config {}: {e}", p.display())))
            }
        }
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(0)
    }

    /// SHA-256 of the resolved config as canonical JSON, recorded in
    /// manifests and reports for provenance.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }

    pub fn segmentation_rules(&self) -> Result<SegmentationRules, CliError> {
        let section = self.segmenter.clone().unwrap_or_default();
        let min = section.min_sentence_chars.unwrap_or(1);
        match &section.abbreviations_path {
            None => Ok(SegmentationRules::new(
                farsight::segmenter::DEFAULT_ABBREVIATIONS.iter().copied(),
                min,
            )),
            Some(p) => SegmentationRules::from_abbreviation_file(p, min)
                .map_err(|e| CliError::config(format!("abbreviation file: {e}"))),
        }
    }

    pub fn sim_mdp(&self, global_seed: u64) -> Result<SimMdp, CliError> {
        let spec = self.providers.sim.clone().unwrap_or(SimSpec {
            suite: Some(SimSuite::Random),
            seed: None,
            mdp_path: None,
        });
        if let Some(path) = &spec.mdp_path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read mdp {}: {e}", path.display())))?;
            let mdp: SimMdp = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("invalid mdp {}: {e}", path.display())))?;
            mdp.validate()
                .map_err(|e| CliError::config(format!("invalid mdp {}: {e}", path.display())))?;
            return Ok(mdp);
        }
        let seed = spec.seed.unwrap_or(global_seed);
        Ok(match spec.suite.unwrap_or(SimSuite::Random) {
            SimSuite::Trap => make_trap_mdp(seed),
            SimSuite::Chain => make_chain_mdp(3, 1.0, 0.9),
            SimSuite::Random => make_random_mdp(seed, 16),
        })
    }

    /// Builds the policy and embedding providers. Sim-backed sections share
    /// one MDP so generation and scoring agree on the world.
    pub fn build_providers(&self, global_seed: u64) -> Result<ResolvedProviders, CliError> {
        let policy_spec = self.providers.policy.clone().unwrap_or(ProviderSpec::Sim);
        let embed_spec = self.providers.embedding.clone().unwrap_or(ProviderSpec::Sim);

        let needs_sim =
            matches!(policy_spec, ProviderSpec::Sim) || matches!(embed_spec, ProviderSpec::Sim);
        let mdp = if needs_sim { Some(self.sim_mdp(global_seed)?) } else { None };
        let sim_pair = mdp.as_ref().map(|m| {
            let seed = self.providers.sim.as_ref().and_then(|s| s.seed).unwrap_or(global_seed);
            sim_as_providers(m, seed)
        });

        let policy: Arc<dyn PolicyProvider> = match policy_spec {
            ProviderSpec::Sim => sim_pair.as_ref().unwrap().0.clone(),
            ProviderSpec::Http { .. } => {
                let cfg = http_provider_config(&policy_spec)?;
                Arc::new(HttpPolicyProvider::new(cfg).map_err(CliError::provider)?)
            }
        };
        let embedding: Arc<dyn EmbeddingProvider> = match &embed_spec {
            ProviderSpec::Sim => sim_pair.as_ref().unwrap().1.clone(),
            ProviderSpec::Http { text_dim, image_dim, .. } => {
                let (td, id) = match (text_dim, image_dim) {
                    (Some(t), Some(i)) => (*t, *i),
                    _ => {
                        return Err(CliError::config(
                            "http embedding provider needs text_dim and image_dim".to_string(),
                        ))
                    }
                };
                let cfg = http_provider_config(&embed_spec)?;
                Arc::new(HttpEmbeddingProvider::new(cfg, td, id).map_err(CliError::provider)?)
            }
        };
        Ok((policy, embedding, mdp))
    }

    pub fn build_judge(&self) -> Result<Option<Arc<dyn PolicyProvider>>, CliError> {
        match &self.providers.judge {
            None => Ok(None),
            Some(ProviderSpec::Sim) => Err(CliError::config(
                "judge provider must be an http endpoint".to_string(),
            )),
            Some(spec @ ProviderSpec::Http { .. }) => {
                let cfg = http_provider_config(spec)?;
                Ok(Some(Arc::new(
                    HttpPolicyProvider::new(cfg).map_err(CliError::provider)?,
                )))
            }
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        self.search.clone().unwrap_or_default()
    }
}

fn http_provider_config(spec: &ProviderSpec) -> Result<ProviderConfig, CliError> {
    let ProviderSpec::Http {
        endpoint_url,
        model_id,
        auth_token_env,
        timeout_ms,
        max_retries,
        retry_backoff_ms,
        ..
    } = spec
    else {
        unreachable!("caller checked the variant");
    };
    let auth_token = match auth_token_env {
        None => None,
        Some(var) => Some(std::env::var(var).map_err(|_| {
            CliError::config(format!("environment variable {var} (auth token) is not set"))
        })?),
    };
    Ok(ProviderConfig {
        endpoint_url: endpoint_url.clone(),
        model_id: model_id.clone(),
        auth_token,
        request_timeout: Duration::from_millis(*timeout_ms),
        max_retries: *max_retries,
        retry_backoff: Duration::from_millis(*retry_backoff_ms),
    })
}

/// Parses an image argument: `sim:<id>`, `url:<url>`, `file:<path>`, or a
/// bare filesystem path.
pub fn parse_image_spec(spec: &str) -> ImageRef {
    if let Some(rest) = spec.strip_prefix("sim:") {
        ImageRef::SimId(rest.to_string())
    } else if let Some(rest) = spec.strip_prefix("url:") {
        ImageRef::Url(rest.to_string())
    } else if let Some(rest) = spec.strip_prefix("file:") {
        ImageRef::FilePath(rest.to_string())
    } else {
        ImageRef::FilePath(spec.to_string())
    }
}
