use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{AdjudicationScope, Depth, OrchestratorError, Pipeline, StrategyConfig, StrategyId};
use crate::backend::http::HttpBackend;
use crate::backend::{
    Backend, BackendError, BackendSpec, Client, Clock, Family, RateLimiter, ResponseCache,
    RetryPolicy, SyntheticBackend, SystemClock, VirtualClock,
};
use crate::corpus::synthetic::SyntheticCorpusSpec;
use crate::corpus::{stratified_sample, Corpus, CorpusError};
use crate::scheme::{CategoryId, LabelScheme, PromptError, PromptTemplates, SchemeError};

/// One strategy run as written in a run configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyEntry {
    /// Defaults to `<model>__<strategy>`.
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    pub strategy: StrategyId,
    pub annotator: String,
    #[serde(default)]
    pub adjudicator: Option<String>,
    #[serde(default)]
    pub scope: AdjudicationScope,
    #[serde(default)]
    pub panel: Vec<String>,
}

/// Expands to the six strategies for one model: each pipeline annotated,
/// verified and adjudicated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub model: String,
    pub non_reasoning: String,
    pub reasoning: String,
    pub adjudicator_non_reasoning: String,
    pub adjudicator_reasoning: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub size: usize,
    /// Defaults to the run seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_window")]
    pub window_k: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_retries")]
    pub parse_retries: u32,
    #[serde(default = "default_retries")]
    pub adjudicator_retries: u32,
    #[serde(default = "default_true")]
    pub verify_with_context: bool,
    /// Share accepted responses across strategies through an on-disk cache.
    #[serde(default = "default_true")]
    pub cache: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Label scheme file; the built-in talk-moves scheme when absent.
    #[serde(default)]
    pub scheme: Option<PathBuf>,
    /// Directory of prompt templates overriding the built-ins.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub sample: Option<SampleConfig>,
    /// Generate the corpus instead of reading one.
    #[serde(default)]
    pub synthetic_corpus: Option<SyntheticCorpusSpec>,
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
    #[serde(default)]
    pub strategies: Vec<StrategyEntry>,
    #[serde(default)]
    pub grid: Vec<GridEntry>,
}

fn default_window() -> usize {
    4
}

fn default_parallelism() -> usize {
    4
}

fn default_retries() -> u32 {
    2
}

fn default_true() -> bool {
    true
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Format(#[from] toml::de::Error),
    #[error("duplicate backend id {0:?}")]
    DuplicateBackend(String),
    #[error("duplicate run id {0:?}")]
    DuplicateRun(String),
    #[error(transparent)]
    Strategy(#[from] OrchestratorError),
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Loads a configuration; relative `scheme` and `templates` paths are
    /// taken relative to the file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.scheme, &mut cfg.templates].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn make(&self, run_id: String, model: String, strategy_id: StrategyId) -> StrategyConfig {
        StrategyConfig {
            run_id,
            model,
            strategy_id,
            annotator_backend: String::new(),
            adjudicator_backend: None,
            adjudication_scope: AdjudicationScope::Chain,
            panel_backends: Vec::new(),
            window_k: self.window_k,
            seed: self.seed,
            parse_retries: self.parse_retries,
            adjudicator_retries: self.adjudicator_retries,
            verify_with_context: self.verify_with_context,
        }
    }

    /// All strategy runs: explicit entries first, then grid expansions.
    /// Every run is validated against the configured backends.
    pub fn strategy_configs(&self) -> Result<Vec<StrategyConfig>, ConfigError> {
        let mut known = BTreeSet::new();
        for b in &self.backends {
            if !known.insert(b.backend_id.clone()) {
                return Err(ConfigError::DuplicateBackend(b.backend_id.clone()));
            }
        }
        let mut out = Vec::new();
        for e in &self.strategies {
            let model = e.model.clone().unwrap_or_default();
            let name = if model.is_empty() {
                &e.annotator
            } else {
                &model
            };
            let run_id = e
                .run_id
                .clone()
                .unwrap_or_else(|| format!("{name}__{}", e.strategy));
            let mut c = self.make(run_id, model, e.strategy);
            c.annotator_backend = e.annotator.clone();
            c.adjudicator_backend = e.adjudicator.clone();
            c.adjudication_scope = e.scope;
            c.panel_backends = e.panel.clone();
            out.push(c);
        }
        for g in &self.grid {
            for id in StrategyId::all() {
                let mut c = self.make(format!("{}__{id}", g.model), g.model.clone(), id);
                let (annotator, adjudicator) = match id.pipeline {
                    Pipeline::NonReasoning => (&g.non_reasoning, &g.adjudicator_non_reasoning),
                    Pipeline::Reasoning => (&g.reasoning, &g.adjudicator_reasoning),
                };
                c.annotator_backend = annotator.clone();
                if id.depth == Depth::Adjudicated {
                    c.adjudicator_backend = Some(adjudicator.clone());
                }
                out.push(c);
            }
        }
        let mut runs = BTreeSet::new();
        for c in &out {
            if !runs.insert(c.run_id.clone()) {
                return Err(ConfigError::DuplicateRun(c.run_id.clone()));
            }
            c.validate(&known)?;
        }
        Ok(out)
    }

    pub fn load_scheme(&self) -> Result<LabelScheme, SchemeError> {
        match &self.scheme {
            Some(p) => LabelScheme::load(p),
            None => Ok(LabelScheme::talk_moves()),
        }
    }

    pub fn load_templates(&self) -> Result<PromptTemplates, PromptError> {
        match &self.templates {
            Some(p) => PromptTemplates::from_dir(p),
            None => Ok(PromptTemplates::default()),
        }
    }

    /// Copy with every seed shifted by `offset`: the run seed, the sample
    /// seed, the synthetic corpus and each synthetic backend.
    pub fn reseeded(&self, offset: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = cfg.seed.wrapping_add(offset);
        if let Some(s) = cfg.sample.as_mut() {
            s.seed = s.seed.map(|v| v.wrapping_add(offset));
        }
        if let Some(c) = cfg.synthetic_corpus.as_mut() {
            c.seed = c.seed.wrapping_add(offset);
        }
        for b in &mut cfg.backends {
            if let Some(syn) = b.synthetic.as_mut() {
                syn.seed = syn.seed.wrapping_add(offset);
            }
        }
        cfg
    }

    /// Target utterances: a stratified sample when configured, otherwise
    /// every gold-labelled turn.
    pub fn targets(&self, corpus: &Corpus) -> Result<Vec<String>, CorpusError> {
        match self.sample {
            Some(s) => Ok(
                stratified_sample(corpus.gold(), s.size, s.seed.unwrap_or(self.seed))?
                    .into_iter()
                    .collect(),
            ),
            None => Ok(corpus
                .gold()
                .iter()
                .map(|g| g.utterance_id.clone())
                .collect()),
        }
    }
}

/// Shared settings for [`build_clients`].
#[derive(Clone, Default)]
pub struct ClientOptions {
    pub retry: RetryPolicy,
    pub cache: Option<Arc<dyn ResponseCache>>,
    pub timeout: Duration,
    /// Clock for every client. When unset, synthetic backends get a virtual
    /// clock of their own and remote backends the system clock.
    pub clock: Option<Arc<dyn Clock>>,
    /// Keep grant timestamps in each rate limiter.
    pub record_grants: bool,
}

fn is_synthetic(spec: &BackendSpec) -> bool {
    spec.family == Family::Synthetic || spec.endpoint == "synthetic"
}

/// Builds one client per backend spec. Synthetic backends answer from `gold`;
/// the others read credentials from the environment.
pub fn build_clients(
    specs: &[BackendSpec],
    scheme: Arc<LabelScheme>,
    gold: Arc<BTreeMap<String, CategoryId>>,
    options: &ClientOptions,
) -> Result<BTreeMap<String, Arc<Client>>, BackendError> {
    let mut out = BTreeMap::new();
    for spec in specs {
        let synthetic = is_synthetic(spec);
        let backend: Arc<dyn Backend> = if synthetic {
            let cfg = spec.synthetic.clone().ok_or_else(|| {
                BackendError::Config(format!(
                    "synthetic backend {} has no [synthetic] settings",
                    spec.backend_id
                ))
            })?;
            Arc::new(SyntheticBackend::new(
                &spec.backend_id,
                cfg,
                scheme.clone(),
                gold.clone(),
            )?)
        } else {
            Arc::new(HttpBackend::from_env(spec.clone(), options.timeout)?)
        };
        let clock: Arc<dyn Clock> = match (&options.clock, synthetic) {
            (Some(c), _) => c.clone(),
            (None, true) => Arc::new(VirtualClock::new()),
            (None, false) => Arc::new(SystemClock::default()),
        };
        let mut client = Client::new(backend, spec.max_in_flight, spec.requests_per_minute)
            .with_retry(options.retry)
            .with_clock(clock);
        if options.record_grants {
            client = client.with_limiter(RateLimiter::with_history(spec.requests_per_minute));
        }
        if let Some(cache) = &options.cache {
            client = client.with_cache(cache.clone());
        }
        out.insert(spec.backend_id.clone(), Arc::new(client));
    }
    Ok(out)
}
