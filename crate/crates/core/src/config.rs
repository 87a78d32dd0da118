//! Merged run configuration: defaults, then a TOML file, then command-line
//! flags, then environment variables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::graph::{BuildConfig, Matcher, DEFAULT_MATCH_THRESHOLD};
use crate::predictor::{ChatClient, HeuristicWeights, LlmConceptJudge, RemoteConfig, DEFAULT_THRESHOLD};
use crate::retrieval::RetrievalConfig;

pub const ENV_TOP_K: &str = "PEERKT_TOP_K";
pub const ENV_SEEDS: &str = "PEERKT_SEEDS";
pub const ENV_THRESHOLD: &str = "PEERKT_THRESHOLD";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatcherMode {
    /// Normalized exact match only.
    Exact,
    /// Exact, then token similarity against the threshold.
    Similarity,
    /// Exact, similarity, then a remote judge over the closest candidates.
    Judge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    pub mode: MatcherMode,
    pub threshold: f64,
    pub judge_candidates: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            mode: MatcherMode::Similarity,
            threshold: DEFAULT_MATCH_THRESHOLD,
            judge_candidates: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub build: BuildConfig,
    pub retrieval: RetrievalConfig,
    pub matcher: MatcherConfig,
    pub heuristic: HeuristicWeights,
    pub remote: RemoteConfig,
    /// Probability at or above which a prediction is labeled correct.
    pub threshold: f64,
    pub seq_len: usize,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    /// Prompt template file; the built-in template when absent.
    pub template: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        Self {
            build: BuildConfig::default(),
            retrieval: eval.retrieval,
            matcher: MatcherConfig::default(),
            heuristic: HeuristicWeights::default(),
            remote: RemoteConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            seq_len: eval.seq_len,
            n_test: eval.n_test,
            seeds: eval.seeds,
            template: None,
        }
    }
}

fn parse_env<T: std::str::FromStr>(name: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{name}: cannot parse {raw:?}")))
}

pub fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_env("seed list", s))
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    /// Defaults overlaid with the file, when one is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                let mut cfg = Self::from_toml(&text)?;
                if let Some(t) = cfg.template.as_mut() {
                    if t.is_relative() {
                        *t = p.parent().unwrap_or(Path::new(".")).join(&*t);
                    }
                }
                Ok(cfg)
            }
        }
    }

    /// Environment overrides, applied last.
    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_vars(|name| std::env::var(name).ok())
    }

    pub fn apply_vars(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        let var = |name: &str| var(name).filter(|v| !v.trim().is_empty());
        if let Some(v) = var(ENV_TOP_K) {
            self.retrieval.top_k = parse_env(ENV_TOP_K, &v)?;
        }
        if let Some(v) = var(ENV_SEEDS) {
            self.seeds = parse_seeds(&v)?;
        }
        if let Some(v) = var(ENV_THRESHOLD) {
            self.threshold = parse_env(ENV_THRESHOLD, &v)?;
        }
        if let Some(v) = var(crate::predictor::ENV_API_BASE) {
            self.remote.base_url = v;
        }
        if let Some(v) = var(crate::predictor::ENV_API_KEY) {
            self.remote.api_key = Some(v);
        }
        if let Some(v) = var(crate::predictor::ENV_MODEL) {
            self.remote.model = v;
        }
        Ok(())
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            retrieval: self.retrieval,
            threshold: self.threshold,
            seq_len: self.seq_len,
            n_test: self.n_test,
            seeds: self.seeds.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.eval_config().validate()?;
        self.heuristic.validate()?;
        if !(0.0..=1.0).contains(&self.matcher.threshold) {
            return Err(Error::Config(format!("matcher threshold {} outside [0, 1]", self.matcher.threshold)));
        }
        Ok(())
    }

    /// Matcher for the configured mode; the judge mode needs a remote client.
    pub fn matcher(&self, client: Option<&ChatClient>) -> Result<Matcher> {
        let base = match self.matcher.mode {
            MatcherMode::Exact => Matcher::exact_only(),
            MatcherMode::Similarity => Matcher::default(),
            MatcherMode::Judge => {
                let client = client.ok_or_else(|| {
                    Error::Config("matcher mode 'judge' needs a configured remote backend".into())
                })?;
                Matcher::default().with_judge(Box::new(LlmConceptJudge::new(client.clone())))
            }
        };
        Ok(Matcher {
            threshold: self.matcher.threshold,
            judge_candidates: self.matcher.judge_candidates,
            ..base
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn file_overrides_defaults_and_env_overrides_file() {
        let mut cfg = RunConfig::from_toml("threshold = 0.6\nseeds = [7]\n[retrieval]\ntop_k = 4\n").unwrap();
        assert_eq!(cfg.threshold, 0.6);
        assert_eq!(cfg.retrieval.top_k, 4);
        assert_eq!(cfg.retrieval.hops, 2);
        let env = BTreeMap::from([(ENV_TOP_K, "3"), (ENV_SEEDS, "1,2")]);
        cfg.apply_vars(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.retrieval.top_k, 3);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.threshold, 0.6);
    }

    #[test]
    fn bad_env_value_is_a_config_error() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_vars(|k| (k == ENV_TOP_K).then(|| "many".to_string())).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn api_key_never_comes_from_a_file() {
        assert!(RunConfig::from_toml("[remote]\napi_key = \"secret\"\n").map(|c| c.remote.api_key).unwrap_or(None).is_none());
        let mut cfg = RunConfig::default();
        cfg.apply_vars(|k| (k == crate::predictor::ENV_API_KEY).then(|| "k".to_string())).unwrap();
        assert_eq!(cfg.remote.api_key.as_deref(), Some("k"));
        let snapshot = crate::canonical::to_canonical_string(&cfg).unwrap();
        assert!(!snapshot.contains("api_key"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("treshold = 0.6\n").is_err());
    }

    #[test]
    fn judge_mode_requires_a_client() {
        let cfg = RunConfig {
            matcher: MatcherConfig {
                mode: MatcherMode::Judge,
                ..MatcherConfig::default()
            },
            ..RunConfig::default()
        };
        assert!(matches!(cfg.matcher(None), Err(Error::Config(_))));
        assert!(RunConfig::default().matcher(None).unwrap().similarity.is_some());
    }
}
