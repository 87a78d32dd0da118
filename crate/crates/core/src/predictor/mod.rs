//! Prediction backends: an offline heuristic blend and a remote
//! chat-completion client with a content-addressed response cache.

mod cache;
mod heuristic;
mod remote;

use crate::error::Result;
use crate::graph::KnowledgeBase;
use crate::prompt::PredictionResult;
use crate::retrieval::RetrievedContext;

pub use cache::{CacheEntry, ResponseCache};
pub use heuristic::{predict_heuristic, HeuristicPredictor, HeuristicWeights};
pub use remote::{
    ChatClient, LlmConceptJudge, RemoteConfig, RemotePredictor, ENV_API_BASE, ENV_API_KEY,
    ENV_MODEL,
};

/// Default probability threshold for the Correct label.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub trait Predictor: Send + Sync {
    fn name(&self) -> &str;
    fn predict(&self, ctx: &RetrievedContext, kb: &KnowledgeBase) -> Result<PredictionResult>;
}
