//! `/v1` request and response bodies.

use abb_core::lexicon::LexiconStats;
use serde::{Deserialize, Serialize};

fn default_profile() -> String {
    "default".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpandRequest {
    pub text: String,
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool_limit: Option<usize>,
    /// Per-marker candidate lists; `null` entries fall back to the lexicons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<Option<Vec<String>>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub option: String,
    /// Position in the slot's candidate pool.
    pub index: usize,
    pub score: f64,
    pub rank: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotResult {
    pub slot: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub short_form: Option<String>,
    pub pool_size: usize,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandResponse {
    pub request_id: String,
    pub profile: String,
    pub adapter_version: u64,
    pub slots: Vec<SlotResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackRequest {
    pub request_id: String,
    pub slot: usize,
    /// Pool index of the accepted candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<usize>,
    /// Free-text expansion when no candidate was right.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<String>,
    #[serde(default = "default_profile")]
    pub profile: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub accepted: bool,
    pub profile: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub profile: String,
    pub adapter_version: u64,
    pub adapter_hash: String,
    pub records: usize,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileHealth {
    pub id: String,
    pub encoder_hash: String,
    pub table_hash: String,
    pub adapter_version: u64,
    pub adapter_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contraction_lexicon_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abbreviation_lexicon_hash: Option<String>,
    pub feedback_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub version: String,
    pub api: String,
    pub profiles: Vec<ProfileHealth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub profile: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contraction: Option<LexiconStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abbreviation: Option<LexiconStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub status: u16,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}
