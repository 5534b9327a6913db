//! Per-profile artifacts and the operations behind the `/v1` routes.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use abb_core::candidate_gen::normalize_word;
use abb_core::dataset::{AbbSentence, Slot};
use abb_core::embed_table::EmbeddingTable;
use abb_core::encoder::{Encoder, EncoderError};
use abb_core::hash::content_hash;
use abb_core::lexicon::{Candidate as LexCandidate, Lexicon};
use abb_core::personalization::{
    personalize_train, rank_with_adapter, AdapterMeta, AdapterParams, FeedbackRecord, Overlay, PersonalizeConfig,
    PersonalizeError,
};
use serde::{Deserialize, Serialize};

use crate::markers::parse_markers;
use crate::schema::*;

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_POOL_LIMIT: usize = 50;
pub const DEFAULT_RETENTION_SECS: u64 = 24 * 60 * 60;

/// An error carrying its HTTP status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: u16,
    pub message: String,
}

impl ApiError {
    pub fn new(status: u16, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, message)
    }
    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(404, message)
    }
    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(500, message)
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.status, self.message)
    }
}

impl std::error::Error for ApiError {}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}
fn default_pool_limit() -> usize {
    DEFAULT_POOL_LIMIT
}
fn default_retention() -> u64 {
    DEFAULT_RETENTION_SECS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub id: String,
    pub encoder: PathBuf,
    pub table: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contraction_lexicon: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abbreviation_lexicon: Option<PathBuf>,
    /// Defaults to `adapters/<id>.bin` under the home directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<PathBuf>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_pool_limit")]
    pub pool_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_retention")]
    pub retention_secs: u64,
    #[serde(default, rename = "profile")]
    pub profiles: Vec<ProfileConfig>,
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, ApiError> {
        let text = fs::read_to_string(path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))
    }
}

fn resolve(home: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        home.join(p)
    }
}

/// The adapter served for a profile at one point in time.
#[derive(Debug, Clone)]
pub struct AdapterSnapshot {
    pub params: AdapterParams,
    pub version: u64,
    pub hash: String,
}

fn snapshot(params: AdapterParams, version: u64, meta_hashes: (&str, &str)) -> AdapterSnapshot {
    let meta = AdapterMeta { base_model_hash: meta_hashes.0.into(), table_hash: meta_hashes.1.into(), version };
    let hash = content_hash(&params.to_container(&meta).to_bytes());
    AdapterSnapshot { params, version, hash }
}

struct PendingRequest {
    created: Instant,
    sentence: AbbSentence,
}

/// Clears the training flag when dropped.
pub struct TrainingGuard<'a>(&'a AtomicBool);

impl Drop for TrainingGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

pub struct Profile {
    pub config: ProfileConfig,
    pub encoder: Arc<Encoder>,
    pub table: Arc<EmbeddingTable>,
    pub contractions: Option<Arc<Lexicon>>,
    pub abbreviations: Option<Arc<Lexicon>>,
    pub overlay: Overlay,
    encoder_hash: String,
    table_hash: String,
    cont_hash: Option<String>,
    abb_hash: Option<String>,
    adapter_path: PathBuf,
    feedback_path: PathBuf,
    adapter: RwLock<Arc<AdapterSnapshot>>,
    training: AtomicBool,
    feedback: Mutex<Vec<FeedbackRecord>>,
    pending: Mutex<HashMap<String, PendingRequest>>,
    retention: Duration,
}

fn load_lexicon(home: &Path, p: &Option<PathBuf>) -> Result<Option<(Arc<Lexicon>, String)>, ApiError> {
    let Some(p) = p else { return Ok(None) };
    let path = resolve(home, p);
    let lex = Lexicon::load(&path).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    let hash = content_hash(&lex.to_bytes());
    Ok(Some((Arc::new(lex), hash)))
}

impl Profile {
    /// Loads and cross-checks every artifact; replays the feedback log.
    pub fn load(home: &Path, config: ProfileConfig, retention_secs: u64) -> Result<Self, ApiError> {
        let err = |p: &Path, e: &dyn std::fmt::Display| ApiError::internal(format!("{}: {e}", p.display()));
        let enc_path = resolve(home, &config.encoder);
        let encoder = Encoder::load(&enc_path).map_err(|e| err(&enc_path, &e))?;
        let table_path = resolve(home, &config.table);
        let table = EmbeddingTable::load(&table_path).map_err(|e| err(&table_path, &e))?;
        if table.dim() != encoder.dim() {
            return Err(ApiError::internal(format!(
                "profile {}: table dimension {} does not match encoder dimension {}",
                config.id,
                table.dim(),
                encoder.dim()
            )));
        }
        let cont = load_lexicon(home, &config.contraction_lexicon)?;
        let abb = load_lexicon(home, &config.abbreviation_lexicon)?;
        let encoder_hash = encoder.content_hash();
        let table_hash = table.content_hash();

        let adapter_path = match &config.adapter {
            Some(p) => {
                let p = resolve(home, p);
                if !p.exists() {
                    return Err(ApiError::internal(format!("adapter {} does not exist", p.display())));
                }
                p
            }
            None => home.join("adapters").join(format!("{}.bin", config.id)),
        };
        let adapter = if adapter_path.exists() {
            let (params, meta) = AdapterParams::load(&adapter_path).map_err(|e| err(&adapter_path, &e))?;
            if meta.base_model_hash != encoder_hash || meta.table_hash != table_hash {
                return Err(ApiError::internal(format!(
                    "adapter {} was trained against different base artifacts",
                    adapter_path.display()
                )));
            }
            if params.dim() != encoder.dim() {
                return Err(ApiError::internal("adapter dimension does not match the encoder"));
            }
            snapshot(params, meta.version, (&encoder_hash, &table_hash))
        } else {
            snapshot(AdapterParams::identity(encoder.dim()), 0, (&encoder_hash, &table_hash))
        };

        let feedback_path = home.join("feedback").join(format!("{}.jsonl", config.id));
        let feedback = replay_feedback(&feedback_path)?;

        Ok(Profile {
            encoder: Arc::new(encoder),
            table: Arc::new(table),
            contractions: cont.as_ref().map(|c| c.0.clone()),
            abbreviations: abb.as_ref().map(|c| c.0.clone()),
            cont_hash: cont.map(|c| c.1),
            abb_hash: abb.map(|c| c.1),
            overlay: Overlay::default(),
            encoder_hash,
            table_hash,
            adapter_path,
            feedback_path,
            adapter: RwLock::new(Arc::new(adapter)),
            training: AtomicBool::new(false),
            feedback: Mutex::new(feedback),
            pending: Mutex::new(HashMap::new()),
            retention: Duration::from_secs(retention_secs),
            config,
        })
    }

    pub fn id(&self) -> &str {
        &self.config.id
    }

    pub fn adapter(&self) -> Arc<AdapterSnapshot> {
        self.adapter.read().expect("adapter lock").clone()
    }

    pub fn feedback_records(&self) -> Vec<FeedbackRecord> {
        self.feedback.lock().expect("feedback lock").clone()
    }

    /// Claims the profile's training slot, or `None` when a run is active.
    pub fn try_begin_training(&self) -> Option<TrainingGuard<'_>> {
        self.training
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| TrainingGuard(&self.training))
    }

    fn frequency(&self, key: Option<&str>, expansion: &str) -> Option<u64> {
        let key = key?;
        [&self.abbreviations, &self.contractions]
            .into_iter()
            .flatten()
            .filter_map(|l| l.frequency(key, expansion))
            .max()
    }

    /// Candidates for a short form from both lexicons, by frequency then text.
    pub fn candidate_pool(&self, key: &str, limit: usize) -> Vec<String> {
        let mut merged: BTreeMap<&str, u64> = BTreeMap::new();
        for lex in [&self.abbreviations, &self.contractions].into_iter().flatten() {
            for LexCandidate { expansion, count } in lex.lookup(key, limit) {
                let e = merged.entry(expansion.as_str()).or_default();
                *e = (*e).max(*count);
            }
        }
        let mut ranked: Vec<(&str, u64)> = merged.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.into_iter().take(limit).map(|(e, _)| e.to_string()).collect()
    }

    /// Builds the sentence `expand` would score, with one slot per marker.
    pub fn prepare(&self, req: &ExpandRequest) -> Result<AbbSentence, ApiError> {
        let pool_limit = req.pool_limit.unwrap_or(self.config.pool_limit);
        if pool_limit == 0 {
            return Err(ApiError::bad_request("pool_limit must be at least 1"));
        }
        let (text, markers) = parse_markers(&req.text).map_err(|e| ApiError::bad_request(e.to_string()))?;
        if let Some(opts) = &req.options {
            if opts.len() != markers.len() {
                return Err(ApiError::bad_request(format!(
                    "options has {} entries for {} markers",
                    opts.len(),
                    markers.len()
                )));
            }
        }
        let mut slots = Vec::with_capacity(markers.len());
        for (i, m) in markers.iter().enumerate() {
            let key = m.short_form.as_deref().map(|s| normalize_word(s).into_string());
            let client = req.options.as_ref().and_then(|o| o[i].clone());
            let pool = match (client, &key) {
                (Some(opts), _) => {
                    if opts.iter().any(|o| o.trim().is_empty()) {
                        return Err(ApiError::bad_request(format!("slot {i} has an empty option string")));
                    }
                    opts
                }
                (None, Some(k)) => self.candidate_pool(k, pool_limit),
                (None, None) => Vec::new(),
            };
            if pool.is_empty() {
                return Err(ApiError::new(422, format!("slot {i} has an empty candidate pool")));
            }
            let mut slot = Slot::new(pool, None);
            slot.key = key;
            slots.push(slot);
        }
        let sentence = AbbSentence::from_text(&text, self.encoder.vocab(), slots, 0)
            .map_err(|e| ApiError::bad_request(e.to_string()))?;
        if sentence.tokens.len() > self.encoder.config().max_seq_len {
            return Err(ApiError::bad_request(format!(
                "text has {} tokens; the limit is {}",
                sentence.tokens.len(),
                self.encoder.config().max_seq_len
            )));
        }
        Ok(sentence)
    }

    pub fn expand(&self, req: &ExpandRequest) -> Result<ExpandResponse, ApiError> {
        let top_k = req.top_k.unwrap_or(self.config.top_k);
        if top_k == 0 {
            return Err(ApiError::bad_request("top_k must be at least 1"));
        }
        let sentence = self.prepare(req)?;
        let adapter = self.adapter();
        let ranked = if sentence.slots.is_empty() {
            Vec::new()
        } else {
            rank_with_adapter(&sentence, &adapter.params, &self.table, &self.encoder, &self.overlay).map_err(|e| match e {
                PersonalizeError::Encoder(EncoderError::SequenceTooLong { .. } | EncoderError::EmptyOption) => {
                    ApiError::bad_request(e.to_string())
                }
                other => ApiError::internal(other.to_string()),
            })?
        };
        let slots = ranked
            .into_iter()
            .zip(&sentence.slots)
            .enumerate()
            .map(|(i, (r, slot))| SlotResult {
                slot: i,
                short_form: slot.key.clone(),
                pool_size: slot.options.len(),
                candidates: r
                    .ranked
                    .into_iter()
                    .take(top_k)
                    .enumerate()
                    .map(|(rank, o)| Candidate {
                        frequency: self.frequency(slot.key.as_deref(), &o.option),
                        option: o.option,
                        index: o.index,
                        score: o.score,
                        rank: rank + 1,
                    })
                    .collect(),
            })
            .collect();
        let request_id = uuid::Uuid::new_v4().to_string();
        let mut pending = self.pending.lock().expect("pending lock");
        let retention = self.retention;
        pending.retain(|_, p| p.created.elapsed() < retention);
        pending.insert(request_id.clone(), PendingRequest { created: Instant::now(), sentence });
        Ok(ExpandResponse { request_id, profile: self.config.id.clone(), adapter_version: adapter.version, slots })
    }

    /// Resolves a feedback request into a record and appends it durably.
    pub fn record_feedback(&self, req: &FeedbackRequest) -> Result<FeedbackResponse, ApiError> {
        let sentence = {
            let pending = self.pending.lock().expect("pending lock");
            match pending.get(&req.request_id) {
                Some(p) if p.created.elapsed() < self.retention => p.sentence.clone(),
                _ => return Err(ApiError::not_found(format!("unknown or expired request id {}", req.request_id))),
            }
        };
        let slot = sentence
            .slots
            .get(req.slot)
            .ok_or_else(|| ApiError::bad_request(format!("slot {} out of {} slots", req.slot, sentence.slots.len())))?;
        let mut options = slot.options.clone();
        let chosen = match (req.chosen, &req.correction) {
            (Some(c), None) => {
                if c >= options.len() {
                    return Err(ApiError::bad_request(format!("chosen index {c} out of {} candidates", options.len())));
                }
                c
            }
            (None, Some(text)) => {
                let text = text.trim();
                if text.is_empty() {
                    return Err(ApiError::bad_request("correction is empty"));
                }
                match options.iter().position(|o| o == text) {
                    Some(i) => i,
                    None => {
                        options.push(text.to_string());
                        options.len() - 1
                    }
                }
            }
            _ => return Err(ApiError::bad_request("give exactly one of `chosen` or `correction`")),
        };
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let record = FeedbackRecord { sentence, slot: req.slot, options, chosen, timestamp, source: self.config.id.clone() };
        let mut feedback = self.feedback.lock().expect("feedback lock");
        append_feedback(&self.feedback_path, &record)?;
        feedback.push(record);
        Ok(FeedbackResponse { accepted: true, profile: self.config.id.clone(), records: feedback.len() })
    }

    /// Trains a fresh adapter on all accumulated feedback and swaps it in.
    pub fn train_adapter(&self, req: &TrainRequest) -> Result<TrainResponse, ApiError> {
        let _guard = self.try_begin_training().ok_or_else(|| ApiError::new(409, "a training run is already in progress"))?;
        let records = self.feedback_records();
        if records.is_empty() {
            return Err(ApiError::bad_request("no feedback recorded for this profile"));
        }
        let mut cfg = PersonalizeConfig::default();
        if let Some(e) = req.epochs {
            cfg.epochs = e;
        }
        if let Some(lr) = req.lr {
            cfg.lr = lr;
        }
        if let Some(s) = req.seed {
            cfg.seed = s;
        }
        let out = personalize_train(&records, &self.table, &self.encoder, &cfg, None).map_err(|e| match e {
            PersonalizeError::Config(_) => ApiError::bad_request(e.to_string()),
            other => ApiError::internal(other.to_string()),
        })?;
        let version = self.adapter().version + 1;
        let meta = AdapterMeta { base_model_hash: self.encoder_hash.clone(), table_hash: self.table_hash.clone(), version };
        if let Some(dir) = self.adapter_path.parent() {
            fs::create_dir_all(dir).map_err(|e| ApiError::internal(e.to_string()))?;
        }
        out.adapter.save(&meta, &self.adapter_path).map_err(|e| ApiError::internal(e.to_string()))?;
        let snap = Arc::new(snapshot(out.adapter, version, (&self.encoder_hash, &self.table_hash)));
        let hash = snap.hash.clone();
        *self.adapter.write().expect("adapter lock") = snap;
        Ok(TrainResponse {
            profile: self.config.id.clone(),
            adapter_version: version,
            adapter_hash: hash,
            records: records.len(),
            final_loss: out.losses.last().copied(),
        })
    }

    pub fn health(&self) -> ProfileHealth {
        let a = self.adapter();
        ProfileHealth {
            id: self.config.id.clone(),
            encoder_hash: self.encoder_hash.clone(),
            table_hash: self.table_hash.clone(),
            adapter_version: a.version,
            adapter_hash: a.hash.clone(),
            contraction_lexicon_hash: self.cont_hash.clone(),
            abbreviation_lexicon_hash: self.abb_hash.clone(),
            feedback_records: self.feedback.lock().expect("feedback lock").len(),
        }
    }

    pub fn stats(&self) -> StatsResponse {
        StatsResponse {
            profile: self.config.id.clone(),
            contraction: self.contractions.as_ref().map(|l| l.stats()),
            abbreviation: self.abbreviations.as_ref().map(|l| l.stats()),
        }
    }
}

fn append_feedback(path: &Path, record: &FeedbackRecord) -> Result<(), ApiError> {
    let io = |e: std::io::Error| ApiError::internal(format!("feedback log {}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let mut line = serde_json::to_string(record).map_err(|e| ApiError::internal(e.to_string()))?;
    line.push('\n');
    f.write_all(line.as_bytes()).map_err(io)?;
    f.sync_data().map_err(io)
}

fn replay_feedback(path: &Path) -> Result<Vec<FeedbackRecord>, ApiError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let io = |e: &dyn std::fmt::Display| ApiError::internal(format!("feedback log {}: {e}", path.display()));
    let f = File::open(path).map_err(|e| io(&e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io(&e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<FeedbackRecord>(&line) {
            Ok(r) => out.push(r),
            // A torn final line from a crash mid-append is skipped.
            Err(e) => log::warn!("feedback log {} line {}: {e}; skipped", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Every configured profile, keyed by id.
pub struct AppState {
    pub profiles: BTreeMap<String, Arc<Profile>>,
}

impl AppState {
    pub fn load(home: &Path, config: ServiceConfig) -> Result<Self, ApiError> {
        let mut profiles = BTreeMap::new();
        for p in config.profiles {
            let id = p.id.clone();
            let profile = Profile::load(home, p, config.retention_secs)?;
            if profiles.insert(id.clone(), Arc::new(profile)).is_some() {
                return Err(ApiError::internal(format!("duplicate profile id {id}")));
            }
        }
        Ok(AppState { profiles })
    }

    pub fn profile(&self, id: &str) -> Result<Arc<Profile>, ApiError> {
        self.profiles.get(id).cloned().ok_or_else(|| ApiError::not_found(format!("unknown profile {id}")))
    }
}
