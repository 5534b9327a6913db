#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use abb_core::embed_table::build_table_for;
use abb_core::encoder::{Encoder, EncoderConfig};
use abb_core::exec::Exec;
use abb_core::lexicon::{build_abbreviation_lexicon, build_contraction_lexicon};
use abb_core::synthetic::{separable_task, SyntheticConfig, SyntheticTask};
use abb_service::api::router;
use abb_service::profile::{AppState, ServiceConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use tower::ServiceExt;

pub const PHRASES: [&str; 4] = [
    "they said the United States of America signed the treaty.",
    "later the United States of America was absent.",
    "then the United States Army marched on.",
    "Officials from the World Health Organization spoke.",
];

pub fn small_task() -> SyntheticTask {
    separable_task(&SyntheticConfig { topics: 4, words_per_topic: 6, sentences: 40, options: 4, ..SyntheticConfig::default() })
}

pub fn small_encoder(task: &SyntheticTask, seed: u64) -> Encoder {
    let config = EncoderConfig { vocab_size: task.vocab.len(), d_model: 16, n_heads: 2, n_layers: 1, d_ff: 32, max_seq_len: 64 };
    Encoder::random(config, task.vocab.clone(), seed).unwrap()
}

/// Writes a one-profile home directory around `encoder` and returns its path.
pub fn write_home(dir: &Path, task: &SyntheticTask, encoder: &Encoder) -> PathBuf {
    let home = dir.to_path_buf();
    encoder.save(home.join("encoder.bin")).unwrap();
    let mut options: Vec<String> = task.topics.iter().flatten().cloned().collect();
    let abb = build_abbreviation_lexicon(PHRASES);
    let cont = build_contraction_lexicon(&task.corpus);
    options.extend(abb.expansions().into_iter().map(str::to_string));
    options.extend(cont.expansions().into_iter().map(str::to_string));
    let table = build_table_for(options.iter().map(String::as_str), encoder, Exec::Serial).unwrap();
    table.save(home.join("table.bin")).unwrap();
    abb.save(home.join("abb.lex")).unwrap();
    cont.save(home.join("cont.lex")).unwrap();
    std::fs::write(
        home.join("abb.toml"),
        "retention_secs = 3600\n\n[[profile]]\nid = \"default\"\nencoder = \"encoder.bin\"\ntable = \"table.bin\"\n\
         contraction_lexicon = \"cont.lex\"\nabbreviation_lexicon = \"abb.lex\"\n",
    )
    .unwrap();
    home
}

pub fn load_state(home: &Path) -> Arc<AppState> {
    let config = ServiceConfig::load(&home.join("abb.toml")).unwrap();
    Arc::new(AppState::load(home, config).unwrap())
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, serde_json::Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { serde_json::Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

pub fn app(state: Arc<AppState>) -> Router {
    router(state)
}
