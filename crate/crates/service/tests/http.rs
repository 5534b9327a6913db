mod common;

use abb_core::personalization::{rank_with_adapter, AdapterParams, Overlay};
use abb_service::schema::{ExpandRequest, ExpandResponse, HealthResponse, StatsResponse, TrainResponse};
use axum::http::StatusCode;
use common::*;
use serde_json::json;

fn expand_body(text: &str, options: Option<Vec<Vec<String>>>, top_k: usize) -> String {
    let req = ExpandRequest {
        text: text.to_string(),
        profile: "default".into(),
        top_k: Some(top_k),
        pool_limit: None,
        options: options.map(|o| o.into_iter().map(Some).collect()),
    };
    serde_json::to_string(&req).unwrap()
}

#[tokio::test]
async fn expand_matches_offline_ranking() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task();
    let encoder = small_encoder(&task, 3);
    let home = write_home(dir.path(), &task, &encoder);
    let state = load_state(&home);
    let app = app(state.clone());
    let profile = state.profile("default").unwrap();
    let identity = AdapterParams::identity(encoder.dim());
    for s in task.valid.sentences.iter().take(8) {
        let options: Vec<Vec<String>> = s.slots.iter().map(|sl| sl.options.clone()).collect();
        let (status, body) = call(&app, "POST", "/v1/expand", Some(&expand_body(&s.text, Some(options), 100))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let resp: ExpandResponse = serde_json::from_value(body).unwrap();
        let offline = rank_with_adapter(s, &identity, &profile.table, &encoder, &Overlay::default()).unwrap();
        assert_eq!(resp.slots.len(), offline.len());
        for (online, off) in resp.slots.iter().zip(&offline) {
            assert_eq!(online.candidates.len(), off.ranked.len());
            for (c, o) in online.candidates.iter().zip(&off.ranked) {
                assert_eq!((c.index, c.option.as_str()), (o.index, o.option.as_str()));
                assert_eq!(c.score.to_bits(), o.score.to_bits());
            }
        }
    }
}

#[tokio::test]
async fn lexicon_pools_and_frequencies() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task();
    let home = write_home(dir.path(), &task, &small_encoder(&task, 3));
    let app = app(load_state(&home));
    let (status, body) = call(&app, "POST", "/v1/expand", Some(r#"{"text": "He lived in the [ABB:USA] for years."}"#)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: ExpandResponse = serde_json::from_value(body).unwrap();
    let slot = &resp.slots[0];
    assert_eq!(slot.short_form.as_deref(), Some("usa"));
    assert_eq!(slot.pool_size, 2);
    let usa = slot.candidates.iter().find(|c| c.option == "United States of America").unwrap();
    assert_eq!(usa.frequency, Some(2));
    assert_eq!(usa.index, 0);
    let ranks: Vec<usize> = slot.candidates.iter().map(|c| c.rank).collect();
    assert_eq!(ranks, vec![1, 2]);
    assert!(slot.candidates[0].score >= slot.candidates[1].score);
}

#[tokio::test]
async fn request_errors_map_to_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task();
    let home = write_home(dir.path(), &task, &small_encoder(&task, 3));
    let app = app(load_state(&home));
    let cases: [(&str, &str, StatusCode); 9] = [
        ("/v1/expand", "not json", StatusCode::BAD_REQUEST),
        ("/v1/expand", r#"{"text": "x", "bogus": 1}"#, StatusCode::BAD_REQUEST),
        ("/v1/expand", r#"{"text": "a [ABB:usa b"}"#, StatusCode::BAD_REQUEST),
        ("/v1/expand", r#"{"text": "a [ABB] b", "options": []}"#, StatusCode::BAD_REQUEST),
        ("/v1/expand", r#"{"text": "a [ABB:usa] b", "top_k": 0}"#, StatusCode::BAD_REQUEST),
        ("/v1/expand", r#"{"text": "a [ABB:usa] b", "profile": "nobody"}"#, StatusCode::NOT_FOUND),
        ("/v1/expand", r#"{"text": "a [ABB:qqxq] b"}"#, StatusCode::UNPROCESSABLE_ENTITY),
        ("/v1/expand", r#"{"text": "a [ABB] b"}"#, StatusCode::UNPROCESSABLE_ENTITY),
        ("/v1/feedback", r#"{"request_id": "nope", "slot": 0, "chosen": 0}"#, StatusCode::NOT_FOUND),
    ];
    for (uri, body, expected) in cases {
        let (status, value) = call(&app, "POST", uri, Some(body)).await;
        assert_eq!(status, expected, "{uri} {body}: {value}");
        assert_eq!(value["error"]["status"], json!(expected.as_u16()));
    }
    let long = format!("{} [ABB:usa]", "word ".repeat(80));
    let (status, _) = call(&app, "POST", "/v1/expand", Some(&json!({ "text": long }).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/v1/lexicon/stats?profile=nobody", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn text_without_markers_has_no_slots() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task();
    let home = write_home(dir.path(), &task, &small_encoder(&task, 3));
    let app = app(load_state(&home));
    let (status, body) = call(&app, "POST", "/v1/expand", Some(r#"{"text": "nothing to expand here"}"#)).await;
    assert_eq!(status, StatusCode::OK);
    let resp: ExpandResponse = serde_json::from_value(body).unwrap();
    assert!(resp.slots.is_empty());
    assert!(!resp.request_id.is_empty());
}

#[tokio::test]
async fn feedback_validation() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task();
    let home = write_home(dir.path(), &task, &small_encoder(&task, 3));
    let app = app(load_state(&home));
    let (_, body) = call(&app, "POST", "/v1/expand", Some(r#"{"text": "in the [ABB:usa] today"}"#)).await;
    let id = body["request_id"].as_str().unwrap().to_string();
    let bad = [
        json!({ "request_id": id, "slot": 0 }),
        json!({ "request_id": id, "slot": 0, "chosen": 0, "correction": "x" }),
        json!({ "request_id": id, "slot": 0, "chosen": 9 }),
        json!({ "request_id": id, "slot": 3, "chosen": 0 }),
        json!({ "request_id": id, "slot": 0, "correction": "  " }),
    ];
    for b in bad {
        let (status, v) = call(&app, "POST", "/v1/feedback", Some(&b.to_string())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{b}: {v}");
    }
    let ok = json!({ "request_id": id, "slot": 0, "correction": "United States Agency" });
    let (status, v) = call(&app, "POST", "/v1/feedback", Some(&ok.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["records"], json!(1));
    let log = std::fs::read_to_string(home.join("feedback/default.jsonl")).unwrap();
    let record: abb_core::personalization::FeedbackRecord = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(record.options[record.chosen], "United States Agency");
    assert_eq!(record.options.len(), 3);
    record.validate().unwrap();
}

#[tokio::test]
async fn feedback_train_cycle_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task();
    let home = write_home(dir.path(), &task, &small_encoder(&task, 3));
    let state = load_state(&home);
    let app = app(state.clone());

    let (status, v) = call(&app, "POST", "/v1/personalize/train", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");

    let shift = task.domain_shift("shift", 12, 99);
    for s in &shift.sentences {
        let options: Vec<Vec<String>> = s.slots.iter().map(|sl| sl.options.clone()).collect();
        let (status, body) = call(&app, "POST", "/v1/expand", Some(&expand_body(&s.text, Some(options), 2))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["adapter_version"], json!(0));
        let fb = json!({ "request_id": body["request_id"], "slot": 0, "chosen": s.slots[0].gold.unwrap() });
        let (status, _) = call(&app, "POST", "/v1/feedback", Some(&fb.to_string())).await;
        assert_eq!(status, StatusCode::OK);
    }

    {
        let profile = state.profile("default").unwrap();
        let _guard = profile.try_begin_training().unwrap();
        let (status, _) = call(&app, "POST", "/v1/personalize/train", None).await;
        assert_eq!(status, StatusCode::CONFLICT);
    }

    let (_, before) = call(&app, "GET", "/v1/health", None).await;
    let before: HealthResponse = serde_json::from_value(before).unwrap();
    assert_eq!(before.profiles[0].feedback_records, 12);
    assert_eq!(before.profiles[0].adapter_version, 0);

    let (status, body) =
        call(&app, "POST", "/v1/personalize/train", Some(r#"{"profile": "default", "epochs": 5, "seed": 1}"#)).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let trained: TrainResponse = serde_json::from_value(body).unwrap();
    assert_eq!((trained.adapter_version, trained.records), (1, 12));
    assert!(trained.final_loss.unwrap().is_finite());

    let (_, after) = call(&app, "GET", "/v1/health", None).await;
    let after: HealthResponse = serde_json::from_value(after).unwrap();
    let (b, a) = (&before.profiles[0], &after.profiles[0]);
    assert_eq!(a.adapter_version, 1);
    assert_ne!(a.adapter_hash, b.adapter_hash);
    assert_eq!((&a.encoder_hash, &a.table_hash), (&b.encoder_hash, &b.table_hash));
    assert_eq!(after.api, "v1");

    let s = &shift.sentences[0];
    let options = vec![s.slots[0].options.clone()];
    let (_, body) = call(&app, "POST", "/v1/expand", Some(&expand_body(&s.text, Some(options.clone()), 4))).await;
    assert_eq!(body["adapter_version"], json!(1));

    let restarted = load_state(&home);
    let app2 = common::app(restarted);
    let (_, again) = call(&app2, "GET", "/v1/health", None).await;
    let again: HealthResponse = serde_json::from_value(again).unwrap();
    assert_eq!(again.profiles[0].feedback_records, 12);
    assert_eq!(again.profiles[0].adapter_version, 1);
    assert_eq!(again.profiles[0].adapter_hash, a.adapter_hash);
    let (_, body2) = call(&app2, "POST", "/v1/expand", Some(&expand_body(&s.text, Some(options), 4))).await;
    assert_eq!(body["slots"], body2["slots"]);
}

#[tokio::test]
async fn stats_report_both_lexicons() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task();
    let home = write_home(dir.path(), &task, &small_encoder(&task, 3));
    let state = load_state(&home);
    let app = app(state.clone());
    let (status, body) = call(&app, "GET", "/v1/lexicon/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    let stats: StatsResponse = serde_json::from_value(body).unwrap();
    let profile = state.profile("default").unwrap();
    assert_eq!(stats.abbreviation.unwrap(), profile.abbreviations.as_ref().unwrap().stats());
    assert_eq!(stats.contraction.unwrap().key_count, profile.contractions.as_ref().unwrap().key_count());
}

#[test]
fn mismatched_adapter_is_rejected_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task();
    let home = write_home(dir.path(), &task, &small_encoder(&task, 3));
    let other = small_encoder(&task, 4);
    let meta = abb_core::personalization::AdapterMeta {
        base_model_hash: other.content_hash(),
        table_hash: "x".into(),
        version: 3,
    };
    std::fs::create_dir_all(home.join("adapters")).unwrap();
    AdapterParams::identity(other.dim()).save(&meta, home.join("adapters/default.bin")).unwrap();
    let config = abb_service::profile::ServiceConfig::load(&home.join("abb.toml")).unwrap();
    let err = abb_service::profile::AppState::load(&home, config).err().unwrap();
    assert!(err.message.contains("different base artifacts"), "{}", err.message);
}

#[tokio::test]
async fn domain_profiles_expand_the_same_note_differently() {
    use abb_core::lexicon::{build_abbreviation_lexicon, build_contraction_lexicon};
    let dir = tempfile::tempdir().unwrap();
    let home = dir.path();
    let medical = [
        "the patient with Ankylosing Spondylitis joined the trial.",
        "each candidate in the trial had Ankylosing Spondylitis.",
    ];
    let news = [
        "he played the Ace of Spades at the table.",
        "the dealer showed the card on the table.",
    ];
    let task = small_task();
    let encoder = small_encoder(&task, 3);
    encoder.save(home.join("encoder.bin")).unwrap();
    let mut options: Vec<String> = Vec::new();
    for (id, corpus) in [("medical", &medical), ("news", &news)] {
        let abb = build_abbreviation_lexicon(corpus.iter());
        let cont = build_contraction_lexicon(corpus.iter());
        options.extend(abb.expansions().into_iter().map(str::to_string));
        options.extend(cont.expansions().into_iter().map(str::to_string));
        abb.save(home.join(format!("{id}.abb"))).unwrap();
        cont.save(home.join(format!("{id}.cont"))).unwrap();
    }
    let table = abb_core::embed_table::build_table_for(options.iter().map(String::as_str), &encoder, abb_core::exec::Exec::Serial).unwrap();
    table.save(home.join("table.bin")).unwrap();
    let profile = |id: &str| {
        format!(
            "[[profile]]\nid = \"{id}\"\nencoder = \"encoder.bin\"\ntable = \"table.bin\"\n\
             contraction_lexicon = \"{id}.cont\"\nabbreviation_lexicon = \"{id}.abb\"\ntop_k = 5\n"
        )
    };
    std::fs::write(home.join("abb.toml"), profile("medical") + "\n" + &profile("news")).unwrap();
    let app = app(load_state(home));

    let expected = [("medical", ["Ankylosing Spondylitis", "candidate", "trial"]), ("news", ["Ace of Spades", "card", "table"])];
    for (id, wanted) in expected {
        let body = json!({ "text": "The doctor saw an [ABB:AS] [ABB:cd] at [ABB:tl]", "profile": id }).to_string();
        let (status, value) = call(&app, "POST", "/v1/expand", Some(&body)).await;
        assert_eq!(status, StatusCode::OK, "{value}");
        let resp: ExpandResponse = serde_json::from_value(value).unwrap();
        assert_eq!(resp.slots.len(), 3);
        for (slot, want) in resp.slots.iter().zip(wanted) {
            assert!(slot.candidates.iter().any(|c| c.option == want), "{id}: {want} missing from {:?}", slot.candidates);
        }
    }
}

#[test]
fn adapter_swap_is_atomic_per_request() {
    let dir = tempfile::tempdir().unwrap();
    let task = small_task();
    let encoder = small_encoder(&task, 3);
    let home = write_home(dir.path(), &task, &encoder);
    let state = load_state(&home);
    let profile = state.profile("default").unwrap();
    for s in &task.domain_shift("fb", 20, 5).sentences {
        let req = ExpandRequest {
            text: s.text.clone(),
            profile: "default".into(),
            top_k: None,
            pool_limit: None,
            options: Some(vec![Some(s.slots[0].options.clone())]),
        };
        let id = profile.expand(&req).unwrap().request_id;
        let fb = abb_service::schema::FeedbackRequest {
            request_id: id,
            slot: 0,
            chosen: s.slots[0].gold,
            correction: None,
            profile: "default".into(),
        };
        profile.record_feedback(&fb).unwrap();
    }
    // Two slots per request, so a mid-request swap would mix adapters.
    let a = &task.valid.sentences[0];
    let b = &task.valid.sentences[1];
    let text = format!("{} and {}", a.text, b.text);
    let req = ExpandRequest {
        text,
        profile: "default".into(),
        top_k: Some(100),
        pool_limit: None,
        options: Some(vec![Some(a.slots[0].options.clone()), Some(b.slots[0].options.clone())]),
    };
    let sentence = profile.prepare(&req).unwrap();
    let old = profile.adapter();
    let responses = std::thread::scope(|scope| {
        let trainer = scope.spawn(|| {
            profile
                .train_adapter(&abb_service::schema::TrainRequest { profile: "default".into(), epochs: Some(30), ..Default::default() })
                .unwrap()
        });
        let mut responses = Vec::new();
        while !trainer.is_finished() || responses.len() < 5 {
            responses.push(profile.expand(&req).unwrap());
        }
        trainer.join().unwrap();
        responses.push(profile.expand(&req).unwrap());
        responses
    });
    let new = profile.adapter();
    assert_eq!((old.version, new.version), (0, 1));
    let overlay = Overlay::default();
    let offline = |params: &AdapterParams| rank_with_adapter(&sentence, params, &profile.table, &profile.encoder, &overlay).unwrap();
    let (before, after) = (offline(&old.params), offline(&new.params));
    assert_ne!(before, after);
    for resp in &responses {
        let expected = if resp.adapter_version == 0 { &before } else { &after };
        for (slot, off) in resp.slots.iter().zip(expected) {
            let got: Vec<(usize, u64)> = slot.candidates.iter().map(|c| (c.index, c.score.to_bits())).collect();
            let want: Vec<(usize, u64)> = off.ranked.iter().map(|o| (o.index, o.score.to_bits())).collect();
            assert_eq!(got, want, "version {}", resp.adapter_version);
        }
    }
    assert_eq!(responses.last().unwrap().adapter_version, 1);
}
