use std::time::Instant;

use abb_core::embed_table::build_table_for;
use abb_core::encoder::{Encoder, EncoderConfig};
use abb_core::exec::Exec;
use abb_core::personalization::{personalize_train, AdapterParams, AdapterScorer, Overlay, PersonalizeConfig};
use abb_core::synthetic::{feedback_from_split, separable_task, SyntheticConfig};
use abb_core::trainer::{evaluate, train_with, EvalOptions, TrainConfig};

fn main() {
    let task = separable_task(&SyntheticConfig::default());
    let config = EncoderConfig::reference(task.vocab.len());
    let encoder = Encoder::random(config, task.vocab.clone(), 1).expect("valid config");
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(5);
    let cfg = TrainConfig { epochs, exec: Exec::Serial, ..TrainConfig::default() };
    let start = Instant::now();
    let out = train_with(&cfg, &task.train, Some(&task.valid), encoder, |log| {
        println!("{:7.1}s {}", start.elapsed().as_secs_f64(), serde_json::to_string(log).unwrap());
    })
    .expect("training succeeds");
    let enc = out.encoder;
    let table = build_table_for(task.topics.iter().flatten().map(String::as_str), &enc, Exec::Serial).unwrap();
    let fb_split = task.domain_shift("feedback", 200, 101);
    let held = task.domain_shift("held", 400, 202);
    let overlay = Overlay::default();
    let id = AdapterParams::identity(enc.dim());
    let opts = EvalOptions { shuffle_seed: None, exec: Exec::Serial };
    let pre = evaluate(&held, &AdapterScorer { adapter: &id, table: &table, encoder: &enc, overlay: &overlay }, opts).unwrap();
    println!("pre {pre:?}");
    let fb = feedback_from_split(&fb_split, "domain");
    let t = Instant::now();
    let pcfg = PersonalizeConfig { exec: Exec::Serial, ..PersonalizeConfig::default() };
    let p = personalize_train(&fb, &table, &enc, &pcfg, None).unwrap();
    println!("personalize {:.1}s losses {:?}", t.elapsed().as_secs_f64(), p.losses);
    let post = evaluate(&held, &AdapterScorer { adapter: &p.adapter, table: &table, encoder: &enc, overlay: &overlay }, opts).unwrap();
    println!("post {post:?}");
}
