use abb_core::dataset::{Corruption, DatasetBuilder};
use abb_core::embed_table::build_table_for;
use abb_core::encoder::{Encoder, EncoderConfig};
use abb_core::exec::Exec;
use abb_core::lexicon::{build_lexicon, LexiconKind};
use abb_core::synthetic::{separable_task, SyntheticConfig};
use abb_core::trainer::{batch_gradient, evaluate, EncoderScorer, EvalOptions};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [("serial", Exec::Serial), ("parallel", Exec::Parallel)];

fn bench(c: &mut Criterion) {
    let task = separable_task(&SyntheticConfig { sentences: 400, ..SyntheticConfig::default() });
    let encoder = Encoder::random(EncoderConfig::reference(task.vocab.len()), task.vocab.clone(), 1).unwrap();
    let words: Vec<String> = (0..200).map(|i| task.corpus[i % task.corpus.len()].clone()).collect();

    let mut g = c.benchmark_group("lexicon_build");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| build_lexicon(LexiconKind::Contraction, "bench", &words, e))
        });
    }
    g.finish();

    let lexicon = build_lexicon(LexiconKind::Contraction, "bench", &task.corpus, Exec::Parallel);
    let mut builder = DatasetBuilder::new(&task.vocab, Corruption::Contraction);
    builder.contractions = Some(&lexicon);
    let mut g = c.benchmark_group("dataset_build");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| builder.build_split("bench", "bench", &task.corpus, 7, e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("embedding_table");
    g.sample_size(10);
    let options: Vec<&str> = task.topics.iter().flatten().map(String::as_str).collect();
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| build_table_for(options.iter().copied(), &encoder, e).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            let opts = EvalOptions { shuffle_seed: None, exec: e };
            b.iter(|| evaluate(&task.valid, &EncoderScorer { encoder: &encoder }, opts).unwrap())
        });
    }
    g.finish();

    let batch: Vec<_> = task.train.sentences.iter().take(32).collect();
    let mut g = c.benchmark_group("batch_gradient");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &e| {
            b.iter(|| batch_gradient(&encoder, &batch, 0.8, 30.0, e).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
