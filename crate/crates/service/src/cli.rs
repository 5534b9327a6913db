//! The `abb` command line.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use abb_core::dataset::{Corruption, DatasetBuilder, DatasetSplit};
use abb_core::embed_table::{build_table_for, EmbeddingTable};
use abb_core::encoder::vocab::DEFAULT_VOCAB_TOKENS;
use abb_core::encoder::{Encoder, EncoderConfig, Vocabulary};
use abb_core::exec::Exec;
use abb_core::lexicon::{build_lexicon_from_path, Lexicon, LexiconKind};
use abb_core::personalization::{personalize_train, AdapterMeta, AdapterParams, AdapterScorer, FeedbackRecord, Overlay, PersonalizeConfig};
use abb_core::synthetic::{feedback_from_split, separable_task, SyntheticConfig};
use abb_core::trainer::{evaluate, train_with, EncoderScorer, EvalOptions, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::Manifest;
use crate::profile::{AppState, ServiceConfig};
use crate::settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read input {0}")]
    Input(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "abb", version, about = "Short-form expansion: lexicons, datasets, training and serving")]
pub struct Cli {
    /// TOML file with one table of defaults per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Let flags override conflicting config values.
    #[arg(long, global = true)]
    pub force: bool,
    /// Run data-parallel loops on the calling thread.
    #[arg(long, global = true)]
    pub serial: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a contraction or abbreviation lexicon from a corpus.
    BuildLexicon(BuildLexiconArgs),
    /// Generate a labeled dataset by corrupting corpus sentences.
    BuildDataset(BuildDatasetArgs),
    /// Train the context/option encoder.
    Train(TrainArgs),
    /// Report R, Dif, top-1 and top-3 on a dataset.
    Eval(EvalArgs),
    /// Precompute the frozen option embedding table.
    EmbedOptions(EmbedArgs),
    /// Train a personalization adapter from feedback.
    Personalize(PersonalizeArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write the synthetic separable task and its domain-shift variant.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildLexiconArgs {
    /// One sentence per line.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// `cont` or `abb`.
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<LexiconKind>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub contractions: Option<PathBuf>,
    #[arg(long)]
    pub abbreviations: Option<PathBuf>,
    /// Vocabulary JSON; built from the corpus and written here if missing.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// `contraction`, `abbreviation` or `mixed`.
    #[arg(long, value_parser = parse_corruption)]
    pub corruption: Option<Corruption>,
    /// Per-word contraction probability.
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub max_options: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Vocabulary JSON for a freshly initialized encoder.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Start from this checkpoint instead.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch JSON lines; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Score through the frozen table (and adapter, if given).
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    /// Also write the metrics here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedArgs {
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Lexicons whose expansions are embedded.
    #[arg(long, num_args = 1..)]
    pub lexicon: Option<Vec<PathBuf>>,
    /// Extra options, one per line.
    #[arg(long)]
    pub options: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizeArgs {
    /// Feedback records, one JSON object per line.
    #[arg(long)]
    pub feedback: Option<PathBuf>,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub margin: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeArgs {
    /// Artifact directory; defaults to `$ABB_HOME`, then `.`.
    #[arg(long)]
    pub home: Option<PathBuf>,
    /// Profile definitions; defaults to `<home>/abb.toml`.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    #[arg(long)]
    pub addr: Option<SocketAddr>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub sentences: Option<usize>,
    #[arg(long)]
    pub topics: Option<usize>,
    #[arg(long)]
    pub words_per_topic: Option<usize>,
    #[arg(long)]
    pub options: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Domain-shift sentences turned into feedback.
    #[arg(long)]
    pub shift_feedback: Option<usize>,
    /// Held-out domain-shift sentences.
    #[arg(long)]
    pub shift_eval: Option<usize>,
}

fn parse_kind(s: &str) -> Result<LexiconKind, String> {
    match s {
        "cont" | "contraction" => Ok(LexiconKind::Contraction),
        "abb" | "abbreviation" => Ok(LexiconKind::Abbreviation),
        _ => Err(format!("unknown lexicon kind `{s}` (expected cont or abb)")),
    }
}

fn parse_corruption(s: &str) -> Result<Corruption, String> {
    match s {
        "contraction" | "cont" => Ok(Corruption::Contraction),
        "abbreviation" | "abb" => Ok(Corruption::Abbreviation),
        "mixed" => Ok(Corruption::Mixed),
        _ => Err(format!("unknown corruption `{s}`")),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    let file = cli.config.as_deref().map(settings::load_file).transpose()?;
    let file = file.as_ref();
    let exec = if cli.serial { Exec::Serial } else { Exec::Parallel };
    let force = cli.force;
    match cli.command {
        Command::BuildLexicon(a) => build_lexicon(settings::merge(a, "build-lexicon", file, force)?, exec),
        Command::BuildDataset(a) => build_dataset(settings::merge(a, "build-dataset", file, force)?, exec),
        Command::Train(a) => train(settings::merge(a, "train", file, force)?, exec),
        Command::Eval(a) => eval(settings::merge(a, "eval", file, force)?, exec),
        Command::EmbedOptions(a) => embed_options(settings::merge(a, "embed-options", file, force)?, exec),
        Command::Personalize(a) => personalize(settings::merge(a, "personalize", file, force)?, exec),
        Command::Serve(a) => serve(settings::merge(a, "serve", file, force)?),
        Command::Synth(a) => synth(settings::merge(a, "synth", file, force)?),
    }
}

fn need<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value.clone().ok_or_else(|| CliError::Usage(format!("missing required --{flag}")))
}

fn readable(path: &Path) -> Result<(), CliError> {
    fs::File::open(path).map(drop).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    BufReader::new(file)
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl Serialize) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string(value).expect("report serializes"));
}

fn finish(manifest: std::io::Result<Manifest>, out: &Path) -> Result<(), CliError> {
    manifest.and_then(|m| m.write_next_to(out)).map(drop).map_err(failed)
}

fn build_lexicon(a: BuildLexiconArgs, exec: Exec) -> Result<(), CliError> {
    let corpus = need(&a.corpus, "corpus")?;
    let kind = need(&a.kind, "kind")?;
    let out = need(&a.out, "out")?;
    readable(&corpus)?;
    let lexicon = build_lexicon_from_path(kind, &corpus, exec).map_err(|e| CliError::Input(e.to_string()))?;
    if lexicon.is_empty() {
        log::warn!("lexicon from {} is empty", corpus.display());
    }
    lexicon.save(&out).map_err(failed)?;
    print_json(&lexicon.stats());
    finish(Manifest::new("build-lexicon", &a).input(&corpus).and_then(|m| m.output(&out)), &out)
}

fn build_dataset(a: BuildDatasetArgs, exec: Exec) -> Result<(), CliError> {
    let corpus = need(&a.corpus, "corpus")?;
    let out = need(&a.out, "out")?;
    let vocab_path = need(&a.vocab, "vocab")?;
    if a.contractions.is_none() && a.abbreviations.is_none() {
        return Err(CliError::Usage("need --contractions and/or --abbreviations".into()));
    }
    let sentences: Vec<String> = read_lines(&corpus)?.into_iter().filter(|l| !l.trim().is_empty()).collect();
    let load_lex = |p: &Option<PathBuf>| -> Result<Option<Lexicon>, CliError> {
        p.as_deref()
            .map(|p| {
                readable(p)?;
                Lexicon::load(p).map_err(failed)
            })
            .transpose()
    };
    let cont = load_lex(&a.contractions)?;
    let abb = load_lex(&a.abbreviations)?;
    let built_vocab = !vocab_path.exists();
    let vocab: Vocabulary = if built_vocab {
        let v = Vocabulary::from_corpus(&sentences, a.vocab_size.unwrap_or(DEFAULT_VOCAB_TOKENS));
        fs::write(&vocab_path, serde_json::to_string(&v).expect("vocab serializes")).map_err(failed)?;
        v
    } else {
        load_json(&vocab_path)?
    };
    let corruption = a.corruption.unwrap_or(match (&cont, &abb) {
        (Some(_), Some(_)) => Corruption::Mixed,
        (Some(_), None) => Corruption::Contraction,
        _ => Corruption::Abbreviation,
    });
    let mut builder = DatasetBuilder::new(&vocab, corruption);
    builder.contractions = cont.as_ref();
    builder.abbreviations = abb.as_ref();
    if let Some(rate) = a.rate {
        builder.rate = rate;
    }
    if let Some(m) = a.max_options {
        builder.max_options = m;
    }
    let seed = a.seed.unwrap_or(0);
    let name = out.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let split = builder
        .build_split(name, &corpus.display().to_string(), &sentences, seed, exec)
        .map_err(failed)?;
    split.export(&out).map_err(failed)?;
    print_json(&serde_json::json!({ "sentences": split.sentences.len(), "slots": split.slot_count() }));
    let mut m = Manifest::new("build-dataset", &a).seed("seed", seed).input(&corpus);
    for p in a.contractions.iter().chain(&a.abbreviations) {
        m = m.and_then(|m| m.input(p));
    }
    m = m.and_then(|m| if built_vocab { m.output(&vocab_path) } else { m.input(&vocab_path) });
    finish(m.and_then(|m| m.output(&out)), &out)
}

fn import_split(path: &Path) -> Result<DatasetSplit, CliError> {
    readable(path)?;
    DatasetSplit::import(path).map_err(failed)
}

fn load_encoder(path: &Path) -> Result<Encoder, CliError> {
    readable(path)?;
    Encoder::load(path).map_err(failed)
}

fn train(a: TrainArgs, exec: Exec) -> Result<(), CliError> {
    let train_path = need(&a.train, "train")?;
    let out = need(&a.out, "out")?;
    let train_split = import_split(&train_path)?;
    let valid = a.valid.as_deref().map(import_split).transpose()?;
    let seed = a.seed.unwrap_or(0);
    let encoder = match (&a.init, &a.vocab) {
        (Some(init), _) => load_encoder(init)?,
        (None, Some(vocab)) => {
            let vocab: Vocabulary = load_json(vocab)?;
            let mut config = EncoderConfig::reference(vocab.len());
            config.d_model = a.d_model.unwrap_or(config.d_model);
            config.n_layers = a.layers.unwrap_or(config.n_layers);
            config.n_heads = a.heads.unwrap_or(config.n_heads);
            config.d_ff = a.d_ff.unwrap_or(config.d_ff);
            config.max_seq_len = a.max_seq_len.unwrap_or(config.max_seq_len);
            Encoder::random(config, vocab, seed).map_err(|e| CliError::Usage(e.to_string()))?
        }
        (None, None) => return Err(CliError::Usage("need --vocab or --init".into())),
    };
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        margin: a.margin.unwrap_or(defaults.margin),
        scale: a.scale.unwrap_or(defaults.scale),
        lr: a.lr.unwrap_or(defaults.lr),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        seed,
        clip: a.clip.or(defaults.clip),
        exec,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".log.jsonl");
        out.with_file_name(name)
    });
    let mut log_file = fs::File::create(&log_path).map_err(failed)?;
    let mut log_err = None;
    let outcome = train_with(&config, &train_split, valid.as_ref(), encoder, |entry| {
        let line = serde_json::to_string(entry).expect("epoch log serializes");
        eprintln!("{line}");
        if let Err(e) = writeln!(log_file, "{line}") {
            log_err.get_or_insert(e);
        }
    })
    .map_err(failed)?;
    if let Some(e) = log_err {
        return Err(failed(format!("{}: {e}", log_path.display())));
    }
    outcome.encoder.save(&out).map_err(failed)?;
    print_json(&serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "epochs": outcome.history.len(),
        "model_hash": outcome.encoder.content_hash(),
        "final": outcome.history.last(),
    }));
    let mut m = Manifest::new("train", &a).seed("seed", seed).input(&train_path);
    for p in a.valid.iter().chain(&a.vocab).chain(&a.init) {
        m = m.and_then(|m| m.input(p));
    }
    finish(m.and_then(|m| m.output(&out)).and_then(|m| m.output(&log_path)), &out)
}

fn load_adapter(path: &Path, table: &EmbeddingTable, encoder: &Encoder) -> Result<(AdapterParams, AdapterMeta), CliError> {
    readable(path)?;
    let (params, meta) = AdapterParams::load(path).map_err(failed)?;
    if meta.base_model_hash != encoder.content_hash() || meta.table_hash != table.content_hash() {
        return Err(failed(format!("{} was trained against a different encoder or table", path.display())));
    }
    Ok((params, meta))
}

fn eval(a: EvalArgs, exec: Exec) -> Result<(), CliError> {
    let data = need(&a.data, "data")?;
    let encoder = load_encoder(&need(&a.encoder, "encoder")?)?;
    let split = import_split(&data)?;
    let opts = EvalOptions { shuffle_seed: a.shuffle_seed, exec };
    let metrics = match &a.table {
        Some(table_path) => {
            readable(table_path)?;
            let table = EmbeddingTable::load(table_path).map_err(failed)?;
            let adapter = match &a.adapter {
                Some(p) => load_adapter(p, &table, &encoder)?.0,
                None => AdapterParams::identity(table.dim()),
            };
            let overlay = Overlay::default();
            let scorer = AdapterScorer { adapter: &adapter, table: &table, encoder: &encoder, overlay: &overlay };
            let metrics = evaluate(&split, &scorer, opts).map_err(failed)?;
            if overlay.fallbacks() > 0 {
                log::warn!("{} options were missing from the table", overlay.fallbacks());
            }
            metrics
        }
        None if a.adapter.is_some() => return Err(CliError::Usage("--adapter needs --table".into())),
        None => evaluate(&split, &EncoderScorer { encoder: &encoder }, opts).map_err(failed)?,
    };
    print_json(&metrics);
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&metrics).expect("metrics serialize")).map_err(failed)?;
        let mut m = Manifest::new("eval", &a).input(&data);
        for p in a.encoder.iter().chain(&a.table).chain(&a.adapter) {
            m = m.and_then(|m| m.input(p));
        }
        if let Some(s) = a.shuffle_seed {
            m = m.map(|m| m.seed("shuffle_seed", s));
        }
        finish(m.and_then(|m| m.output(out)), out)?;
    }
    Ok(())
}

fn embed_options(a: EmbedArgs, exec: Exec) -> Result<(), CliError> {
    let encoder_path = need(&a.encoder, "encoder")?;
    let out = need(&a.out, "out")?;
    let encoder = load_encoder(&encoder_path)?;
    let lexicon_paths = a.lexicon.clone().unwrap_or_default();
    if lexicon_paths.is_empty() && a.options.is_none() {
        return Err(CliError::Usage("need --lexicon and/or --options".into()));
    }
    let mut options = std::collections::BTreeSet::new();
    for p in &lexicon_paths {
        readable(p)?;
        let lex = Lexicon::load(p).map_err(failed)?;
        options.extend(lex.expansions().into_iter().map(str::to_string));
    }
    if let Some(p) = &a.options {
        options.extend(read_lines(p)?.into_iter().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()));
    }
    let table = build_table_for(options.iter().map(String::as_str), &encoder, exec).map_err(failed)?;
    table.save(&out).map_err(failed)?;
    print_json(&serde_json::json!({ "records": table.len(), "dim": table.dim(), "table_hash": table.content_hash() }));
    let mut m = Manifest::new("embed-options", &a).input(&encoder_path);
    for p in lexicon_paths.iter().chain(&a.options) {
        m = m.and_then(|m| m.input(p));
    }
    finish(m.and_then(|m| m.output(&out)), &out)
}

fn read_feedback(path: &Path) -> Result<Vec<FeedbackRecord>, CliError> {
    read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| failed(format!("{} line {}: {e}", path.display(), i + 1))))
        .collect()
}

fn personalize(a: PersonalizeArgs, exec: Exec) -> Result<(), CliError> {
    let feedback_path = need(&a.feedback, "feedback")?;
    let encoder_path = need(&a.encoder, "encoder")?;
    let table_path = need(&a.table, "table")?;
    let out = need(&a.out, "out")?;
    let feedback = read_feedback(&feedback_path)?;
    let encoder = load_encoder(&encoder_path)?;
    readable(&table_path)?;
    let table = EmbeddingTable::load(&table_path).map_err(failed)?;
    let init = a.init.as_deref().map(|p| load_adapter(p, &table, &encoder)).transpose()?;
    let defaults = PersonalizeConfig::default();
    let seed = a.seed.unwrap_or(defaults.seed);
    let config = PersonalizeConfig {
        margin: a.margin.unwrap_or(defaults.margin),
        scale: a.scale.unwrap_or(defaults.scale),
        lr: a.lr.unwrap_or(defaults.lr),
        epochs: a.epochs.unwrap_or(defaults.epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        seed,
        clip: defaults.clip,
        exec,
    };
    let outcome = personalize_train(&feedback, &table, &encoder, &config, init.as_ref().map(|(p, _)| p)).map_err(failed)?;
    let meta = AdapterMeta {
        base_model_hash: outcome.base_model_hash.clone(),
        table_hash: outcome.table_hash.clone(),
        version: init.as_ref().map_or(1, |(_, m)| m.version + 1),
    };
    outcome.adapter.save(&meta, &out).map_err(failed)?;
    print_json(&serde_json::json!({
        "records": feedback.len(),
        "version": meta.version,
        "losses": outcome.losses,
        "base_model_hash": meta.base_model_hash,
        "table_hash": meta.table_hash,
    }));
    let mut m = Manifest::new("personalize", &a).seed("seed", seed).input(&feedback_path);
    for p in [&encoder_path, &table_path].into_iter().chain(&a.init) {
        m = m.and_then(|m| m.input(p));
    }
    finish(m.and_then(|m| m.output(&out)), &out)
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let home = a
        .home
        .clone()
        .or_else(|| std::env::var_os("ABB_HOME").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let profiles = a.profiles.clone().unwrap_or_else(|| home.join("abb.toml"));
    readable(&profiles)?;
    let config = ServiceConfig::load(&profiles).map_err(|e| CliError::Usage(e.message))?;
    let state = AppState::load(&home, config).map_err(|e| failed(e.message))?;
    let addr = a.addr.unwrap_or_else(|| SocketAddr::from(([127, 0, 0, 1], 8080)));
    let runtime = tokio::runtime::Runtime::new().map_err(failed)?;
    log::info!("listening on {addr}");
    runtime.block_on(crate::api::serve(Arc::new(state), addr)).map_err(failed)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(failed)
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let dir = a
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("ABB_HOME").map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("missing required --out-dir".into()))?;
    fs::create_dir_all(&dir).map_err(failed)?;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        sentences: a.sentences.unwrap_or(d.sentences),
        topics: a.topics.unwrap_or(d.topics),
        words_per_topic: a.words_per_topic.unwrap_or(d.words_per_topic),
        options: a.options.unwrap_or(d.options),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    if cfg.topics < 4 || !cfg.topics.is_multiple_of(2) || cfg.options < 2 || cfg.sentences < 2 {
        return Err(CliError::Usage("need an even topic count >= 4, >= 2 options and >= 2 sentences".into()));
    }
    let task = separable_task(&cfg);
    let shift_seed = cfg.seed.wrapping_add(1);
    let fb_split = task.domain_shift("shift_feedback", a.shift_feedback.unwrap_or(200), shift_seed);
    let shift_eval = task.domain_shift("shift_eval", a.shift_eval.unwrap_or(400), shift_seed.wrapping_add(1));
    let feedback = feedback_from_split(&fb_split, "synthetic");

    let paths = [
        "corpus.txt",
        "vocab.json",
        "train.jsonl",
        "valid.jsonl",
        "shift_feedback.jsonl",
        "shift_eval.jsonl",
        "options.txt",
    ]
    .map(|n| dir.join(n));
    fs::write(&paths[0], task.corpus.join("\n") + "\n").map_err(failed)?;
    fs::write(&paths[1], serde_json::to_string(&task.vocab).expect("vocab serializes")).map_err(failed)?;
    task.train.export(&paths[2]).map_err(failed)?;
    task.valid.export(&paths[3]).map_err(failed)?;
    write_jsonl(&paths[4], &feedback)?;
    shift_eval.export(&paths[5]).map_err(failed)?;
    let words: Vec<&String> = task.topics.iter().flatten().collect();
    fs::write(&paths[6], words.iter().map(|w| w.as_str()).collect::<Vec<_>>().join("\n") + "\n").map_err(failed)?;

    print_json(&serde_json::json!({
        "train": task.train.sentences.len(),
        "valid": task.valid.sentences.len(),
        "feedback": feedback.len(),
        "shift_eval": shift_eval.sentences.len(),
    }));
    let mut m = Ok(Manifest::new("synth", &a).seed("seed", cfg.seed).seed("shift_seed", shift_seed));
    for p in &paths {
        m = m.and_then(|m| m.output(p));
    }
    finish(m, &dir.join("synth"))
}

/// Settings file tables accepted by `--config`, for documentation and tests.
pub const CONFIG_SECTIONS: [&str; 8] =
    ["build-lexicon", "build-dataset", "train", "eval", "embed-options", "personalize", "serve", "synth"];

