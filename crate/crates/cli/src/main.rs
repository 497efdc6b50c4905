use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use actgen_core::ablation::{run_ablation, AblationError, AblationGrid};
use actgen_core::baselines::{knn_generate, ngram_generate, train_class_ngram, Generated, Handcrafted, NgramConfig, TemplateStore};
use actgen_core::corpus::{distinct_keys, generate_corpus, prepare, prepare_splits, read_corpus, write_corpus, TemplatePack};
use actgen_core::decoder::{generate, ranked_report, DecodeConfig};
use actgen_core::evaluation::{build_references, evaluate_system, reports_table, EvalReport};
use actgen_core::model::{load_embeddings, write_atomic, ModelBundle};
use actgen_core::ontology::{canonicalize_da, parse_da};
use actgen_core::train::{train_system, PipelineError, TrainConfig};
use actgen_core::{DelexUtterance, Ontology};

const SEED_ENV: &str = "ACTGEN_SEED";

#[derive(Parser, Debug)]
#[command(name = "actgen", version, about = "Dialogue-act conditioned utterance generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic act/utterance corpus (JSONL).
    Corpus(CorpusArgs),
    /// Train the forward generator and both rerankers.
    Train(TrainArgs),
    /// Over-generate, rerank and print the ranked candidates for one act.
    Generate(GenerateArgs),
    /// Score systems on the test split of a corpus.
    Evaluate(EvaluateArgs),
    /// Run the component ablations described by a grid file.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Template pack (JSON); the bundled restaurant pack by default.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    count: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// TOML training config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed (split, initialization and shuffling).
    #[arg(long, env = SEED_ENV)]
    seed: Option<u64>,
    /// Initial embedding table (tensor JSON) matching the corpus vocabulary.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out_model: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    da: String,
    #[arg(long, default_value_t = 100)]
    beam: usize,
    #[arg(long, default_value_t = 1)]
    top_n: usize,
    /// Gate decay at decoding time; the trained value by default.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 100.0)]
    lambda: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_backward: bool,
    #[arg(long)]
    no_cnn: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Trained model; required for the `rnn` system.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated: rnn, knn, handcrafted, ngram[:k=K][:n=N]
    #[arg(long, default_value = "rnn,knn,ngram:k=3:n=5,handcrafted")]
    systems: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Split seed when no model is given (a model uses its training seed).
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 100)]
    beam: usize,
    #[arg(long, default_value_t = 1)]
    top_n: usize,
    #[arg(long, default_value_t = 100.0)]
    lambda: f64,
    /// Also write the full reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Directory for ablation.tsv, ablation.json and per-figure CSV series.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            if p.is_divergence() {
                return 3;
            }
        }
        if let Some(a) = cause.downcast_ref::<AblationError>() {
            if a.is_divergence() {
                return 3;
            }
        }
    }
    2
}

fn run(cmd: Command) -> Result<String> {
    let ont = Ontology::restaurant();
    match cmd {
        Command::Corpus(a) => corpus(&ont, a),
        Command::Train(a) => train(&ont, a),
        Command::Generate(a) => generate_cmd(a),
        Command::Evaluate(a) => evaluate(&ont, a),
        Command::Ablate(a) => ablate(&ont, a),
    }
}

fn corpus(ont: &Ontology, a: CorpusArgs) -> Result<String> {
    let pack = match &a.templates {
        Some(p) => TemplatePack::load(p)?,
        None => TemplatePack::restaurant(),
    };
    let corpus = generate_corpus(ont, &pack, a.count, a.seed)?;
    write_corpus(&a.out, &corpus)?;
    let (prepared, _) = prepare(ont, &corpus)?;
    let mut out = format!("examples\t{}\ndistinct_keys\t{}\n", corpus.len(), distinct_keys(&prepared).len());
    let mut per_act = std::collections::BTreeMap::new();
    for p in &prepared {
        *per_act.entry(ont.act_name(p.da.act)).or_insert(0usize) += 1;
    }
    for (act, n) in per_act {
        let _ = writeln!(out, "act:{act}\t{n}");
    }
    Ok(out)
}

fn load_prepared(ont: &Ontology, path: &Path) -> Result<Vec<actgen_core::Prepared>> {
    let corpus = read_corpus(path)?;
    if corpus.is_empty() {
        bail!("corpus {} is empty", path.display());
    }
    let (prepared, warnings) = prepare(ont, &corpus)?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(prepared)
}

fn train(ont: &Ontology, a: TrainArgs) -> Result<String> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let prepared = load_prepared(ont, &a.corpus)?;
    let (split, up) = prepare_splits(&prepared, cfg.seed);
    if split.valid.is_empty() {
        bail!("corpus too small for a validation split ({} examples)", prepared.len());
    }
    let embeddings = match &a.embeddings {
        Some(p) => Some(load_embeddings(p)?),
        None => None,
    };
    let (bundle, report) = train_system(ont, &up, &split.valid, &cfg, embeddings)?;
    bundle.save(&a.out_model)?;
    let mut out = format!(
        "vocab\t{}\ntrain_examples\t{}\nvalid_examples\t{}\nstage\tepoch\tlearning_rate\ttrain_cost\tvalid_cost\n",
        report.vocab_size, report.train_examples, report.valid_examples
    );
    for (stage, log) in [("forward", &report.forward), ("backward", &report.backward), ("cnn", &report.cnn)] {
        for e in &log.epochs {
            let _ = writeln!(out, "{stage}\t{}\t{}\t{:.6}\t{:.6}", e.epoch, e.learning_rate, e.train_cost, e.valid_cost);
        }
    }
    for (stage, log) in [("forward", &report.forward), ("backward", &report.backward), ("cnn", &report.cnn)] {
        let _ = writeln!(out, "best_{stage}\t{:.6}", log.best_valid_cost);
    }
    Ok(out)
}

fn generate_cmd(a: GenerateArgs) -> Result<String> {
    let bundle = ModelBundle::load(&a.model)?;
    let da = parse_da(&bundle.ontology, &a.da).with_context(|| format!("cannot parse act `{}`", a.da))?;
    let cfg = DecodeConfig {
        beam: a.beam,
        top_n: a.top_n,
        decay: a.delta,
        lambda: a.lambda,
        seed: a.seed,
        use_backward: !a.no_backward,
        use_cnn: !a.no_cnn,
        ..DecodeConfig::default()
    };
    cfg.validate().map_err(anyhow::Error::msg)?;
    let decoded = generate(&bundle.models(), &da, &cfg);
    let mut out = ranked_report(&decoded.ranked);
    let _ = writeln!(out, "chosen\t{}\t{}", decoded.chosen + 1, decoded.surface());
    Ok(out)
}

enum System {
    Rnn,
    Knn,
    Handcrafted,
    Ngram { k: usize, n: usize },
}

fn parse_system(spec: &str) -> Result<(String, System)> {
    let mut parts = spec.trim().split(':');
    let name = parts.next().unwrap_or_default();
    let sys = match name {
        "rnn" => System::Rnn,
        "knn" => System::Knn,
        "handcrafted" => System::Handcrafted,
        "ngram" => {
            let (mut k, mut n) = (3, 5);
            for p in parts.by_ref() {
                match p.split_once('=') {
                    Some(("k", v)) => k = v.parse().with_context(|| format!("bad k in `{spec}`"))?,
                    Some(("n", v)) => n = v.parse().with_context(|| format!("bad n in `{spec}`"))?,
                    _ => bail!("unknown option `{p}` in system `{spec}`"),
                }
            }
            System::Ngram { k, n }
        }
        other => bail!("unknown system `{other}`"),
    };
    if parts.next().is_some() {
        bail!("system `{name}` takes no options");
    }
    Ok((spec.trim().to_string(), sys))
}

fn evaluate(ont: &Ontology, a: EvaluateArgs) -> Result<String> {
    let systems: Vec<(String, System)> = a.systems.split(',').map(parse_system).collect::<Result<_>>()?;
    if a.seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let bundle = match &a.model {
        Some(p) => Some(ModelBundle::load(p)?),
        None => None,
    };
    let prepared = load_prepared(ont, &a.corpus)?;
    let split_seed = bundle.as_ref().map_or(a.split_seed, |b| b.config.seed);
    let (split, _) = prepare_splits(&prepared, split_seed);
    if split.test.is_empty() {
        bail!("corpus too small for a test split ({} examples)", prepared.len());
    }
    let (refs, warnings) = build_references(ont, &prepared, &split.test);
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    for (label, sys) in systems {
        let echo = serde_json::json!({ "system": label, "beam": a.beam, "top_n": a.top_n, "lambda": a.lambda });
        let report = match sys {
            System::Rnn => {
                let b = bundle.as_ref().context("the rnn system needs --model")?;
                let m = b.models();
                let base = DecodeConfig { beam: a.beam, top_n: a.top_n, lambda: a.lambda, ..DecodeConfig::default() };
                base.validate().map_err(anyhow::Error::msg)?;
                evaluate_system(ont, &label, echo, &split.test, &refs, &a.seeds, |seed, da| {
                    let d = generate(&m, da, &DecodeConfig { seed, ..base });
                    let c = d.output();
                    let delex = DelexUtterance { tokens: b.vocab.decode(&c.tokens), lex_map: Vec::new() };
                    Generated { surface: c.surface.clone(), delex, err: c.err }
                })?
            }
            System::Knn => {
                let store = TemplateStore::build(ont, &split.train);
                evaluate_system(ont, &label, echo, &split.test, &refs, &a.seeds, |_, da| knn_generate(ont, &store, da))?
            }
            System::Handcrafted => {
                let h = Handcrafted::restaurant();
                evaluate_system(ont, &label, echo, &split.test, &refs, &a.seeds, |_, da| h.generate(ont, da))?
            }
            System::Ngram { k, n } => {
                let lm = train_class_ngram(&split.train, k, n)?;
                let base = NgramConfig { beam: a.beam.max(1), top_n: a.top_n.max(1), lambda: a.lambda, ..NgramConfig::default() };
                evaluate_system(ont, &label, echo, &split.test, &refs, &a.seeds, |seed, da| {
                    ngram_generate(ont, &lm, &canonicalize_da(da), &NgramConfig { seed, ..base })
                })?
            }
        };
        reports.push(report);
    }
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&reports)?;
        write_atomic(path, text.as_bytes())?;
    }
    Ok(reports_table(&reports))
}

fn ablate(ont: &Ontology, a: AblateArgs) -> Result<String> {
    let grid = AblationGrid::load(&a.grid)?;
    let report = run_ablation(ont, &grid)?;
    let tsv = report.to_tsv();
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_atomic(&dir.join("ablation.tsv"), tsv.as_bytes())?;
        write_atomic(&dir.join("ablation.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
        for (figure, csv) in report.to_csv() {
            write_atomic(&dir.join(format!("{figure}.csv")), csv.as_bytes())?;
        }
    }
    Ok(tsv)
}
