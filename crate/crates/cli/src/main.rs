mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pagedep::eval::{crossfold_report, write_label_table, write_report_table, EvalReport, LabelScoring};
use pagedep::io::{load_corpus, read_streams, save_corpus, save_predictions, Prediction};
use pagedep::parallel;
use pagedep::synth::generate_corpus;
use pagedep::train::{train_with, write_loss_trace};
use pagedep::{Error, Execution, Fusion, Model};

use config::{ConfigError, RunConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFICATION: u8 = 2;
const EXIT_IO: u8 = 3;

/// Page stream segmentation, interpage dependency parsing and page
/// classification.
///
/// Settings are resolved in three layers: built-in defaults, the TOML file
/// given with --config, then command line flags. The resolved settings are
/// printed at the start of every run.
#[derive(Parser, Debug)]
#[command(name = "pagedep", version)]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML file with [generator], [model], [train] and [eval] sections.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic annotated corpus.
    Generate(GenerateArgs),
    /// Train one model and write its checkpoint and loss trace.
    Train(TrainArgs),
    /// Cross-validated evaluation on an annotated corpus.
    Eval(EvalArgs),
    /// Predict tags, trees and classes for page streams.
    Parse(ParseArgs),
    /// Replay the static oracle on every projective tree up to a size.
    OracleCheck(OracleArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of documents (streams).
    #[arg(long)]
    docs: Option<usize>,
    #[arg(long)]
    mean: Option<f64>,
    #[arg(long)]
    std: Option<f64>,
    #[arg(long)]
    min_pages: Option<usize>,
    #[arg(long)]
    max_pages: Option<usize>,
    /// Weights of subdocument lengths 1, 2, 3, ...
    #[arg(long, value_delimiter = ',')]
    subdoc_weights: Option<Vec<f64>>,
    #[arg(long)]
    p_copy: Option<f64>,
    #[arg(long)]
    p_atch: Option<f64>,
    #[arg(long)]
    p_empty: Option<f64>,
    #[arg(long)]
    p_back: Option<f64>,
    #[arg(long)]
    ocr_error_rate: Option<f64>,
    #[arg(long)]
    no_block_shuffle: bool,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    visual_dim: Option<usize>,
    /// Classes printed on both sides.
    #[arg(long, value_delimiter = ',')]
    two_sided: Option<Vec<usize>>,
    /// Give back pages the same layout as front pages.
    #[arg(long)]
    no_back_cue: bool,
}

#[derive(Args, Debug, Default)]
struct TrainingFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    w_seg: Option<f64>,
    #[arg(long)]
    w_parse: Option<f64>,
    #[arg(long)]
    w_cls: Option<f64>,
    /// Number of page classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Process documents of a batch one after another.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace path; defaults to the checkpoint path with `.loss.tsv` appended.
    #[arg(long)]
    loss_trace: Option<PathBuf>,
    #[arg(long)]
    fusion: Option<Fusion>,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, conflicts_with = "fusion_sweep")]
    fusion: Option<Fusion>,
    /// One row per fusion method plus the index baseline and both single modalities.
    #[arg(long)]
    fusion_sweep: bool,
    /// Require the correct head for per-label F1.
    #[arg(long)]
    head_coupled: bool,
    /// Write the reports as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write pooled held-out predictions (single fusion only).
    #[arg(long, conflicts_with = "fusion_sweep")]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingFlags,
}

#[derive(Args, Debug)]
struct ParseArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Page streams in the corpus format; annotation fields are optional.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, default_value_t = 5)]
    max_pages: usize,
}

enum Failure {
    Usage(String),
    Verification(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Io(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Verification(m)) => {
            eprintln!("verification failed: {m}");
            ExitCode::from(EXIT_VERIFICATION)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_IO)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let mut config = RunConfig::load(cli.config.as_deref()).map_err(|e| match e {
        ConfigError::Io(e) => Failure::Io(format!("config: {e}")),
        ConfigError::Invalid(m) => Failure::Usage(m),
    })?;
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    match cli.command {
        Command::Generate(a) => generate(config, a),
        Command::Train(a) => train(config, a),
        Command::Eval(a) => eval(config, a),
        Command::Parse(a) => parse(config, a),
        Command::OracleCheck(a) => oracle_check(config, a),
        Command::Gradcheck => gradcheck(config),
    }
}

fn print_config(config: &RunConfig) {
    println!("# resolved configuration");
    print!("{}", config.to_toml());
    println!("# end of configuration");
}

fn generate(mut config: RunConfig, a: GenerateArgs) -> Outcome {
    let g = &mut config.generator;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag.clone() { g.$field = v; })* };
    }
    set!(docs => n_documents, mean => stream_length_mean, std => stream_length_std, min_pages => stream_length_min,
        max_pages => stream_length_max, subdoc_weights => subdoc_length_weights, p_copy => p_copy, p_atch => p_atch,
        p_empty => p_empty, p_back => p_back, ocr_error_rate => ocr_char_error_rate, classes => n_classes,
        visual_dim => visual_dim, two_sided => two_sided_classes);
    if a.no_block_shuffle {
        g.ocr_block_shuffle = false;
    }
    if a.no_back_cue {
        g.back_visual_cue = false;
    }
    print_config(&config);
    let docs = generate_corpus(&config.generator)?;
    save_corpus(&a.out, &docs)?;
    let pages: usize = docs.iter().map(|d| d.n_pages()).sum();
    println!("wrote {} documents ({pages} pages) to {}", docs.len(), a.out.display());
    Ok(())
}

fn apply_training(config: &mut RunConfig, t: &TrainingFlags) -> Execution {
    let c = &mut config.train;
    if let Some(v) = t.epochs {
        c.epochs = v;
    }
    if let Some(v) = t.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = t.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = t.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = t.w_seg {
        c.loss_weights.seg = v;
    }
    if let Some(v) = t.w_parse {
        c.loss_weights.parse = v;
    }
    if let Some(v) = t.w_cls {
        c.loss_weights.cls = v;
    }
    if let Some(v) = t.classes {
        config.model.n_classes = v;
    }
    if t.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

/// Takes the visual input size from the corpus.
fn match_visual_dim(config: &mut RunConfig, visual: Option<usize>) {
    if let Some(v) = visual {
        if config.model.embedding.visual_input_dim != v {
            eprintln!("note: visual_input_dim set to {v} to match the corpus");
            config.model.embedding.visual_input_dim = v;
        }
    }
}

fn train(mut config: RunConfig, a: TrainArgs) -> Outcome {
    let exec = apply_training(&mut config, &a.training);
    if let Some(f) = a.fusion {
        config.model.embedding.fusion = f;
    }
    let corpus = load_corpus(&a.corpus)?;
    match_visual_dim(&mut config, corpus.first().and_then(|d| d.pages.first()).map(|p| p.visual.len()));
    print_config(&config);
    let out = train_with(&corpus, config.model.clone(), &config.train, exec, |e| {
        println!("epoch {:>4}  loss {:.6}  seg {:.6}  parse {:.6}  cls {:.6}", e.epoch, e.total, e.seg, e.parse, e.cls);
    })?;
    for id in &out.non_projective {
        eprintln!("warning: `{id}` has a non-projective tree; its parse loss was skipped");
    }
    out.model.save(&a.out)?;
    let trace_path = a.loss_trace.unwrap_or_else(|| suffixed(&a.out, ".loss.tsv"));
    write_loss_trace(BufWriter::new(File::create(&trace_path)?), &out.trace)?;
    println!("wrote checkpoint {} and loss trace {}", a.out.display(), trace_path.display());
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn eval(mut config: RunConfig, a: EvalArgs) -> Outcome {
    let exec = apply_training(&mut config, &a.training);
    if let Some(k) = a.folds {
        config.eval.folds = k;
    }
    if a.head_coupled {
        config.eval.label_scoring = LabelScoring::HeadCoupled;
    }
    if let Some(f) = a.fusion {
        config.model.embedding.fusion = f;
    }
    let corpus = load_corpus(&a.corpus)?;
    match_visual_dim(&mut config, corpus.first().and_then(|d| d.pages.first()).map(|p| p.visual.len()));
    print_config(&config);
    let fusions: Vec<Fusion> = if a.fusion_sweep { Fusion::ALL.to_vec() } else { vec![config.model.embedding.fusion] };
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    let mut pooled: Option<Vec<Prediction>> = None;
    for fusion in fusions {
        let model_config = config.model.clone().with_fusion(fusion);
        let (report, preds) = crossfold_report(
            &corpus,
            config.eval.folds,
            config.train.seed,
            config.model.n_classes,
            config.eval.label_scoring,
            |fold, docs| {
                let mut tc = config.train.clone();
                tc.seed = tc.seed.wrapping_add(fold as u64);
                eprintln!("{fusion}: fold {} of {}", fold + 1, config.eval.folds);
                Ok(train_with(docs, model_config.clone(), &tc, exec, |_| {})?.model)
            },
        )?;
        rows.push((fusion.to_string(), report));
        pooled = Some(preds);
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    write_report_table(&mut out, &rows)?;
    writeln!(out)?;
    write_label_table(&mut out, &rows)?;
    drop(out);
    if let Some(path) = &a.report {
        let records: Vec<serde_json::Value> =
            rows.iter().map(|(name, r)| serde_json::json!({ "model": name, "report": r })).collect();
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &records).map_err(io::Error::other)?;
        writeln!(w)?;
        w.flush()?;
    }
    if let (Some(path), Some(preds)) = (&a.predictions, pooled) {
        save_predictions(path, &preds)?;
    }
    Ok(())
}

fn parse(config: RunConfig, a: ParseArgs) -> Outcome {
    print_config(&config);
    let model = Model::load(&a.model)?;
    let streams = read_streams(File::open(&a.input)?)?;
    if let Some((id, _)) = streams.iter().find(|(_, pages)| pages.is_empty()) {
        return Err(Failure::Io(format!("stream `{id}` has no pages")));
    }
    let preds: Vec<Prediction> = parallel::map(Execution::Parallel, &streams, |(id, pages)| {
        model.predict_document(pages).map(|(seg_tags, tree, classes)| Prediction { id: id.clone(), seg_tags, tree, classes })
    })
    .into_iter()
    .collect::<pagedep::Result<_>>()?;
    save_predictions(&a.out, &preds)?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn oracle_check(config: RunConfig, a: OracleArgs) -> Outcome {
    print_config(&config);
    let check = pagedep::parser::oracle_check(a.max_pages);
    println!("{}/{} trees over 1..={} pages reconstructed", check.reconstructed, check.trees, check.max_pages);
    if check.passed() {
        println!("all trees reconstructed");
        Ok(())
    } else {
        Err(Failure::Verification(format!("first failure: {:?}", check.first_failure.map(|t| t.sorted_arcs()))))
    }
}

fn gradcheck(config: RunConfig) -> Outcome {
    print_config(&config);
    let results = pagedep::gradcheck::check_all(config.train.seed)?;
    println!("{:<32} {:>8} {:>12}", "check", "values", "max_rel_err");
    for r in &results {
        println!("{:<32} {:>8} {:>12.3e}{}", r.name, r.n_values, r.max_error, if r.passed() { "" } else { "  FAIL" });
    }
    let worst = results.iter().map(|r| r.max_error).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (tolerance {:e})", pagedep::gradcheck::TOLERANCE);
    if results.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure::Verification(format!("max relative error {worst:.3e}")))
    }
}
