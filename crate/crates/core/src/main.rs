use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use strlab::gradcheck::run_suite;
use strlab::models::{Checkpoint, CrnnConfig, Model, ModelConfig, StarNetConfig};
use strlab::synthgen::{generate_dataset, read_manifest, zipf_lexicon, Dataset, GlyphAtlas, GrayImage, RenderConfig, Script, MANIFEST};
use strlab::textcodec::{clean_bytes, corpus_stats, ngram_table, words_from_text, Vocabulary};
use strlab::trainkit::{self, curve_tsv, evaluate_model, transfer_experiment, ExperimentSizes, TrainPlan};
use strlab::{Error, Result};

const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "strlab", version, about = "Scene text recognition lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
enum Command {
    /// Render a synthetic word-image dataset.
    Gen(GenArgs),
    /// Train a recognizer, optionally from transferred weights.
    Train(TrainArgs),
    /// Compare scratch training with source-pretrained fine-tuning.
    Transfer(TransferArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Recognize a single PGM image.
    Decode(DecodeArgs),
    /// Top n-grams of a corpus.
    Ngrams(NgramArgs),
    /// Word count and length statistics of a corpus.
    Stats(StatsArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModelKind {
    Crnn,
    Starnet,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Size {
    Full,
    Desk,
    Tiny,
}

fn model_config(kind: ModelKind, size: Size) -> ModelConfig {
    match (kind, size) {
        (ModelKind::Crnn, Size::Full) => ModelConfig::Crnn(CrnnConfig::full()),
        (ModelKind::Crnn, Size::Desk) => ModelConfig::Crnn(CrnnConfig::desk()),
        (ModelKind::Crnn, Size::Tiny) => ModelConfig::Crnn(CrnnConfig::tiny()),
        (ModelKind::Starnet, Size::Full) => ModelConfig::StarNet(StarNetConfig::full()),
        (ModelKind::Starnet, Size::Desk) => ModelConfig::StarNet(StarNetConfig::desk()),
        (ModelKind::Starnet, Size::Tiny) => ModelConfig::StarNet(StarNetConfig::tiny()),
    }
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    #[arg(long)]
    script: Script,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Fraction of lexicon words (and images) for a train/test split.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long, default_value_t = 3000)]
    lexicon: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 6)]
    max_len: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 100)]
    width: usize,
    /// Render without jitter, noise or contrast changes.
    #[arg(long)]
    clean: bool,
}

#[derive(Debug, Args, Serialize)]
struct PlanArgs {
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Disable gradient clipping at global norm 5.
    #[arg(long)]
    no_clip: bool,
    #[arg(long, default_value_t = trainkit::DEFAULT_LOCALIZER_LR)]
    localizer_lr: f64,
    /// Stop once an evaluation reaches this WRR (percent).
    #[arg(long)]
    target_wrr: Option<f64>,
}

impl PlanArgs {
    fn plan(&self) -> TrainPlan {
        TrainPlan {
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            clip: if self.no_clip { None } else { Some(trainkit::DEFAULT_CLIP) },
            localizer_lr: self.localizer_lr,
            target_wrr: self.target_wrr,
            ..TrainPlan::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    /// Architecture; taken from the checkpoint with `--resume`.
    #[arg(long, value_enum, required_unless_present = "resume")]
    model: Option<ModelKind>,
    /// Dataset directory, or one holding `train/` and `test/` splits.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint whose weights initialize every layer.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Attach the correction BiLSTM before training.
    #[arg(long)]
    correction: bool,
    /// Continue from a `.last` checkpoint written by an earlier run.
    #[arg(long, conflicts_with_all = ["from", "correction"])]
    resume: Option<PathBuf>,
    /// Held-out set for checkpoint selection.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    size: Size,
    /// Write the loss curve TSV here.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Debug, Args, Serialize)]
struct TransferArgs {
    #[arg(long)]
    src: Script,
    #[arg(long)]
    dst: Script,
    #[arg(long, value_enum, default_value = "crnn")]
    model: ModelKind,
    #[arg(long, value_enum, default_value = "desk")]
    size: Size,
    /// Pretrained source checkpoint; trained on `--src-train` images otherwise.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    src_train: usize,
    #[arg(long, default_value_t = 400)]
    dst_train: usize,
    #[arg(long, default_value_t = 200)]
    dst_test: usize,
    /// WRR percent for the epochs-to-threshold column.
    #[arg(long, default_value_t = 80.0)]
    threshold: f64,
    #[command(flatten)]
    plan: PlanArgs,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct NgramArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Debug, Args, Serialize)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

fn read_corpus(path: &Path) -> Result<Vec<String>> {
    Ok(words_from_text(&clean_bytes(&std::fs::read(path)?)?))
}

/// `(train, held-out)` from a plain or split dataset directory.
fn load_data(dir: &Path) -> Result<(Dataset, Option<Dataset>)> {
    if dir.join(MANIFEST).exists() {
        return Ok((Dataset::load(dir)?, None));
    }
    let train = Dataset::load(&dir.join("train"))?;
    let test = dir.join("test");
    let test = if test.join(MANIFEST).exists() { Some(Dataset::load(&test)?) } else { None };
    Ok((train, test))
}

/// Manifest directories under `dir` (itself or its splits).
fn manifest_dirs(dir: &Path) -> Vec<PathBuf> {
    if dir.join(MANIFEST).exists() {
        vec![dir.to_path_buf()]
    } else {
        ["train", "test"].iter().map(|s| dir.join(s)).filter(|d| d.join(MANIFEST).exists()).collect()
    }
}

/// Every glyph of the scripts named in the manifests plus every label
/// codepoint.
fn dataset_vocab(dir: &Path, train: &Dataset) -> Result<Vocabulary> {
    let mut cps: BTreeSet<char> = train.labels.iter().flat_map(|l| l.chars()).collect();
    for d in manifest_dirs(dir) {
        let scripts: BTreeSet<Script> = read_manifest(&d)?.into_iter().map(|r| r.script).collect();
        for s in scripts {
            cps.extend(GlyphAtlas::builtin(s).codepoints());
        }
    }
    Vocabulary::from_codepoints(cps)
}

fn gen(a: &GenArgs) -> Result<()> {
    let atlas = GlyphAtlas::builtin(a.script);
    let lexicon = zipf_lexicon(&atlas, a.lexicon, (a.min_len, a.max_len), a.seed)?;
    let cfg = if a.clean { RenderConfig { seed: a.seed, ..RenderConfig::clean(a.height, a.width) } } else { RenderConfig { height: a.height, width: a.width, seed: a.seed, ..RenderConfig::default() } };
    for s in generate_dataset(&lexicon, &atlas, &cfg, a.count, &a.out, a.split)? {
        println!("{}\t{}\t{}", s.dir.display(), s.rows, s.manifest_hash);
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let (train_set, held_out) = load_data(&a.data)?;
    let eval_set = match &a.eval {
        Some(dir) => Some(load_data(dir)?.0),
        None => held_out,
    };
    let plan = a.plan.plan();
    let outcome = match &a.resume {
        Some(path) => trainkit::resume(Checkpoint::<f32>::load(path)?, &train_set, eval_set.as_ref(), &plan, Some(&a.out))?,
        None => trainkit::train(fresh_model(a, &train_set)?, &train_set, eval_set.as_ref(), &plan, Some(&a.out))?,
    };
    if let Some(path) = &a.curve {
        std::fs::write(path, curve_tsv(&outcome.curve))?;
    }
    println!("epoch\tstep\tCRR\tWRR");
    for e in &outcome.evals {
        println!("{}\t{}\t{:.2}\t{:.2}", e.epoch, e.step, e.crr, e.wrr);
    }
    let saved = Model::<f32>::load(&a.out)?;
    println!("checkpoint\t{}\tcorrection\t{}", a.out.display(), if saved.has_correction() { "present" } else { "absent" });
    Ok(())
}

fn fresh_model(a: &TrainArgs, train_set: &Dataset) -> Result<Model<f32>> {
    let vocab = dataset_vocab(&a.data, train_set)?;
    let kind = a.model.ok_or_else(|| Error::BadConfig("--model is required".into()))?;
    let mut model = Model::<f32>::build(model_config(kind, a.size), vocab, a.plan.seed)?;
    if let Some(src) = &a.from {
        let source = Model::<f32>::load(src)?;
        if source.has_correction() {
            model.attach_correction_bilstm(a.plan.seed)?;
        }
        let report = strlab::models::transfer_weights(&source, &mut model)?;
        eprintln!("transferred {} tensors, reinitialized {:?}", report.copied.len(), report.reinitialized);
    }
    if a.correction && !model.has_correction() {
        model.attach_correction_bilstm(a.plan.seed.wrapping_add(1))?;
    }
    Ok(model)
}

fn transfer(a: &TransferArgs) -> Result<()> {
    let sizes = ExperimentSizes { src_train: a.src_train, dst_train: a.dst_train, dst_test: a.dst_test, threshold: a.threshold, ..ExperimentSizes::default() };
    let source = a.source.as_deref().map(Model::<f32>::load).transpose()?;
    let render = RenderConfig { seed: a.plan.seed, ..RenderConfig::default() };
    let report = transfer_experiment(a.src, a.dst, &model_config(a.model, a.size), &sizes, &a.plan.plan(), &render, source.as_ref())?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = Model::<f32>::load(&a.ckpt)?;
    let (data, held_out) = load_data(&a.data)?;
    let data = held_out.unwrap_or(data);
    let report = evaluate_model(&model, &data)?;
    println!("{}", report.summary());
    print!("{}", report.to_tsv());
    Ok(())
}

fn decode(a: &DecodeArgs) -> Result<()> {
    let model = Model::<f32>::load(&a.ckpt)?;
    let image = GrayImage::load(&a.image)?;
    let text = model.predict(std::slice::from_ref(&image))?;
    println!("{}", text[0]);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let results = run_suite(a.seed, a.seeds)?;
    println!("case\tseeds\tmax_rel_err\tresult");
    for r in &results {
        println!("{}\t{}\t{:.3e}\t{}", r.name, r.seeds, r.max_rel_err, if r.passed { "pass" } else { "FAIL" });
    }
    Ok(results.iter().all(|r| r.passed))
}

fn run(cmd: &Command) -> Result<bool> {
    match cmd {
        Command::Gen(a) => gen(a)?,
        Command::Train(a) => train(a)?,
        Command::Transfer(a) => transfer(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Decode(a) => decode(a)?,
        Command::Ngrams(a) => print!("{}", ngram_table(read_corpus(&a.corpus)?, a.n)?.to_tsv(a.top)),
        Command::Stats(a) => println!("{}", corpus_stats(read_corpus(&a.corpus)?)?.to_tsv()),
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            let mut root = Cli::command();
            let sub = std::env::args().nth(1).and_then(|name| root.find_subcommand_mut(&name).cloned());
            let usage = match sub {
                Some(sub) => {
                    let name = format!("strlab {}", sub.get_name());
                    sub.bin_name(name).render_usage()
                }
                None => root.render_usage(),
            };
            eprintln!("\n{usage}");
            return ExitCode::from(2);
        }
    };
    let config = serde_json::to_string(&cli.command).unwrap_or_default();
    eprintln!("config: {config}");
    match run(&cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Io(_) = e {
                eprintln!("hint: check that the paths exist and are readable");
            }
            ExitCode::from(1)
        }
    }
}
