//! `fuseqa`: build knowledge graphs, inspect retrieved contexts, train and
//! evaluate fusion models, run ablation grids and the self-check suite.
//!
//! Exit codes: 0 success, 1 failed check or non-finite loss, 2 usage or
//! input error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};

use fuseqa_core::config::RunConfig;
use fuseqa_core::context::ContextBuilder;
use fuseqa_core::kg::{KgBundle, KnowledgeGraph, BUNDLE_MAGIC};
use fuseqa_core::model::{load_checkpoint, save_checkpoint, FusionMode, FusionModel};
use fuseqa_core::selfcheck::run_selfcheck;
use fuseqa_core::train::{
    evaluate, grid, load_dataset, make_synthetic_task, prepare_examples, run_ablation, save_dataset, train,
    AblationSetup, Example, Metrics, Split, TrainError, Variant,
};

const SEED_VAR: &str = "FUSEQA_SEED";

#[derive(Parser)]
#[command(name = "fuseqa", version, about = "Knowledge-grounded multiple-choice QA with LM/GNN fusion")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the planted-knowledge task as triple, template, dataset and config files.
    Synth(SynthArgs),
    /// Validate triple and template files and write a KG bundle.
    BuildKg(BuildKgArgs),
    /// Print the ranked context triplets for one question/choice pair.
    Context(ContextArgs),
    /// Train a model and write its checkpoint, loss curve and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate a fusion-mode × hop grid.
    Ablate(AblateArgs),
    /// Run every gradient check and oracle comparison.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Config whose `synthetic` section sets the sizes.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    kg_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BuildKgArgs {
    #[arg(long)]
    triples: PathBuf,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by every subcommand that reads a run config.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// KG bundle or triple file; overrides the config's `kg` section.
    #[arg(long)]
    kg: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_hop: Option<usize>,
    /// Model and training seed; overrides the config and FUSEQA_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ContextArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    question: String,
    #[arg(long)]
    choice: String,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset file, or a directory when `--split` is given.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Named split (`train`, `ihdev`, `ihtest`) read as `<data>/<split>.jsonl`.
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for `loss_curve.tsv` and `train_metrics.json`; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    fusion_mode: Option<FusionMode>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics file with per-example predictions.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Use the generated task even when the config names datasets.
    #[arg(long)]
    synthetic: bool,
    /// Comma-separated variants, e.g. `none,cross-4`.
    #[arg(long, value_delimiter = ',')]
    variants: Option<Vec<Variant>>,
    #[arg(long, value_delimiter = ',')]
    hops: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<usize>,
    /// Where to write the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
}

/// A failed check rather than bad input.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let check = err.chain().any(|e| {
        e.downcast_ref::<CheckFailed>().is_some() || matches!(e.downcast_ref::<TrainError>(), Some(TrainError::NonFinite { .. }))
    });
    if check {
        1
    } else {
        2
    }
}

/// The error chain joined by `: `, skipping causes already quoted by their parent.
fn render(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| anyhow!("{SEED_VAR}={s:?} is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

impl RunArgs {
    /// Config file (or defaults) with environment and flag overrides applied.
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = env_seed()? {
            cfg.set_seed(s);
        }
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(l) = self.lambda {
            cfg.scoring.lambda = l;
        }
        if let Some(k) = self.k {
            cfg.scoring.k = k.try_into().map_err(|_| anyhow!("--k must be positive"))?;
        }
        if let Some(h) = self.max_hop {
            cfg.retrieval.max_hop = h.try_into().map_err(|_| anyhow!("--max-hop must be positive"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn bundle(&self, cfg: &RunConfig) -> Result<KgBundle> {
        let Some(path) = &self.kg else { return Ok(cfg.load_kg()?) };
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        if text.lines().next() == Some(BUNDLE_MAGIC) {
            return KgBundle::parse(&text).with_context(|| path.display().to_string());
        }
        let kg = KnowledgeGraph::parse_triples(&text).with_context(|| path.display().to_string())?;
        let templates = match &cfg.kg.templates {
            Some(t) => fuseqa_core::kg::TemplateTable::load(t)?,
            None => Default::default(),
        };
        Ok(KgBundle { kg, templates })
    }
}

impl DataArgs {
    fn load(&self, fallback: Option<&PathBuf>, what: &str) -> Result<Vec<Example>> {
        let path = match (&self.data, self.split, fallback) {
            (Some(d), Some(s), _) => s.path_in(d),
            (Some(d), None, _) => d.clone(),
            (None, Some(_), _) => bail!("--split needs --data DIR"),
            (None, None, Some(f)) => f.clone(),
            (None, None, None) => bail!("no {what} data: pass --data or set data.{what} in the config"),
        };
        Ok(load_dataset(&path)?)
    }
}

/// Everything needed to turn examples into model inputs.
struct Pipeline {
    cfg: RunConfig,
    bundle: KgBundle,
    encoder: Box<dyn fuseqa_core::context::TextEncoder>,
    stats: fuseqa_core::kg::RelationStats,
}

impl Pipeline {
    fn new(run: &RunArgs) -> Result<Self> {
        let cfg = run.config()?;
        let bundle = run.bundle(&cfg)?;
        let encoder = cfg.encoder()?;
        let stats = bundle.kg.relation_stats(cfg.scoring.relf_mode);
        Ok(Self { cfg, bundle, encoder, stats })
    }

    fn builder(&self) -> Result<ContextBuilder<'_>> {
        Ok(ContextBuilder::new(
            &self.bundle.kg,
            &self.bundle.templates,
            self.encoder.as_ref(),
            &self.stats,
            self.cfg.context_config(),
        )?)
    }
}

fn loss_curve_tsv(m: &Metrics) -> String {
    let mut out = String::from("step\tloss\n");
    for (i, l) in m.loss_curve.iter().enumerate() {
        let _ = writeln!(out, "{i}\t{l}");
    }
    out
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut s = match &a.config {
        Some(p) => RunConfig::load(p)?.synthetic,
        None => Default::default(),
    };
    if let Some(seed) = env_seed()? {
        s.seed = seed;
    }
    s.n_train = a.n_train.unwrap_or(s.n_train);
    s.n_test = a.n_test.unwrap_or(s.n_test);
    s.kg_size = a.kg_size.unwrap_or(s.kg_size);
    s.seed = a.seed.unwrap_or(s.seed);
    let task = make_synthetic_task(s.n_train + s.n_test, s.kg_size, s.seed);
    let (tr, te) = task.examples.split_at(s.n_train);
    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    write_file(&a.out_dir.join("triples.tsv"), &task.kg.to_triple_lines())?;
    write_file(&a.out_dir.join("templates.tsv"), &task.templates.to_lines())?;
    save_dataset(Split::Train.path_in(&a.out_dir), tr)?;
    save_dataset(Split::IhTest.path_in(&a.out_dir), te)?;
    let mut cfg = RunConfig { synthetic: s, ..Default::default() };
    cfg.kg.triples = Some("triples.tsv".into());
    cfg.kg.templates = Some("templates.tsv".into());
    cfg.data.train = Some("train.jsonl".into());
    cfg.data.eval = Some("ihtest.jsonl".into());
    write_file(&a.out_dir.join("run.toml"), &cfg.to_toml())?;
    println!(
        "train={} test={} entities={} relations={} triplets={}",
        tr.len(),
        te.len(),
        task.kg.num_entities(),
        task.kg.num_relations(),
        task.kg.triplets().len()
    );
    Ok(())
}

fn cmd_build_kg(a: BuildKgArgs) -> Result<()> {
    let kg = KnowledgeGraph::load_triples(&a.triples)?;
    let templates = match &a.templates {
        Some(t) => fuseqa_core::kg::TemplateTable::load(t)?,
        None => Default::default(),
    };
    let bundle = KgBundle { kg, templates };
    write_file(&a.out, &bundle.to_text())?;
    println!("{}", bundle.summary());
    Ok(())
}

fn cmd_context(a: ContextArgs) -> Result<()> {
    let p = Pipeline::new(&a.run)?;
    let ctx = p.builder()?.build(&a.question, &a.choice)?;
    print!("{}", ctx.to_records());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut p = Pipeline::new(&a.run)?;
    if let Some(s) = a.steps {
        p.cfg.train.steps = s;
    }
    if let Some(lr) = a.lr {
        p.cfg.train.lr = lr;
    }
    if let Some(m) = a.fusion_mode {
        p.cfg.model.fusion_mode = m;
    }
    if let Some(h) = a.heads {
        p.cfg.model.n_heads = h;
    }
    p.cfg.validate()?;
    let examples = a.data.load(p.cfg.data.train.as_ref(), "train")?;
    let data = prepare_examples(&examples, &p.builder()?, &p.cfg.model)?;
    let mut model = FusionModel::new(p.cfg.model.clone(), p.bundle.kg.num_relations())?;
    let metrics = train(&mut model, &data, &p.cfg.train)?;
    if let Some(dir) = a.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    save_checkpoint(&model, &a.checkpoint)?;
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    write_file(&out.join("loss_curve.tsv"), &loss_curve_tsv(&metrics))?;
    write_file(&out.join("train_metrics.json"), &metrics.to_json())?;
    println!("train {}", metrics.summary());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if !a.checkpoint.is_file() {
        bail!("checkpoint not found: {}", a.checkpoint.display());
    }
    let p = Pipeline::new(&a.run)?;
    let model = load_checkpoint(&a.checkpoint)?;
    if model.num_relations() != p.bundle.kg.num_relations() {
        bail!(
            "checkpoint was trained with {} relations but the graph has {}",
            model.num_relations(),
            p.bundle.kg.num_relations()
        );
    }
    let examples = a.data.load(p.cfg.data.eval.as_ref(), "eval")?;
    let data = prepare_examples(&examples, &p.builder()?, model.config())?;
    let metrics = evaluate(&model, &data)?;
    if let Some(out) = &a.out {
        write_file(out, &metrics.to_json())?;
    }
    println!("{}", metrics.summary());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut cfg = a.run.config()?;
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    let variants = match a.variants {
        Some(v) => v,
        None => cfg.ablation.variants.iter().map(|v| v.parse().map_err(|e: String| anyhow!(e))).collect::<Result<_>>()?,
    };
    let hops = a.hops.unwrap_or_else(|| cfg.ablation.hops.clone());
    if hops.contains(&0) {
        bail!("hops must be positive");
    }
    let cells = grid(&variants, &hops);
    let synthetic = a.synthetic || (a.run.kg.is_none() && cfg.data.train.is_none());
    let (bundle, train_examples, test_examples) = if synthetic {
        let s = cfg.synthetic;
        let task = make_synthetic_task(s.n_train + s.n_test, s.kg_size, s.seed);
        let mut examples = task.examples;
        let test = examples.split_off(s.n_train);
        (KgBundle { kg: task.kg, templates: task.templates }, examples, test)
    } else {
        let bundle = a.run.bundle(&cfg)?;
        let none = DataArgs { data: None, split: None };
        let tr = none.load(cfg.data.train.as_ref(), "train")?;
        let te = none.load(cfg.data.eval.as_ref(), "eval")?;
        (bundle, tr, te)
    };
    let encoder = cfg.encoder()?;
    let stats = bundle.kg.relation_stats(cfg.scoring.relf_mode);
    let setup = AblationSetup {
        kg: &bundle.kg,
        templates: &bundle.templates,
        encoder: encoder.as_ref(),
        stats: &stats,
        context: cfg.context_config(),
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        train_examples: &train_examples,
        test_examples: &test_examples,
    };
    let table = run_ablation(&cells, &setup);
    let text = table.to_text();
    print!("{text}");
    if let Some(out) = &a.out {
        write_file(out, &text)?;
    }
    let failed = table.rows.iter().filter(|r| r.outcome.is_err()).count();
    if failed > 0 {
        return Err(CheckFailed(format!("{failed} of {} ablation cells failed", table.rows.len())).into());
    }
    Ok(())
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<()> {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let report = run_selfcheck(seed);
    print!("{}", report.to_table());
    if !report.all_passed() {
        let n = report.checks.iter().filter(|c| !c.passed).count();
        return Err(CheckFailed(format!("{n} self-checks failed")).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::BuildKg(a) => cmd_build_kg(a),
        Command::Context(a) => cmd_context(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
