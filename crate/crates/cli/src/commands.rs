use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use taxoseq::corpus::adapters::{adapt, DatasetFormat};
use taxoseq::corpus::synth::{generate, SynthConfig};
use taxoseq::corpus::Dataset;
use taxoseq::eval::{evaluate, EvalReport};
use taxoseq::inference::PredictionDiagnostics;
use taxoseq::trainer::{checkpoint, Trainer, ValLoss, LAST_DIR};
use taxoseq::{Classifier, RunConfig};

use crate::{
    ablate, AdaptArgs, Cli, Command, EvaluateArgs, FormatArg, GenSynthArgs, Global, PredictArgs, StatsArgs, TrainArgs,
    ValLossArg,
};

pub const CONFIG_FILE: &str = "config.toml";

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(&cli.global)?;
    match cli.command {
        Command::Train(a) => train(&cli.global, a),
        Command::Evaluate(a) => evaluate_cmd(&cli.global, a),
        Command::Predict(a) => predict(&cli.global, a),
        Command::Ablate(a) => ablate::run(&cli.global, a),
        Command::GenSynth(a) => gen_synth(&cli.global, a),
        Command::Stats(a) => stats(a),
        Command::Adapt(a) => adapt_cmd(a),
    }
}

fn configure_threads(g: &Global) -> Result<()> {
    let threads = if g.deterministic { Some(1) } else { g.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides, then `--seed`.
pub fn resolve_config(g: &Global) -> Result<RunConfig> {
    let base = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Permutation-stream salt used when preparing a split.
pub fn split_salt(split: &str) -> u64 {
    match split {
        "train" => 0,
        "dev" | "val" => 1,
        _ => 2,
    }
}

fn load_dataset(dir: &Path, strict: bool) -> Result<Dataset> {
    Dataset::load(dir, strict).with_context(|| format!("loading dataset {}", dir.display()))
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

pub fn write_report(dir: &Path, split: &str, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let txt = dir.join(format!("eval_{split}.txt"));
    fs::write(&txt, report.render()).with_context(|| format!("writing {}", txt.display()))?;
    let kv = dir.join(format!("eval_{split}.kv"));
    fs::write(&kv, report.key_values()).with_context(|| format!("writing {}", kv.display()))?;
    Ok(())
}

/// Trains `cfg` on `ds`, writing everything under `run_dir`, and returns the
/// best classifier's test report.
pub fn train_and_report(cfg: &RunConfig, ds: &Dataset, run_dir: &Path, resume: bool) -> Result<EvalReport> {
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let mut trainer = if resume {
        let last = run_dir.join(LAST_DIR);
        if !last.is_dir() {
            bail!("nothing to resume: {} does not exist", last.display());
        }
        Trainer::resume(&last, ds, Some(run_dir))?
    } else {
        let clf = Classifier::build(cfg, ds)?;
        clf.config.save(run_dir.join(CONFIG_FILE))?;
        log::info!(
            "{}: {} parameters, {} train / {} dev samples, capacity {}",
            run_dir.display(),
            clf.model.store.count_values(),
            ds.train.len(),
            ds.dev.len(),
            clf.capacity()
        );
        Trainer::new(clf, ds, Some(run_dir))?
    };
    trainer.run()?;
    let (clf, state) = trainer.finish();
    log::info!(
        "{}: stopped after epoch {}, best validation loss {:.5} at epoch {}",
        run_dir.display(),
        state.epoch,
        state.best_val.unwrap_or(f64::NAN),
        state.best_epoch
    );
    let test = clf.prepare(&ds.test, split_salt("test"))?;
    let (report, _) = evaluate(&clf, &test)?;
    write_report(run_dir, "test", &report)?;
    Ok(report)
}

fn train(g: &Global, a: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(g)?;
    if let Some(v) = a.val_loss {
        cfg.train.val_loss = match v {
            ValLossArg::Training => ValLoss::Training,
            ValLossArg::PlainCe => ValLoss::PlainCe,
        };
    }
    let ds = load_dataset(&a.data, cfg.data.strict)?;
    let run_dir = g.out.join(a.run_name.unwrap_or_else(|| dir_name(&a.data)));
    let report = train_and_report(&cfg, &ds, &run_dir, a.resume)?;
    println!("{}", report.render());
    Ok(())
}

fn load_classifier(dir: &Path, beam: Option<usize>) -> Result<Classifier> {
    let mut clf = checkpoint::load(dir)
        .with_context(|| format!("loading checkpoint {}", dir.display()))?
        .classifier;
    if let Some(b) = beam {
        if b == 0 {
            bail!("--beam must be at least 1");
        }
        clf.config.eval.beam_width = b;
    }
    Ok(clf)
}

fn evaluate_cmd(_g: &Global, a: EvaluateArgs) -> Result<()> {
    let mut clf = load_classifier(&a.checkpoint, a.beam)?;
    if a.macro_all_labels {
        clf.config.eval.macro_all_labels = true;
    }
    let ds = load_dataset(&a.data, clf.config.data.strict)?;
    if ds.hierarchy.to_tsv() != clf.hierarchy.to_tsv() {
        bail!("dataset taxonomy differs from the checkpoint's");
    }
    let samples = ds
        .split(&a.split)
        .with_context(|| format!("unknown split {:?} (expected train, dev or test)", a.split))?;
    let examples = clf.prepare(samples, split_salt(&a.split))?;
    let (report, _) = evaluate(&clf, &examples)?;
    let dir = a
        .report_dir
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    write_report(&dir, &a.split, &report)?;
    println!("{}", report.render());
    Ok(())
}

#[derive(Deserialize)]
struct PredictInput {
    id: Option<String>,
    text: String,
}

#[derive(Serialize)]
struct PredictOutput<'a> {
    id: &'a str,
    labels: Vec<&'a str>,
    levels: Vec<Vec<&'a str>>,
    diagnostics: &'a PredictionDiagnostics,
}

fn predict(_g: &Global, a: PredictArgs) -> Result<()> {
    let clf = load_classifier(&a.checkpoint, a.beam)?;
    let file = fs::File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", a.input.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictInput =
            serde_json::from_str(&line).with_context(|| format!("{} line {}", a.input.display(), n + 1))?;
        records.push((r.id.unwrap_or_else(|| (n + 1).to_string()), r.text));
    }
    let predictions = records
        .par_iter()
        .map(|(id, text)| clf.predict(id, text))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    let h = &clf.hierarchy;
    for ((id, _), p) in records.iter().zip(&predictions) {
        let line = PredictOutput {
            id,
            labels: p.labels.iter().map(|&l| h.name(l)).collect(),
            levels: p
                .levels
                .iter()
                .map(|g| g.iter().map(|&l| h.name(l)).collect())
                .collect(),
            diagnostics: &p.diagnostics,
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    out.flush()?;
    Ok(())
}

fn gen_synth(g: &Global, a: GenSynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.synth_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(depth, branching, vocab_size, docs_per_leaf, noise_rate, signal_strength);
    if a.total_docs.is_some() {
        cfg.total_docs = a.total_docs;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let ds = generate(&cfg)?;
    ds.save(&a.dest)?;
    let synth_file = a.dest.join("synth.toml");
    fs::write(&synth_file, toml::to_string(&cfg)?).with_context(|| format!("writing {}", synth_file.display()))?;
    println!("{}: {}", a.dest.display(), ds.stats()?.render());
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let ds = load_dataset(&a.data, false)?;
    let s = ds.stats()?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        println!("{}", s.render());
    }
    Ok(())
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let format = match a.format {
        FormatArg::Wos => DatasetFormat::Wos,
        FormatArg::Nyt => DatasetFormat::Nyt,
        FormatArg::Rcv1 => DatasetFormat::Rcv1,
    };
    let (ds, discrepancies) = adapt(format, &a.raw)?;
    for d in &discrepancies {
        log::warn!("{d}");
    }
    ds.save(&a.dest)?;
    println!("{}: {}", a.dest.display(), ds.stats()?.render());
    Ok(())
}
