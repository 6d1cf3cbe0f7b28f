use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use psgalign::autodiff::Checkpoint;
use psgalign::corpus::{hex_digest, split_for_key, Corpus, Labels, Split, STATS_FILE};
use psgalign::edf::read_edf_file;
use psgalign::eval::{
    aggregate_probe, recall_heatmap_svg, retrieval_matrix, staging_finetune, FinetuneConfig, ProbeConfig, RetrievalConfig,
    SupervisedReport,
};
use psgalign::io_util::write_atomic;
use psgalign::model::AlignmentModel;
use psgalign::prep::{prepare_night_raw, CohortStats, PrepConfig, StatsAccumulator};
use psgalign::pretrain::{model_from_checkpoint, PretrainConfig, PretrainError, Trainer, METRICS_HEADER};
use psgalign::synth::{export_edf, generate, SynthSpec};
use psgalign::Modality;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::merge;
use crate::manifest::RunManifest;
use crate::{Cli, Command, Common, UsageError};

pub const CHECKPOINT_FILE: &str = "checkpoint.s2vk";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::Ingest(_) => "ingest",
            Command::Stats(_) => "stats",
            Command::Prepare(_) => "prepare",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::Retrieve(_) => "retrieve",
            Command::Report(_) => "report",
        }
    }
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let c = &cli.common;
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let mut man = RunManifest::new(cli.command.name());
    man.seed = c.seed;
    let res = match &cli.command {
        Command::GenSynth(a) => gen_synth(c, a, &mut man),
        Command::Ingest(a) => ingest(c, a, &mut man),
        Command::Stats(a) => stats(c, a, &mut man),
        Command::Prepare(a) => prepare(c, a, &mut man),
        Command::Pretrain(a) => pretrain(c, a, &mut man),
        Command::Finetune(a) => finetune(c, a, &mut man),
        Command::Evaluate(a) => evaluate(c, a, &mut man),
        Command::Retrieve(a) => retrieve(c, a, &mut man),
        Command::Report(a) => report(c, a, &mut man),
    };
    if let Err(e) = &res {
        man.status = format!("error: {e:#}");
    }
    let saved = man.save(&c.out);
    res.and(saved)
}

/// `--set` overrides, then typed flags, then the seed.
fn overrides(c: &Common, typed: Vec<String>) -> Vec<String> {
    let mut sets = c.sets.clone();
    sets.extend(typed);
    if let Some(s) = c.seed {
        sets.push(format!("seed={s}"));
    }
    sets
}

/// `Debug` output is a valid TOML literal for numbers (keeping exponents) and strings.
fn opt_set<T: std::fmt::Debug>(key: &str, v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}={v:?}"))
}

fn modalities_set(list: &Option<String>) -> anyhow::Result<Option<String>> {
    let Some(list) = list else { return Ok(None) };
    let mods = list
        .split(',')
        .map(|s| s.parse::<Modality>().map(|m| format!("\"{}\"", m.name())))
        .collect::<Result<Vec<_>, _>>()
        .map_err(UsageError)?;
    Ok(Some(format!("modalities=[{}]", mods.join(","))))
}

fn write_out(out: &Path, name: &str, bytes: &[u8], man: &mut RunManifest) -> anyhow::Result<()> {
    write_atomic(&out.join(name), bytes).with_context(|| format!("writing {name}"))?;
    man.add_output(out, name)
}

fn load_corpus(dir: &Path, man: &mut RunManifest) -> anyhow::Result<Corpus> {
    man.set_corpus(dir)?;
    Corpus::load(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn save_corpus(corpus: &Corpus, out: &Path, man: &mut RunManifest) -> anyhow::Result<()> {
    corpus.save(out)?;
    for name in [psgalign::corpus::CORPUS_FILE, psgalign::corpus::MANIFEST_FILE, psgalign::corpus::LABELS_FILE] {
        man.add_output(out, name)?;
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub nights_per_subject: Option<usize>,
    /// 30-second epochs per night.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Strength of the site-signature shortcut in [0, 1].
    #[arg(long)]
    pub confound: Option<f64>,
    /// Site whose nights all go to the test split.
    #[arg(long)]
    pub holdout_site: Option<String>,
    /// Also write every raw night as `edf/<night>.edf`.
    #[arg(long)]
    pub export_edf: bool,
}

fn gen_synth(c: &Common, a: &GenSynthArgs, man: &mut RunManifest) -> anyhow::Result<()> {
    let typed = [
        opt_set("n_subjects", &a.subjects),
        opt_set("nights_per_subject", &a.nights_per_subject),
        opt_set("epochs_per_night", &a.epochs),
        opt_set("confound", &a.confound),
        opt_set("holdout_site", &a.holdout_site),
    ];
    let m = merge(&SynthSpec::default(), c.config.as_deref(), &overrides(c, typed.into_iter().flatten().collect()))?;
    man.set_config(&m.text);
    man.seed = Some(m.value.seed);
    m.value.validate().map_err(|e| UsageError(e.to_string()))?;
    let gen = generate(&m.value, a.export_edf)?;
    save_corpus(&gen.corpus, &c.out, man)?;
    write_out(&c.out, STATS_FILE, gen.stats.to_toml().as_bytes(), man)?;
    if let Some(recs) = &gen.recordings {
        std::fs::create_dir_all(c.out.join("edf"))?;
        for rec in recs {
            let name = format!("edf/{}.edf", rec.subject_meta.night_id);
            export_edf(rec, &c.out.join(&name))?;
            man.add_output(&c.out, &name)?;
        }
    }
    log::info!("wrote {} nights to {}", gen.corpus.len(), c.out.display());
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub seed: u64,
    pub pretrain_fraction: f64,
    pub finetune_fraction: f64,
    /// When set, the split key is the night id up to the last occurrence of
    /// this separator, so all nights of a subject share a split.
    pub subject_separator: Option<String>,
    pub prep: PrepConfig,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            pretrain_fraction: 0.6,
            finetune_fraction: 0.2,
            subject_separator: None,
            prep: PrepConfig::default(),
        }
    }
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// EDF files, or directories whose `.edf` files are read.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// JSON sidecar mapping night id to `{ "stages": [...], "target": 0|1 }`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub subject_separator: Option<String>,
}

fn edf_files(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            for e in std::fs::read_dir(p).with_context(|| format!("listing {}", p.display()))? {
                let path = e?.path();
                if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("edf")) {
                    files.push(path);
                }
            }
        } else {
            files.push(p.clone());
        }
    }
    files.sort();
    files.dedup();
    Ok(files)
}

fn ingest(c: &Common, a: &IngestArgs, man: &mut RunManifest) -> anyhow::Result<()> {
    let typed = opt_set("subject_separator", &a.subject_separator);
    let m = merge(&IngestConfig::default(), c.config.as_deref(), &overrides(c, typed.into_iter().collect()))?;
    man.set_config(&m.text);
    let cfg = m.value;
    let files = edf_files(&a.inputs)?;
    if files.is_empty() {
        bail!(UsageError("no EDF files among the inputs".into()));
    }
    let results: Vec<anyhow::Result<_>> = files
        .par_iter()
        .map(|f| {
            let rec = read_edf_file(f).with_context(|| format!("reading {}", f.display()))?;
            prepare_night_raw(&rec, &cfg.prep).with_context(|| format!("preparing {}", f.display()))
        })
        .collect();
    let mut nights = Vec::new();
    let mut skipped = String::new();
    for (f, r) in files.iter().zip(results) {
        match r {
            Ok(n) => {
                man.add_input(f)?;
                nights.push(n);
            }
            Err(e) => {
                log::warn!("skipping: {e:#}");
                skipped.push_str(&format!("{}\t{e:#}\n", f.display()));
            }
        }
    }
    if nights.is_empty() {
        bail!("no input file could be ingested");
    }
    let mut seen = std::collections::HashSet::new();
    for n in &nights {
        if !seen.insert(n.meta.night_id.clone()) {
            bail!("duplicate night id '{}'", n.meta.night_id);
        }
    }
    let splits: Vec<Split> = nights
        .iter()
        .map(|n| {
            let id = n.meta.night_id.as_str();
            let key = match &cfg.subject_separator {
                Some(sep) => id.rsplit_once(sep.as_str()).map_or(id, |(s, _)| s),
                None => id,
            };
            split_for_key(key, cfg.seed, cfg.pretrain_fraction, cfg.finetune_fraction)
        })
        .collect();
    let labels: Labels = match &a.labels {
        Some(p) => {
            man.add_input(p)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => Labels::new(),
    };
    let corpus = Corpus::new(nights, splits, labels);
    save_corpus(&corpus, &c.out, man)?;
    if !skipped.is_empty() {
        write_out(&c.out, "skipped.tsv", skipped.as_bytes(), man)?;
    }
    log::info!("ingested {} of {} files", corpus.len(), files.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
}

fn stats(c: &Common, a: &StatsArgs, man: &mut RunManifest) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus, man)?;
    let mut idx = corpus.indices(Split::Pretrain);
    if idx.is_empty() {
        log::warn!("pretrain split is empty; fitting on every night");
        idx = (0..corpus.len()).collect();
    }
    let mut acc = StatsAccumulator::default();
    for i in idx {
        acc.add_night(&corpus.nights[i]);
    }
    write_out(&c.out, STATS_FILE, acc.finish()?.to_toml().as_bytes(), man)
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Statistics from `stats`.
    #[arg(long)]
    pub stats: PathBuf,
}

fn prepare(c: &Common, a: &PrepareArgs, man: &mut RunManifest) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus, man)?;
    man.add_input(&a.stats)?;
    let text = std::fs::read_to_string(&a.stats)?;
    let stats = CohortStats::from_toml(&text).with_context(|| format!("parsing {}", a.stats.display()))?;
    stats.validate()?;
    let Corpus { nights, splits, labels } = corpus;
    let nights = nights.into_iter().map(|n| n.normalized(&stats)).collect::<Result<Vec<_>, _>>()?;
    save_corpus(&Corpus::new(nights, splits, labels), &c.out, man)?;
    write_out(&c.out, STATS_FILE, text.as_bytes(), man)
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Continue from a checkpoint; metrics already in the output directory are kept.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Start from the large-scale preset instead of the desk one.
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// `dash` or `infonce`.
    #[arg(long)]
    pub objective: Option<String>,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: u64,
    /// Stop (with a checkpoint) once this global step is reached; the schedule
    /// still spans the configured step count.
    #[arg(long)]
    pub stop_at: Option<u64>,
}

#[derive(Serialize)]
struct NonFiniteReport<'a> {
    step: u64,
    pair: &'a str,
    nights: &'a [String],
    last_checkpoint_step: Option<u64>,
}

fn pretrain(c: &Common, a: &PretrainArgs, man: &mut RunManifest) -> anyhow::Result<()> {
    let typed = [
        opt_set("optimizer.total_steps", &a.steps),
        opt_set("optimizer.peak_lr", &a.lr),
        opt_set("data.batch_size", &a.batch_size),
        opt_set("objective", &a.objective.as_ref().map(|s| s.to_ascii_lowercase())),
    ];
    let base = if a.paper_scale {
        PretrainConfig::paper()
    } else {
        PretrainConfig::desk()
    };
    let m = merge(&base, c.config.as_deref(), &overrides(c, typed.into_iter().flatten().collect()))?;
    man.set_config(&m.text);
    man.seed = Some(m.value.seed);
    m.value.validate()?;
    let corpus = load_corpus(&a.corpus, man)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            man.add_input(p)?;
            Trainer::load(m.value, p, &corpus)?
        }
        None => Trainer::new(m.value, &corpus)?,
    };
    write_out(&c.out, CONFIG_FILE, m.text.as_bytes(), man)?;

    let metrics_path = c.out.join(METRICS_FILE);
    let mut metrics = format!("{METRICS_HEADER}\n");
    if trainer.step > 0 && metrics_path.exists() {
        let old = std::fs::read_to_string(&metrics_path)?;
        for line in old.lines().skip(1) {
            let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if step < trainer.step {
                metrics.push_str(line);
                metrics.push('\n');
            }
        }
    }
    let ckpt_path = c.out.join(CHECKPOINT_FILE);
    let mut last_ckpt = None;
    let end = a.stop_at.map_or(trainer.config.steps(), |s| s.min(trainer.config.steps()));
    while trainer.step < end {
        match trainer.step_once(&corpus) {
            Ok(rec) => {
                metrics.push_str(&format!("{},{},{},{}\n", rec.step, rec.pair, rec.loss, rec.lr));
                if rec.step % 100 == 0 {
                    log::info!("step {} {} loss {:.4} lr {:.2e}", rec.step, rec.pair, rec.loss, rec.lr);
                }
                if a.checkpoint_every > 0 && trainer.step % a.checkpoint_every == 0 && trainer.step < end {
                    trainer.save(&ckpt_path)?;
                    write_atomic(&metrics_path, metrics.as_bytes())?;
                    last_ckpt = Some(trainer.step);
                }
            }
            Err(PretrainError::NonFiniteLoss { step, pair, nights }) => {
                write_out(&c.out, METRICS_FILE, metrics.as_bytes(), man)?;
                let diag = NonFiniteReport {
                    step,
                    pair: &pair,
                    nights: &nights,
                    last_checkpoint_step: last_ckpt,
                };
                write_out(&c.out, "nonfinite.json", serde_json::to_string_pretty(&diag)?.as_bytes(), man)?;
                if last_ckpt.is_some() {
                    man.add_output(&c.out, CHECKPOINT_FILE)?;
                }
                return Err(PretrainError::NonFiniteLoss { step, pair, nights }.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    trainer.save(&ckpt_path)?;
    man.add_output(&c.out, CHECKPOINT_FILE)?;
    write_out(&c.out, METRICS_FILE, metrics.as_bytes(), man)
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Pre-trained checkpoint.
    #[arg(long, required_unless_present = "random_init", conflicts_with = "random_init")]
    pub checkpoint: Option<PathBuf>,
    /// Use a randomly initialized desk-size encoder instead.
    #[arg(long)]
    pub random_init: bool,
    #[arg(long, default_value_t = 99)]
    pub init_seed: u64,
}

/// Model plus a line naming its source, appended to the effective config.
fn load_model(a: &ModelArgs, corpus: &Corpus, man: &mut RunManifest) -> anyhow::Result<(AlignmentModel, String)> {
    match &a.checkpoint {
        Some(p) => {
            man.add_input(p)?;
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let ck = Checkpoint::from_bytes(&bytes)?;
            let (model, _) = model_from_checkpoint(&ck)?;
            Ok((model, format!("# model: checkpoint {}\n", hex_digest(&bytes))))
        }
        None => {
            let cfg = PretrainConfig::desk();
            let model = AlignmentModel::new(cfg.model.clone(), &cfg.usable_modalities(corpus), a.init_seed)?;
            Ok((model, format!("# model: random init seed {}\n", a.init_seed)))
        }
    }
}

fn supervised_outputs(prefix: &str, r: &SupervisedReport, out: &Path, man: &mut RunManifest) -> anyhow::Result<()> {
    let h = &man.config_hash.clone();
    write_out(out, &format!("{prefix}_confusion_{h}.csv"), r.confusion.to_csv().as_bytes(), man)?;
    write_out(out, &format!("{prefix}_{h}.json"), serde_json::to_string_pretty(r)?.as_bytes(), man)?;
    let m = &r.metrics;
    log::info!("{prefix}: acc {:.4} kappa {:.4} macro-F1 {:.4}", m.acc, m.kappa, m.macro_f1);
    if let Some(auc) = r.auc {
        log::info!("{prefix}: AUC {auc:.4}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub paper_scale: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// `concat`, `mean` or `gating`.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Comma-separated modality names.
    #[arg(long)]
    pub modalities: Option<String>,
}

fn finetune(c: &Common, a: &FinetuneArgs, man: &mut RunManifest) -> anyhow::Result<()> {
    let typed = [
        opt_set("optimizer.total_steps", &a.steps),
        opt_set("optimizer.peak_lr", &a.lr),
        opt_set("fusion", &a.fusion.as_ref().map(|s| s.to_ascii_lowercase())),
        modalities_set(&a.modalities)?,
    ];
    let base = if a.paper_scale {
        FinetuneConfig::paper()
    } else {
        FinetuneConfig::desk()
    };
    let m = merge(&base, c.config.as_deref(), &overrides(c, typed.into_iter().flatten().collect()))?;
    let corpus = load_corpus(&a.corpus, man)?;
    let (model, source) = load_model(&a.model, &corpus, man)?;
    man.set_config(&(m.text.clone() + &source));
    man.seed = Some(m.value.seed);
    let r = staging_finetune(&model, &corpus, &m.value)?;
    supervised_outputs("staging", &r, &c.out, man)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub modalities: Option<String>,
}

fn evaluate(c: &Common, a: &EvaluateArgs, man: &mut RunManifest) -> anyhow::Result<()> {
    let typed = [
        opt_set("optimizer.total_steps", &a.steps),
        opt_set("fusion", &a.fusion.as_ref().map(|s| s.to_ascii_lowercase())),
        modalities_set(&a.modalities)?,
    ];
    let m = merge(&ProbeConfig::default(), c.config.as_deref(), &overrides(c, typed.into_iter().flatten().collect()))?;
    let corpus = load_corpus(&a.corpus, man)?;
    let (model, source) = load_model(&a.model, &corpus, man)?;
    man.set_config(&(m.text.clone() + &source));
    man.seed = Some(m.value.seed);
    let r = aggregate_probe(&model, &corpus, &m.value)?;
    supervised_outputs("probe", &r, &c.out, man)
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Segments in the candidate pool.
    #[arg(long)]
    pub pool: Option<usize>,
    /// `pretrain`, `finetune` or `test`.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub modalities: Option<String>,
}

fn retrieve(c: &Common, a: &RetrieveArgs, man: &mut RunManifest) -> anyhow::Result<()> {
    let split = a
        .split
        .as_deref()
        .map(|s| s.parse::<Split>().map(|s| format!("split=\"{s}\"")))
        .transpose()
        .map_err(UsageError)?;
    let typed = [opt_set("pool_size", &a.pool), split, modalities_set(&a.modalities)?];
    let m = merge(&RetrievalConfig::default(), c.config.as_deref(), &overrides(c, typed.into_iter().flatten().collect()))?;
    let corpus = load_corpus(&a.corpus, man)?;
    let (model, source) = load_model(&a.model, &corpus, man)?;
    man.set_config(&(m.text.clone() + &source));
    man.seed = Some(m.value.seed);
    let r = retrieval_matrix(&model, &corpus, &m.value)?;
    let h = man.config_hash.clone();
    write_out(&c.out, &format!("recall_{h}.csv"), r.to_csv().as_bytes(), man)?;
    write_out(&c.out, &format!("recall_{h}.svg"), recall_heatmap_svg(&r).as_bytes(), man)?;
    write_out(&c.out, &format!("recall_{h}.json"), serde_json::to_string_pretty(&r)?.as_bytes(), man)?;
    log::info!("mean off-diagonal recall@1 {:.4} over pool {}", r.mean, r.pool_size);
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Run directories to verify; defaults to `--out`.
    pub runs: Vec<PathBuf>,
}

fn headline(out: &Path, m: &RunManifest) -> Vec<String> {
    let mut lines = Vec::new();
    for name in m.outputs.keys().filter(|n| n.ends_with(".json")) {
        let Ok(text) = std::fs::read_to_string(out.join(name)) else { continue };
        let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else { continue };
        let mut cells = Vec::new();
        for (label, ptr) in [
            ("acc", "/metrics/acc"),
            ("kappa", "/metrics/kappa"),
            ("macro_f1", "/metrics/macro_f1"),
            ("auc", "/auc"),
            ("mean recall@1", "/mean"),
        ] {
            if let Some(x) = v.pointer(ptr).and_then(|x| x.as_f64()) {
                cells.push(format!("{label} {x:.4}"));
            }
        }
        if !cells.is_empty() {
            lines.push(format!("  - `{name}`: {}", cells.join(", ")));
        }
    }
    if let Some(text) = m.outputs.get(METRICS_FILE).and_then(|_| std::fs::read_to_string(out.join(METRICS_FILE)).ok()) {
        let losses: Vec<f64> = text.lines().skip(1).filter_map(|l| l.split(',').nth(2)?.parse().ok()).collect();
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            lines.push(format!("  - {} steps, loss {first:.4} -> {last:.4}", losses.len()));
        }
    }
    lines
}

fn report(c: &Common, a: &ReportArgs, man: &mut RunManifest) -> anyhow::Result<()> {
    let runs = if a.runs.is_empty() { vec![c.out.clone()] } else { a.runs.clone() };
    let mut md = String::from("# Run report\n\n");
    let mut problems = Vec::new();
    let mut found = 0;
    for dir in &runs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let n = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                n.starts_with("run-") && n.ends_with(".json") && n != RunManifest::file_name("report")
            })
            .collect();
        files.sort();
        md.push_str(&format!("## {}\n\n", dir.display()));
        for f in files {
            let m = RunManifest::load(&f)?;
            man.add_input(&f)?;
            found += 1;
            let bad = m.verify(dir);
            let verdict = if bad.is_empty() { "verified" } else { "MISMATCH" };
            md.push_str(&format!(
                "- `{}` ({}, config {}, seed {}): {}, {}\n",
                m.command,
                m.version,
                m.config_hash,
                m.seed.map_or("-".into(), |s| s.to_string()),
                m.status,
                verdict
            ));
            for line in headline(dir, &m) {
                md.push_str(&line);
                md.push('\n');
            }
            problems.extend(bad);
        }
        md.push('\n');
    }
    if found == 0 {
        bail!("no run manifests found");
    }
    if !problems.is_empty() {
        md.push_str("## Mismatches\n\n");
        for p in &problems {
            md.push_str(&format!("- {p}\n"));
        }
    }
    write_out(&c.out, "report.md", md.as_bytes(), man)?;
    print!("{md}");
    if !problems.is_empty() {
        bail!("{} hash mismatches", problems.len());
    }
    Ok(())
}
