//! Command-line stages. Each command reads upstream artifact directories,
//! checks their manifests against the current config hash, builds its
//! outputs in a staging directory and renames it into place.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluation::{average_reports, compare_reports, comparison_markdown, MetricsReport};
use crate::model::ModelState;
use crate::pipeline::{self, ProbeVariants, WorldBundle};
use crate::probing::{load_predictions, save_predictions};
use crate::training::{TuneMode, TunedModels};
use crate::world::{
    load_corpus, load_world, save_corpus, save_world, write_atomic, write_jsonl, Vocab,
    CORPUS_FILE, RELATIONS_FILE, TEMPLATES_FILE, TRIPLES_FILE, VOCAB_FILE,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BASE_CHECKPOINT: &str = "base.ck";
pub const SHARED_CHECKPOINT: &str = "shared.ck";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const COMPARISON_JSON: &str = "comparison.json";
pub const COMPARISON_MD: &str = "comparison.md";

#[derive(Debug, Parser)]
#[command(
    name = "uniark",
    version,
    about = "Debiased factual probing on a synthetic fact world"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the fact world, templates, pretraining corpus and vocabulary.
    GenerateWorld(GenerateArgs),
    /// Pretrain the masked language model on the world corpus.
    Pretrain(PretrainArgs),
    /// Tune the pretrained model per relation in one mode.
    Tune(TuneArgs),
    /// Write predictions for the held-out triples.
    Probe(ProbeArgs),
    /// Compute the metric report from one or more prediction runs.
    Eval(EvalArgs),
    /// Paired significance tests between two reports.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON experiment config.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config preset used when --config is absent.
    #[arg(long, default_value = "paper-mini")]
    pub preset: String,
    /// Output directory of this stage.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Overrides the world seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub world: PathBuf,
    /// Overrides the pretraining seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub world: PathBuf,
    /// Output directory of `pretrain`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// none, finetune, adapter, uniark or uniark-para.
    #[arg(long, default_value = "uniark")]
    pub mode: String,
    /// Tuning seed; defaults to the first configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub world: PathBuf,
    /// Output directory of `tune` or `pretrain`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Extra record variants, comma separated.
    #[arg(long, default_value = "original,subject_masked")]
    pub variants: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub world: PathBuf,
    /// Output directories of `probe`; several are averaged (one per seed).
    #[arg(long, required = true, num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    /// File with one relation id per line to drop from consistency metrics.
    #[arg(long)]
    pub exclude_relations: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Output directory of the first `eval`.
    #[arg(long)]
    pub a: PathBuf,
    /// Output directory of the second `eval`.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Provenance record written into every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Config file path, or `preset:<name>`.
    pub config_source: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, PathBuf>,
    /// SHA-256 of each upstream directory's manifest, keyed like `inputs`.
    pub upstream_manifests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mode: Option<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Loads `--config` or the preset.
pub fn load_config(common: &Common) -> Result<(ExperimentConfig, String)> {
    match &common.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::MissingInput(path.clone()));
            }
            let cfg = ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?;
            Ok((cfg, path.display().to_string()))
        }
        None => Ok((
            ExperimentConfig::preset(&common.preset)?,
            format!("preset:{}", common.preset),
        )),
    }
}

/// Reads an upstream manifest, returning it with the hash of its bytes.
pub fn read_manifest(dir: &Path) -> Result<(RunManifest, String)> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let bytes = std::fs::read(&path)?;
    let manifest: RunManifest = serde_json::from_slice(&bytes)?;
    Ok((manifest, hex::encode(Sha256::digest(&bytes))))
}

/// Output directory under construction. Files land in a hidden sibling and
/// the whole directory is renamed into place by [`Stage::commit`], so a
/// failed command leaves nothing behind.
struct Stage {
    out: PathBuf,
    tmp: PathBuf,
    manifest: RunManifest,
}

impl Stage {
    fn begin(
        out: &Path,
        force: bool,
        command: &str,
        config_source: String,
        config_hash: String,
    ) -> Result<Self> {
        if out.exists() && !force {
            return Err(Error::WouldOverwrite(out.to_path_buf()));
        }
        let name = out
            .file_name()
            .ok_or_else(|| Error::Config(format!("invalid output path {}", out.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = out
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        Ok(Stage {
            out: out.to_path_buf(),
            tmp,
            manifest: RunManifest {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                config_source,
                config_hash,
                inputs: BTreeMap::new(),
                upstream_manifests: BTreeMap::new(),
                outputs: Vec::new(),
                seeds: Vec::new(),
                mode: None,
                started_unix_ms: now_ms(),
                finished_unix_ms: 0,
            },
        })
    }

    /// Registers an upstream directory and checks its config hash.
    fn input(&mut self, key: &str, dir: &Path, check_hash: bool) -> Result<RunManifest> {
        let (manifest, digest) = read_manifest(dir)?;
        if check_hash && manifest.config_hash != self.manifest.config_hash {
            return Err(Error::HashMismatch {
                stage: format!("{key} ({})", dir.display()),
                expected: self.manifest.config_hash.clone(),
                found: manifest.config_hash,
            });
        }
        self.manifest
            .inputs
            .insert(key.to_string(), dir.to_path_buf());
        self.manifest
            .upstream_manifests
            .insert(key.to_string(), digest);
        Ok(manifest)
    }

    fn path(&mut self, file: &str) -> PathBuf {
        self.manifest.outputs.push(file.to_string());
        self.tmp.join(file)
    }

    fn commit(mut self) -> Result<PathBuf> {
        self.manifest.outputs.sort();
        self.manifest.finished_unix_ms = now_ms();
        let mut json = serde_json::to_string_pretty(&self.manifest)?;
        json.push('\n');
        write_atomic(&self.tmp.join(MANIFEST_FILE), json.as_bytes())?;
        if self.out.exists() {
            std::fs::remove_dir_all(&self.out)?;
        }
        std::fs::rename(&self.tmp, &self.out)?;
        Ok(self.out.clone())
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        if self.tmp.exists() {
            let _ = std::fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Loads a world directory written by `generate-world`.
pub fn load_bundle(dir: &Path) -> Result<WorldBundle> {
    let world = load_world(dir)?;
    let corpus_path = dir.join(CORPUS_FILE);
    if !corpus_path.exists() {
        return Err(Error::MissingInput(corpus_path));
    }
    let bundle = WorldBundle::from_world(world, load_corpus(&corpus_path)?)?;
    let stored = Vocab::load(&dir.join(VOCAB_FILE))?;
    if stored != bundle.vocab {
        return Err(Error::Config(format!(
            "{} does not match the world files",
            dir.join(VOCAB_FILE).display()
        )));
    }
    Ok(bundle)
}

fn relation_checkpoint(relation_id: &str) -> String {
    format!("relation-{relation_id}.ck")
}

fn ck_metadata(hash: &str, relation_id: Option<&str>) -> serde_json::Value {
    serde_json::json!({ "config_hash": hash, "relation_id": relation_id })
}

pub fn cmd_generate_world(args: &GenerateArgs) -> Result<PathBuf> {
    let (mut cfg, source) = load_config(&args.common)?;
    let hash = cfg.hash();
    if let Some(seed) = args.seed {
        cfg.world.seed = seed;
    }
    let mut stage = Stage::begin(
        &args.common.out,
        args.common.force,
        "generate-world",
        source,
        hash,
    )?;
    let bundle = pipeline::generate(&cfg)?;
    save_world(&bundle.world, &stage.tmp)?;
    for f in [RELATIONS_FILE, TRIPLES_FILE, TEMPLATES_FILE] {
        stage.path(f);
    }
    save_corpus(&bundle.corpus, &stage.path(CORPUS_FILE))?;
    bundle.vocab.save(&stage.path(VOCAB_FILE))?;
    stage.manifest.seeds = vec![cfg.world.seed];
    stage.commit()
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<PathBuf> {
    let (mut cfg, source) = load_config(&args.common)?;
    let hash = cfg.hash();
    if let Some(seed) = args.seed {
        cfg.pretrain_seed = seed;
    }
    let mut stage = Stage::begin(
        &args.common.out,
        args.common.force,
        "pretrain",
        source,
        hash.clone(),
    )?;
    stage.input("world", &args.world, true)?;
    let bundle = load_bundle(&args.world)?;
    let mut losses = Vec::new();
    let (state, report) = pipeline::pretrain_base(&cfg, &bundle, |epoch, loss| {
        eprintln!("pretrain epoch {epoch} loss {loss:.4}");
        losses.push(serde_json::json!({ "epoch": epoch, "loss": loss }));
    })?;
    let trainable = crate::model::TrainableSet::Finetune;
    save_checkpoint(
        &stage.path(BASE_CHECKPOINT),
        &state,
        "pretrain",
        trainable,
        ck_metadata(&hash, None),
    )?;
    write_jsonl(&stage.path("pretrain_log.jsonl"), &losses)?;
    eprintln!("masked {:.4} of tokens", report.masking_fraction());
    stage.manifest.seeds = vec![cfg.pretrain_seed];
    stage.commit()
}

pub fn cmd_tune(args: &TuneArgs) -> Result<PathBuf> {
    let (cfg, source) = load_config(&args.common)?;
    let hash = cfg.hash();
    let mode = TuneMode::parse(&args.mode)?;
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let mut stage = Stage::begin(
        &args.common.out,
        args.common.force,
        "tune",
        source,
        hash.clone(),
    )?;
    stage.input("world", &args.world, true)?;
    let upstream = stage.input("checkpoint", &args.checkpoint, true)?;
    if upstream.command != "pretrain" {
        return Err(Error::Config(format!(
            "{} is a {} output, expected pretrain",
            args.checkpoint.display(),
            upstream.command
        )));
    }
    let bundle = load_bundle(&args.world)?;
    let (_, base) = load_checkpoint(&args.checkpoint.join(BASE_CHECKPOINT))?;
    let (tuned, log) = pipeline::tune_seed(&cfg, &base, &bundle, mode, seed)?;
    let trainable = mode.trainable();
    if let Some(shared) = &tuned.shared {
        save_checkpoint(
            &stage.path(SHARED_CHECKPOINT),
            shared,
            mode.name(),
            trainable,
            ck_metadata(&hash, None),
        )?;
    }
    for (rel, state) in &tuned.per_relation {
        let path = stage.path(&relation_checkpoint(rel));
        save_checkpoint(
            &path,
            state,
            mode.name(),
            trainable,
            ck_metadata(&hash, Some(rel)),
        )?;
    }
    write_jsonl(&stage.path("train_log.jsonl"), &log)?;
    stage.manifest.seeds = vec![seed];
    stage.manifest.mode = Some(mode.name().to_string());
    stage.commit()
}

/// Reassembles tuned models from a `tune` or `pretrain` directory.
pub fn load_tuned(dir: &Path, manifest: &RunManifest, bundle: &WorldBundle) -> Result<TunedModels> {
    if manifest.command == "pretrain" {
        let (_, base) = load_checkpoint(&dir.join(BASE_CHECKPOINT))?;
        return Ok(TunedModels {
            mode: TuneMode::None,
            shared: Some(base),
            per_relation: BTreeMap::new(),
        });
    }
    if manifest.command != "tune" {
        return Err(Error::Config(format!(
            "{} is a {} output, expected tune or pretrain",
            dir.display(),
            manifest.command
        )));
    }
    let mode = TuneMode::parse(manifest.mode.as_deref().unwrap_or("none"))?;
    let shared_path = dir.join(SHARED_CHECKPOINT);
    let shared = if shared_path.exists() {
        Some(load_checkpoint(&shared_path)?.1)
    } else {
        None
    };
    let mut per_relation: BTreeMap<String, ModelState> = BTreeMap::new();
    if shared.is_none() {
        for rel in &bundle.world.relations {
            let (_, state) = load_checkpoint(&dir.join(relation_checkpoint(&rel.relation_id)))?;
            per_relation.insert(rel.relation_id.clone(), state);
        }
    }
    Ok(TunedModels {
        mode,
        shared,
        per_relation,
    })
}

pub fn cmd_probe(args: &ProbeArgs) -> Result<PathBuf> {
    let (cfg, source) = load_config(&args.common)?;
    let variants = ProbeVariants::parse(&args.variants)?;
    let mut stage = Stage::begin(
        &args.common.out,
        args.common.force,
        "probe",
        source,
        cfg.hash(),
    )?;
    stage.input("world", &args.world, true)?;
    let upstream = stage.input("checkpoint", &args.checkpoint, true)?;
    let bundle = load_bundle(&args.world)?;
    let tuned = load_tuned(&args.checkpoint, &upstream, &bundle)?;
    let records = pipeline::probe(&cfg, &tuned, &bundle, &variants)?;
    save_predictions(&stage.path(PREDICTIONS_FILE), &records)?;
    stage.manifest.seeds = upstream.seeds;
    stage.manifest.mode = Some(tuned.mode.name().to_string());
    stage.commit()
}

fn read_exclusions(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<PathBuf> {
    let (mut cfg, source) = load_config(&args.common)?;
    let hash = cfg.hash();
    if let Some(path) = &args.exclude_relations {
        cfg.eval.exclude_relations.extend(read_exclusions(path)?);
    }
    let mut stage = Stage::begin(&args.common.out, args.common.force, "eval", source, hash)?;
    stage.input("world", &args.world, true)?;
    let bundle = load_bundle(&args.world)?;
    let mut reports = Vec::new();
    let mut mode = None;
    for (i, dir) in args.predictions.iter().enumerate() {
        let upstream = stage.input(&format!("predictions.{i}"), dir, true)?;
        if mode.is_some() && mode != upstream.mode {
            return Err(Error::Config(
                "prediction runs come from different modes".into(),
            ));
        }
        mode = upstream.mode.clone();
        let path = dir.join(PREDICTIONS_FILE);
        if !path.exists() {
            return Err(Error::MissingInput(path));
        }
        let records = load_predictions(&path)?;
        let run_mode = TuneMode::parse(upstream.mode.as_deref().unwrap_or("none"))?;
        let prov = pipeline::provenance(&cfg, run_mode, upstream.seeds.clone());
        reports.push(pipeline::evaluate(&cfg, &bundle, &records, prov)?);
        stage.manifest.seeds.extend(upstream.seeds);
    }
    let report = if reports.len() == 1 {
        reports.remove(0)
    } else {
        average_reports(&reports)?
    };
    write_atomic(&stage.path(REPORT_JSON), report.to_json()?.as_bytes())?;
    write_atomic(&stage.path(REPORT_MD), report.to_markdown().as_bytes())?;
    stage.manifest.mode = mode;
    stage.commit()
}

fn read_report(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join(REPORT_JSON);
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    MetricsReport::from_json(&std::fs::read_to_string(path)?)
}

pub fn cmd_compare(args: &CompareArgs) -> Result<PathBuf> {
    let (ma, _) = read_manifest(&args.a)?;
    let mut stage = Stage::begin(
        &args.out,
        args.force,
        "compare",
        ma.config_source.clone(),
        ma.config_hash.clone(),
    )?;
    stage.input("a", &args.a, false)?;
    stage.input("b", &args.b, false)?;
    let a = read_report(&args.a)?;
    let b = read_report(&args.b)?;
    let tests = compare_reports(&a, &b)?;
    let mut json = serde_json::to_string_pretty(&tests)?;
    json.push('\n');
    write_atomic(&stage.path(COMPARISON_JSON), json.as_bytes())?;
    write_atomic(
        &stage.path(COMPARISON_MD),
        comparison_markdown(&a, &b, &tests).as_bytes(),
    )?;
    stage.manifest.seeds = a.provenance.seeds.clone();
    stage.commit()
}

pub fn run(cli: &Cli) -> Result<PathBuf> {
    match &cli.command {
        Command::GenerateWorld(a) => cmd_generate_world(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
    }
}
