//! Experiment directory, stage DAG and reproducibility checks.
//!
//! Layout under the experiment root:
//!
//! ```text
//! experiment.json            stage flags, digests, seeds, timestamps
//! config/*.toml              one flat file per configurable stage
//! world/ pretrain_world/     manifests and frames
//! dae.ckpt tts_pretrain.ckpt tts_finetune.ckpt proto.json (+ *_log.json)
//! cdoa/                      text bank, quota plan, kept ids, synthetic corpus
//! detector/                  one checkpoint per setting and seed
//! reports/                   {bias,disentangle,controllability,augmentation}.{json,csv}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdoa::{
    build_text_banks, generate_cdoa, plan_quotas, select_originals, Annotator, GroundTruthAnnotator,
    LexiconAnnotator, QuotaPlan, QuotaStrategy,
};
use crate::dae::{train_dae, DaeConfig, DaeModel};
use crate::detector::{evaluate_subjects, train_detector, Augmentation, Detector, DetectorConfig, DetectorEvaluation};
use crate::error::{Error, Result};
use crate::gen::{evaluate_gen, train_gen, FlowTts, GenConfig, GenExample};
use crate::report::{
    augmentation_report, bias_report, controllability_report, disentangle_report, json_max_abs_diff,
    Provenance, ReportConfig, SweepInputs, REPORT_KINDS,
};
use crate::seed::digest;
use crate::severity::{subject_embedding, PrototypeBank};
use crate::world::{
    generate_world, write_utterances, write_world, DatasetManifest, Split, Utterance, Vocabulary, WorldConfig,
};

/// Stages in execution order; each requires every earlier stage.
pub const STAGES: [&str; 8] = [
    "world",
    "dae",
    "tts-pretrain",
    "tts-finetune",
    "proto",
    "cdoa",
    "detector",
    "report",
];

pub const MANIFEST_FILE: &str = "experiment.json";
pub const ROOT_ENV: &str = "DEPFLOW_ROOT";
/// Tolerance for recomputed report values.
pub const REPORT_TOLERANCE: f64 = 1e-9;

pub fn stage_index(stage: &str) -> Result<usize> {
    STAGES
        .iter()
        .position(|s| *s == stage)
        .ok_or_else(|| Error::config("stage", format!("unknown stage `{stage}`; expected one of {}", STAGES.join(", "))))
}

/// Config files read by each stage.
pub fn stage_configs(stage: &str) -> &'static [&'static str] {
    match stage {
        "world" => &["world"],
        "dae" => &["dae"],
        "tts-pretrain" => &["pretrain_world", "tts_pretrain"],
        "tts-finetune" => &["tts_finetune"],
        "cdoa" => &["cdoa"],
        "detector" => &["detector"],
        "report" => &["report"],
        _ => &[],
    }
}

/// Artifacts written by each stage, relative to the root.
pub fn stage_artifacts(stage: &str) -> &'static [&'static str] {
    match stage {
        "world" => &["world"],
        "dae" => &["dae.ckpt", "dae_log.json"],
        "tts-pretrain" => &["pretrain_world", "tts_pretrain.ckpt", "tts_pretrain_log.json"],
        "tts-finetune" => &["tts_finetune.ckpt", "tts_finetune_log.json"],
        "proto" => &["proto.json"],
        "cdoa" => &["cdoa"],
        "detector" => &["detector"],
        "report" => &["reports"],
        _ => &[],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    /// Sentiment labels stored in the manifest.
    GroundTruth,
    /// Majority sentiment of the utterance's tokens.
    Lexicon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdoaConfig {
    pub annotator: AnnotatorKind,
    pub seed: u64,
    #[serde(flatten)]
    pub strategy: QuotaStrategy,
}

impl Default for CdoaConfig {
    fn default() -> Self {
        Self {
            annotator: AnnotatorKind::GroundTruth,
            seed: 7,
            strategy: QuotaStrategy::EqualShare { synthetic_share: 0.3 },
        }
    }
}

/// Stage-3 training settings; the architecture is inherited from stage 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Detector settings compared over seeds; `augmentation` and `seed` of the
/// base config are replaced per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSuiteConfig {
    pub settings: Vec<Augmentation>,
    pub n_seeds: usize,
    pub eval_splits: Vec<Split>,
    #[serde(flatten)]
    pub base: DetectorConfig,
}

impl Default for DetectorSuiteConfig {
    fn default() -> Self {
        Self {
            settings: vec![Augmentation::None, Augmentation::Cdoa],
            n_seeds: 5,
            eval_splits: vec![Split::Dev, Split::Test],
            base: DetectorConfig {
                epochs: 6,
                ..Default::default()
            },
        }
    }
}

impl DetectorSuiteConfig {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|k| self.base.seed + k).collect()
    }

    pub fn run_config(&self, setting: Augmentation, seed: u64) -> DetectorConfig {
        DetectorConfig {
            augmentation: setting,
            seed,
            ..self.base.clone()
        }
    }
}

/// Every stage's configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub pretrain_world: WorldConfig,
    pub dae: DaeConfig,
    pub tts_pretrain: GenConfig,
    pub tts_finetune: FinetuneConfig,
    pub cdoa: CdoaConfig,
    pub detector: DetectorSuiteConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            pretrain_world: WorldConfig {
                seed: 99,
                bias: 0.0,
                id_prefix: "p".into(),
                speaker_id_offset: 1000,
                n_subjects: 40,
                utterances_per_subject: 16,
                ..Default::default()
            },
            dae: DaeConfig {
                lr: 1e-3,
                max_epochs: 60,
                ..Default::default()
            },
            tts_pretrain: GenConfig {
                epochs: 60,
                ..Default::default()
            },
            tts_finetune: FinetuneConfig::default(),
            cdoa: CdoaConfig::default(),
            detector: DetectorSuiteConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

fn to_toml<T: Serialize>(v: &T) -> String {
    toml::to_string(v).expect("flat config serializes")
}

fn from_toml<T: for<'de> Deserialize<'de>>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.into(),
        reason: e.to_string(),
    })
}

impl ExperimentConfig {
    /// A small configuration that runs the whole pipeline in well under a minute.
    pub fn smoke() -> Self {
        let base = Self::default();
        Self {
            world: WorldConfig {
                n_subjects: 20,
                utterances_per_subject: 8,
                ..base.world
            },
            pretrain_world: WorldConfig {
                n_subjects: 6,
                utterances_per_subject: 6,
                ..base.pretrain_world
            },
            dae: DaeConfig {
                max_epochs: 2,
                conv_channels: 16,
                frame_proj_dim: 32,
                ..base.dae
            },
            tts_pretrain: GenConfig {
                epochs: 1,
                channels: 16,
                text_dim: 16,
                ..base.tts_pretrain
            },
            tts_finetune: FinetuneConfig {
                epochs: 1,
                ..base.tts_finetune
            },
            cdoa: base.cdoa,
            detector: DetectorSuiteConfig {
                n_seeds: 2,
                base: DetectorConfig {
                    epochs: 1,
                    channels: 8,
                    hidden: 8,
                    ..base.detector.base
                },
                ..base.detector
            },
            report: ReportConfig {
                sweep_bases: 4,
                refine_bases: 2,
                ..base.report
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.pretrain_world.validate()?;
        self.dae.validate()?;
        self.tts_pretrain.validate()?;
        self.detector.base.validate()?;
        self.report.validate()?;
        if self.detector.settings.len() < 2 {
            return Err(Error::config("detector.settings", "need at least two augmentation settings"));
        }
        if self.detector.n_seeds == 0 {
            return Err(Error::config("detector.n_seeds", "must be positive"));
        }
        if self.detector.eval_splits.contains(&Split::Train) {
            return Err(Error::config("detector.eval_splits", "training subjects cannot be evaluated"));
        }
        if self.tts_finetune.epochs == 0 || self.tts_finetune.batch_size == 0 || !(self.tts_finetune.lr > 0.0) {
            return Err(Error::config("tts_finetune", "epochs, batch_size and lr must be positive"));
        }
        Ok(())
    }

    /// Flat text of one named config file.
    pub fn text_of(&self, name: &str) -> String {
        match name {
            "world" => self.world.to_text(),
            "pretrain_world" => self.pretrain_world.to_text(),
            "dae" => self.dae.to_text(),
            "tts_pretrain" => self.tts_pretrain.to_text(),
            "tts_finetune" => to_toml(&self.tts_finetune),
            "cdoa" => to_toml(&self.cdoa),
            "detector" => to_toml(&self.detector),
            "report" => self.report.to_text(),
            _ => panic!("unknown config {name}"),
        }
    }

    pub const FILES: [&'static str; 8] = [
        "world",
        "pretrain_world",
        "dae",
        "tts_pretrain",
        "tts_finetune",
        "cdoa",
        "detector",
        "report",
    ];

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in Self::FILES {
            let path = dir.join(format!("{name}.toml"));
            fs::write(&path, self.text_of(name)).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<(String, String)> {
            let path = dir.join(format!("{name}.toml"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            Ok((text, path.display().to_string()))
        };
        let (t, p) = read("world")?;
        let world = WorldConfig::from_text(&t, &p)?;
        let (t, p) = read("pretrain_world")?;
        let pretrain_world = WorldConfig::from_text(&t, &p)?;
        let (t, p) = read("dae")?;
        let dae = DaeConfig::from_text(&t, &p)?;
        let (t, p) = read("tts_pretrain")?;
        let tts_pretrain = GenConfig::from_text(&t, &p)?;
        let (t, p) = read("tts_finetune")?;
        let tts_finetune = from_toml(&t, &p)?;
        let (t, p) = read("cdoa")?;
        let cdoa = from_toml(&t, &p)?;
        let (t, p) = read("detector")?;
        let detector = from_toml(&t, &p)?;
        let (t, p) = read("report")?;
        let report = ReportConfig::from_text(&t, &p)?;
        let cfg = Self {
            world,
            pretrain_world,
            dae,
            tts_pretrain,
            tts_finetune,
            cdoa,
            detector,
            report,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Digest over the config files a stage reads.
    pub fn stage_digest(&self, stage: &str) -> String {
        let mut text = String::new();
        for name in stage_configs(stage) {
            text.push_str(&format!("[{name}]\n{}\n", self.text_of(name)));
        }
        digest(text.as_bytes())
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("world".to_string(), self.world.seed),
            ("pretrain_world".to_string(), self.pretrain_world.seed),
            ("dae".to_string(), self.dae.seed),
            ("tts_pretrain".to_string(), self.tts_pretrain.seed),
            ("tts_finetune".to_string(), self.tts_finetune.seed),
            ("cdoa".to_string(), self.cdoa.seed),
            ("detector".to_string(), self.detector.base.seed),
            ("report".to_string(), self.report.seed),
        ])
    }

    /// Seeds of the config files a stage reads.
    pub fn stage_seeds(&self, stage: &str) -> BTreeMap<String, u64> {
        let seeds = self.seeds();
        stage_configs(stage)
            .iter()
            .map(|name| (name.to_string(), seeds[*name]))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed: bool,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    /// Combined artifact digests of the upstream stages consumed.
    pub inputs: BTreeMap<String, String>,
    /// sha256 per artifact (directories: over sorted relative paths and contents).
    pub artifacts: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seconds: f64,
}

impl StageRecord {
    pub fn combined_digest(&self) -> String {
        let text: String = self.artifacts.iter().map(|(k, v)| format!("{k}\t{v}\n")).collect();
        digest(text.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub id: String,
    pub created_unix: u64,
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, StageRecord>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// sha256 of a file, or of a directory's sorted `(relative path, file digest)` list.
pub fn artifact_digest(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    if path.is_file() {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(digest(&bytes));
    }
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let p = e.path().unwrap_or(path).to_path_buf();
            Error::io(p, e.into())
        })?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    let lines: Vec<String> = files
        .par_iter()
        .map(|f| {
            let bytes = fs::read(f).map_err(|e| Error::io(f, e))?;
            let rel = f.strip_prefix(path).expect("walked under root").to_string_lossy().replace('\\', "/");
            Ok(format!("{rel}\t{}\n", digest(&bytes)))
        })
        .collect::<Result<_>>()?;
    Ok(digest(lines.concat().as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    /// Completed earlier with the same config and inputs.
    UpToDate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub completed: bool,
    /// Config changed since the stage ran.
    pub config_changed: bool,
    /// An upstream stage was rebuilt since this one ran.
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Check {
    Verified { detail: String },
    Mismatch { detail: String },
    Missing { detail: String },
}

impl Check {
    pub fn ok(&self) -> bool {
        matches!(self, Check::Verified { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCheck {
    pub stage: String,
    pub what: String,
    pub check: Check,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceReport {
    pub checks: Vec<StageCheck>,
}

impl ReproduceReport {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(|c| c.check.ok())
    }

    /// Stages with at least one failed check.
    pub fn failed_stages(&self) -> BTreeSet<String> {
        self.checks
            .iter()
            .filter(|c| !c.check.ok())
            .map(|c| c.stage.clone())
            .collect()
    }
}

/// Exclusive writer lock, released on drop.
struct WriteLock(PathBuf);

impl WriteLock {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(".lock");
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::config("experiment", format!("{} is locked by another writer", root.display()))
                } else {
                    Error::io(&path, e)
                }
            })?;
        Ok(Self(path))
    }
}

impl Drop for WriteLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct Experiment {
    pub root: PathBuf,
    pub manifest: ExperimentManifest,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// World corpus loaded from an experiment directory.
pub struct LoadedWorld {
    pub config: WorldConfig,
    pub manifest: DatasetManifest,
    pub utterances: Vec<Utterance>,
}

impl LoadedWorld {
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("world.toml");
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config = WorldConfig::from_text(&text, &cfg_path.display().to_string())?;
        let manifest = DatasetManifest::read(dir)?;
        manifest.check_split_hygiene()?;
        let utterances = manifest.load_all(dir)?;
        Ok(Self {
            config,
            manifest,
            utterances,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.manifest
            .records
            .iter()
            .zip(&self.utterances)
            .filter(|(r, _)| r.split == split)
            .map(|(_, u)| u)
            .collect()
    }

    pub fn splits(&self, splits: &[Split]) -> Vec<&Utterance> {
        self.manifest
            .records
            .iter()
            .zip(&self.utterances)
            .filter(|(r, _)| splits.contains(&r.split))
            .map(|(_, u)| u)
            .collect()
    }
}

/// Synthetic corpus plus the ids of the real utterances kept next to it.
pub struct LoadedCdoa {
    pub manifest: DatasetManifest,
    pub utterances: Vec<Utterance>,
    pub kept: Vec<String>,
    pub plan: QuotaPlan,
}

impl LoadedCdoa {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(dir)?;
        let utterances = manifest.load_all(dir)?;
        Ok(Self {
            manifest,
            utterances,
            kept: read_json(&dir.join("kept.json"))?,
            plan: read_json(&dir.join("plan.json"))?,
        })
    }
}

fn annotator(kind: AnnotatorKind, vocab_size: usize) -> Box<dyn Annotator> {
    match kind {
        AnnotatorKind::GroundTruth => Box::new(GroundTruthAnnotator),
        AnnotatorKind::Lexicon => Box::new(LexiconAnnotator { vocab_size }),
    }
}

/// Checkpoint path of one detector run.
pub fn detector_checkpoint(dir: &Path, setting: Augmentation, seed: u64) -> PathBuf {
    dir.join(format!("{}_seed{seed}.ckpt", setting.name()))
}

/// Prototype bank from the training utterances' subject-mean embeddings.
pub fn build_bank(dae: &DaeModel, train: &[&Utterance]) -> Result<PrototypeBank> {
    let emb = dae.encode_many(&train.iter().map(|u| &u.frames).collect::<Vec<_>>())?;
    let mut by_subject: BTreeMap<&str, (Vec<Vec<f64>>, usize)> = BTreeMap::new();
    for (u, e) in train.iter().zip(emb) {
        by_subject
            .entry(&u.subject_id)
            .or_insert_with(|| (Vec::new(), u.severity_level))
            .0
            .push(e.d_norm);
    }
    let subjects: Vec<(Vec<f64>, usize)> = by_subject
        .values()
        .map(|(es, level)| Ok((subject_embedding(es)?.0, *level)))
        .collect::<Result<_>>()?;
    PrototypeBank::build(&subjects)
}

/// Write the synthetic corpus for `plan` under `dir`.
pub fn write_cdoa(
    cfg: &ExperimentConfig,
    world: &LoadedWorld,
    generator: &FlowTts,
    bank: &PrototypeBank,
    dir: &Path,
) -> Result<()> {
    let records: Vec<_> = world.manifest.split(Split::Train).cloned().collect();
    let texts = build_text_banks(&records, annotator(cfg.cdoa.annotator, cfg.world.n_content_tokens).as_ref())?;
    let plan = plan_quotas(&records, cfg.cdoa.strategy.clone())?;
    plan.verify()?;
    let kept = select_originals(&records, &plan, cfg.cdoa.seed)?;
    let out = generate_cdoa(&records, &texts, &plan, generator, bank, cfg.cdoa.seed)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    texts.save(&dir.join("bank.json"))?;
    write_json(&dir.join("plan.json"), &plan)?;
    write_json(&dir.join("kept.json"), &kept)?;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "synthetic": out.records.len(),
            "kept_originals": kept.len(),
            "with_replacement": out.with_replacement,
            "benign_texts": texts.benign.len(),
            "depressive_texts": texts.depressive.len(),
        }),
    )?;
    write_utterances(&out.utterances, dir)?;
    DatasetManifest {
        seed: cfg.cdoa.seed,
        config_digest: cfg.stage_digest("cdoa"),
        frame_dim: world.manifest.frame_dim,
        records: out.records,
    }
    .write(dir)
}

/// Every report kind, as JSON values plus CSV text.
pub fn compute_reports(
    root: &Path,
    cfg: &ExperimentConfig,
    prov: Provenance,
) -> Result<BTreeMap<String, (serde_json::Value, String)>> {
    let world = LoadedWorld::load(&root.join("world"))?;
    let dae = DaeModel::load(&root.join("dae.ckpt"))?;
    let generator = FlowTts::load(&root.join("tts_finetune.ckpt"))?;
    let bank = PrototypeBank::load(&root.join("proto.json"))?;
    let train = world.split(Split::Train);
    let held = world.splits(&[Split::Dev, Split::Test]);
    let test = world.split(Split::Test);
    let mut out = BTreeMap::new();

    let bias = bias_report(&world.manifest.records, prov.clone())?;
    out.insert("bias".to_string(), (serde_json::to_value(&bias)?, bias.to_csv()));

    let dis = disentangle_report(&dae, &train, &held, world.config.n_content_tokens, prov.clone())?;
    out.insert("disentangle".to_string(), (serde_json::to_value(&dis)?, dis.to_csv()));

    let vocab = Vocabulary::new(&world.config);
    let bases = if test.is_empty() { &held } else { &test };
    let ctrl = controllability_report(
        &SweepInputs {
            dae: &dae,
            generator: &generator,
            bank: &bank,
            vocab: &vocab,
            bases,
            speaker_pool: &train,
        },
        &cfg.report,
        prov.clone(),
    )?;
    out.insert("controllability".to_string(), (serde_json::to_value(&ctrl)?, ctrl.to_csv()));

    let eval = world.splits(&cfg.detector.eval_splits);
    let det_dir = root.join("detector");
    let mut runs = Vec::new();
    for &setting in &cfg.detector.settings {
        let evals: Vec<DetectorEvaluation> = cfg
            .detector
            .seeds()
            .par_iter()
            .map(|&seed| {
                let model = Detector::load(&detector_checkpoint(&det_dir, setting, seed))?;
                evaluate_subjects(&model, &eval)
            })
            .collect::<Result<_>>()?;
        runs.push((setting.name().to_string(), evals));
    }
    let aug = augmentation_report(runs, prov)?;
    out.insert("augmentation".to_string(), (serde_json::to_value(&aug)?, aug.table.to_csv()));
    Ok(out)
}

impl Experiment {
    pub fn config_dir(&self) -> PathBuf {
        self.root.join("config")
    }

    /// Create a new experiment directory with `config` written out.
    pub fn init(root: &Path, config: &ExperimentConfig, id: Option<String>) -> Result<Self> {
        config.validate()?;
        if root.join(MANIFEST_FILE).exists() {
            return Err(Error::config(
                "experiment",
                format!("{} already holds an experiment", root.display()),
            ));
        }
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        config.write(&root.join("config"))?;
        let id = id.unwrap_or_else(|| {
            root.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".into())
        });
        let exp = Self {
            root: root.to_path_buf(),
            manifest: ExperimentManifest {
                id,
                created_unix: now_unix(),
                seeds: config.seeds(),
                stages: BTreeMap::new(),
            },
        };
        exp.save()?;
        Ok(exp)
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest: read_json(&path)?,
        })
    }

    pub fn save(&self) -> Result<()> {
        let tmp = self.root.join(format!("{MANIFEST_FILE}.tmp"));
        write_json(&tmp, &self.manifest)?;
        let path = self.root.join(MANIFEST_FILE);
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::read(&self.config_dir())
    }

    pub fn completed(&self, stage: &str) -> bool {
        self.manifest.stages.get(stage).is_some_and(|r| r.completed)
    }

    fn current_inputs(&self, stage: &str) -> Result<BTreeMap<String, String>> {
        let idx = stage_index(stage)?;
        let mut inputs = BTreeMap::new();
        for up in &STAGES[..idx] {
            match self.manifest.stages.get(*up) {
                Some(r) if r.completed => {
                    inputs.insert(up.to_string(), r.combined_digest());
                }
                _ => return Err(Error::Prerequisite(up.to_string())),
            }
        }
        Ok(inputs)
    }

    pub fn status(&self) -> Result<Vec<StageStatus>> {
        let cfg = self.config()?;
        Ok(STAGES
            .iter()
            .map(|&stage| {
                let rec = self.manifest.stages.get(stage);
                let completed = rec.is_some_and(|r| r.completed);
                StageStatus {
                    stage: stage.into(),
                    completed,
                    config_changed: completed && rec.is_some_and(|r| r.config_digest != cfg.stage_digest(stage)),
                    stale: completed
                        && rec.is_some_and(|r| self.current_inputs(stage).map(|i| i != r.inputs).unwrap_or(true)),
                }
            })
            .collect())
    }

    /// Run one stage. A completed stage with unchanged config and inputs is
    /// left alone unless `force`; a changed config is an error unless `force`.
    pub fn run_stage(&mut self, stage: &str, force: bool) -> Result<StageOutcome> {
        stage_index(stage)?;
        let cfg = self.config()?;
        let inputs = self.current_inputs(stage)?;
        let current = cfg.stage_digest(stage);
        if let Some(rec) = self.manifest.stages.get(stage).filter(|r| r.completed) {
            if rec.config_digest != current && !force {
                return Err(Error::DigestMismatch {
                    stage: stage.into(),
                    stored: rec.config_digest.clone(),
                    current,
                });
            }
            if rec.config_digest == current && rec.inputs == inputs && !force {
                return Ok(StageOutcome::UpToDate);
            }
        }
        let _lock = WriteLock::acquire(&self.root)?;
        let started_unix = now_unix();
        let clock = Instant::now();
        for a in stage_artifacts(stage) {
            let p = self.root.join(a);
            if p.is_dir() {
                fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        self.manifest.stages.remove(stage);
        self.save()?;
        self.execute(stage, &cfg)?;
        let artifacts = stage_artifacts(stage)
            .iter()
            .map(|a| Ok((a.to_string(), artifact_digest(&self.root.join(a))?)))
            .collect::<Result<_>>()?;
        self.manifest.seeds = cfg.seeds();
        self.manifest.stages.insert(
            stage.into(),
            StageRecord {
                completed: true,
                config_digest: current,
                seeds: cfg.stage_seeds(stage),
                inputs,
                artifacts,
                started_unix,
                finished_unix: now_unix(),
                seconds: clock.elapsed().as_secs_f64(),
            },
        );
        self.save()?;
        Ok(StageOutcome::Ran)
    }

    /// Run every stage in order; returns each stage's outcome.
    pub fn run_all(&mut self, force: bool) -> Result<Vec<(String, StageOutcome)>> {
        STAGES
            .iter()
            .map(|s| Ok((s.to_string(), self.run_stage(s, force)?)))
            .collect()
    }

    fn execute(&self, stage: &str, cfg: &ExperimentConfig) -> Result<()> {
        let root = &self.root;
        match stage {
            "world" => {
                let world = generate_world(&cfg.world)?;
                world.manifest.check_split_hygiene()?;
                write_world(&world, &root.join("world"))
            }
            "dae" => {
                let world = LoadedWorld::load(&root.join("world"))?;
                let (model, report) = train_dae(cfg.dae.clone(), &world.split(Split::Train), &world.split(Split::Dev))?;
                model.save(&root.join("dae.ckpt"))?;
                write_json(&root.join("dae_log.json"), &report)
            }
            "tts-pretrain" => {
                let pw = generate_world(&cfg.pretrain_world)?;
                write_world(&pw, &root.join("pretrain_world"))?;
                let pw = LoadedWorld::load(&root.join("pretrain_world"))?;
                let examples: Vec<GenExample> = pw.utterances.iter().map(|u| GenExample::from_utterance(u, None)).collect();
                let speakers: Vec<usize> = pw.utterances.iter().map(|u| u.speaker_id).collect();
                let mut model = FlowTts::new(cfg.tts_pretrain.clone(), &speakers)?;
                let report = train_gen(&mut model, &examples, &[])?;
                model.save(&root.join("tts_pretrain.ckpt"))?;
                write_json(&root.join("tts_pretrain_log.json"), &report)
            }
            "tts-finetune" => {
                let world = LoadedWorld::load(&root.join("world"))?;
                let dae = DaeModel::load(&root.join("dae.ckpt"))?;
                let mut model = FlowTts::load(&root.join("tts_pretrain.ckpt"))?;
                if model.has_film() {
                    return Err(Error::config("tts-finetune", "stage-2 checkpoint already carries FiLM"));
                }
                let train = world.split(Split::Train);
                let emb = dae.encode_many(&train.iter().map(|u| &u.frames).collect::<Vec<_>>())?;
                let examples: Vec<GenExample> = train
                    .iter()
                    .zip(emb)
                    .map(|(u, e)| GenExample::from_utterance(u, Some(e.d_norm)))
                    .collect();
                let ft = &cfg.tts_finetune;
                model.config.epochs = ft.epochs;
                model.config.lr = ft.lr;
                model.config.weight_decay = ft.weight_decay;
                model.config.batch_size = ft.batch_size;
                model.config.seed = ft.seed;
                model.extend_speakers(&train.iter().map(|u| u.speaker_id).collect::<Vec<_>>());
                model.enable_film();
                let before = evaluate_gen(&model, &examples, ft.seed)?;
                let report = train_gen(&mut model, &examples, &[])?;
                let after = evaluate_gen(&model, &examples, ft.seed)?;
                model.save(&root.join("tts_finetune.ckpt"))?;
                write_json(
                    &root.join("tts_finetune_log.json"),
                    &serde_json::json!({ "report": report, "loss_before": before, "loss_after": after }),
                )
            }
            "proto" => {
                let world = LoadedWorld::load(&root.join("world"))?;
                let dae = DaeModel::load(&root.join("dae.ckpt"))?;
                build_bank(&dae, &world.split(Split::Train))?.save(&root.join("proto.json"))
            }
            "cdoa" => {
                let world = LoadedWorld::load(&root.join("world"))?;
                let generator = FlowTts::load(&root.join("tts_finetune.ckpt"))?;
                let bank = PrototypeBank::load(&root.join("proto.json"))?;
                write_cdoa(cfg, &world, &generator, &bank, &root.join("cdoa"))
            }
            "detector" => {
                let world = LoadedWorld::load(&root.join("world"))?;
                let cdoa = LoadedCdoa::load(&root.join("cdoa"))?;
                let train = world.split(Split::Train);
                let kept: BTreeSet<&str> = cdoa.kept.iter().map(String::as_str).collect();
                let kept_train: Vec<&Utterance> = train.iter().copied().filter(|u| kept.contains(u.id.as_str())).collect();
                let synthetic: Vec<&Utterance> = cdoa.utterances.iter().collect();
                let dir = root.join("detector");
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let jobs: Vec<(Augmentation, u64)> = cfg
                    .detector
                    .settings
                    .iter()
                    .flat_map(|&a| cfg.detector.seeds().into_iter().map(move |s| (a, s)))
                    .collect();
                let logs: Vec<_> = jobs
                    .par_iter()
                    .map(|&(setting, seed)| {
                        let c = cfg.detector.run_config(setting, seed);
                        let (model, report) = if setting == Augmentation::Cdoa {
                            train_detector(c, &kept_train, &synthetic)?
                        } else {
                            train_detector(c, &train, &[])?
                        };
                        model.save(&detector_checkpoint(&dir, setting, seed))?;
                        Ok((format!("{}_seed{seed}", setting.name()), report))
                    })
                    .collect::<Result<_>>()?;
                let logs: BTreeMap<String, _> = logs.into_iter().collect();
                write_json(&dir.join("train_logs.json"), &logs)
            }
            "report" => {
                let dir = root.join("reports");
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (kind, (json, csv)) in compute_reports(root, cfg, self.provenance(Some((stage, cfg))))? {
                    write_json(&dir.join(format!("{kind}.json")), &json)?;
                    write_text(&dir.join(format!("{kind}.csv")), &csv)?;
                }
                Ok(())
            }
            _ => unreachable!("stage validated"),
        }
    }

    /// Train and evaluate ad-hoc detector configs on this experiment's world
    /// (and synthetic corpus, for CDoA configs) over `seeds`.
    pub fn compare_detectors(&self, configs: &[DetectorConfig], seeds: &[u64]) -> Result<crate::detector::ComparisonTable> {
        if !self.completed("world") {
            return Err(Error::Prerequisite("world".into()));
        }
        let cfg = self.config()?;
        let world = LoadedWorld::load(&self.root.join("world"))?;
        let needs_cdoa = configs.iter().any(|c| c.augmentation == Augmentation::Cdoa);
        if needs_cdoa && !self.completed("cdoa") {
            return Err(Error::Prerequisite("cdoa".into()));
        }
        let cdoa = if needs_cdoa {
            Some(LoadedCdoa::load(&self.root.join("cdoa"))?)
        } else {
            None
        };
        let train = world.split(Split::Train);
        let eval = world.splits(&cfg.detector.eval_splits);
        let mut runs = Vec::with_capacity(configs.len());
        for c in configs {
            c.validate()?;
            let (pool, extra): (Vec<&Utterance>, Vec<&Utterance>) = match (&cdoa, c.augmentation) {
                (Some(cd), Augmentation::Cdoa) => {
                    let kept: BTreeSet<&str> = cd.kept.iter().map(String::as_str).collect();
                    (
                        train.iter().copied().filter(|u| kept.contains(u.id.as_str())).collect(),
                        cd.utterances.iter().collect(),
                    )
                }
                _ => (train.clone(), Vec::new()),
            };
            let evals: Vec<DetectorEvaluation> = seeds
                .par_iter()
                .map(|&seed| {
                    let (model, _) = train_detector(DetectorConfig { seed, ..c.clone() }, &pool, &extra)?;
                    evaluate_subjects(&model, &eval)
                })
                .collect::<Result<_>>()?;
            runs.push((c.augmentation.name().to_string(), evals));
        }
        crate::detector::compare_augmentations(&runs)
    }

    /// Seeds and config digests recorded by the completed stages, plus those
    /// of a stage currently running.
    pub fn provenance(&self, running: Option<(&str, &ExperimentConfig)>) -> Provenance {
        let mut prov = Provenance::default();
        for (stage, rec) in self.manifest.stages.iter().filter(|(_, r)| r.completed) {
            prov.config_digests.insert(stage.clone(), rec.config_digest.clone());
            prov.seeds.extend(rec.seeds.clone());
        }
        if let Some((stage, cfg)) = running {
            prov.config_digests.insert(stage.to_string(), cfg.stage_digest(stage));
            prov.seeds.extend(cfg.stage_seeds(stage));
        }
        prov
    }

    /// Stored report of one kind.
    pub fn report(&self, kind: &str) -> Result<serde_json::Value> {
        if !REPORT_KINDS.contains(&kind) {
            return Err(Error::config("kind", format!("expected one of {}", REPORT_KINDS.join(", "))));
        }
        if !self.completed("report") {
            return Err(Error::Prerequisite("report".into()));
        }
        read_json(&self.root.join("reports").join(format!("{kind}.json")))
    }

    /// Re-verify a completed experiment: config digests per stage, stored
    /// artifact digests, bit-exact regeneration of both worlds and the
    /// synthetic corpus, and recomputed reports within tolerance.
    pub fn reproduce(&self) -> Result<ReproduceReport> {
        let mut checks = Vec::new();
        let mut push = |stage: &str, what: &str, check: Check| {
            checks.push(StageCheck {
                stage: stage.into(),
                what: what.into(),
                check,
            })
        };
        let cfg = self.config()?;
        for &stage in &STAGES {
            let Some(rec) = self.manifest.stages.get(stage).filter(|r| r.completed) else {
                push(stage, "completed", Check::Missing { detail: "stage has not completed".into() });
                continue;
            };
            let current = cfg.stage_digest(stage);
            push(
                stage,
                "config digest",
                if rec.config_digest == current {
                    Check::Verified { detail: current }
                } else {
                    Check::Mismatch {
                        detail: format!("stored {}, current {current}", rec.config_digest),
                    }
                },
            );
            for (artifact, stored) in &rec.artifacts {
                let check = match artifact_digest(&self.root.join(artifact)) {
                    Ok(d) if &d == stored => Check::Verified { detail: d },
                    Ok(d) => Check::Mismatch {
                        detail: format!("stored {stored}, on disk {d}"),
                    },
                    Err(e) => Check::Missing { detail: e.to_string() },
                };
                push(stage, &format!("artifact {artifact}"), check);
            }
        }

        let scratch = self.root.join(".reproduce");
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        }
        let stored = |stage: &str, artifact: &str| -> Option<String> {
            self.manifest.stages.get(stage).and_then(|r| r.artifacts.get(artifact).cloned())
        };
        let compare = |label: &str, fresh: Result<String>, stored: Option<String>| -> Check {
            match (fresh, stored) {
                (Ok(f), Some(s)) if f == s => Check::Verified { detail: format!("{label} bit-exact") },
                (Ok(f), Some(s)) => Check::Mismatch {
                    detail: format!("{label}: regenerated {f}, stored {s}"),
                },
                (Err(e), _) => Check::Missing { detail: e.to_string() },
                (_, None) => Check::Missing { detail: format!("{label} has no stored digest") },
            }
        };

        let regen = |wcfg: &WorldConfig, name: &str| -> Result<String> {
            let dir = scratch.join(name);
            write_world(&generate_world(wcfg)?, &dir)?;
            artifact_digest(&dir)
        };
        if self.completed("world") {
            push("world", "regenerated world", compare("world", regen(&cfg.world, "world"), stored("world", "world")));
        }
        if self.completed("tts-pretrain") {
            push(
                "tts-pretrain",
                "regenerated pretrain world",
                compare(
                    "pretrain_world",
                    regen(&cfg.pretrain_world, "pretrain_world"),
                    stored("tts-pretrain", "pretrain_world"),
                ),
            );
        }
        if self.completed("cdoa") {
            let fresh = (|| -> Result<String> {
                let world = LoadedWorld::load(&self.root.join("world"))?;
                let generator = FlowTts::load(&self.root.join("tts_finetune.ckpt"))?;
                let bank = PrototypeBank::load(&self.root.join("proto.json"))?;
                let dir = scratch.join("cdoa");
                write_cdoa(&cfg, &world, &generator, &bank, &dir)?;
                artifact_digest(&dir)
            })();
            push("cdoa", "regenerated synthetic corpus", compare("cdoa", fresh, stored("cdoa", "cdoa")));
        }
        if self.completed("report") {
            match compute_reports(&self.root, &cfg, self.provenance(None)) {
                Ok(fresh) => {
                    for (kind, (json, _)) in fresh {
                        let path = self.root.join("reports").join(format!("{kind}.json"));
                        let check = match read_json::<serde_json::Value>(&path) {
                            Ok(stored) => match json_max_abs_diff(&stored, &json) {
                                Ok(d) if d <= REPORT_TOLERANCE => Check::Verified {
                                    detail: format!("max abs diff {d:e}"),
                                },
                                Ok(d) => Check::Mismatch {
                                    detail: format!("max abs diff {d:e}"),
                                },
                                Err(e) => Check::Mismatch { detail: e },
                            },
                            Err(e) => Check::Missing { detail: e.to_string() },
                        };
                        push("report", &format!("recomputed {kind}"), check);
                    }
                }
                Err(e) => push("report", "recompute", Check::Missing { detail: e.to_string() }),
            }
        }
        if scratch.exists() {
            fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
        }
        Ok(ReproduceReport { checks })
    }
}
