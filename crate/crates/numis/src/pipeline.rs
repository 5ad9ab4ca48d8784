//! Stage orchestration behind the `numis` binary: a TOML pipeline config,
//! one directory of artifacts per stage, and content-hash resumability.
//!
//! Stages form a chain: `fixture` (optional synthetic corpus) → `prepare` →
//! `mine`/`label` → `split` → `pretrain` → `train-vit`/`train-cnn` → `eval` →
//! `saliency`/`report`. Each stage writes its outputs plus a `summary.toml`
//! recording a hash of its inputs; re-running with unchanged inputs is a
//! no-op unless forced. All randomness derives from the single config seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::imageops::{resize, FilterType};
use image::GrayImage;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn::{CnnConfig, CnnModel, ConvBlock};
use crate::dataset::{self, BalanceMode, LabelTable, SplitSpec};
use crate::saliency::{self, HipeConfig};
use crate::segment::{self, SegmentationParams};
use crate::synthetic;
use crate::tensor;
use crate::textmine::{self, ConceptLexicon};
use crate::train::{
    self, csv_rows, evaluate_task, run_training, BceLoss, CheckpointStats, CnnTask, ConceptEval,
    ModelCheckpoint, Sample, Schedule, TrainError, VitTask, PROB_CLAMP,
};
use crate::vit::{ViTConfig, ViTModel};

// Per-stage offsets applied to the config seed so stages draw from disjoint
// deterministic streams.
const SEED_FIXTURE: u64 = 0x01;
const SEED_SPLIT: u64 = 0x02;
const SEED_PRETRAIN: u64 = 0x03;
const SEED_TRAIN_VIT: u64 = 0x04;
const SEED_TRAIN_CNN: u64 = 0x05;

/// Pipeline failures, grouped by process exit code: usage errors exit 1,
/// data errors 2, numeric failures 3.
#[derive(Debug)]
pub enum PipelineError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PipelineError::Usage(m) => write!(f, "usage error: {}", m),
            PipelineError::Data(m) => write!(f, "data error: {}", m),
            PipelineError::Numeric(m) => write!(f, "numeric failure: {}", m),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<image::ImageError> for PipelineError {
    fn from(e: image::ImageError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => PipelineError::Numeric(e.to_string()),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

macro_rules! data_error_from {
    ($($t:ty),*) => {$(
        impl From<$t> for PipelineError {
            fn from(e: $t) -> Self {
                PipelineError::Data(e.to_string())
            }
        }
    )*};
}

data_error_from!(
    segment::SegmentError,
    textmine::TextError,
    dataset::DatasetError,
    train::CheckpointError,
    crate::vit::VitError,
    crate::cnn::CnnError,
    crate::saliency::SaliencyError
);

fn prerequisite(missing: &str, command: &str) -> PipelineError {
    PipelineError::Data(format!("{} not found; run `numis {}` first", missing, command))
}

// --- configuration ---------------------------------------------------------

fn default_raw_dir() -> PathBuf {
    PathBuf::from("corpus")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Directory of raw two-sided photographs with sibling `.txt` descriptions.
    pub raw_dir: PathBuf,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { raw_dir: default_raw_dir() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSection {
    pub samples: usize,
    /// Synthetic concepts; must come from the glyph set.
    pub concepts: Vec<String>,
}

impl Default for FixtureSection {
    fn default() -> Self {
        FixtureSection {
            samples: 40,
            concepts: vec!["ring".into(), "cross".into()],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationSection {
    pub corner_patch: u32,
    pub corner_agreement_threshold: f32,
    pub background_tolerance: f32,
    pub min_object_extent: u32,
    pub squareness_tolerance: f32,
    pub background_fill_ratio: f32,
}

impl Default for SegmentationSection {
    fn default() -> Self {
        let p = SegmentationParams::default();
        SegmentationSection {
            corner_patch: p.corner_patch,
            corner_agreement_threshold: p.corner_agreement_threshold,
            background_tolerance: p.background_tolerance,
            min_object_extent: p.min_object_extent,
            squareness_tolerance: p.squareness_tolerance,
            background_fill_ratio: p.background_fill_ratio,
        }
    }
}

impl SegmentationSection {
    pub fn params(&self) -> SegmentationParams {
        SegmentationParams {
            corner_patch: self.corner_patch,
            corner_agreement_threshold: self.corner_agreement_threshold,
            background_tolerance: self.background_tolerance,
            min_object_extent: self.min_object_extent,
            squareness_tolerance: self.squareness_tolerance,
            background_fill_ratio: self.background_fill_ratio,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingSection {
    /// Concept lexicon TOML; the bundled default lexicons are used when unset.
    pub lexicon_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineSection {
    /// Number of most-frequent tokens written by `mine`.
    pub top: usize,
}

impl Default for MineSection {
    fn default() -> Self {
        MineSection { top: 40 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train: 0.64, val: 0.16, test: 0.20 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl Default for VitSection {
    fn default() -> Self {
        let t = ViTConfig::tiny(1);
        VitSection {
            image_size: t.image_size,
            patch_size: t.patch_size,
            depth: t.depth,
            heads: t.heads,
            d_model: t.d_model,
            d_ff: t.d_ff,
        }
    }
}

impl VitSection {
    pub fn config(&self, num_labels: usize) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            depth: self.depth,
            heads: self.heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            num_labels,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSection {
    pub input_size: usize,
}

impl Default for CnnSection {
    fn default() -> Self {
        CnnSection { input_size: 32 }
    }
}

impl CnnSection {
    pub fn config(&self) -> CnnConfig {
        CnnConfig {
            input_size: self.input_size,
            conv_blocks: vec![
                ConvBlock { out_channels: 8, kernel: 3, stride: 1, pool: 2 },
                ConvBlock { out_channels: 16, kernel: 3, stride: 1, pool: 2 },
            ],
            fc_widths: vec![32],
            num_outputs: 2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: Option<usize>,
}

fn vit_schedule_default() -> ScheduleSection {
    // small batches: full-batch gradients on balanced sets cancel at the
    // symmetric init and training stalls
    ScheduleSection { lr: 1e-2, momentum: 0.9, batch_size: 2, max_epochs: 40, patience: Some(30) }
}

fn cnn_schedule_default() -> ScheduleSection {
    ScheduleSection { lr: 1e-3, momentum: 0.9, batch_size: 4, max_epochs: 60, patience: Some(30) }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        vit_schedule_default()
    }
}

impl ScheduleSection {
    fn schedule(&self, seed: u64) -> Schedule {
        Schedule {
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "vit_schedule_default")]
    pub vit: ScheduleSection,
    #[serde(default = "cnn_schedule_default")]
    pub cnn: ScheduleSection,
    /// Sigmoid decision threshold for the multi-label ViT task.
    pub threshold: f32,
    /// Freeze the pretrained backbone during fine-tuning.
    pub freeze_backbone: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            vit: vit_schedule_default(),
            cnn: cnn_schedule_default(),
            threshold: 0.5,
            freeze_backbone: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Synthetic pretraining images.
    pub samples: usize,
    pub max_epochs: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection { samples: 120, max_epochs: 30 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencySection {
    pub max_depth: usize,
    pub initial_grid: usize,
    pub overlap: f32,
    pub refinement_threshold: f64,
    /// Test images explained per run.
    pub images: usize,
}

impl Default for SaliencySection {
    fn default() -> Self {
        let h = HipeConfig::default();
        SaliencySection {
            max_depth: h.max_depth,
            initial_grid: h.initial_grid,
            overlap: h.overlap,
            refinement_threshold: h.refinement_threshold,
            images: 3,
        }
    }
}

impl SaliencySection {
    pub fn config(&self) -> HipeConfig {
        HipeConfig {
            max_depth: self.max_depth,
            initial_grid: self.initial_grid,
            overlap: self.overlap,
            refinement_threshold: self.refinement_threshold,
        }
    }
}

/// The single pipeline configuration file; every stage reads only this.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; all per-stage randomness derives from it.
    pub seed: u64,
    pub output_root: PathBuf,
    pub corpus: CorpusSection,
    pub fixture: FixtureSection,
    pub segmentation: SegmentationSection,
    pub labeling: LabelingSection,
    pub mine: MineSection,
    pub split: SplitSection,
    pub vit: VitSection,
    pub cnn: CnnSection,
    pub pretrain: PretrainSection,
    pub training: TrainingSection,
    pub saliency: SaliencySection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            output_root: PathBuf::from("out"),
            corpus: CorpusSection::default(),
            fixture: FixtureSection::default(),
            segmentation: SegmentationSection::default(),
            labeling: LabelingSection::default(),
            mine: MineSection::default(),
            split: SplitSection::default(),
            vit: VitSection::default(),
            cnn: CnnSection::default(),
            pretrain: PretrainSection::default(),
            training: TrainingSection::default(),
            saliency: SaliencySection::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse a config file. Paths stay relative to the process working
    /// directory, matching how the CLI documents them.
    pub fn load(path: &Path) -> Result<PipelineConfig, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Usage(format!("cannot read config {}: {}", path.display(), e)))?;
        toml::from_str(&text)
            .map_err(|e| PipelineError::Usage(format!("invalid config {}: {}", path.display(), e)))
    }
}

// --- stages ----------------------------------------------------------------

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Fixture,
    Prepare,
    Mine,
    Label,
    Split,
    Pretrain,
    TrainVit,
    TrainCnn,
    Eval,
    Saliency,
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Fixture => "fixture",
            Stage::Prepare => "prepare",
            Stage::Mine => "mine",
            Stage::Label => "label",
            Stage::Split => "split",
            Stage::Pretrain => "pretrain",
            Stage::TrainVit => "train-vit",
            Stage::TrainCnn => "train-cnn",
            Stage::Eval => "eval",
            Stage::Saliency => "saliency",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        [
            Stage::Fixture,
            Stage::Prepare,
            Stage::Mine,
            Stage::Label,
            Stage::Split,
            Stage::Pretrain,
            Stage::TrainVit,
            Stage::TrainCnn,
            Stage::Eval,
            Stage::Saliency,
            Stage::Report,
        ]
        .into_iter()
        .find(|s| s.name() == name)
    }
}

/// Machine-readable record a completed stage leaves behind as `summary.toml`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    /// Hash over the stage's configuration and input artifacts.
    pub input_hash: String,
    pub outputs: Vec<String>,
    pub details: BTreeMap<String, String>,
}

impl StageSummary {
    pub fn to_text(&self) -> String {
        let mut s = format!("stage {}: done\n", self.stage);
        for (k, v) in &self.details {
            // multi-line detail values indent under their key
            if v.contains('\n') {
                let _ = writeln!(s, "  {}:", k);
                for line in v.lines() {
                    let _ = writeln!(s, "    {}", line);
                }
            } else {
                let _ = writeln!(s, "  {}: {}", k, v);
            }
        }
        for o in &self.outputs {
            let _ = writeln!(s, "  wrote {}", o);
        }
        s
    }
}

struct Hash(Sha256);

impl Hash {
    fn new(stage: &str) -> Hash {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        Hash(h)
    }

    fn str(&mut self, s: &str) -> &mut Self {
        self.0.update([0u8]);
        self.0.update(s.as_bytes());
        self
    }

    fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.0.update([1u8]);
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
        self
    }

    fn config<T: Serialize>(&mut self, section: &T) -> &mut Self {
        self.str(&toml::to_string(section).unwrap_or_default())
    }

    /// Hash a file's name and contents; missing files hash as absent.
    fn file(&mut self, path: &Path) -> Result<&mut Self, PipelineError> {
        self.str(&path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string());
        match std::fs::read(path) {
            Ok(b) => {
                self.bytes(&b);
            }
            Err(_) => {
                self.str("<absent>");
            }
        }
        Ok(self)
    }

    /// Hash every regular file in a directory, sorted by name.
    fn dir(&mut self, dir: &Path) -> Result<&mut Self, PipelineError> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            self.file(&f)?;
        }
        Ok(self)
    }

    fn finish(self) -> String {
        let digest = self.0.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            let _ = write!(s, "{:02x}", b);
        }
        s
    }
}

/// Outcome of asking a stage to run: either fresh work with a summary, or a
/// no-op because the recorded input hash still matches.
#[derive(Debug)]
pub enum StageOutcome {
    Ran(StageSummary),
    UpToDate(StageSummary),
}

impl StageOutcome {
    pub fn summary(&self) -> &StageSummary {
        match self {
            StageOutcome::Ran(s) | StageOutcome::UpToDate(s) => s,
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            StageOutcome::Ran(s) => s.to_text(),
            StageOutcome::UpToDate(s) => format!(
                "stage {}: up to date (inputs unchanged; use --force to rerun)\n",
                s.stage
            ),
        }
    }
}

fn stage_dir(config: &PipelineConfig, stage: Stage) -> PathBuf {
    config.output_root.join(stage.name())
}

fn summary_path(config: &PipelineConfig, stage: Stage) -> PathBuf {
    stage_dir(config, stage).join("summary.toml")
}

fn load_summary(path: &Path) -> Option<StageSummary> {
    let text = std::fs::read_to_string(path).ok()?;
    toml::from_str(&text).ok()
}

fn write_summary(config: &PipelineConfig, stage: Stage, summary: &StageSummary) -> Result<(), PipelineError> {
    let dir = stage_dir(config, stage);
    std::fs::create_dir_all(&dir)?;
    let text = toml::to_string_pretty(summary)
        .map_err(|e| PipelineError::Data(format!("summary serialization: {}", e)))?;
    std::fs::write(dir.join("summary.toml"), text)?;
    Ok(())
}

/// Standard skip-or-run wrapper: compares the input hash against the stored
/// summary and either short-circuits or executes `body`.
fn resumable(
    config: &PipelineConfig,
    stage: Stage,
    input_hash: String,
    force: bool,
    body: impl FnOnce() -> Result<(Vec<String>, BTreeMap<String, String>), PipelineError>,
) -> Result<StageOutcome, PipelineError> {
    if !force {
        if let Some(prev) = load_summary(&summary_path(config, stage)) {
            if prev.input_hash == input_hash {
                return Ok(StageOutcome::UpToDate(prev));
            }
        }
    }
    let (outputs, details) = body()?;
    let summary = StageSummary {
        stage: stage.name().to_string(),
        input_hash,
        outputs,
        details,
    };
    write_summary(config, stage, &summary)?;
    Ok(StageOutcome::Ran(summary))
}

fn details(pairs: Vec<(&str, String)>) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

// --- artifact paths and shared loaders -------------------------------------

fn crops_dir(config: &PipelineConfig) -> PathBuf {
    config.output_root.join("crops")
}

fn labels_path(config: &PipelineConfig) -> PathBuf {
    stage_dir(config, Stage::Label).join("labels.csv")
}

fn manifest_path(config: &PipelineConfig, subset: &str) -> PathBuf {
    stage_dir(config, Stage::Split).join(format!("{}.txt", subset))
}

fn load_label_table(config: &PipelineConfig) -> Result<LabelTable, PipelineError> {
    let path = labels_path(config);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| prerequisite("label table", "label"))?;
    LabelTable::from_csv(&text)
        .ok_or_else(|| PipelineError::Data(format!("malformed label table {}", path.display())))
}

fn load_manifest(config: &PipelineConfig, subset: &str) -> Result<Vec<String>, PipelineError> {
    let path = manifest_path(config, subset);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| prerequisite("split manifests", "split"))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

fn load_crop(config: &PipelineConfig, id: &str, size: u32) -> Result<GrayImage, PipelineError> {
    let path = crops_dir(config).join(format!("{}-rev.png", id));
    let img = image::open(&path)
        .map_err(|_| prerequisite(&format!("crop {}", path.display()), "prepare"))?
        .to_luma8();
    if img.dimensions() == (size, size) {
        return Ok(img);
    }
    Ok(resize(&img, size, size, FilterType::Triangle))
}

/// Samples for the multi-label ViT task over the given manifest ids.
fn vit_samples(
    config: &PipelineConfig,
    table: &LabelTable,
    ids: &[String],
) -> Result<Vec<Sample>, PipelineError> {
    let size = config.vit.image_size as u32;
    ids.iter()
        .map(|id| {
            let row = table
                .rows
                .iter()
                .find(|r| &r.id == id)
                .ok_or_else(|| PipelineError::Data(format!("id {} missing from label table", id)))?;
            Ok(Sample {
                id: id.clone(),
                image: load_crop(config, id, size)?,
                labels: row.labels.iter().map(|&v| f32::from(v)).collect(),
            })
        })
        .collect()
}

/// Single-concept samples (class in `labels[0]`) from explicit id/label pairs.
fn cnn_samples(
    config: &PipelineConfig,
    pairs: &[(String, u8)],
) -> Result<Vec<Sample>, PipelineError> {
    let size = config.cnn.input_size as u32;
    pairs
        .iter()
        .map(|(id, y)| {
            Ok(Sample {
                id: id.clone(),
                image: load_crop(config, id, size)?,
                labels: vec![f32::from(*y)],
            })
        })
        .collect()
}

fn concept_pairs(table: &LabelTable, ids: &[String], concept_idx: usize) -> Vec<(String, u8)> {
    ids.iter()
        .filter_map(|id| {
            table
                .rows
                .iter()
                .find(|r| &r.id == id)
                .map(|r| (id.clone(), r.labels[concept_idx]))
        })
        .collect()
}

fn lexicons(config: &PipelineConfig) -> Result<Vec<ConceptLexicon>, PipelineError> {
    match &config.labeling.lexicon_path {
        Some(p) => Ok(textmine::load_lexicons(p)?),
        None => Ok(textmine::default_lexicons()),
    }
}

fn save_model(
    dir: &Path,
    name: &str,
    stats: CheckpointStats,
    params: &[(String, tensor::Tensor)],
) -> Result<PathBuf, PipelineError> {
    let path = dir.join(name);
    ModelCheckpoint::capture(stats, params).save(&path)?;
    Ok(path)
}

fn rel(config: &PipelineConfig, path: &Path) -> String {
    path.strip_prefix(&config.output_root)
        .unwrap_or(path)
        .display()
        .to_string()
}

// --- individual stage implementations --------------------------------------

fn run_fixture(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    for c in &config.fixture.concepts {
        if !synthetic::GLYPHS.contains(&c.as_str()) {
            return Err(PipelineError::Usage(format!(
                "unknown fixture concept '{}'; available: {}",
                c,
                synthetic::GLYPHS.join(", ")
            )));
        }
    }
    let mut h = Hash::new("fixture");
    h.config(&config.fixture).str(&config.seed.to_string());
    h.str(&config.corpus.raw_dir.display().to_string());
    if let Some(p) = &config.labeling.lexicon_path {
        h.str(&p.display().to_string());
    }
    let hash = h.finish();

    resumable(config, Stage::Fixture, hash, force, || {
        let seed = config.seed.wrapping_add(SEED_FIXTURE);
        let truth = synthetic::write_two_sided_corpus(
            &config.corpus.raw_dir,
            config.fixture.samples,
            &config.fixture.concepts,
            seed,
        )?;
        let mut outputs = vec![config.corpus.raw_dir.display().to_string()];
        // write a glyph lexicon so `label` can recover the generated concepts
        if let Some(path) = &config.labeling.lexicon_path {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let mut text = String::new();
            for c in &config.fixture.concepts {
                let _ = writeln!(text, "[{}]\nsearch_words = [\"{}\"]\nexclusions = []\n", c, c);
            }
            std::fs::write(path, text)?;
            outputs.push(path.display().to_string());
        }
        let positives: Vec<String> = config
            .fixture
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let n = truth.iter().filter(|(_, t)| t[i] == 1).count();
                format!("{}={}", c, n)
            })
            .collect();
        Ok((
            outputs,
            details(vec![
                ("images", truth.len().to_string()),
                ("positives", positives.join(" ")),
            ]),
        ))
    })
}

fn run_prepare(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let raw = &config.corpus.raw_dir;
    if !raw.is_dir() {
        return Err(PipelineError::Data(format!(
            "raw corpus directory {} does not exist (point [corpus].raw_dir at your images or run `numis fixture`)",
            raw.display()
        )));
    }
    let mut h = Hash::new("prepare");
    h.config(&config.segmentation);
    h.dir(raw)?;
    let hash = h.finish();

    resumable(config, Stage::Prepare, hash, force, || {
        let out = crops_dir(config);
        let report = segment::process_corpus(raw, &out, &config.segmentation.params())?;
        if report.total() == 0 {
            return Err(PipelineError::Data(format!(
                "no images found under {}",
                raw.display()
            )));
        }
        let dir = stage_dir(config, Stage::Prepare);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("report.txt"), report.to_text())?;
        Ok((
            vec![rel(config, &out), "prepare/report.txt".into()],
            details(vec![
                ("images", report.total().to_string()),
                ("accepted", report.accepted.len().to_string()),
                ("rejected", report.rejected.len().to_string()),
                ("unreadable", report.unreadable.len().to_string()),
            ]),
        ))
    })
}

fn run_mine(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let raw = &config.corpus.raw_dir;
    if !raw.is_dir() {
        return Err(PipelineError::Data(format!(
            "raw corpus directory {} does not exist",
            raw.display()
        )));
    }
    let mut h = Hash::new("mine");
    h.config(&config.mine);
    h.dir(raw)?;
    let hash = h.finish();

    resumable(config, Stage::Mine, hash, force, || {
        let descriptions = textmine::load_descriptions(raw)?;
        let texts: Vec<String> = descriptions.iter().map(|(_, t)| t.clone()).collect();
        let stop = textmine::default_stop_words();
        let freq = textmine::mine_concepts(&texts, &stop);
        let mut csv = String::from("token,count\n");
        for (tok, n) in freq.iter().take(config.mine.top) {
            let _ = writeln!(csv, "{},{}", tok, n);
        }
        let dir = stage_dir(config, Stage::Mine);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("tokens.csv"), &csv)?;
        let preview: Vec<String> = freq
            .iter()
            .take(8)
            .map(|(t, n)| format!("{}({})", t, n))
            .collect();
        Ok((
            vec!["mine/tokens.csv".into()],
            details(vec![
                ("descriptions", descriptions.len().to_string()),
                ("distinct_tokens", freq.len().to_string()),
                ("top", preview.join(" ")),
            ]),
        ))
    })
}

fn run_label(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let crops = crops_dir(config);
    if !crops.is_dir() {
        return Err(prerequisite("segmented crops", "prepare"));
    }
    let lex = lexicons(config)?;
    let mut h = Hash::new("label");
    for l in &lex {
        h.str(&l.concept);
        for w in &l.search_words {
            h.str(w);
        }
        for w in &l.exclusions {
            h.str(w);
        }
    }
    h.dir(&crops)?;
    h.dir(&config.corpus.raw_dir)?;
    let hash = h.finish();

    resumable(config, Stage::Label, hash, force, || {
        // accepted images are those with a crop on disk
        let mut ids: Vec<String> = std::fs::read_dir(&crops)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().to_str()?.to_string();
                name.strip_suffix("-rev.png").map(str::to_string)
            })
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(prerequisite("segmented crops", "prepare"));
        }
        let descriptions: BTreeMap<String, String> =
            textmine::load_descriptions(&config.corpus.raw_dir)?.into_iter().collect();
        let corpus: Vec<(String, Option<String>)> = ids
            .iter()
            .map(|id| (id.clone(), descriptions.get(id).cloned()))
            .collect();
        let (table, dropped) = textmine::build_label_table(&corpus, &lex)?;
        let dir = stage_dir(config, Stage::Label);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("labels.csv"), table.to_csv())?;
        let positives: Vec<String> = table
            .concepts
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}={}", c, table.positives(i)))
            .collect();
        Ok((
            vec!["label/labels.csv".into()],
            details(vec![
                ("labeled", table.rows.len().to_string()),
                ("dropped_missing_description", dropped.len().to_string()),
                ("positives", positives.join(" ")),
            ]),
        ))
    })
}

fn run_split(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let table = load_label_table(config)?;
    let mut h = Hash::new("split");
    h.config(&config.split).str(&config.seed.to_string());
    h.str(&table.to_csv());
    let hash = h.finish();

    resumable(config, Stage::Split, hash, force, || {
        let spec = SplitSpec {
            train: config.split.train,
            val: config.split.val,
            test: config.split.test,
            seed: config.seed.wrapping_add(SEED_SPLIT),
        };
        let (train, val, test) = dataset::stratified_split(&table, &spec)?;
        let dir = stage_dir(config, Stage::Split);
        std::fs::create_dir_all(&dir)?;
        for (name, ids) in [("train", &train), ("val", &val), ("test", &test)] {
            let mut text = ids.join("\n");
            text.push('\n');
            std::fs::write(dir.join(format!("{}.txt", name)), text)?;
        }
        Ok((
            vec!["split/train.txt".into(), "split/val.txt".into(), "split/test.txt".into()],
            details(vec![
                ("train", train.len().to_string()),
                ("val", val.len().to_string()),
                ("test", test.len().to_string()),
            ]),
        ))
    })
}

fn run_pretrain(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let table = load_label_table(config)?;
    let mut h = Hash::new("pretrain");
    h.config(&config.pretrain)
        .config(&config.vit)
        .config(&config.training.vit)
        .str(&config.seed.to_string())
        .str(&table.concepts.join(","));
    let hash = h.finish();

    resumable(config, Stage::Pretrain, hash, force, || {
        let seed = config.seed.wrapping_add(SEED_PRETRAIN);
        let concepts = pretrain_concepts(&table.concepts);
        let data = synthetic::labeled_set(
            config.pretrain.samples,
            config.vit.image_size as u32,
            &concepts,
            0.5,
            seed,
        );
        let samples: Vec<Sample> = data
            .into_iter()
            .map(|(id, image, labels)| Sample { id, image, labels })
            .collect();
        let cut = (samples.len() * 4) / 5;
        let (train, val) = samples.split_at(cut.max(1).min(samples.len() - 1));

        let vit_config = config.vit.config(concepts.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = ViTModel::new(vit_config.clone(), &mut rng)?;
        let task = VitTask {
            model: &model,
            loss: BceLoss::uniform(concepts.len()),
            concepts: concepts.clone(),
            threshold: config.training.threshold,
        };
        let mut schedule = config.training.vit.schedule(seed);
        schedule.max_epochs = config.pretrain.max_epochs;
        let outcome = run_training(&task, train, val, &schedule, None)?;

        let dir = stage_dir(config, Stage::Pretrain);
        std::fs::create_dir_all(&dir)?;
        let best = &outcome.epochs[outcome.best_epoch];
        let stats = CheckpointStats {
            epoch: best.epoch,
            train_loss: best.train_loss,
            val_loss: best.val_loss,
            concepts: Vec::new(),
        };
        save_model(&dir, "backbone.ckpt", stats, &model.parameters())?;
        std::fs::write(
            dir.join("config.toml"),
            toml::to_string_pretty(&vit_config)
                .map_err(|e| PipelineError::Data(e.to_string()))?,
        )?;
        std::fs::write(dir.join("log.csv"), &outcome.log_csv)?;
        Ok((
            vec!["pretrain/backbone.ckpt".into(), "pretrain/config.toml".into(), "pretrain/log.csv".into()],
            details(vec![
                ("synthetic_samples", config.pretrain.samples.to_string()),
                ("concepts", concepts.join(" ")),
                ("epochs", outcome.epochs.len().to_string()),
                ("best_epoch", outcome.best_epoch.to_string()),
                ("best_val_loss", format!("{:.4}", best.val_loss)),
            ]),
        ))
    })
}

/// Synthetic stand-ins for the corpus concepts during pretraining: real
/// concept names that happen to be glyphs keep their glyph, the rest map onto
/// the glyph set round-robin.
fn pretrain_concepts(concepts: &[String]) -> Vec<String> {
    concepts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if synthetic::GLYPHS.contains(&c.as_str()) {
                c.clone()
            } else {
                synthetic::GLYPHS[i % synthetic::GLYPHS.len()].to_string()
            }
        })
        .collect()
}

fn load_pretrained_backbone(
    config: &PipelineConfig,
    num_labels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ViTModel, PipelineError> {
    let dir = stage_dir(config, Stage::Pretrain);
    let ckpt_path = dir.join("backbone.ckpt");
    let cfg_path = dir.join("config.toml");
    if !ckpt_path.is_file() || !cfg_path.is_file() {
        return Err(prerequisite("pretrained backbone", "pretrain"));
    }
    let vit_config: ViTConfig = toml::from_str(&std::fs::read_to_string(&cfg_path)?)
        .map_err(|e| PipelineError::Data(format!("bad pretrain config: {}", e)))?;
    let mut model = ViTModel::new(vit_config, rng)?;
    ModelCheckpoint::load(&ckpt_path)?.apply(&model.parameters())?;
    model.replace_head(num_labels, rng)?;
    if config.training.freeze_backbone {
        model.freeze_backbone();
    }
    Ok(model)
}

fn run_train_vit(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let table = load_label_table(config)?;
    let train_ids = load_manifest(config, "train")?;
    let val_ids = load_manifest(config, "val")?;
    let pretrain_ckpt = stage_dir(config, Stage::Pretrain).join("backbone.ckpt");
    if !pretrain_ckpt.is_file() {
        return Err(prerequisite("pretrained backbone", "pretrain"));
    }

    let mut h = Hash::new("train-vit");
    h.config(&config.vit)
        .config(&config.training.vit)
        .str(&config.training.threshold.to_string())
        .str(&config.training.freeze_backbone.to_string())
        .str(&config.seed.to_string())
        .str(&table.to_csv())
        .str(&train_ids.join(","))
        .str(&val_ids.join(","));
    h.file(&pretrain_ckpt)?;
    let hash = h.finish();

    resumable(config, Stage::TrainVit, hash, force, || {
        let seed = config.seed.wrapping_add(SEED_TRAIN_VIT);
        let train = vit_samples(config, &table, &train_ids)?;
        let val = vit_samples(config, &table, &val_ids)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = load_pretrained_backbone(config, table.concepts.len(), &mut rng)?;
        let weights = dataset::positive_weights(&table, &train_ids)?;
        let task = VitTask {
            model: &model,
            loss: BceLoss::new(weights, PROB_CLAMP)?,
            concepts: table.concepts.clone(),
            threshold: config.training.threshold,
        };

        let dir = stage_dir(config, Stage::TrainVit);
        let ckpts = dir.join("checkpoints");
        std::fs::create_dir_all(&ckpts)?;
        let schedule = config.training.vit.schedule(seed);
        let outcome = run_training(&task, &train, &val, &schedule, Some(&ckpts))?;

        let best = &outcome.epochs[outcome.best_epoch];
        let stats = CheckpointStats {
            epoch: best.epoch,
            train_loss: best.train_loss,
            val_loss: best.val_loss,
            concepts: best
                .val_evals
                .iter()
                .map(|e| train::ConceptStats {
                    concept: e.concept.clone(),
                    f1: e.confusion.f1(),
                    confusion: e.confusion,
                })
                .collect(),
        };
        save_model(&dir, "model.ckpt", stats, &model.parameters())?;
        std::fs::write(
            dir.join("config.toml"),
            toml::to_string_pretty(&model.config)
                .map_err(|e| PipelineError::Data(e.to_string()))?,
        )?;
        std::fs::write(dir.join("log.csv"), &outcome.log_csv)?;
        Ok((
            vec!["train-vit/model.ckpt".into(), "train-vit/config.toml".into(), "train-vit/log.csv".into()],
            details(vec![
                ("train_samples", train.len().to_string()),
                ("val_samples", val.len().to_string()),
                ("epochs", outcome.epochs.len().to_string()),
                ("best_epoch", outcome.best_epoch.to_string()),
                ("best_val_loss", format!("{:.4}", best.val_loss)),
                ("frozen_backbone", config.training.freeze_backbone.to_string()),
            ]),
        ))
    })
}

fn run_train_cnn(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let table = load_label_table(config)?;
    let train_ids = load_manifest(config, "train")?;
    let val_ids = load_manifest(config, "val")?;

    let mut h = Hash::new("train-cnn");
    h.config(&config.cnn)
        .config(&config.training.cnn)
        .str(&config.seed.to_string())
        .str(&table.to_csv())
        .str(&train_ids.join(","))
        .str(&val_ids.join(","));
    let hash = h.finish();

    resumable(config, Stage::TrainCnn, hash, force, || {
        let seed = config.seed.wrapping_add(SEED_TRAIN_CNN);
        let dir = stage_dir(config, Stage::TrainCnn);
        std::fs::create_dir_all(&dir)?;
        let cnn_config = config.cnn.config();
        std::fs::write(
            dir.join("config.toml"),
            toml::to_string_pretty(&cnn_config)
                .map_err(|e| PipelineError::Data(e.to_string()))?,
        )?;

        // one balanced binary classifier per concept
        let train_table = LabelTable {
            concepts: table.concepts.clone(),
            rows: table
                .rows
                .iter()
                .filter(|r| train_ids.contains(&r.id))
                .cloned()
                .collect(),
        };
        let mut outputs = vec!["train-cnn/config.toml".into()];
        let mut det = Vec::new();
        for (c, concept) in table.concepts.iter().enumerate() {
            let pairs = dataset::balance_binary(
                &train_table,
                concept,
                BalanceMode::Undersample,
                seed.wrapping_add(c as u64),
            )?;
            let train = cnn_samples(config, &pairs)?;
            let val = cnn_samples(config, &concept_pairs(&table, &val_ids, c))?;

            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(c as u64));
            let model = CnnModel::new(cnn_config.clone(), &mut rng)?;
            let task = CnnTask::new(&model, concept);
            let schedule = config.training.cnn.schedule(seed.wrapping_add(c as u64));
            let outcome = run_training(&task, &train, &val, &schedule, None)?;

            let best = &outcome.epochs[outcome.best_epoch];
            let stats = CheckpointStats {
                epoch: best.epoch,
                train_loss: best.train_loss,
                val_loss: best.val_loss,
                concepts: Vec::new(),
            };
            save_model(&dir, &format!("{}.ckpt", concept), stats, &model.parameters())?;
            std::fs::write(dir.join(format!("{}-log.csv", concept)), &outcome.log_csv)?;
            outputs.push(format!("train-cnn/{}.ckpt", concept));
            det.push(format!(
                "{}: {} balanced samples, best epoch {}, val loss {:.4}",
                concept,
                train.len(),
                best.epoch,
                best.val_loss
            ));
        }
        Ok((
            outputs,
            details(vec![("concepts", det.join("\n"))]),
        ))
    })
}

fn load_vit_model(config: &PipelineConfig) -> Result<ViTModel, PipelineError> {
    let dir = stage_dir(config, Stage::TrainVit);
    let ckpt = dir.join("model.ckpt");
    let cfg = dir.join("config.toml");
    if !ckpt.is_file() || !cfg.is_file() {
        return Err(prerequisite("trained transformer", "train-vit"));
    }
    let vit_config: ViTConfig = toml::from_str(&std::fs::read_to_string(&cfg)?)
        .map_err(|e| PipelineError::Data(format!("bad model config: {}", e)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = ViTModel::new(vit_config, &mut rng)?;
    ModelCheckpoint::load(&ckpt)?.apply(&model.parameters())?;
    Ok(model)
}

fn load_cnn_model(config: &PipelineConfig, concept: &str) -> Result<CnnModel, PipelineError> {
    let dir = stage_dir(config, Stage::TrainCnn);
    let ckpt = dir.join(format!("{}.ckpt", concept));
    let cfg = dir.join("config.toml");
    if !ckpt.is_file() || !cfg.is_file() {
        return Err(prerequisite("trained per-concept classifiers", "train-cnn"));
    }
    let cnn_config: CnnConfig = toml::from_str(&std::fs::read_to_string(&cfg)?)
        .map_err(|e| PipelineError::Data(format!("bad model config: {}", e)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = CnnModel::new(cnn_config, &mut rng)?;
    ModelCheckpoint::load(&ckpt)?.apply(&model.parameters())?;
    Ok(model)
}

const EVAL_HEADER: &str = "model,split,loss,concept,acc,prec,rec,f1,tp,fp,tn,fn";

fn eval_rows(model: &str, loss: f32, evals: &[ConceptEval]) -> String {
    // reuse the epoch-log row layout, swapping the epoch column for a model tag
    let body = csv_rows(0, "test", loss, evals);
    body.lines()
        .map(|l| {
            let rest = l.splitn(2, ',').nth(1).unwrap_or("");
            format!("{},{}\n", model, rest)
        })
        .collect()
}

fn run_eval(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let table = load_label_table(config)?;
    let test_ids = load_manifest(config, "test")?;
    let vit_ckpt = stage_dir(config, Stage::TrainVit).join("model.ckpt");
    if !vit_ckpt.is_file() {
        return Err(prerequisite("trained transformer", "train-vit"));
    }

    let mut h = Hash::new("eval");
    h.str(&config.training.threshold.to_string())
        .str(&table.to_csv())
        .str(&test_ids.join(","));
    h.file(&vit_ckpt)?;
    for concept in &table.concepts {
        h.file(&stage_dir(config, Stage::TrainCnn).join(format!("{}.ckpt", concept)))?;
    }
    let hash = h.finish();

    resumable(config, Stage::Eval, hash, force, || {
        let vit_model = load_vit_model(config)?;
        let vit_task = VitTask {
            model: &vit_model,
            loss: BceLoss::uniform(table.concepts.len()),
            concepts: table.concepts.clone(),
            threshold: config.training.threshold,
        };
        let test = vit_samples(config, &table, &test_ids)?;
        let (vit_loss, vit_evals) = evaluate_task(&vit_task, &test)?;

        let mut csv = String::from(EVAL_HEADER);
        csv.push('\n');
        csv.push_str(&eval_rows("vit", vit_loss, &vit_evals));

        let mut cnn_accs = Vec::new();
        for (c, concept) in table.concepts.iter().enumerate() {
            let model = load_cnn_model(config, concept)?;
            let task = CnnTask::new(&model, concept);
            let samples = cnn_samples(config, &concept_pairs(&table, &test_ids, c))?;
            let (loss, evals) = evaluate_task(&task, &samples)?;
            csv.push_str(&eval_rows("cnn", loss, &evals));
            if let Some(a) = evals[0].confusion.accuracy() {
                cnn_accs.push(format!("{}={:.3}", concept, a));
            }
        }

        let dir = stage_dir(config, Stage::Eval);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("metrics.csv"), &csv)?;
        let vit_accs: Vec<String> = vit_evals
            .iter()
            .filter_map(|e| e.confusion.accuracy().map(|a| format!("{}={:.3}", e.concept, a)))
            .collect();
        Ok((
            vec!["eval/metrics.csv".into()],
            details(vec![
                ("test_samples", test.len().to_string()),
                ("vit_accuracy", vit_accs.join(" ")),
                ("cnn_accuracy", cnn_accs.join(" ")),
            ]),
        ))
    })
}

fn run_saliency(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let table = load_label_table(config)?;
    let test_ids = load_manifest(config, "test")?;
    let vit_ckpt = stage_dir(config, Stage::TrainVit).join("model.ckpt");
    if !vit_ckpt.is_file() {
        return Err(prerequisite("trained transformer", "train-vit"));
    }

    let mut h = Hash::new("saliency");
    h.config(&config.saliency).str(&test_ids.join(","));
    h.file(&vit_ckpt)?;
    let hash = h.finish();

    resumable(config, Stage::Saliency, hash, force, || {
        let model = load_vit_model(config)?;
        let hipe = config.saliency.config();
        let size = config.vit.image_size as u32;
        let dir = stage_dir(config, Stage::Saliency);
        std::fs::create_dir_all(&dir)?;

        let mut outputs = Vec::new();
        let mut total_calls = 0usize;
        for id in test_ids.iter().take(config.saliency.images) {
            let crop = load_crop(config, id, size)?;
            for (c, concept) in table.concepts.iter().enumerate() {
                // positive-class probability of one concept as the score
                let score = |img: &GrayImage| {
                    let logits = model.forward(img).expect("forward on crop-sized input");
                    tensor::sigmoid(&logits).to_vec()[c]
                };
                let (map, stats) = saliency::attribute_with_stats(score, &crop, &hipe)?;
                total_calls += stats.model_calls;
                let overlay = saliency::render(&map, &crop)?;
                let png = dir.join(format!("{}-{}-saliency.png", id, concept));
                overlay.save(&png)?;
                std::fs::write(
                    dir.join(format!("{}-{}-saliency.txt", id, concept)),
                    map.to_text_grid(),
                )?;
                outputs.push(rel(config, &png));
            }
        }
        Ok((
            outputs,
            details(vec![
                ("images", test_ids.len().min(config.saliency.images).to_string()),
                ("concepts", table.concepts.len().to_string()),
                ("model_calls", total_calls.to_string()),
                ("call_bound_per_map", hipe.call_bound().to_string()),
            ]),
        ))
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{:.4}", x)).unwrap_or_else(|| "-".into())
}

/// Aligned per-concept metrics table (accuracy / precision / recall / F1 for
/// each model) plus its CSV twin.
fn format_report(rows: &[(String, String, [Option<f64>; 4])]) -> (String, String) {
    let mut csv = String::from("concept,model,accuracy,precision,recall,f1\n");
    let mut text = format!(
        "{:<14} {:<6} {:>9} {:>10} {:>8} {:>8}\n",
        "concept", "model", "accuracy", "precision", "recall", "f1"
    );
    for (concept, model, m) in rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            concept,
            model,
            fmt_opt(m[0]),
            fmt_opt(m[1]),
            fmt_opt(m[2]),
            fmt_opt(m[3])
        );
        let _ = writeln!(
            text,
            "{:<14} {:<6} {:>9} {:>10} {:>8} {:>8}",
            concept,
            model,
            fmt_opt(m[0]),
            fmt_opt(m[1]),
            fmt_opt(m[2]),
            fmt_opt(m[3])
        );
    }
    (csv, text)
}

fn run_report(config: &PipelineConfig, force: bool) -> Result<StageOutcome, PipelineError> {
    let metrics = stage_dir(config, Stage::Eval).join("metrics.csv");
    let text = std::fs::read_to_string(&metrics)
        .map_err(|_| prerequisite("evaluation metrics", "eval"))?;
    let mut h = Hash::new("report");
    h.str(&text);
    let hash = h.finish();

    resumable(config, Stage::Report, hash, force, || {
        let mut rows: Vec<(String, String, [Option<f64>; 4])> = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 8 || f[3].is_empty() {
                continue;
            }
            let parse = |s: &str| s.parse::<f64>().ok();
            rows.push((
                f[3].to_string(),
                f[0].to_string(),
                [parse(f[4]), parse(f[5]), parse(f[6]), parse(f[7])],
            ));
        }
        if rows.is_empty() {
            return Err(PipelineError::Data(format!(
                "no per-concept rows in {}",
                metrics.display()
            )));
        }
        rows.sort_by(|a, b| (&a.0, &a.1).cmp(&(&b.0, &b.1)));
        let (csv, table) = format_report(&rows);
        let dir = stage_dir(config, Stage::Report);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("metrics.csv"), &csv)?;
        std::fs::write(dir.join("metrics.txt"), &table)?;
        Ok((
            vec!["report/metrics.csv".into(), "report/metrics.txt".into()],
            details(vec![("table", table.trim_end().to_string())]),
        ))
    })
}

/// Runs one pipeline stage against a loaded config.
pub fn run_stage(
    config: &PipelineConfig,
    stage: Stage,
    force: bool,
) -> Result<StageOutcome, PipelineError> {
    match stage {
        Stage::Fixture => run_fixture(config, force),
        Stage::Prepare => run_prepare(config, force),
        Stage::Mine => run_mine(config, force),
        Stage::Label => run_label(config, force),
        Stage::Split => run_split(config, force),
        Stage::Pretrain => run_pretrain(config, force),
        Stage::TrainVit => run_train_vit(config, force),
        Stage::TrainCnn => run_train_cnn(config, force),
        Stage::Eval => run_eval(config, force),
        Stage::Saliency => run_saliency(config, force),
        Stage::Report => run_report(config, force),
    }
}
