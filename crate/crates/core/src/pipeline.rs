//! Experiment manifest, stage orchestration and run records.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{cache, content_hash, BackboneError, BackboneModel, FeatureMatrix};
use crate::behavior::{self, BatteryInput, BehaviorError, ClassificationOutcome, EffectReport};
use crate::dataset::{self, DatasetError, DatasetSplit, Label, Orientation, SetTag};
use crate::head::{self, HeadError, LinearHead, TrainConfig};
use crate::provenance::Provenance;
use crate::psychometrics::{self as psy, JudgmentTable, PsychometricsError};
use crate::repspace::{self, Correction, RepspaceError, ThresholdRule};
use crate::stats::{BootstrapConfig, StatsError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("missing artifact {path}: run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("{0} (rerun with --force to rebuild)")]
    StaleCache(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("output directory {0} is locked by another run; remove the lock file if that run is gone")]
    Locked(PathBuf),
    #[error("{0}")]
    Other(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Manifest(_) => 2,
            PipelineError::MissingArtifact { .. } => 3,
            PipelineError::StaleCache(_) => 4,
            PipelineError::Numerical(_) => 5,
            PipelineError::Locked(_) | PipelineError::Other(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn other(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Other(e.to_string())
}

impl From<BackboneError> for PipelineError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::StaleCache { .. } => PipelineError::StaleCache(e.to_string()),
            BackboneError::NonFinite { .. } => PipelineError::Numerical(e.to_string()),
            BackboneError::Malformed(_)
            | BackboneError::UnsupportedOp(_)
            | BackboneError::OldOpset(_)
            | BackboneError::OutputRank(_) => PipelineError::Manifest(e.to_string()),
            _ => other(e),
        }
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } | DatasetError::Decode { .. } => other(e),
            _ => PipelineError::Manifest(e.to_string()),
        }
    }
}

impl From<HeadError> for PipelineError {
    fn from(e: HeadError) -> Self {
        match e {
            HeadError::NonFiniteLoss | HeadError::TrainingDiverged { .. } | HeadError::EvaluationDiverged { .. } => {
                PipelineError::Numerical(e.to_string())
            }
            HeadError::InvalidConfig(_) => PipelineError::Manifest(e.to_string()),
            _ => other(e),
        }
    }
}

impl From<StatsError> for PipelineError {
    fn from(e: StatsError) -> Self {
        match e {
            StatsError::InvalidArgument(_) => PipelineError::Manifest(e.to_string()),
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<BehaviorError> for PipelineError {
    fn from(e: BehaviorError) -> Self {
        match e {
            BehaviorError::Head(h) => h.into(),
            BehaviorError::Stats(s) => s.into(),
            _ => other(e),
        }
    }
}

impl From<PsychometricsError> for PipelineError {
    fn from(e: PsychometricsError) -> Self {
        match e {
            PsychometricsError::Parse { .. } | PsychometricsError::MissingJudgment(_) => {
                PipelineError::Manifest(e.to_string())
            }
            PsychometricsError::Output { .. } => other(e),
            _ => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<RepspaceError> for PipelineError {
    fn from(e: RepspaceError) -> Self {
        match e {
            RepspaceError::Stats(s) => s.into(),
            RepspaceError::NoLayout(_) | RepspaceError::BadLayout { .. } => PipelineError::Manifest(e.to_string()),
            _ => other(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub n_resamples: usize,
    pub level: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection { n_resamples: 2000, level: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnitsSection {
    pub alpha: f64,
    pub correction: Correction,
    pub grid_rows: Option<usize>,
    pub grid_cols: Option<usize>,
}

impl Default for UnitsSection {
    fn default() -> Self {
        let rule = ThresholdRule::default();
        UnitsSection { alpha: rule.alpha, correction: rule.correction, grid_rows: None, grid_cols: None }
    }
}

impl UnitsSection {
    pub fn rule(&self) -> ThresholdRule {
        ThresholdRule { alpha: self.alpha, correction: self.correction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub seed: u64,
    pub model: PathBuf,
    pub datasets: Vec<PathBuf>,
    pub judgments: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_batch")]
    pub extract_batch_size: usize,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub units: UnitsSection,
}

fn default_batch() -> usize {
    32
}

impl ExperimentManifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Manifest(e.to_string()))
    }

    fn layout(&self) -> Result<Option<(usize, usize)>> {
        match (self.units.grid_rows, self.units.grid_cols) {
            (Some(r), Some(c)) => Ok(Some((r, c))),
            (None, None) => Ok(None),
            _ => Err(PipelineError::Manifest("units.grid_rows and units.grid_cols must be given together".into())),
        }
    }

    pub fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig { n_resamples: self.bootstrap.n_resamples, level: self.bootstrap.level, seed: self.seed }
    }
}

/// A manifest with every path resolved against the manifest's directory
/// and checked to exist.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub manifest: ExperimentManifest,
    pub manifest_path: PathBuf,
    pub manifest_hash: String,
    pub model_path: PathBuf,
    pub dataset_paths: Vec<PathBuf>,
    pub judgments_path: PathBuf,
    pub output_dir: PathBuf,
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
        let text =
            std::str::from_utf8(&bytes).map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
        let manifest = ExperimentManifest::parse(text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let exp = Experiment {
            manifest_hash: content_hash(&bytes),
            manifest_path: path.to_path_buf(),
            model_path: base.join(&manifest.model),
            dataset_paths: manifest.datasets.iter().map(|p| base.join(p)).collect(),
            judgments_path: base.join(&manifest.judgments),
            output_dir: base.join(&manifest.output_dir),
            manifest,
        };
        exp.validate()?;
        Ok(exp)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        let mut missing: Vec<String> = std::iter::once(&self.model_path)
            .chain(&self.dataset_paths)
            .chain(std::iter::once(&self.judgments_path))
            .filter(|p| !p.is_file())
            .map(|p| p.display().to_string())
            .collect();
        if m.datasets.is_empty() {
            missing.push("(no dataset manifests listed)".into());
        }
        if !missing.is_empty() {
            return Err(PipelineError::Manifest(format!("missing inputs: {}", missing.join(", "))));
        }
        if m.extract_batch_size == 0 {
            return Err(PipelineError::Manifest("extract_batch_size must be positive".into()));
        }
        m.train.validate()?;
        m.bootstrap_config().validate()?;
        if !(m.units.alpha > 0.0 && m.units.alpha < 1.0) {
            return Err(PipelineError::Manifest("units.alpha must lie in (0, 1)".into()));
        }
        m.layout()?;
        Ok(())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.manifest_hash.clone(), self.manifest.seed)
    }

    pub fn datasets(&self) -> Result<DatasetSplit> {
        let splits = self
            .dataset_paths
            .iter()
            .map(|p| dataset::load_manifest(p, self.manifest.seed))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(DatasetSplit::merge(splits, self.manifest.seed)?)
    }

    pub fn model_hash(&self) -> Result<String> {
        let bytes = std::fs::read(&self.model_path).map_err(other)?;
        Ok(content_hash(&bytes))
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.output_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| other(format!("{}: {e}", d.display())))?;
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Extract,
    Train,
    Behave,
    Psycho,
    Repspace,
    All,
}

impl Stage {
    pub const ORDER: [Stage; 5] = [Stage::Extract, Stage::Train, Stage::Behave, Stage::Psycho, Stage::Repspace];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Train => "train",
            Stage::Behave => "behave",
            Stage::Psycho => "psycho",
            Stage::Repspace => "repspace",
            Stage::All => "all",
        }
    }
}

/// Feature sets the experiment needs: (set, orientation).
pub const FEATURE_SETS: [(SetTag, Orientation); 7] = [
    (SetTag::Train, Orientation::Upright),
    (SetTag::Validation, Orientation::Upright),
    (SetTag::TestFace, Orientation::Upright),
    (SetTag::TestFace, Orientation::Inverted),
    (SetTag::TestObject, Orientation::Upright),
    (SetTag::TestObject, Orientation::Inverted),
    (SetTag::TestPareidolia, Orientation::Upright),
];

pub fn cache_path(out: &Path, set: SetTag, orientation: Orientation) -> PathBuf {
    out.join("features").join(format!("{}_{}.ppfc", set.as_str(), orientation.as_str()))
}

/// Images decoded per inference chunk; bounds peak memory on large sets.
const DECODE_CHUNK: usize = 256;

fn extract_set(
    model: &BackboneModel,
    split: &DatasetSplit,
    set: SetTag,
    orientation: Orientation,
    batch: usize,
) -> Result<FeatureMatrix> {
    let records: Vec<_> = split.set(set).cloned().collect();
    if records.is_empty() {
        return Err(PipelineError::Manifest(format!("no `{}` records in the dataset manifests", set.as_str())));
    }
    let mut values = Vec::with_capacity(records.len() * model.feature_dim());
    for chunk in records.chunks(DECODE_CHUNK) {
        let mut tensors = dataset::load_tensors(chunk)?;
        if orientation == Orientation::Inverted {
            tensors = tensors.iter().map(dataset::invert).collect();
        }
        let ids = chunk.iter().map(|r| r.id.clone()).collect();
        let fm = model.extract_features(&tensors, ids, orientation, batch)?;
        values.extend_from_slice(fm.values());
    }
    let ids = records.iter().map(|r| r.id.clone()).collect();
    Ok(FeatureMatrix::new(model.feature_dim(), values, ids, model.model_hash().to_string(), orientation)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractSummary {
    pub extracted: Vec<String>,
    pub reused: Vec<String>,
}

pub fn stage_extract(exp: &Experiment, force: bool) -> Result<ExtractSummary> {
    let split = exp.datasets()?;
    let model_hash = exp.model_hash()?;
    exp.dir("features")?;
    let mut model: Option<BackboneModel> = None;
    let mut summary = ExtractSummary { extracted: vec![], reused: vec![] };
    for (set, orientation) in FEATURE_SETS {
        let path = cache_path(&exp.output_dir, set, orientation);
        let name = format!("{}_{}", set.as_str(), orientation.as_str());
        if path.is_file() && !force {
            let cached = cache::cache_read_checked(&path, &model_hash)?;
            let ids: Vec<&str> = split.set(set).map(|r| r.id.as_str()).collect();
            if cached.record_ids().iter().map(String::as_str).eq(ids) {
                summary.reused.push(name);
                continue;
            }
        }
        if model.is_none() {
            model = Some(BackboneModel::load(&exp.model_path)?);
        }
        let fm = extract_set(model.as_ref().unwrap(), &split, set, orientation, exp.manifest.extract_batch_size)?;
        cache::cache_write(&fm, &path)?;
        summary.extracted.push(name);
    }
    Ok(summary)
}

/// Reads a cached feature set produced by `extract`, refusing caches written
/// for another model.
pub fn load_features(
    exp: &Experiment,
    model_hash: &str,
    set: SetTag,
    orientation: Orientation,
) -> Result<FeatureMatrix> {
    let path = cache_path(&exp.output_dir, set, orientation);
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact { path, stage: "extract" });
    }
    Ok(cache::cache_read_checked(&path, model_hash)?)
}

fn labels_for(fm: &FeatureMatrix, by_id: &HashMap<&str, Label>) -> Result<Vec<Label>> {
    fm.record_ids()
        .iter()
        .map(|id| {
            by_id.get(id.as_str()).copied().ok_or_else(|| {
                PipelineError::StaleCache(format!("cached record `{id}` is not in the dataset manifests"))
            })
        })
        .collect()
}

fn write_json<T: Serialize>(prov: &Provenance, path: &Path, body: &T) -> Result<()> {
    prov.write_json(path, body).map_err(|e| other(format!("{}: {e}", path.display())))
}

pub fn head_path(out: &Path) -> PathBuf {
    out.join("train").join("head.pphd")
}

pub fn stage_train(exp: &Experiment) -> Result<head::TrainReport> {
    let model_hash = exp.model_hash()?;
    let train_fm = load_features(exp, &model_hash, SetTag::Train, Orientation::Upright)?;
    let val_fm = load_features(exp, &model_hash, SetTag::Validation, Orientation::Upright)?;
    let split = exp.datasets()?;
    let by_id: HashMap<&str, Label> = split.records.iter().map(|r| (r.id.as_str(), r.label)).collect();
    let train_labels = labels_for(&train_fm, &by_id)?;
    let val_labels = labels_for(&val_fm, &by_id)?;

    let (head, report) =
        head::train(&exp.manifest.train, &train_fm, &train_labels, &val_fm, &val_labels, exp.manifest.seed)?;
    let prov = exp.provenance();
    let dir = exp.dir("train")?;
    let footer = serde_json::json!({
        "provenance": prov,
        "model_hash": model_hash,
        "best_epoch": report.best_epoch,
        "best_val_acc": report.best_val_acc,
    });
    head::write_checkpoint(&head_path(&exp.output_dir), &head, &footer)?;
    write_json(&prov, &dir.join("train_report.json"), &report)?;

    let path = dir.join("train_epochs.csv");
    let mut w = prov.csv_writer(&path).map_err(other)?;
    w.write_record(["epoch", "train_acc", "train_loss", "val_acc", "val_loss"]).map_err(other)?;
    for e in &report.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_acc.to_string(),
            e.train_loss.to_string(),
            e.val_acc.to_string(),
            e.val_loss.to_string(),
        ])
        .map_err(other)?;
    }
    w.flush().map_err(other)?;
    Ok(report)
}

/// Loads the trained head and checks it was trained on this model's features.
pub fn load_head(exp: &Experiment, model_hash: &str) -> Result<LinearHead> {
    let path = head_path(&exp.output_dir);
    if !path.is_file() {
        return Err(PipelineError::MissingArtifact { path, stage: "train" });
    }
    let (head, footer) = head::read_checkpoint(&path)?;
    if footer.get("model_hash").and_then(|v| v.as_str()) != Some(model_hash) {
        return Err(PipelineError::StaleCache(format!(
            "{} was trained on features from another model",
            path.display()
        )));
    }
    Ok(head)
}

struct TestFeatures {
    faces: FeatureMatrix,
    faces_inverted: FeatureMatrix,
    objects: FeatureMatrix,
    objects_inverted: FeatureMatrix,
    pareidolia: FeatureMatrix,
}

fn test_features(exp: &Experiment, model_hash: &str) -> Result<TestFeatures> {
    Ok(TestFeatures {
        faces: load_features(exp, model_hash, SetTag::TestFace, Orientation::Upright)?,
        faces_inverted: load_features(exp, model_hash, SetTag::TestFace, Orientation::Inverted)?,
        objects: load_features(exp, model_hash, SetTag::TestObject, Orientation::Upright)?,
        objects_inverted: load_features(exp, model_hash, SetTag::TestObject, Orientation::Inverted)?,
        pareidolia: load_features(exp, model_hash, SetTag::TestPareidolia, Orientation::Upright)?,
    })
}

fn write_contrast_csv(path: &Path, prov: &Provenance, rows: &[(&str, &EffectReport)]) -> Result<()> {
    let mut w = prov.csv_writer(path).map_err(other)?;
    w.write_record(["set", "record_index", "upright_correct", "inverted_correct", "difference"]).map_err(other)?;
    for (set, r) in rows {
        for (i, (up, inv)) in r.scores_a.iter().zip(&r.scores_b).enumerate() {
            w.write_record([set.to_string(), i.to_string(), up.to_string(), inv.to_string(), (up - inv).to_string()])
                .map_err(other)?;
        }
    }
    w.flush().map_err(other)
}

pub fn stage_behave(exp: &Experiment) -> Result<behavior::Battery> {
    let model_hash = exp.model_hash()?;
    let head = load_head(exp, &model_hash)?;
    let t = test_features(exp, &model_hash)?;
    let battery = behavior::run_battery(&BatteryInput {
        head: &head,
        pareidolia: &t.pareidolia,
        objects_upright: &t.objects,
        objects_inverted: &t.objects_inverted,
        faces_upright: &t.faces,
        faces_inverted: &t.faces_inverted,
    })?;

    let classify = |fm: &FeatureMatrix, label: Label| behavior::classify_set(&head, fm, &vec![label; fm.rows()]);
    let par = classify(&t.pareidolia, Label::Object)?;
    let obj = classify(&t.objects, Label::Object)?;
    let obj_inv = classify(&t.objects_inverted, Label::Object)?;
    let face = classify(&t.faces, Label::Face)?;
    let face_inv = classify(&t.faces_inverted, Label::Face)?;

    let prov = exp.provenance();
    let dir = exp.dir("behavior")?;
    let sets: [(&str, Vec<(&str, &[ClassificationOutcome])>); 3] = [
        ("pareidolia", vec![("test_pareidolia", &par), ("test_object", &obj)]),
        ("face_inversion", vec![("test_face_upright", &face), ("test_face_inverted", &face_inv)]),
        ("object_inversion", vec![("test_object_upright", &obj), ("test_object_inverted", &obj_inv)]),
    ];
    for (name, rows) in &sets {
        behavior::write_outcomes_csv(&dir.join(format!("{name}.csv")), &prov, rows)?;
    }
    write_contrast_csv(
        &dir.join("inversion_contrast.csv"),
        &prov,
        &[("face", &battery.face_inversion), ("object", &battery.object_inversion)],
    )?;
    for r in battery.reports() {
        behavior::write_summary_json(&dir.join(format!("{}.json", r.effect_name)), &prov, r)?;
    }
    write_json(&prov, &dir.join("battery.json"), &battery)?;
    Ok(battery)
}

#[derive(Debug, Clone, Serialize)]
pub struct PsychoSummary {
    pub human_ranked: Vec<psy::Curve>,
    pub model_ranked: Vec<psy::Curve>,
}

pub fn stage_psycho(exp: &Experiment) -> Result<PsychoSummary> {
    let model_hash = exp.model_hash()?;
    let head = load_head(exp, &model_hash)?;
    let par = load_features(exp, &model_hash, SetTag::TestPareidolia, Orientation::Upright)?;
    let judgments = JudgmentTable::load(&exp.judgments_path)?;
    let outcomes = behavior::classify_set(&head, &par, &vec![Label::Object; par.rows()])?;

    let human: Vec<(String, f64)> = outcomes
        .iter()
        .map(|o| {
            judgments
                .face_proportion(&o.record_id)
                .map(|p| (o.record_id.clone(), p))
                .ok_or_else(|| PsychometricsError::MissingJudgment(o.record_id.clone()))
        })
        .collect::<std::result::Result<_, _>>()?;
    let indicator: Vec<(String, f64)> =
        outcomes.iter().map(|o| (o.record_id.clone(), if o.predicted == Label::Face { 1.0 } else { 0.0 })).collect();
    let p_face: Vec<(String, f64)> = outcomes.iter().map(|o| (o.record_id.clone(), o.p_face)).collect();

    let curve = |observer: &str, bins: Vec<psy::Bin>| -> Result<psy::Curve> {
        Ok(psy::Curve { observer: observer.into(), fit: psy::fit_bins(&bins)?, bins })
    };
    let human_ranked = vec![
        curve("human", psy::rank_and_bin(&judgments, &human)?)?,
        curve("model", psy::rank_and_bin(&judgments, &indicator)?)?,
        curve("model_p_face", psy::rank_and_bin(&judgments, &p_face)?)?,
    ];
    // Exploratory: the same responses ordered by the model's own face score.
    let human_map: HashMap<String, f64> = human.iter().cloned().collect();
    let indicator_map: HashMap<String, f64> = indicator.iter().cloned().collect();
    let model_ranked = vec![
        curve("human", psy::rank_and_bin_by_model(&p_face, &human_map)?)?,
        curve("model", psy::rank_and_bin_by_model(&p_face, &indicator_map)?)?,
    ];

    let prov = exp.provenance();
    let dir = exp.dir("psychometrics")?;
    psy::write_curves(&dir, "psychometric", &prov, "human", &human_ranked)?;
    psy::write_curves(&dir, "psychometric_by_model", &prov, "model", &model_ranked)?;
    Ok(PsychoSummary { human_ranked, model_ranked })
}

#[derive(Debug, Clone, Serialize)]
pub struct RepspaceSummary {
    pub unit_map: repspace::UnitMap,
    pub distances: Vec<repspace::DistanceEntry>,
}

pub fn stage_repspace(exp: &Experiment) -> Result<RepspaceSummary> {
    let model_hash = exp.model_hash()?;
    let head = load_head(exp, &model_hash)?;
    let t = test_features(exp, &model_hash)?;
    let correct = |fm: &FeatureMatrix, label: Label| -> Result<Vec<f64>> {
        Ok(behavior::classify_set(&head, fm, &vec![label; fm.rows()])?
            .iter()
            .map(|o| if o.correct { 1.0 } else { 0.0 })
            .collect())
    };
    let fc = correct(&t.faces, Label::Face)?;
    let oc = correct(&t.objects, Label::Object)?;
    let m = &exp.manifest;
    let unit_map = repspace::unit_correlation_map(&t.faces, &fc, &t.objects, &oc, m.units.rule(), m.layout()?)?;
    let distances = repspace::distance_report(&t.faces, &t.pareidolia, &t.objects, &unit_map, &m.bootstrap_config())?;

    let prov = exp.provenance();
    let dir = exp.dir("repspace")?;
    repspace::write_unit_map_csv(&dir.join("unit_map.csv"), &prov, &unit_map)?;
    repspace::write_unit_grid(&dir, "unit_map", &prov, &unit_map)?;
    repspace::write_distance_csv(&dir.join("distances.csv"), &prov, &distances)?;
    write_json(&prov, &dir.join("unit_map.json"), &unit_map)?;
    #[derive(Serialize)]
    struct Distances<'a> {
        entries: &'a [repspace::DistanceEntry],
    }
    write_json(&prov, &dir.join("distances.json"), &Distances { entries: &distances })?;
    Ok(RepspaceSummary { unit_map, distances })
}

/// Exclusive lock on the output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub const FILE: &'static str = ".pareidolia.lock";

    pub fn acquire(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| other(format!("{}: {e}", out.display())))?;
        let path = out.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(RunLock { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(out.to_path_buf())),
            Err(e) => Err(other(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Clone, Serialize)]
struct Versions {
    pareidolia: &'static str,
    feature_cache: &'static str,
    head_checkpoint: &'static str,
}

#[derive(Debug, Clone, Serialize)]
struct Inputs {
    model: String,
    datasets: BTreeMap<String, String>,
    judgments: String,
}

#[derive(Debug, Clone, Serialize)]
struct RunRecord<'a> {
    stage: &'static str,
    stages_run: Vec<&'static str>,
    config: &'a ExperimentManifest,
    versions: Versions,
    inputs: Inputs,
    /// sha256 of every artifact under the output directory.
    artifacts: BTreeMap<String, String>,
    /// Wall-clock seconds per stage; the only field that varies between
    /// identical reruns.
    timing: BTreeMap<&'static str, f64>,
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| other(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_artifacts(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir).map_err(other)?.collect::<std::io::Result<_>>().map_err(other)?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        let name = e.file_name();
        if name == RUN_RECORD || name == RunLock::FILE {
            continue;
        }
        if p.is_dir() {
            collect_artifacts(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("walk stays under root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(key, file_sha256(&p)?);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub force: bool,
}

/// Runs `stage` (or every stage in order for `All`) and writes `run.json`.
pub fn run(exp: &Experiment, stage: Stage, opts: RunOptions) -> Result<()> {
    let _lock = RunLock::acquire(&exp.output_dir)?;
    let stages: Vec<Stage> = if stage == Stage::All { Stage::ORDER.to_vec() } else { vec![stage] };
    let mut timing = BTreeMap::new();
    for s in &stages {
        let t0 = Instant::now();
        match s {
            Stage::Extract => {
                stage_extract(exp, opts.force)?;
            }
            Stage::Train => {
                stage_train(exp)?;
            }
            Stage::Behave => {
                stage_behave(exp)?;
            }
            Stage::Psycho => {
                stage_psycho(exp)?;
            }
            Stage::Repspace => {
                stage_repspace(exp)?;
            }
            Stage::All => unreachable!("expanded above"),
        }
        timing.insert(s.as_str(), t0.elapsed().as_secs_f64());
    }

    let rel = |p: &Path| p.display().to_string();
    let inputs = Inputs {
        model: exp.model_hash()?,
        datasets: exp
            .manifest
            .datasets
            .iter()
            .zip(&exp.dataset_paths)
            .map(|(name, p)| Ok((rel(name), file_sha256(p)?)))
            .collect::<Result<_>>()?,
        judgments: file_sha256(&exp.judgments_path)?,
    };
    let mut artifacts = BTreeMap::new();
    collect_artifacts(&exp.output_dir, &exp.output_dir, &mut artifacts)?;
    let record = RunRecord {
        stage: stage.as_str(),
        stages_run: stages.iter().map(|s| s.as_str()).collect(),
        config: &exp.manifest,
        versions: Versions { pareidolia: env!("CARGO_PKG_VERSION"), feature_cache: "PPFC1", head_checkpoint: "PPHD1" },
        inputs,
        artifacts,
        timing,
    };
    write_json(&exp.provenance(), &exp.output_dir.join(RUN_RECORD), &record)
}
