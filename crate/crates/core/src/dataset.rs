//! Labeled image manifests, preprocessing to normalized 3×224×224 tensors and
//! the inversion (180° rotation) transform.
//!
//! Manifest lines are `id<TAB>relative_path<TAB>label<TAB>set_tag`; blank lines
//! and lines starting with `#` are skipped. Paths resolve against the
//! manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IMAGE_SIDE: usize = 224;
pub const CHANNELS: usize = 3;
pub const TENSOR_LEN: usize = CHANNELS * IMAGE_SIDE * IMAGE_SIDE;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{} image file(s) listed in the manifest are missing: {}", .0.len(), display_paths(.0))]
    MissingFiles(Vec<PathBuf>),
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{0}` appears in both the training and validation sets")]
    TrainValidationOverlap(String),
    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("image has a zero dimension ({width}×{height})")]
    ZeroDimension { width: u32, height: u32 },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Class label; `Face` is output column 0 of the head, `Object` column 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Face,
    Object,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Face => 0,
            Label::Object => 1,
        }
    }

    pub fn from_index(i: usize) -> Label {
        if i == 0 {
            Label::Face
        } else {
            Label::Object
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Face => Label::Object,
            Label::Object => Label::Face,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Face => "face",
            Label::Object => "object",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "face" => Ok(Label::Face),
            "object" => Ok(Label::Object),
            other => Err(format!("unknown label `{other}` (expected face or object)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetTag {
    Train,
    Validation,
    TestObject,
    TestPareidolia,
    TestFace,
}

impl SetTag {
    pub const ALL: [SetTag; 5] =
        [SetTag::Train, SetTag::Validation, SetTag::TestObject, SetTag::TestPareidolia, SetTag::TestFace];

    pub fn as_str(self) -> &'static str {
        match self {
            SetTag::Train => "train",
            SetTag::Validation => "validation",
            SetTag::TestObject => "test_object",
            SetTag::TestPareidolia => "test_pareidolia",
            SetTag::TestFace => "test_face",
        }
    }
}

impl fmt::Display for SetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SetTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(SetTag::Train),
            "validation" | "val" => Ok(SetTag::Validation),
            "test_object" => Ok(SetTag::TestObject),
            "test_pareidolia" => Ok(SetTag::TestPareidolia),
            "test_face" => Ok(SetTag::TestFace),
            other => Err(format!("unknown set tag `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Upright,
    Inverted,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Orientation::Upright => "upright",
            Orientation::Inverted => "inverted",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Orientation::Upright => 0,
            Orientation::Inverted => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Orientation> {
        match code {
            0 => Some(Orientation::Upright),
            1 => Some(Orientation::Inverted),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
    pub set_tag: SetTag,
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub records: Vec<ImageRecord>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Validates id uniqueness and train/validation disjointness.
    pub fn new(records: Vec<ImageRecord>, seed: u64) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut train = HashSet::new();
        for r in &records {
            if r.set_tag == SetTag::Train {
                train.insert(r.id.as_str());
            }
        }
        for r in &records {
            if r.set_tag == SetTag::Validation && train.contains(r.id.as_str()) {
                return Err(DatasetError::TrainValidationOverlap(r.id.clone()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
        }
        Ok(DatasetSplit { records, seed })
    }

    pub fn set(&self, tag: SetTag) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.set_tag == tag)
    }

    pub fn count(&self, tag: SetTag, label: Label) -> usize {
        self.set(tag).filter(|r| r.label == label).count()
    }

    pub fn counts_by_label(&self) -> BTreeMap<Label, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.label).or_insert(0) += 1;
        }
        out
    }

    pub fn merge(splits: Vec<DatasetSplit>, seed: u64) -> Result<Self> {
        DatasetSplit::new(splits.into_iter().flat_map(|s| s.records).collect(), seed)
    }
}

/// Parses manifest text. `base` is the directory paths resolve against.
pub fn parse_manifest(text: &str, base: &Path, source: &Path) -> Result<Vec<ImageRecord>> {
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let err = |message: String| DatasetError::Parse { path: source.to_path_buf(), line: i + 1, message };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(err("empty id or path".into()));
        }
        let label: Label = fields[2].trim().parse().map_err(err)?;
        let set_tag: SetTag = fields[3].trim().parse().map_err(err)?;
        if set_tag == SetTag::TestPareidolia && label != Label::Object {
            return Err(err("pareidolia records must carry the object label".into()));
        }
        records.push(ImageRecord {
            id: fields[0].to_string(),
            path: base.join(fields[1]),
            label,
            set_tag,
            orientation: Orientation::Upright,
        });
    }
    Ok(records)
}

/// Loads a manifest file and checks that every referenced image exists.
pub fn load_manifest(path: &Path, seed: u64) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let records = parse_manifest(&text, base, path)?;
    let missing: Vec<PathBuf> = records.iter().filter(|r| !r.path.is_file()).map(|r| r.path.clone()).collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingFiles(missing));
    }
    DatasetSplit::new(records, seed)
}

/// A 3×224×224 channel-major tensor with values in [-1, 1].
#[derive(Clone, PartialEq)]
pub struct PixelTensor {
    data: Vec<f32>,
}

impl fmt::Debug for PixelTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PixelTensor").field("len", &self.data.len()).finish()
    }
}

impl PixelTensor {
    pub fn from_vec(data: Vec<f32>) -> Option<Self> {
        (data.len() == TENSOR_LEN).then_some(PixelTensor { data })
    }

    pub fn filled(value: f32) -> Self {
        PixelTensor { data: vec![value; TENSOR_LEN] }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.data[(channel * IMAGE_SIDE + row) * IMAGE_SIDE + col]
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }
}

/// Maps an 8-bit channel value to ((v / 255) - 0.5) / 0.5.
pub fn normalize_channel(v: f32) -> f32 {
    (v / 255.0 - 0.5) / 0.5
}

/// Bilinear resize (half-pixel centers, edge clamped) of an RGB raster to
/// 224×224 followed by normalization.
pub fn preprocess(raw: &RgbImage) -> Result<PixelTensor> {
    let (w, h) = raw.dimensions();
    if w == 0 || h == 0 {
        return Err(DatasetError::ZeroDimension { width: w, height: h });
    }
    let (w, h) = (w as usize, h as usize);
    let src = raw.as_raw();
    let xs = sample_positions(w);
    let ys = sample_positions(h);
    let mut data = vec![0f32; TENSOR_LEN];
    for (r, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (c, &(x0, x1, tx)) in xs.iter().enumerate() {
            for ch in 0..CHANNELS {
                let px = |y: usize, x: usize| src[(y * w + x) * 3 + ch] as f32;
                let top = lerp(px(y0, x0), px(y0, x1), tx);
                let bottom = lerp(px(y1, x0), px(y1, x1), tx);
                data[(ch * IMAGE_SIDE + r) * IMAGE_SIDE + c] = normalize_channel(lerp(top, bottom, ty));
            }
        }
    }
    Ok(PixelTensor { data })
}

// a + t (b - a) returns `a` exactly when a == b
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

fn sample_positions(src_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = src_len as f64 / IMAGE_SIDE as f64;
    (0..IMAGE_SIDE)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Decodes a PNG/JPEG file. Grayscale is replicated to RGB, alpha dropped.
pub fn decode_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    decode_bytes(&bytes).map_err(|message| DatasetError::Decode { path: path.to_path_buf(), message })
}

pub fn decode_bytes(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    Ok(img.to_rgb8())
}

pub fn load_tensor(path: &Path) -> Result<PixelTensor> {
    preprocess(&decode_image(path)?)
}

/// Decodes and preprocesses records in parallel; output order follows input.
pub fn load_tensors(records: &[ImageRecord]) -> Result<Vec<PixelTensor>> {
    records.par_iter().map(|r| load_tensor(&r.path)).collect()
}

/// 180° rotation of an h×w plane: (r, c) -> (h-1-r, w-1-c).
pub fn rotate_plane_180<T: Copy>(plane: &[T], height: usize, width: usize) -> Vec<T> {
    assert_eq!(plane.len(), height * width);
    plane.iter().rev().copied().collect()
}

/// Upside-down presentation: each channel plane rotated by 180°.
pub fn invert(t: &PixelTensor) -> PixelTensor {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut data = Vec::with_capacity(TENSOR_LEN);
    for ch in t.data.chunks_exact(plane) {
        data.extend(rotate_plane_180(ch, IMAGE_SIDE, IMAGE_SIDE));
    }
    PixelTensor { data }
}
