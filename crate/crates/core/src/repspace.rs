//! Representational analysis of the feature layer: which units track correct
//! face or object classification, and how far apart the category-mean
//! activation vectors are on each unit subset.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::FeatureMatrix;
use crate::provenance::Provenance;
use crate::stats::{self, BootstrapCI, BootstrapConfig, StatsError};

#[derive(Debug, Error)]
pub enum RepspaceError {
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("feature width mismatch: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("{what}: {rows} rows but {labels} correctness values")]
    LengthMismatch { what: &'static str, rows: usize, labels: usize },
    #[error("empty matrix: {0}")]
    EmptyMatrix(&'static str),
    #[error("empty unit subset")]
    EmptySubset,
    #[error("unit index {0} out of range")]
    UnitOutOfRange(usize),
    #[error("no known grid layout for d = {0}; set grid rows and cols explicitly")]
    NoLayout(usize),
    #[error("grid {rows}x{cols} does not hold {d} units")]
    BadLayout { rows: usize, cols: usize, d: usize },
    #[error("writing {path}: {message}")]
    Output { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, RepspaceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitClass {
    None,
    FaceUnit,
    ObjectUnit,
    Overlap,
}

impl UnitClass {
    pub fn code(self) -> u8 {
        match self {
            UnitClass::None => 0,
            UnitClass::FaceUnit => 1,
            UnitClass::ObjectUnit => 2,
            UnitClass::Overlap => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            UnitClass::None => "none",
            UnitClass::FaceUnit => "face",
            UnitClass::ObjectUnit => "object",
            UnitClass::Overlap => "overlap",
        }
    }

    /// Pixmap palette: black, red, blue, white.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            UnitClass::None => [0, 0, 0],
            UnitClass::FaceUnit => [255, 0, 0],
            UnitClass::ObjectUnit => [0, 0, 255],
            UnitClass::Overlap => [255, 255, 255],
        }
    }

    pub fn gray(self) -> u8 {
        self.code() * 85
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correction {
    None,
    /// Multiply each p by the number of units.
    Bonferroni,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdRule {
    pub alpha: f64,
    pub correction: Correction,
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule { alpha: 0.05, correction: Correction::None }
    }
}

impl ThresholdRule {
    pub fn significant(&self, p: Option<f64>, n_units: usize) -> bool {
        let Some(p) = p else { return false };
        let adjusted = match self.correction {
            Correction::None => p,
            Correction::Bonferroni => stats::bonferroni(p, n_units),
        };
        adjusted < self.alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitStat {
    pub unit_index: usize,
    /// `None` when undefined (constant activation or constant correctness).
    pub r_face: Option<f64>,
    pub p_face: Option<f64>,
    pub r_object: Option<f64>,
    pub p_object: Option<f64>,
    pub class: UnitClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMap {
    pub stats: Vec<UnitStat>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub threshold_rule: ThresholdRule,
    /// Set when a correctness vector is constant, so that every correlation
    /// on that side is undefined.
    pub degenerate: Vec<String>,
}

impl UnitMap {
    pub fn units_of(&self, class: UnitClass) -> Vec<usize> {
        self.stats.iter().filter(|s| s.class == class).map(|s| s.unit_index).collect()
    }

    pub fn count(&self, class: UnitClass) -> usize {
        self.stats.iter().filter(|s| s.class == class).count()
    }
}

/// Paper layouts for the three feature widths, or the override.
pub fn grid_layout(d: usize, explicit: Option<(usize, usize)>) -> Result<(usize, usize)> {
    let (rows, cols) = match (explicit, d) {
        (Some(rc), _) => rc,
        (None, 4096) => (64, 64),
        (None, 2048) => (64, 32),
        (None, 1664) => (64, 26),
        (None, _) => return Err(RepspaceError::NoLayout(d)),
    };
    if rows * cols != d {
        return Err(RepspaceError::BadLayout { rows, cols, d });
    }
    Ok((rows, cols))
}

fn correlate(column: &[f64], correct: &[f64]) -> Result<(Option<f64>, Option<f64>)> {
    match stats::pearson_r(column, correct)? {
        Some(r) => Ok((Some(r), Some(stats::pearson_p_value(r, column.len())?))),
        None => Ok((None, None)),
    }
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|&x| x == v[0])
}

/// Correlates every unit with classification correctness on faces and on
/// objects and classifies it by `rule`.
pub fn unit_correlation_map(
    face_fm: &FeatureMatrix,
    face_correct: &[f64],
    object_fm: &FeatureMatrix,
    object_correct: &[f64],
    rule: ThresholdRule,
    layout: Option<(usize, usize)>,
) -> Result<UnitMap> {
    if face_fm.cols() != object_fm.cols() {
        return Err(RepspaceError::WidthMismatch(face_fm.cols(), object_fm.cols()));
    }
    for (what, fm, c) in [("faces", face_fm, face_correct), ("objects", object_fm, object_correct)] {
        if fm.rows() != c.len() {
            return Err(RepspaceError::LengthMismatch { what, rows: fm.rows(), labels: c.len() });
        }
        if fm.rows() < 3 {
            return Err(StatsError::TooFew { needed: 3, got: fm.rows() }.into());
        }
    }
    let d = face_fm.cols();
    let (grid_rows, grid_cols) = grid_layout(d, layout)?;
    let mut degenerate = vec![];
    for (what, c) in [("face", face_correct), ("object", object_correct)] {
        if is_constant(c) {
            let state = if c[0] == 1.0 { "all correct" } else { "all incorrect" };
            degenerate.push(format!("{what} correctness is constant ({state}); every r_{what} is undefined"));
        }
    }
    let stats = (0..d)
        .into_par_iter()
        .map(|j| {
            let (r_face, p_face) = correlate(&face_fm.column(j), face_correct)?;
            let (r_object, p_object) = correlate(&object_fm.column(j), object_correct)?;
            let class = match (rule.significant(p_face, d), rule.significant(p_object, d)) {
                (true, true) => UnitClass::Overlap,
                (true, false) => UnitClass::FaceUnit,
                (false, true) => UnitClass::ObjectUnit,
                (false, false) => UnitClass::None,
            };
            Ok(UnitStat { unit_index: j, r_face, p_face, r_object, p_object, class })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UnitMap { stats, grid_rows, grid_cols, threshold_rule: rule, degenerate })
}

/// Row-major class grid.
pub fn render_unit_grid(map: &UnitMap) -> Vec<Vec<UnitClass>> {
    map.stats.chunks(map.grid_cols).map(|row| row.iter().map(|s| s.class).collect()).collect()
}

/// Mean of `rows` (indices into `fm`) per unit, summed in the given order.
fn mean_of_rows(fm: &FeatureMatrix, rows: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut acc = vec![0f64; fm.cols()];
    let mut n = 0usize;
    for i in rows {
        for (a, &v) in acc.iter_mut().zip(fm.row(i)) {
            *a += v as f64;
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

fn subset_norm(ma: &[f64], mb: &[f64], subset: &[usize]) -> f64 {
    subset.iter().map(|&j| (ma[j] - mb[j]).powi(2)).sum::<f64>().sqrt()
}

fn check_subset(d: usize, subset: &[usize]) -> Result<()> {
    if subset.is_empty() {
        return Err(RepspaceError::EmptySubset);
    }
    match subset.iter().find(|&&j| j >= d) {
        Some(&j) => Err(RepspaceError::UnitOutOfRange(j)),
        None => Ok(()),
    }
}

/// Euclidean distance between the column means of `a` and `b` on `subset`.
pub fn mean_distance(a: &FeatureMatrix, b: &FeatureMatrix, subset: &[usize]) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(RepspaceError::WidthMismatch(a.cols(), b.cols()));
    }
    if a.rows() == 0 || b.rows() == 0 {
        return Err(RepspaceError::EmptyMatrix("distance input"));
    }
    check_subset(a.cols(), subset)?;
    Ok(subset_norm(&mean_of_rows(a, 0..a.rows()), &mean_of_rows(b, 0..b.rows()), subset))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pair {
    FaceVsPareidolia,
    ObjectVsPareidolia,
    FaceVsObject,
}

impl Pair {
    pub const ALL: [Pair; 3] = [Pair::FaceVsPareidolia, Pair::ObjectVsPareidolia, Pair::FaceVsObject];

    pub fn as_str(self) -> &'static str {
        match self {
            Pair::FaceVsPareidolia => "face_vs_pareidolia",
            Pair::ObjectVsPareidolia => "object_vs_pareidolia",
            Pair::FaceVsObject => "face_vs_object",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    AllUnits,
    FaceUnits,
    ObjectUnits,
    OverlapUnits,
}

impl Subset {
    pub const ALL: [Subset; 4] = [Subset::AllUnits, Subset::FaceUnits, Subset::ObjectUnits, Subset::OverlapUnits];

    pub fn as_str(self) -> &'static str {
        match self {
            Subset::AllUnits => "all_units",
            Subset::FaceUnits => "face_units",
            Subset::ObjectUnits => "object_units",
            Subset::OverlapUnits => "overlap_units",
        }
    }

    pub fn units(self, map: &UnitMap) -> Vec<usize> {
        match self {
            Subset::AllUnits => (0..map.stats.len()).collect(),
            Subset::FaceUnits => map.units_of(UnitClass::FaceUnit),
            Subset::ObjectUnits => map.units_of(UnitClass::ObjectUnit),
            Subset::OverlapUnits => map.units_of(UnitClass::Overlap),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DistanceOutcome {
    Defined {
        distance: f64,
        ci: BootstrapCI,
        /// For unit subsets: whether the AllUnits distance of the same pair
        /// lies outside this CI.
        excludes_all_units: Option<bool>,
    },
    EmptySubset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceEntry {
    pub pair: Pair,
    pub subset: Subset,
    pub n_units: usize,
    pub outcome: DistanceOutcome,
}

impl DistanceEntry {
    pub fn distance(&self) -> Option<f64> {
        match &self.outcome {
            DistanceOutcome::Defined { distance, .. } => Some(*distance),
            DistanceOutcome::EmptySubset => None,
        }
    }
}

/// Bootstrap replicates for one pair. Replicate `i` uses substream `i`:
/// `a.rows()` draws from `a`, then `b.rows()` draws from `b`. Returns one
/// replicate vector per subset.
pub fn pair_replicates(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    subsets: &[Vec<usize>],
    cfg: &BootstrapConfig,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let per_resample: Vec<Vec<f64>> = (0..cfg.n_resamples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = stats::resample_rng(cfg.seed, i);
            let ia: Vec<usize> = (0..a.rows()).map(|_| stats::draw_index(&mut rng, a.rows())).collect();
            let ib: Vec<usize> = (0..b.rows()).map(|_| stats::draw_index(&mut rng, b.rows())).collect();
            let ma = mean_of_rows(a, ia.into_iter());
            let mb = mean_of_rows(b, ib.into_iter());
            subsets.iter().map(|s| subset_norm(&ma, &mb, s)).collect()
        })
        .collect();
    Ok((0..subsets.len()).map(|k| per_resample.iter().map(|r| r[k]).collect()).collect())
}

/// Three category pairs × four unit subsets, each with a two-group
/// percentile bootstrap CI. Every entry of a pair shares the same resamples.
pub fn distance_report(
    face_fm: &FeatureMatrix,
    pareidolia_fm: &FeatureMatrix,
    object_fm: &FeatureMatrix,
    map: &UnitMap,
    cfg: &BootstrapConfig,
) -> Result<Vec<DistanceEntry>> {
    let d = face_fm.cols();
    for fm in [pareidolia_fm, object_fm] {
        if fm.cols() != d {
            return Err(RepspaceError::WidthMismatch(d, fm.cols()));
        }
    }
    if map.stats.len() != d {
        return Err(RepspaceError::WidthMismatch(d, map.stats.len()));
    }
    for (what, fm) in [("faces", face_fm), ("pareidolia", pareidolia_fm), ("objects", object_fm)] {
        if fm.rows() == 0 {
            return Err(RepspaceError::EmptyMatrix(what));
        }
    }
    let subsets: Vec<Vec<usize>> = Subset::ALL.iter().map(|s| s.units(map)).collect();
    let mut entries = Vec::with_capacity(12);
    for pair in Pair::ALL {
        let (a, b) = match pair {
            Pair::FaceVsPareidolia => (face_fm, pareidolia_fm),
            Pair::ObjectVsPareidolia => (object_fm, pareidolia_fm),
            Pair::FaceVsObject => (face_fm, object_fm),
        };
        let nonempty: Vec<Vec<usize>> = subsets.iter().filter(|s| !s.is_empty()).cloned().collect();
        let mut reps = pair_replicates(a, b, &nonempty, cfg)?.into_iter();
        let ma = mean_of_rows(a, 0..a.rows());
        let mb = mean_of_rows(b, 0..b.rows());
        let all_units_distance = subset_norm(&ma, &mb, &subsets[0]);
        for (subset, units) in Subset::ALL.iter().zip(&subsets) {
            let outcome = if units.is_empty() {
                DistanceOutcome::EmptySubset
            } else {
                let r = reps.next().expect("one replicate vector per non-empty subset");
                let (lower, upper) = stats::percentile_interval(&r, cfg.level);
                let distance = subset_norm(&ma, &mb, units);
                DistanceOutcome::Defined {
                    distance,
                    ci: BootstrapCI {
                        lower,
                        upper,
                        level: cfg.level,
                        n_resamples: cfg.n_resamples,
                        point_estimate: distance,
                        seed: cfg.seed,
                    },
                    excludes_all_units: (*subset != Subset::AllUnits)
                        .then(|| all_units_distance < lower || all_units_distance > upper),
                }
            };
            entries.push(DistanceEntry { pair, subset: *subset, n_units: units.len(), outcome });
        }
    }
    Ok(entries)
}

fn out_err(path: &Path, e: &dyn std::fmt::Display) -> RepspaceError {
    RepspaceError::Output { path: path.display().to_string(), message: e.to_string() }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_unit_map_csv(path: &Path, prov: &Provenance, map: &UnitMap) -> Result<()> {
    let mut w = prov.csv_writer(path).map_err(|e| out_err(path, &e))?;
    w.write_record(["unit_index", "r_face", "p_face", "r_object", "p_object", "class"])
        .map_err(|e| out_err(path, &e))?;
    for s in &map.stats {
        w.write_record([
            s.unit_index.to_string(),
            opt(s.r_face),
            opt(s.p_face),
            opt(s.r_object),
            opt(s.p_object),
            s.class.as_str().to_string(),
        ])
        .map_err(|e| out_err(path, &e))?;
    }
    w.flush().map_err(|e| out_err(path, &e))
}

/// Writes `<stem>.ppm` (palette colors), `<stem>.pgm` (gray levels) and
/// `<stem>_grid.csv` (class codes 0 none, 1 face, 2 object, 3 overlap).
pub fn write_unit_grid(dir: &Path, stem: &str, prov: &Provenance, map: &UnitMap) -> Result<()> {
    let grid = render_unit_grid(map);
    let (w, h) = (map.grid_cols as u32, map.grid_rows as u32);

    // Binary PNM with the provenance line as a header comment.
    let encode = |name: String, magic: &str, data: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        let mut bytes = format!("{magic}\n{}{w} {h}\n255\n", prov.csv_comment()).into_bytes();
        bytes.extend_from_slice(&data);
        std::fs::write(&path, bytes).map_err(|e| out_err(&path, &e))
    };
    let rgb: Vec<u8> = grid.iter().flatten().flat_map(|c| c.rgb()).collect();
    encode(format!("{stem}.ppm"), "P6", rgb)?;
    let gray: Vec<u8> = grid.iter().flatten().map(|c| c.gray()).collect();
    encode(format!("{stem}.pgm"), "P5", gray)?;

    let path = dir.join(format!("{stem}_grid.csv"));
    let mut wtr = prov.csv_writer(&path).map_err(|e| out_err(&path, &e))?;
    for row in &grid {
        wtr.write_record(row.iter().map(|c| c.code().to_string())).map_err(|e| out_err(&path, &e))?;
    }
    wtr.flush().map_err(|e| out_err(&path, &e))
}

pub fn write_distance_csv(path: &Path, prov: &Provenance, entries: &[DistanceEntry]) -> Result<()> {
    let mut w = prov.csv_writer(path).map_err(|e| out_err(path, &e))?;
    w.write_record([
        "pair",
        "subset",
        "n_units",
        "status",
        "distance",
        "ci_low",
        "ci_high",
        "level",
        "n_resamples",
        "seed",
        "excludes_all_units",
    ])
    .map_err(|e| out_err(path, &e))?;
    for e in entries {
        let head = [e.pair.as_str().to_string(), e.subset.as_str().to_string(), e.n_units.to_string()];
        let tail: Vec<String> = match &e.outcome {
            DistanceOutcome::Defined { distance, ci, excludes_all_units } => vec![
                "defined".into(),
                distance.to_string(),
                ci.lower.to_string(),
                ci.upper.to_string(),
                ci.level.to_string(),
                ci.n_resamples.to_string(),
                ci.seed.to_string(),
                excludes_all_units.map(|b| b.to_string()).unwrap_or_default(),
            ],
            DistanceOutcome::EmptySubset => {
                let mut v = vec!["empty_subset".to_string()];
                v.extend(std::iter::repeat_n(String::new(), 7));
                v
            }
        };
        w.write_record(head.iter().chain(&tail)).map_err(|e| out_err(path, &e))?;
    }
    w.flush().map_err(|e| out_err(path, &e))
}
