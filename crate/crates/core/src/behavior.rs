//! Behavioral battery on a trained head: pareidolia face-rate against the
//! object false-alarm baseline, face and object inversion effects, and the
//! contrast between the two inversion effects.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::FeatureMatrix;
use crate::dataset::Label;
use crate::head::{HeadError, LinearHead};
use crate::provenance::Provenance;
use crate::stats::{self, StatsError, TestKind, TestOutcome};

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("empty image set: {0}")]
    EmptySet(&'static str),
    #[error("row {index}: upright record `{upright}` does not match inverted record `{inverted}`")]
    Misaligned { index: usize, upright: String, inverted: String },
    #[error("size mismatch: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("writing {path}: {message}")]
    Output { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, BehaviorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationOutcome {
    pub record_id: String,
    pub label: Label,
    pub p_face: f64,
    pub predicted: Label,
    pub correct: bool,
}

pub fn classify_set(head: &LinearHead, fm: &FeatureMatrix, labels: &[Label]) -> Result<Vec<ClassificationOutcome>> {
    if fm.cols() != head.dim() {
        return Err(HeadError::DimensionMismatch { expected: head.dim(), got: fm.cols() }.into());
    }
    if fm.rows() != labels.len() {
        return Err(BehaviorError::SizeMismatch(fm.rows(), labels.len()));
    }
    fm.row_iter()
        .zip(fm.record_ids())
        .zip(labels)
        .map(|((row, id), &label)| {
            let p = head.forward(row)?;
            let predicted = if p[0] > 0.5 { Label::Face } else { Label::Object };
            Ok(ClassificationOutcome {
                record_id: id.clone(),
                label,
                p_face: p[0],
                predicted,
                correct: predicted == label,
            })
        })
        .collect()
}

/// `k` of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub k: usize,
    pub n: usize,
}

impl Counts {
    pub fn of(indicators: &[f64]) -> Counts {
        Counts { k: indicators.iter().filter(|&&v| v == 1.0).count(), n: indicators.len() }
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectReport {
    pub effect_name: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// Present when the means are rates over binary indicators.
    pub counts_a: Option<Counts>,
    pub counts_b: Option<Counts>,
    pub difference: f64,
    /// Primary test.
    pub stat: TestOutcome,
    /// Alternative tests on the same per-image scores, reported alongside.
    pub variants: Vec<TestOutcome>,
    /// Per-image scores behind `mean_a` / `mean_b`.
    #[serde(skip)]
    pub scores_a: Vec<f64>,
    #[serde(skip)]
    pub scores_b: Vec<f64>,
}

impl EffectReport {
    fn with_family(mut self, family: usize) -> Self {
        self.stat = self.stat.with_family(family);
        self.variants = self.variants.into_iter().map(|v| v.with_family(family)).collect();
        self
    }

    /// Per-image `a - b` scores (paired designs only).
    pub fn paired_differences(&self) -> Result<Vec<f64>> {
        if self.scores_a.len() != self.scores_b.len() {
            return Err(BehaviorError::SizeMismatch(self.scores_a.len(), self.scores_b.len()));
        }
        Ok(self.scores_a.iter().zip(&self.scores_b).map(|(a, b)| a - b).collect())
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Rate of `target` predictions on `a` versus `b`. The primary statistic is
/// Welch's t; paired (row-index pairing, equal sizes only) and one-sample
/// against the fixed `b` rate are reported as variants.
pub fn rate_test(
    name: &str,
    head: &LinearHead,
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    target: Label,
) -> Result<EffectReport> {
    if a.rows() == 0 {
        return Err(BehaviorError::EmptySet("first set"));
    }
    if b.rows() == 0 {
        return Err(BehaviorError::EmptySet("baseline set"));
    }
    let score = |fm: &FeatureMatrix| -> Result<Vec<f64>> {
        let dummy = vec![target; fm.rows()];
        Ok(classify_set(head, fm, &dummy)?.iter().map(|o| indicator(o.predicted == target)).collect())
    };
    let (sa, sb) = (score(a)?, score(b)?);
    let (ca, cb) = (Counts::of(&sa), Counts::of(&sb));
    let stat = stats::t_test(TestKind::Welch, &sa, Some(&sb))?;
    let mut variants = Vec::new();
    if sa.len() == sb.len() {
        variants.push(stats::t_test(TestKind::Paired, &sa, Some(&sb))?);
    }
    variants.push(stats::t_test(TestKind::OneSample { mu0: cb.rate() }, &sa, None)?);
    Ok(EffectReport {
        effect_name: name.to_string(),
        mean_a: ca.rate(),
        mean_b: cb.rate(),
        counts_a: Some(ca),
        counts_b: Some(cb),
        difference: ca.rate() - cb.rate(),
        stat,
        variants,
        scores_a: sa,
        scores_b: sb,
    })
}

pub fn pareidolia_test(head: &LinearHead, pareidolia: &FeatureMatrix, objects: &FeatureMatrix) -> Result<EffectReport> {
    rate_test("pareidolia", head, pareidolia, objects, Label::Face)
}

/// Accuracy upright minus accuracy inverted, paired t on per-image
/// correctness differences.
pub fn inversion_test(
    name: &str,
    head: &LinearHead,
    upright: &FeatureMatrix,
    inverted: &FeatureMatrix,
    labels: &[Label],
) -> Result<EffectReport> {
    if upright.rows() != inverted.rows() {
        return Err(BehaviorError::SizeMismatch(upright.rows(), inverted.rows()));
    }
    if upright.rows() == 0 {
        return Err(BehaviorError::EmptySet("inversion set"));
    }
    for (index, (u, i)) in upright.record_ids().iter().zip(inverted.record_ids()).enumerate() {
        if u != i {
            return Err(BehaviorError::Misaligned { index, upright: u.clone(), inverted: i.clone() });
        }
    }
    let correct =
        |fm| -> Result<Vec<f64>> { Ok(classify_set(head, fm, labels)?.iter().map(|o| indicator(o.correct)).collect()) };
    let (sa, sb) = (correct(upright)?, correct(inverted)?);
    let (ca, cb) = (Counts::of(&sa), Counts::of(&sb));
    let stat = stats::t_test(TestKind::Paired, &sa, Some(&sb))?;
    Ok(EffectReport {
        effect_name: name.to_string(),
        mean_a: ca.rate(),
        mean_b: cb.rate(),
        counts_a: Some(ca),
        counts_b: Some(cb),
        difference: ca.rate() - cb.rate(),
        stat,
        variants: vec![],
        scores_a: sa,
        scores_b: sb,
    })
}

/// Face inversion effect minus object inversion effect, Welch t on the
/// per-image difference scores.
pub fn inversion_contrast(face: &EffectReport, object: &EffectReport) -> Result<EffectReport> {
    let fd = face.paired_differences()?;
    let od = object.paired_differences()?;
    if fd.len() != od.len() {
        return Err(BehaviorError::SizeMismatch(fd.len(), od.len()));
    }
    let stat = stats::t_test(TestKind::Welch, &fd, Some(&od))?;
    Ok(EffectReport {
        effect_name: "inversion_contrast".into(),
        mean_a: face.difference,
        mean_b: object.difference,
        counts_a: None,
        counts_b: None,
        difference: face.difference - object.difference,
        stat,
        variants: vec![],
        scores_a: fd,
        scores_b: od,
    })
}

pub struct BatteryInput<'a> {
    pub head: &'a LinearHead,
    pub pareidolia: &'a FeatureMatrix,
    pub objects_upright: &'a FeatureMatrix,
    pub objects_inverted: &'a FeatureMatrix,
    pub faces_upright: &'a FeatureMatrix,
    pub faces_inverted: &'a FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Battery {
    pub family_size: usize,
    pub pareidolia: EffectReport,
    pub face_inversion: EffectReport,
    pub object_inversion: EffectReport,
    pub inversion_contrast: EffectReport,
}

impl Battery {
    pub fn reports(&self) -> [&EffectReport; 4] {
        [&self.pareidolia, &self.face_inversion, &self.object_inversion, &self.inversion_contrast]
    }
}

/// Runs all four tests and Bonferroni-corrects over the family of four.
pub fn run_battery(input: &BatteryInput) -> Result<Battery> {
    const FAMILY: usize = 4;
    let faces = vec![Label::Face; input.faces_upright.rows()];
    let objects = vec![Label::Object; input.objects_upright.rows()];
    let pareidolia = pareidolia_test(input.head, input.pareidolia, input.objects_upright)?;
    let face_inversion =
        inversion_test("face_inversion", input.head, input.faces_upright, input.faces_inverted, &faces)?;
    let object_inversion =
        inversion_test("object_inversion", input.head, input.objects_upright, input.objects_inverted, &objects)?;
    let inversion_contrast = inversion_contrast(&face_inversion, &object_inversion)?;
    Ok(Battery {
        family_size: FAMILY,
        pareidolia: pareidolia.with_family(FAMILY),
        face_inversion: face_inversion.with_family(FAMILY),
        object_inversion: object_inversion.with_family(FAMILY),
        inversion_contrast: inversion_contrast.with_family(FAMILY),
    })
}

/// One row per image: `set, record_id, p_face, predicted, correct`.
pub fn write_outcomes_csv(path: &Path, prov: &Provenance, sets: &[(&str, &[ClassificationOutcome])]) -> Result<()> {
    let err =
        |e: &dyn std::fmt::Display| BehaviorError::Output { path: path.display().to_string(), message: e.to_string() };
    let mut w = prov.csv_writer(path).map_err(|e| err(&e))?;
    w.write_record(["set", "record_id", "label", "p_face", "predicted", "correct"]).map_err(|e| err(&e))?;
    for (set, outcomes) in sets {
        for o in *outcomes {
            let p_face = o.p_face.to_string();
            w.write_record([
                *set,
                o.record_id.as_str(),
                o.label.as_str(),
                p_face.as_str(),
                o.predicted.as_str(),
                if o.correct { "1" } else { "0" },
            ])
            .map_err(|e| err(&e))?;
        }
    }
    w.flush().map_err(|e| err(&e))
}

pub fn write_summary_json(path: &Path, prov: &Provenance, report: &EffectReport) -> Result<()> {
    prov.write_json(path, report)
        .map_err(|e| BehaviorError::Output { path: path.display().to_string(), message: e.to_string() })
}
