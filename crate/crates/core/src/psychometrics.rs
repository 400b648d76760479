//! Psychometric curves: images ranked by human face-likeness, split into
//! seven rank bins, with the face-response proportion in each bin fitted by
//! `f(x) = 1 / (1 + exp(-a (x - b)))`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provenance::Provenance;

pub const N_BINS: usize = 7;
pub const DENSE_SAMPLES: usize = 200;

#[derive(Debug, Error)]
pub enum PsychometricsError {
    #[error("judgments {path}, line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("no human judgment for record `{0}`")]
    MissingJudgment(String),
    #[error("no responses to bin")]
    Empty,
    #[error("sigmoid fit needs at least 3 points with distinct x, got {0}")]
    TooFewPoints(usize),
    #[error("invalid point ({0}, {1}): x must be finite and f in [0, 1]")]
    InvalidPoint(f64, f64),
    #[error("writing {path}: {message}")]
    Output { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, PsychometricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub n_judges: u32,
    pub n_face_judgments: u32,
}

impl Judgment {
    pub fn face_proportion(&self) -> f64 {
        self.n_face_judgments as f64 / self.n_judges as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct JudgmentTable {
    pub entries: BTreeMap<String, Judgment>,
}

#[derive(Deserialize)]
struct JudgmentRow {
    record_id: String,
    n_judges: u32,
    n_face_judgments: u32,
}

impl JudgmentTable {
    pub fn insert(
        &mut self,
        record_id: impl Into<String>,
        n_judges: u32,
        n_face_judgments: u32,
    ) -> std::result::Result<(), String> {
        if n_judges == 0 {
            return Err("n_judges must be at least 1".into());
        }
        if n_face_judgments > n_judges {
            return Err(format!("n_face_judgments {n_face_judgments} exceeds n_judges {n_judges}"));
        }
        let id = record_id.into();
        if self.entries.contains_key(&id) {
            return Err(format!("duplicate record `{id}`"));
        }
        self.entries.insert(id, Judgment { n_judges, n_face_judgments });
        Ok(())
    }

    /// CSV with header `record_id,n_judges,n_face_judgments`.
    pub fn from_csv_reader<R: std::io::Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let mut table = JudgmentTable::default();
        let err = |line: u64, message: String| PsychometricsError::Parse {
            path: source.to_string(),
            line: line as usize,
            message,
        };
        let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
        let mut rec = csv::StringRecord::new();
        loop {
            match rdr.read_record(&mut rec) {
                Ok(true) => {}
                Ok(false) => break,
                Err(e) => return Err(err(e.position().map_or(0, |p| p.line()), e.to_string())),
            }
            let line = rec.position().map_or(0, |p| p.line());
            let row: JudgmentRow = rec.deserialize(Some(&headers)).map_err(|e| err(line, e.to_string()))?;
            table.insert(row.record_id, row.n_judges, row.n_face_judgments).map_err(|m| err(line, m))?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| PsychometricsError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Self::from_csv_reader(f, &path.display().to_string())
    }

    pub fn face_proportion(&self, record_id: &str) -> Option<f64> {
        self.entries.get(record_id).map(Judgment::face_proportion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    /// Bin midpoint, `(2k + 1) / 14`.
    pub x: f64,
    pub n: usize,
    /// `None` for an empty bin (fewer than seven images).
    pub f_observed: Option<f64>,
}

pub fn bin_center(k: usize) -> f64 {
    (2 * k + 1) as f64 / (2 * N_BINS) as f64
}

/// Bin index for rank `i` (0-based, ascending) of `n`.
pub fn bin_of_rank(i: usize, n: usize) -> usize {
    i * N_BINS / n
}

/// Sorts `items` ascending by `key` (ties by record id), assigns rank bins
/// and averages `response` per bin.
pub fn bin_by_key(items: &[(String, f64, f64)]) -> Result<Vec<Bin>> {
    if items.is_empty() {
        return Err(PsychometricsError::Empty);
    }
    let mut order: Vec<&(String, f64, f64)> = items.iter().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let mut sums = [0.0; N_BINS];
    let mut counts = [0usize; N_BINS];
    for (i, item) in order.iter().enumerate() {
        let k = bin_of_rank(i, order.len());
        sums[k] += item.2;
        counts[k] += 1;
    }
    Ok((0..N_BINS)
        .map(|k| Bin {
            x: bin_center(k),
            n: counts[k],
            f_observed: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        })
        .collect())
}

/// Ranks by human face proportion and bins `responses` (record id to a face
/// indicator or probability).
pub fn rank_and_bin(judgments: &JudgmentTable, responses: &[(String, f64)]) -> Result<Vec<Bin>> {
    let items = responses
        .iter()
        .map(|(id, r)| {
            let key = judgments.face_proportion(id).ok_or_else(|| PsychometricsError::MissingJudgment(id.clone()))?;
            Ok((id.clone(), key, *r))
        })
        .collect::<Result<Vec<_>>>()?;
    bin_by_key(&items)
}

/// Exploratory variant: ranks by the model's own `p_face` instead of human
/// judgments.
pub fn rank_and_bin_by_model(p_face: &[(String, f64)], responses: &HashMap<String, f64>) -> Result<Vec<Bin>> {
    let items = p_face
        .iter()
        .map(|(id, p)| {
            let r = responses.get(id).ok_or_else(|| PsychometricsError::MissingJudgment(id.clone()))?;
            Ok((id.clone(), *p, *r))
        })
        .collect::<Result<Vec<_>>>()?;
    bin_by_key(&items)
}

pub fn sigmoid(a: f64, b: f64, x: f64) -> f64 {
    1.0 / (1.0 + (-a * (x - b)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsychometricFit {
    pub a: f64,
    pub b: f64,
    pub rss: f64,
    pub iterations: usize,
    pub points: Vec<(f64, f64)>,
}

/// Largest double below 1.
const ONE_BELOW: f64 = 1.0 - f64::EPSILON / 2.0;

impl PsychometricFit {
    /// Fitted curve, kept inside the open interval (0, 1).
    pub fn eval(&self, x: f64) -> f64 {
        sigmoid(self.a, self.b, x).clamp(f64::MIN_POSITIVE, ONE_BELOW)
    }

    pub fn dense_curve(&self, n: usize) -> Vec<(f64, f64)> {
        (0..n)
            .map(|i| {
                let x = i as f64 / (n - 1).max(1) as f64;
                (x, self.eval(x))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SigmoidFit {
    Fitted(PsychometricFit),
    /// Every observed f is the same value; the slope is undefined.
    Flat {
        value: f64,
    },
}

impl SigmoidFit {
    pub fn fitted(&self) -> Option<&PsychometricFit> {
        match self {
            SigmoidFit::Fitted(f) => Some(f),
            SigmoidFit::Flat { .. } => None,
        }
    }
}

pub fn rss(points: &[(f64, f64)], a: f64, b: f64) -> f64 {
    points.iter().map(|&(x, f)| (f - sigmoid(a, b, x)).powi(2)).sum()
}

pub const GRID: usize = 20;
pub const MAX_ITER: usize = 200;
pub const STEP_TOL: f64 = 1e-9;

pub fn grid_starts() -> Vec<(f64, f64)> {
    let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (GRID - 1) as f64;
    (0..GRID).flat_map(|i| (0..GRID).map(move |j| (lin(0.5, 50.0, i), lin(0.0, 1.0, j)))).collect()
}

/// Gauss–Newton with step halving from one start. Returns (a, b, rss, iterations).
pub fn gauss_newton(points: &[(f64, f64)], a0: f64, b0: f64) -> (f64, f64, f64, usize) {
    let (mut a, mut b) = (a0, b0);
    let mut cur = rss(points, a, b);
    for it in 1..=MAX_ITER {
        // Normal equations for J = [df/da, df/db].
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(x, f) in points {
            let s = sigmoid(a, b, x);
            let ds = s * (1.0 - s);
            let (da, db) = (ds * (x - b), -a * ds);
            let r = f - s;
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let det = jaa * jbb - jab * jab;
        if !(det.abs() > f64::MIN_POSITIVE) {
            return (a, b, cur, it);
        }
        let mut step = ((jbb * ga - jab * gb) / det, (jaa * gb - jab * ga) / det);
        let mut accepted = false;
        for _ in 0..60 {
            let (na, nb) = (a + step.0, b + step.1);
            let next = rss(points, na, nb);
            if next <= cur {
                a = na;
                b = nb;
                cur = next;
                accepted = true;
                break;
            }
            step = (step.0 / 2.0, step.1 / 2.0);
        }
        if !accepted || step.0.abs().max(step.1.abs()) < STEP_TOL {
            return (a, b, cur, it);
        }
    }
    (a, b, cur, MAX_ITER)
}

/// Least-squares sigmoid fit. Every grid start is refined; the winner is the
/// smallest rss, then smallest a, then smallest b.
pub fn fit_sigmoid(points: &[(f64, f64)]) -> Result<SigmoidFit> {
    for &(x, f) in points {
        if !x.is_finite() || !(0.0..=1.0).contains(&f) {
            return Err(PsychometricsError::InvalidPoint(x, f));
        }
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 3 {
        return Err(PsychometricsError::TooFewPoints(xs.len()));
    }
    if points.iter().all(|p| p.1 == points[0].1) {
        return Ok(SigmoidFit::Flat { value: points[0].1 });
    }
    let best = grid_starts()
        .par_iter()
        .map(|&(a0, b0)| gauss_newton(points, a0, b0))
        .filter(|r| r.0.is_finite() && r.1.is_finite() && r.2.is_finite())
        .min_by(|x, y| x.2.total_cmp(&y.2).then(x.0.total_cmp(&y.0)).then(x.1.total_cmp(&y.1)))
        .expect("grid starts have finite rss");
    Ok(SigmoidFit::Fitted(PsychometricFit {
        a: best.0,
        b: best.1,
        rss: best.2,
        iterations: best.3,
        points: points.to_vec(),
    }))
}

pub fn fit_bins(bins: &[Bin]) -> Result<SigmoidFit> {
    let pts: Vec<(f64, f64)> = bins.iter().filter_map(|b| b.f_observed.map(|f| (b.x, f))).collect();
    fit_sigmoid(&pts)
}

/// One observer's curve: binned responses and the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub observer: String,
    pub bins: Vec<Bin>,
    pub fit: SigmoidFit,
}

#[derive(Serialize)]
struct CurveSummary<'a> {
    ranking: &'static str,
    n_bins: usize,
    x_convention: &'static str,
    curves: &'a [Curve],
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `<stem>_bins.csv`, `<stem>_curve.csv` (dense samples) and
/// `<stem>_fit.json` into `dir`.
pub fn write_curves(dir: &Path, stem: &str, prov: &Provenance, ranking: &'static str, curves: &[Curve]) -> Result<()> {
    let out_err = |p: &Path, e: &dyn std::fmt::Display| PsychometricsError::Output {
        path: p.display().to_string(),
        message: e.to_string(),
    };

    let path = dir.join(format!("{stem}_bins.csv"));
    let mut w = prov.csv_writer(&path).map_err(|e| out_err(&path, &e))?;
    let mut header = vec!["x".to_string(), "n".to_string()];
    header.extend(curves.iter().map(|c| c.observer.clone()));
    w.write_record(&header).map_err(|e| out_err(&path, &e))?;
    for k in 0..N_BINS {
        let mut row = vec![bin_center(k).to_string(), curves.first().map_or(0, |c| c.bins[k].n).to_string()];
        row.extend(curves.iter().map(|c| fmt(c.bins[k].f_observed)));
        w.write_record(&row).map_err(|e| out_err(&path, &e))?;
    }
    w.flush().map_err(|e| out_err(&path, &e))?;

    let path = dir.join(format!("{stem}_curve.csv"));
    let mut w = prov.csv_writer(&path).map_err(|e| out_err(&path, &e))?;
    let mut header = vec!["x".to_string()];
    header.extend(curves.iter().map(|c| c.observer.clone()));
    w.write_record(&header).map_err(|e| out_err(&path, &e))?;
    for i in 0..DENSE_SAMPLES {
        let x = i as f64 / (DENSE_SAMPLES - 1) as f64;
        let mut row = vec![x.to_string()];
        row.extend(curves.iter().map(|c| fmt(c.fit.fitted().map(|f| f.eval(x)))));
        w.write_record(&row).map_err(|e| out_err(&path, &e))?;
    }
    w.flush().map_err(|e| out_err(&path, &e))?;

    let path = dir.join(format!("{stem}_fit.json"));
    let summary = CurveSummary {
        ranking,
        n_bins: N_BINS,
        x_convention: "rank i of n goes to bin floor(7i/n); x is the bin midpoint (2k+1)/14",
        curves,
    };
    prov.write_json(&path, &summary).map_err(|e| out_err(&path, &e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_image_per_bin() {
        let mut t = JudgmentTable::default();
        let mut resp = vec![];
        for i in 0..7 {
            t.insert(format!("r{i}"), 30, (i * 4) as u32).unwrap();
            resp.push((format!("r{i}"), if i >= 3 { 1.0 } else { 0.0 }));
        }
        let bins = rank_and_bin(&t, &resp).unwrap();
        let f: Vec<f64> = bins.iter().map(|b| b.f_observed.unwrap()).collect();
        assert_eq!(f, [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(bins[0].x, 1.0 / 14.0);
        assert_eq!(bins[6].x, 13.0 / 14.0);
    }

    #[test]
    fn fourteen_image_hand_tabulation() {
        // Ranked order by face proportion (ties by id): two images per bin.
        let judged = [
            ("a", 3),
            ("b", 1),
            ("c", 9),
            ("d", 0),
            ("e", 3),
            ("f", 5),
            ("g", 12),
            ("h", 2),
            ("i", 20),
            ("j", 7),
            ("k", 30),
            ("l", 18),
            ("m", 25),
            ("n", 14),
        ];
        let mut t = JudgmentTable::default();
        for (id, k) in judged {
            t.insert(id, 30, k).unwrap();
        }
        let resp: Vec<(String, f64)> =
            judged.iter().enumerate().map(|(i, (id, _))| (id.to_string(), (i % 3) as f64 / 2.0)).collect();
        // sorted (a before e on the tie): d b | h a | e f | j c | g n | l i | m k
        // responses:                        0 .5 | .5 0 | .5 1 | 0 1 | 0 .5 | 1 1 | 0 .5
        let expect = [0.25, 0.25, 0.75, 0.5, 0.25, 1.0, 0.25];
        let bins = rank_and_bin(&t, &resp).unwrap();
        for (b, e) in bins.iter().zip(expect) {
            assert_eq!(b.n, 2);
            assert_eq!(b.f_observed, Some(e));
        }
    }

    #[test]
    fn small_sets_report_empty_bins_and_missing_ids() {
        let mut t = JudgmentTable::default();
        t.insert("x", 2, 1).unwrap();
        t.insert("y", 2, 2).unwrap();
        let bins = rank_and_bin(&t, &[("x".into(), 0.0), ("y".into(), 1.0)]).unwrap();
        assert_eq!(bins.iter().filter(|b| b.f_observed.is_none()).count(), 5);
        assert!(matches!(rank_and_bin(&t, &[("z".into(), 0.0)]), Err(PsychometricsError::MissingJudgment(_))));
    }

    #[test]
    fn judgment_csv_validation() {
        let ok = "record_id,n_judges,n_face_judgments\nimg1,30,12\nimg2, 30 ,0\n";
        let t = JudgmentTable::from_csv_reader(ok.as_bytes(), "mem").unwrap();
        assert_eq!(t.face_proportion("img1"), Some(0.4));
        let bad = "record_id,n_judges,n_face_judgments\nimg1,30,31\n";
        assert!(matches!(JudgmentTable::from_csv_reader(bad.as_bytes(), "mem"), Err(PsychometricsError::Parse { .. })));
        let zero = "record_id,n_judges,n_face_judgments\nimg1,0,0\n";
        assert!(JudgmentTable::from_csv_reader(zero.as_bytes(), "mem").is_err());
    }

    #[test]
    fn flat_and_degenerate_inputs() {
        let pts: Vec<(f64, f64)> = (0..7).map(|k| (bin_center(k), 0.5)).collect();
        assert_eq!(fit_sigmoid(&pts).unwrap(), SigmoidFit::Flat { value: 0.5 });
        assert!(matches!(fit_sigmoid(&[(0.1, 0.0), (0.2, 1.0)]), Err(PsychometricsError::TooFewPoints(2))));
        assert!(fit_sigmoid(&[(0.1, 0.0), (0.2, 1.5), (0.3, 1.0)]).is_err());
    }

    #[test]
    fn step_data_stays_inside_unit_interval() {
        let pts: Vec<(f64, f64)> = (0..7).map(|k| (bin_center(k), if k >= 4 { 1.0 } else { 0.0 })).collect();
        let fit = fit_sigmoid(&pts).unwrap();
        let fit = fit.fitted().unwrap();
        for (_, y) in fit.dense_curve(DENSE_SAMPLES) {
            assert!(y > 0.0 && y < 1.0);
        }
        assert_eq!(fit.eval(fit.b), 0.5);
    }
}
