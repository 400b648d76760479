//! Statistics kernel: Pearson correlation, Student/Welch t-tests, Cohen's d,
//! Bonferroni correction and percentile bootstrap intervals.
//!
//! Resampling uses ChaCha8 (`rand_chacha`). Resample `i` of a bootstrap run
//! with seed `s` draws from `ChaCha8Rng::seed_from_u64(s)` switched to stream
//! `i`; an index in `0..n` is the high 64 bits of `next_u64() * n`. Results are
//! therefore independent of thread scheduling and reproducible elsewhere.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("incomplete beta continued fraction did not converge (x = {x}, a = {a}, b = {b})")]
    NoConvergence { x: f64, a: f64, b: f64 },
    #[error("statistic was non-finite on {bad} of {total} resamples")]
    NonFiniteStatistic { bad: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Sample Pearson correlation in 64-bit. `Ok(None)` when either input is
/// constant (the correlation is undefined).
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew { needed: 3, got: x.len() });
    }
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let da = a - mx;
        let db = b - my;
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

/// Two-tailed p-value of a Pearson correlation over `n` pairs (t-test with
/// n - 2 degrees of freedom).
pub fn pearson_p_value(r: f64, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(StatsError::TooFew { needed: 3, got: n });
    }
    if r.abs() >= 1.0 {
        return Ok(0.0);
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    student_t_two_tailed(t, df)
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance (n - 1 denominator).
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Regularized incomplete beta I_x(a, b), continued fraction evaluated with
/// the modified Lentz method (tolerance 1e-12, at most 300 iterations).
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) || a <= 0.0 || b <= 0.0 {
        return Err(StatsError::InvalidArgument(format!(
            "incomplete beta needs 0 <= x <= 1, a > 0, b > 0 (x = {x}, a = {a}, b = {b})"
        )));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_continued_fraction(x, a, b)? / a)
    } else {
        Ok(1.0 - front * beta_continued_fraction(1.0 - x, b, a)? / b)
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    const TOL: f64 = 1e-12;
    const MAX_ITER: usize = 300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // even step
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // odd step
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < TOL {
            return Ok(h);
        }
    }
    Err(StatsError::NoConvergence { x, a, b })
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> Result<f64> {
    if df <= 0.0 || df.is_nan() {
        return Err(StatsError::InvalidArgument(format!("df must be > 0, got {df}")));
    }
    if t.is_infinite() {
        return Ok(if t > 0.0 { 1.0 } else { 0.0 });
    }
    let tail = 0.5 * regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5)?;
    Ok(if t >= 0.0 { 1.0 - tail } else { tail })
}

/// Two-tailed p-value P(|T| >= |t|).
pub fn student_t_two_tailed(t: f64, df: f64) -> Result<f64> {
    if df <= 0.0 || df.is_nan() {
        return Err(StatsError::InvalidArgument(format!("df must be > 0, got {df}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    Ok(regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5)?.clamp(0.0, 1.0))
}

pub fn bonferroni(p_raw: f64, family_size: usize) -> f64 {
    (p_raw * family_size.max(1) as f64).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestKind {
    OneSample { mu0: f64 },
    Paired,
    Welch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub test: TestKind,
    pub t: f64,
    pub df: f64,
    pub p_raw: f64,
    pub p_corrected: f64,
    /// Cohen's d; see `d_formula` for the denominator used.
    pub d: f64,
    pub d_formula: String,
    pub family_size: usize,
    pub mean_difference: f64,
}

impl StatResult {
    /// Re-applies Bonferroni correction for a family of `family_size` tests.
    pub fn with_family(mut self, family_size: usize) -> Self {
        self.family_size = family_size.max(1);
        self.p_corrected = bonferroni(self.p_raw, self.family_size);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TestOutcome {
    Defined(StatResult),
    Undefined { test: TestKind, reason: String },
}

impl TestOutcome {
    pub fn result(&self) -> Option<&StatResult> {
        match self {
            TestOutcome::Defined(r) => Some(r),
            TestOutcome::Undefined { .. } => None,
        }
    }

    pub fn with_family(self, family_size: usize) -> Self {
        match self {
            TestOutcome::Defined(r) => TestOutcome::Defined(r.with_family(family_size)),
            u => u,
        }
    }
}

/// t-test of the requested kind. `b` is required for `Paired` and `Welch`
/// and ignored for `OneSample`. The returned result has family size 1.
pub fn t_test(kind: TestKind, a: &[f64], b: Option<&[f64]>) -> Result<TestOutcome> {
    if a.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, got: a.len() });
    }
    match kind {
        TestKind::OneSample { mu0 } => {
            let diff = mean(a) - mu0;
            Ok(single_sample_outcome(kind, diff, variance(a).sqrt(), a.len(), "mean difference / SD"))
        }
        TestKind::Paired => {
            let b = b.ok_or_else(|| StatsError::InvalidArgument("paired test needs two samples".into()))?;
            if a.len() != b.len() {
                return Err(StatsError::LengthMismatch(a.len(), b.len()));
            }
            let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let md = mean(&diffs);
            Ok(single_sample_outcome(
                kind,
                md,
                variance(&diffs).sqrt(),
                diffs.len(),
                "mean difference / SD of differences",
            ))
        }
        TestKind::Welch => {
            let b = b.ok_or_else(|| StatsError::InvalidArgument("Welch test needs two samples".into()))?;
            if b.len() < 2 {
                return Err(StatsError::TooFew { needed: 2, got: b.len() });
            }
            let (na, nb) = (a.len() as f64, b.len() as f64);
            let (va, vb) = (variance(a), variance(b));
            let md = mean(a) - mean(b);
            let (sa, sb) = (va / na, vb / nb);
            let se2 = sa + sb;
            let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
            if se2 == 0.0 {
                return Ok(zero_variance_outcome(kind, md, na + nb - 2.0, "mean difference / pooled SD"));
            }
            let t = md / se2.sqrt();
            let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
            let p = student_t_two_tailed(t, df)?;
            Ok(TestOutcome::Defined(StatResult {
                test: kind,
                t,
                df,
                p_raw: p,
                p_corrected: p,
                d: md / pooled,
                d_formula: "mean difference / pooled SD".into(),
                family_size: 1,
                mean_difference: md,
            }))
        }
    }
}

fn single_sample_outcome(kind: TestKind, md: f64, sd: f64, n: usize, d_formula: &str) -> TestOutcome {
    let df = (n - 1) as f64;
    if sd == 0.0 {
        return zero_variance_outcome(kind, md, df, d_formula);
    }
    let t = md / (sd / (n as f64).sqrt());
    // df >= 1 and t finite here, so the p-value cannot fail.
    let p = student_t_two_tailed(t, df).unwrap_or(f64::NAN);
    TestOutcome::Defined(StatResult {
        test: kind,
        t,
        df,
        p_raw: p,
        p_corrected: p,
        d: md / sd,
        d_formula: d_formula.into(),
        family_size: 1,
        mean_difference: md,
    })
}

fn zero_variance_outcome(kind: TestKind, md: f64, df: f64, d_formula: &str) -> TestOutcome {
    if md == 0.0 {
        TestOutcome::Defined(StatResult {
            test: kind,
            t: 0.0,
            df,
            p_raw: 1.0,
            p_corrected: 1.0,
            d: 0.0,
            d_formula: d_formula.into(),
            family_size: 1,
            mean_difference: 0.0,
        })
    } else {
        TestOutcome::Undefined {
            test: kind,
            reason: format!("zero variance with nonzero mean difference {md}; t is infinite"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { n_resamples: 2000, level: 0.95, seed: 0 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_resamples < 100 {
            return Err(StatsError::InvalidArgument(format!("n_resamples must be >= 100, got {}", self.n_resamples)));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(StatsError::InvalidArgument(format!("level must be in (0,1), got {}", self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCI {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub n_resamples: usize,
    pub point_estimate: f64,
    pub seed: u64,
}

/// Generator for resample `index` of a run seeded with `seed`.
pub fn resample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform index in `0..n` (multiply-high mapping of one 64-bit draw).
pub fn draw_index(rng: &mut impl RngCore, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// Evaluates `replicate` once per resample on its own substream and returns
/// the finite replicate values in resample order. Aborts when more than 1%
/// of replicates are non-finite.
pub fn bootstrap_replicates<F>(cfg: &BootstrapConfig, replicate: F) -> Result<Vec<f64>>
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    cfg.validate()?;
    let values: Vec<f64> =
        (0..cfg.n_resamples as u64).into_par_iter().map(|i| replicate(&mut resample_rng(cfg.seed, i))).collect();
    let bad = values.iter().filter(|v| !v.is_finite()).count();
    if bad * 100 > cfg.n_resamples {
        return Err(StatsError::NonFiniteStatistic { bad, total: cfg.n_resamples });
    }
    Ok(values.into_iter().filter(|v| v.is_finite()).collect())
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval at `level` over replicate values.
pub fn percentile_interval(replicates: &[f64], level: f64) -> (f64, f64) {
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    (quantile_sorted(&sorted, alpha / 2.0), quantile_sorted(&sorted, 1.0 - alpha / 2.0))
}

/// Percentile bootstrap CI of `statistic` over with-replacement resamples
/// of `samples` (same size as the input).
pub fn bootstrap_ci<T, F>(samples: &[T], statistic: F, cfg: &BootstrapConfig) -> Result<BootstrapCI>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> f64 + Sync,
{
    if samples.is_empty() {
        return Err(StatsError::TooFew { needed: 1, got: 0 });
    }
    let n = samples.len();
    let replicates = bootstrap_replicates(cfg, |rng| {
        let resample: Vec<T> = (0..n).map(|_| samples[draw_index(rng, n)].clone()).collect();
        statistic(&resample)
    })?;
    let (lower, upper) = percentile_interval(&replicates, cfg.level);
    Ok(BootstrapCI {
        lower,
        upper,
        level: cfg.level,
        n_resamples: cfg.n_resamples,
        point_estimate: statistic(samples),
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn pearson_perfect_relations() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(pearson_r(&x, &x).unwrap(), Some(1.0));
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 7.0).collect();
        assert!((pearson_r(&x, &y).unwrap().unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn pearson_hand_fixture() {
        // x mean 2.5, y mean 2.75; sxy = 5.5, sxx = 5, syy = 8.75
        let r = pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 5.0]).unwrap().unwrap();
        let expected = 5.5 / (5.0f64 * 8.75).sqrt();
        assert!((r - 0.831_521_840_620_299_9).abs() < 1e-12);
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn pearson_constant_and_errors() {
        assert_eq!(pearson_r(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert_eq!(pearson_r(&[1.0, 2.0], &[1.0, 2.0]), Err(StatsError::TooFew { needed: 3, got: 2 }));
        assert_eq!(pearson_r(&[1.0, 2.0, 3.0], &[1.0, 2.0]), Err(StatsError::LengthMismatch(3, 2)));
    }

    #[test]
    fn one_sample_hand_fixture() {
        let out = t_test(TestKind::OneSample { mu0: 5.0 }, &[4.0, 5.0, 6.0, 7.0], None).unwrap();
        let r = out.result().unwrap();
        // mean 5.5, s = sqrt(5/3), se = s / 2
        let s = (5.0f64 / 3.0).sqrt();
        assert!((r.t - 0.5 / (s / 2.0)).abs() < 1e-12);
        assert!((r.t - 0.774_596_669_241_483_4).abs() < 1e-12);
        assert_eq!(r.df, 3.0);
        assert!((r.p_raw - 0.495_025_346_059_711).abs() < 1e-10);

        // (5.5 - 4.75) / (s / 2) = 1.1619, two-tailed p = 0.3293
        let r = t_test(TestKind::OneSample { mu0: 4.75 }, &[4.0, 5.0, 6.0, 7.0], None).unwrap();
        let r = r.result().unwrap();
        assert!((r.t - 1.161_895_003_862_225).abs() < 1e-10);
        assert!((r.p_raw - 0.329_316_292_545_384_3).abs() < 1e-10);
    }

    #[test]
    fn zero_difference_cases() {
        let a = [1.0, 2.0, 3.0];
        let paired = t_test(TestKind::Paired, &a, Some(&a)).unwrap();
        let r = paired.result().unwrap();
        assert_eq!((r.t, r.p_raw), (0.0, 1.0));
        let welch = t_test(TestKind::Welch, &a, Some(&a)).unwrap();
        let r = welch.result().unwrap();
        assert_eq!((r.t, r.p_raw), (0.0, 1.0));
    }

    #[test]
    fn zero_variance_nonzero_difference_is_undefined() {
        let out = t_test(TestKind::Welch, &[1.0, 1.0], Some(&[0.0, 0.0])).unwrap();
        assert!(matches!(out, TestOutcome::Undefined { .. }));
    }

    #[test]
    fn t_cdf_against_statrs() {
        for &df in &[1.0, 2.5, 7.0, 30.0, 299.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for &t in &[-6.0, -2.0, -0.3, 0.0, 0.7, 1.96, 4.0] {
                let ours = student_t_cdf(t, df).unwrap();
                assert!((ours - dist.cdf(t)).abs() < 1e-10, "df {df} t {t}");
            }
        }
    }

    #[test]
    fn t_cdf_df1_is_cauchy() {
        for i in -40..=40 {
            let t = i as f64 * 0.37;
            let closed = 0.5 + t.atan() / std::f64::consts::PI;
            assert!((student_t_cdf(t, 1.0).unwrap() - closed).abs() < 1e-10);
        }
    }

    #[test]
    fn bonferroni_examples() {
        assert!((bonferroni(0.01, 5) - 0.05).abs() < 1e-15);
        assert_eq!(bonferroni(0.4, 5), 1.0);
        assert_eq!(bonferroni(0.123, 1), 0.123);
    }

    #[test]
    fn incomplete_beta_rejects_bad_args() {
        assert!(regularized_incomplete_beta(1.5, 1.0, 1.0).is_err());
        assert!(regularized_incomplete_beta(0.5, 0.0, 1.0).is_err());
        // I_x(1,1) = x
        assert!((regularized_incomplete_beta(0.3, 1.0, 1.0).unwrap() - 0.3).abs() < 1e-14);
    }

    #[test]
    fn bootstrap_constant_samples() {
        let cfg = BootstrapConfig { n_resamples: 200, level: 0.95, seed: 3 };
        let ci = bootstrap_ci(&[2.5f64; 10], |s| mean(s), &cfg).unwrap();
        assert_eq!((ci.lower, ci.upper, ci.point_estimate), (2.5, 2.5, 2.5));
    }

    #[test]
    fn bootstrap_validates_config() {
        let cfg = BootstrapConfig { n_resamples: 50, level: 0.95, seed: 0 };
        assert!(bootstrap_ci(&[1.0f64, 2.0], |s| mean(s), &cfg).is_err());
        let cfg = BootstrapConfig { n_resamples: 100, level: 1.0, seed: 0 };
        assert!(bootstrap_ci(&[1.0f64, 2.0], |s| mean(s), &cfg).is_err());
        assert!(bootstrap_ci::<f64, _>(&[], |s| mean(s), &BootstrapConfig::default()).is_err());
    }

    #[test]
    fn bootstrap_aborts_on_non_finite() {
        let cfg = BootstrapConfig { n_resamples: 200, level: 0.9, seed: 1 };
        let err = bootstrap_ci(&[1.0f64, 2.0, 3.0], |_| f64::NAN, &cfg).unwrap_err();
        assert_eq!(err, StatsError::NonFiniteStatistic { bad: 200, total: 200 });
    }

    #[test]
    fn draw_index_stays_in_range() {
        let mut rng = resample_rng(9, 0);
        for n in 1..50 {
            for _ in 0..20 {
                assert!(draw_index(&mut rng, n) < n);
            }
        }
    }
}
