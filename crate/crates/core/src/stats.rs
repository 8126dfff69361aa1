//! Nonparametric statistics: one-tailed Wilcoxon signed-rank test, stratified
//! bootstrap confidence intervals, probability of improvement and
//! Spearman/Pearson correlations.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// `m` strata (settings, environments, classes) by `k` trials.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialMatrix {
    values: Array2<f64>,
    strata: Vec<String>,
}

impl TrialMatrix {
    pub fn new(values: Array2<f64>, strata: Vec<String>) -> Result<Self> {
        let (m, k) = values.dim();
        if m == 0 || k < 2 {
            return Err(Error::Shape(format!("trial matrix needs m >= 1 and k >= 2, got {m}x{k}")));
        }
        if strata.len() != m {
            return Err(Error::Shape(format!("{} stratum labels for {m} rows", strata.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("trial matrix contains non-finite values".into()));
        }
        Ok(Self { values, strata })
    }

    /// Rows labelled `0..m`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("ragged trial rows".into()));
        }
        let values = Array2::from_shape_vec((m, k), rows.into_iter().flatten().collect()).expect("rectangular");
        Self::new(values, (0..m).map(|i| i.to_string()).collect())
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn strata(&self) -> &[String] {
        &self.strata
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().expect("nonempty")
    }

    /// Header `stratum,0,1,..`; one row per stratum.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let k = self.values.ncols();
        wtr.write_record(std::iter::once("stratum".to_string()).chain((0..k).map(|j| j.to_string())))?;
        for (label, row) in self.strata.iter().zip(self.values.rows()) {
            wtr.write_record(std::iter::once(label.clone()).chain(row.iter().map(|v| v.to_string())))?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut strata = Vec::new();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let mut it = rec.iter();
            strata.push(it.next().unwrap_or_default().to_string());
            let row = it
                .map(|v| v.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad trial value `{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let m = rows.len();
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("ragged trial rows".into()));
        }
        Self::new(Array2::from_shape_vec((m, k), rows.into_iter().flatten().collect()).expect("rectangular"), strata)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    /// `min(R+, R-)`.
    pub statistic: f64,
    pub r_plus: f64,
    pub r_minus: f64,
    /// One-tailed p-value for the alternative "first sample tends to be larger".
    pub p_value: f64,
    pub method: PMethod,
    pub n: usize,
    pub significant: bool,
}

/// Largest number of nonzero pairs for which the exact null distribution is used.
pub const EXACT_LIMIT: usize = 20;

/// Midranks (1-based) of `xs`.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

struct SignedRanks {
    ranks: Vec<f64>,
    r_plus: f64,
    r_minus: f64,
}

fn signed_ranks(a: &[f64], b: &[f64]) -> Result<SignedRanks> {
    if a.len() != b.len() {
        return Err(Error::Pairing(format!("paired samples differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("paired samples contain non-finite values".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.len() < 5 {
        return Err(Error::InsufficientData(format!("{} nonzero paired differences; need at least 5", d.len())));
    }
    let ranks = midranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let r_plus = d.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let r_minus = d.iter().zip(&ranks).filter(|(d, _)| **d < 0.0).map(|(_, r)| r).sum();
    Ok(SignedRanks { ranks, r_plus, r_minus })
}

/// `P(W <= w)` under the null, where `W` is the rank sum of a uniformly random
/// sign pattern over `ranks`. Ranks are midranks, so doubled ranks are integers.
pub fn exact_lower_tail(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let limit = (2.0 * w).round() as usize;
    let hits: f64 = counts.iter().take(limit.min(total) + 1).sum();
    hits / 2f64.powi(ranks.len() as i32)
}

/// Normal approximation of [`exact_lower_tail`] with continuity and tie correction.
pub fn normal_lower_tail(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let z = (w + 0.5 - mean) / var.sqrt();
    Normal::standard().cdf(z)
}

fn wsrt_with(a: &[f64], b: &[f64], force: Option<PMethod>) -> Result<TestOutcome> {
    let sr = signed_ranks(a, b)?;
    let n = sr.ranks.len();
    let method = force.unwrap_or(if n <= EXACT_LIMIT { PMethod::Exact } else { PMethod::Normal });
    let p = match method {
        PMethod::Exact => exact_lower_tail(&sr.ranks, sr.r_minus),
        PMethod::Normal => normal_lower_tail(&sr.ranks, sr.r_minus),
    }
    .clamp(0.0, 1.0);
    Ok(TestOutcome {
        statistic: sr.r_plus.min(sr.r_minus),
        r_plus: sr.r_plus,
        r_minus: sr.r_minus,
        p_value: p,
        method,
        n,
        significant: p < 0.05,
    })
}

/// One-tailed Wilcoxon signed-rank test of "`a` tends to exceed `b`".
///
/// Zero differences are dropped and tied magnitudes get midranks. The p-value
/// is `P(W- <= R-)`: exact for up to [`EXACT_LIMIT`] nonzero pairs, normal
/// approximation beyond.
pub fn wsrt_one_tailed(a: &[f64], b: &[f64]) -> Result<TestOutcome> {
    wsrt_with(a, b, None)
}

/// [`wsrt_one_tailed`] with the p-value method fixed.
pub fn wsrt_one_tailed_using(a: &[f64], b: &[f64], method: PMethod) -> Result<TestOutcome> {
    wsrt_with(a, b, Some(method))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub n_resamples: usize,
}

pub const DEFAULT_RESAMPLES: usize = 10_000;

fn check_bootstrap_args(n_resamples: usize, level: f64) -> Result<()> {
    if n_resamples < 1000 {
        return Err(Error::Config(format!("need at least 1000 resamples, got {n_resamples}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    Ok(())
}

fn resample(m: &TrialMatrix, rng: &mut ChaCha8Rng) -> TrialMatrix {
    let (rows, k) = m.dim();
    let values = Array2::from_shape_fn((rows, k), |(i, _)| m.values[[i, rng.random_range(0..k)]]);
    TrialMatrix { values, strata: m.strata.clone() }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn percentile_ci(point: f64, mut dist: Vec<f64>, level: f64) -> BootstrapCi {
    dist.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    BootstrapCi { point, low: quantile_sorted(&dist, tail), high: quantile_sorted(&dist, 1.0 - tail), level, n_resamples: dist.len() }
}

fn resample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Percentile bootstrap CI; each resample draws `k` trials with replacement
/// within every stratum. Resample `i` uses its own RNG stream, so results do
/// not depend on evaluation order.
pub fn stratified_bootstrap(
    m: &TrialMatrix,
    aggregator: impl Fn(&TrialMatrix) -> Result<f64>,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    check_bootstrap_args(n_resamples, level)?;
    let point = aggregator(m)?;
    let dist = (0..n_resamples)
        .map(|i| {
            let mut rng = resample_rng(seed, i);
            aggregator(&resample(m, &mut rng)).map_err(|e| Error::Resample { index: i, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(percentile_ci(point, dist, level))
}

/// Two-matrix variant: `x` and `y` are resampled independently within each stratum.
pub fn stratified_bootstrap_pair(
    x: &TrialMatrix,
    y: &TrialMatrix,
    aggregator: impl Fn(&TrialMatrix, &TrialMatrix) -> Result<f64>,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi> {
    check_bootstrap_args(n_resamples, level)?;
    let point = aggregator(x, y)?;
    let dist = (0..n_resamples)
        .map(|i| {
            let mut rng = resample_rng(seed, i);
            let (rx, ry) = (resample(x, &mut rng), resample(y, &mut rng));
            aggregator(&rx, &ry).map_err(|e| Error::Resample { index: i, source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(percentile_ci(point, dist, level))
}

/// Probability of improvement: per stratum, the fraction of trial pairs with
/// `x > y` (ties count one half), averaged over strata.
pub fn poi(x: &TrialMatrix, y: &TrialMatrix) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape(format!("trial matrices differ in shape: {:?} vs {:?}", x.dim(), y.dim())));
    }
    let (m, k) = x.dim();
    let mut half_wins: u64 = 0;
    for (xr, yr) in x.values.rows().into_iter().zip(y.values.rows()) {
        for &a in xr {
            for &b in yr {
                half_wins += match a.partial_cmp(&b) {
                    Some(std::cmp::Ordering::Greater) => 2,
                    Some(std::cmp::Ordering::Equal) => 1,
                    _ => 0,
                };
            }
        }
    }
    Ok(half_wins as f64 / (2 * k * k * m) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoiOutcome {
    pub ci: BootstrapCi,
    /// `P(X > Y) > 0.5` and `0.5` lies outside the interval.
    pub significant: bool,
}

pub fn poi_test(x: &TrialMatrix, y: &TrialMatrix, n_resamples: usize, level: f64, seed: u64) -> Result<PoiOutcome> {
    let ci = stratified_bootstrap_pair(x, y, poi, n_resamples, level, seed)?;
    let significant = ci.point > 0.5 && !(ci.low <= 0.5 && 0.5 <= ci.high);
    Ok(PoiOutcome { ci, significant })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    /// `None` when either series has zero variance.
    pub spearman: Option<f64>,
    pub pearson: Option<f64>,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn constant(xs: &[f64]) -> bool {
    xs.iter().all(|&v| v == xs[0])
}

pub fn correlations(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Shape(format!("correlation needs equal lengths >= 2, got {} and {}", xs.len(), ys.len())));
    }
    if constant(xs) || constant(ys) {
        return Ok(Correlation { spearman: None, pearson: None });
    }
    Ok(Correlation { spearman: pearson(&midranks(xs), &midranks(ys)), pearson: pearson(xs, ys) })
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
