//! Network comparison statistics: normality-gated paired tests, Bonferroni
//! correction, significance levels, ranking metrics and the subjects-vs-significance
//! correlation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Experiment protocol a result belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Within,
    Transfer,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::Within, Mode::Transfer];

    pub fn id(self) -> &'static str {
        match self {
            Mode::Within => "within",
            Mode::Transfer => "transfer",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within" => Ok(Mode::Within),
            "transfer" => Ok(Mode::Transfer),
            other => Err(Error::invalid(format!("unknown mode `{other}` (expected within|transfer)"))),
        }
    }
}

/// Statistic and two-sided p-value of a test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p: f64,
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
}

/// Shapiro–Wilk W and p-value (Royston's approximation).
/// A constant sample yields `p = 0` and `W = 1`.
pub fn normality_test(sample: &[f64]) -> Result<TestOutcome> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::invalid(format!("normality test needs 3..=5000 values, got {n}")));
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if range <= 1e-12 * x[0].abs().max(1.0) {
        log::warn!("normality test on a constant sample; reporting p = 0");
        return Ok(TestOutcome { statistic: 1.0, p: 0.0 });
    }

    let nn2 = n / 2;
    let an = n as f64;
    let mut a = vec![0.0; nn2];
    if n == 3 {
        a[0] = 0.5f64.sqrt();
    } else {
        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let nd = std_normal();
        let m: Vec<f64> = (1..=nn2)
            .map(|i| nd.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
            .collect();
        let summ2 = 2.0 * m.iter().map(|v| v * v).sum::<f64>();
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / an.sqrt();
        let a1 = poly(&C1, rsn) - m[0] / ssumm2;
        let (first_free, fac) = if n > 5 {
            let a2 = -m[1] / ssumm2 + poly(&C2, rsn);
            a[1] = a2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
                / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
                .sqrt();
            (2, fac)
        } else {
            (1, ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a1 * a1)).sqrt())
        };
        a[0] = a1;
        for i in first_free..nn2 {
            a[i] = -m[i] / fac;
        }
    }

    let mean = x.iter().sum::<f64>() / an;
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let num: f64 = (0..nn2).map(|i| a[i] * (x[n - 1 - i] - x[i])).sum();
    let w = (num * num / ss).min(1.0);

    if n == 3 {
        let p = (6.0 / PI * (w.sqrt().asin() - PI / 3.0)).max(0.0);
        return Ok(TestOutcome { statistic: w, p });
    }
    let mut w1 = (1.0 - w).ln();
    let (mean_z, sd_z) = if n <= 11 {
        let gamma = -2.273 + 0.459 * an;
        if w1 >= gamma {
            return Ok(TestOutcome { statistic: w, p: 1e-99 });
        }
        w1 = -(gamma - w1).ln();
        (
            poly(&[0.544, -0.39978, 0.025054, -6.714e-4], an),
            poly(&[1.3822, -0.77857, 0.062767, -0.0020322], an).exp(),
        )
    } else {
        let xx = an.ln();
        (
            poly(&[-1.5861, -0.31082, -0.083751, 0.0038915], xx),
            poly(&[-0.4803, -0.082676, 0.0030302], xx).exp(),
        )
    };
    let p = std_normal().sf((w1 - mean_z) / sd_z);
    Ok(TestOutcome { statistic: w, p })
}

fn paired_differences(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Average ranks (1-based) of `values` plus the sizes of tie groups.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        let base = values[order[start]];
        while end < order.len() && (values[order[end]] - base).abs() <= 1e-12 * base.abs().max(1e-300) {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = avg;
        }
        ties.push(end - start);
        start = end;
    }
    (ranks, ties)
}

/// Exact two-sided signed-rank p-value for observed positive-rank sum `w_plus`
/// given all (possibly averaged) ranks.
pub fn signed_rank_exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &d in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + d] += counts[s];
            }
        }
        reach += d;
    }
    let t = (2.0 * w_plus).round() as usize;
    let total: u64 = 1u64 << ranks.len();
    let le: u64 = counts[..=t.min(max)].iter().sum();
    let ge: u64 = if t > max { 0 } else { counts[t..].iter().sum() };
    (2.0 * le.min(ge) as f64 / total as f64).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
fn signed_rank_normal_p(n: usize, ties: &[usize], w_plus: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * std_normal().sf(z)).min(1.0)
}

/// Largest pair count handled by exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Wilcoxon signed-rank test; statistic is `min(W+, W-)`.
/// Zero differences are dropped; all-zero differences give `p = 1`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<TestOutcome> {
    let d: Vec<f64> = paired_differences(a, b)?.into_iter().filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        return Ok(TestOutcome { statistic: 0.0, p: 1.0 });
    }
    if d.len() < 5 {
        log::warn!("signed-rank test on only {} nonzero differences", d.len());
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let total = (d.len() * (d.len() + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);
    let p = if d.len() <= WILCOXON_EXACT_MAX {
        signed_rank_exact_p(&ranks, w_plus)
    } else {
        signed_rank_normal_p(d.len(), &ties, w_plus)
    };
    Ok(TestOutcome { statistic, p })
}

/// Paired two-sided Student t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestOutcome> {
    let d = paired_differences(a, b)?;
    let n = d.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least 2 pairs"));
    }
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::invalid("paired t-test undefined: differences have zero variance"));
    }
    let t = mean / (var / nf).sqrt();
    let dist = StudentsT::new(0.0, 1.0, nf - 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TestOutcome {
        statistic: t,
        p: (2.0 * dist.sf(t.abs())).min(1.0),
    })
}

pub fn bonferroni(p_values: &[f64], m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::invalid("Bonferroni needs at least one comparison"));
    }
    Ok(p_values.iter().map(|p| (p * m as f64).min(1.0)).collect())
}

/// Ordinal bucket: 0 (ns), 1 (<= 5e-2), 2 (<= 1e-2), 3 (<= 1e-3), 4 (<= 1e-4).
pub fn significance_level(p: f64) -> u8 {
    if p <= 1e-4 {
        4
    } else if p <= 1e-3 {
        3
    } else if p <= 1e-2 {
        2
    } else if p <= 5e-2 {
        1
    } else {
        0
    }
}

pub fn chance_improvement(accuracy: f64, n_classes: usize) -> f64 {
    accuracy - 1.0 / n_classes as f64
}

pub fn transfer_gain(within: f64, transfer: f64) -> f64 {
    transfer - within
}

/// Sample Pearson r with two-sided p from Student t on `n - 2` degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<TestOutcome> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::invalid("pearson inputs differ in length"));
    }
    if n < 3 {
        return Err(Error::invalid("pearson needs at least 3 points"));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::invalid("pearson undefined for a zero-variance input"));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p = if 1.0 - r.abs() < 1e-15 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(TestOutcome { statistic: r, p })
}

/// Fold accuracies of one network on one database under one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracySample {
    pub network: String,
    pub database: String,
    pub mode: Mode,
    /// `(subject, fold) -> accuracy`.
    pub accuracies: BTreeMap<(String, usize), f64>,
}

impl AccuracySample {
    pub fn new(network: impl Into<String>, database: impl Into<String>, mode: Mode) -> Self {
        Self {
            network: network.into(),
            database: database.into(),
            mode,
            accuracies: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, subject: impl Into<String>, fold: usize, accuracy: f64) {
        self.accuracies.insert((subject.into(), fold), accuracy);
    }

    pub fn values(&self) -> Vec<f64> {
        self.accuracies.values().copied().collect()
    }

    pub fn mean(&self) -> f64 {
        self.accuracies.values().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    T,
    Wilcoxon,
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestKind::T => "t",
            TestKind::Wilcoxon => "wilcoxon",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairResult {
    pub a: usize,
    pub b: usize,
    pub raw_p: f64,
    pub adjusted_p: f64,
    pub level: u8,
    pub test: TestKind,
}

/// Pairwise comparison of networks on one database under one mode.
#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceMatrix {
    pub database: String,
    pub mode: Mode,
    pub networks: Vec<String>,
    pub pairs: Vec<PairResult>,
    /// Mean chance improvement per network, same order as `networks`.
    pub chance_improvement: Vec<f64>,
}

impl SignificanceMatrix {
    fn pair(&self, i: usize, j: usize) -> Option<&PairResult> {
        self.pairs
            .iter()
            .find(|p| (p.a, p.b) == (i, j) || (p.a, p.b) == (j, i))
    }

    /// Adjusted p-value between networks `i` and `j` (1 on the diagonal).
    pub fn adjusted_p(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else {
            self.pair(i, j).map_or(1.0, |p| p.adjusted_p)
        }
    }

    pub fn level(&self, i: usize, j: usize) -> u8 {
        if i == j {
            0
        } else {
            self.pair(i, j).map_or(0, |p| p.level)
        }
    }

    pub fn level_sum(&self) -> u32 {
        self.pairs.iter().map(|p| p.level as u32).sum()
    }

    pub fn significant_count(&self) -> u32 {
        self.pairs.iter().filter(|p| p.level >= 1).count() as u32
    }

    /// Networks sorted by descending mean chance improvement.
    pub fn ranking(&self) -> Vec<(String, f64)> {
        let mut rows: Vec<(String, f64)> = self
            .networks
            .iter()
            .cloned()
            .zip(self.chance_improvement.iter().copied())
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        rows
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompareConfig {
    pub alpha: f64,
    /// Bonferroni multiplicity; defaults to the number of network pairs.
    pub comparisons: Option<usize>,
    pub n_classes: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            comparisons: None,
            n_classes: 2,
        }
    }
}

fn is_normal(sample: &[f64], alpha: f64) -> bool {
    sample.len() >= 3 && normality_test(sample).map_or(false, |o| o.p >= alpha)
}

/// Every unordered network pair tested with t when both accuracy samples pass the
/// normality gate, otherwise Wilcoxon; then Bonferroni and significance levels.
pub fn compare_networks(samples: &[AccuracySample], config: &CompareConfig) -> Result<SignificanceMatrix> {
    if samples.len() < 2 {
        return Err(Error::invalid("comparison needs at least two networks"));
    }
    let first = &samples[0];
    for s in samples {
        if s.database != first.database || s.mode != first.mode {
            return Err(Error::invalid(format!(
                "samples mix {}/{} with {}/{}",
                first.database, first.mode, s.database, s.mode
            )));
        }
        if s.accuracies.len() != first.accuracies.len() || !s.accuracies.keys().eq(first.accuracies.keys()) {
            return Err(Error::invalid(format!(
                "(subject, fold) keys of {} do not align with {}",
                s.network, first.network
            )));
        }
        if s.accuracies.is_empty() {
            return Err(Error::invalid(format!("{} has no accuracies", s.network)));
        }
    }
    let values: Vec<Vec<f64>> = samples.iter().map(AccuracySample::values).collect();
    let normal: Vec<bool> = values.iter().map(|v| is_normal(v, config.alpha)).collect();
    let k = samples.len();
    let m = config.comparisons.unwrap_or(k * (k - 1) / 2);

    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let (a, b) = (&values[i], &values[j]);
            let all_zero = a.iter().zip(b).all(|(x, y)| x == y);
            let (raw_p, test) = if all_zero {
                (1.0, if normal[i] && normal[j] { TestKind::T } else { TestKind::Wilcoxon })
            } else if normal[i] && normal[j] {
                match paired_t_test(a, b) {
                    Ok(o) => (o.p, TestKind::T),
                    Err(_) => (wilcoxon_signed_rank(a, b)?.p, TestKind::Wilcoxon),
                }
            } else {
                (wilcoxon_signed_rank(a, b)?.p, TestKind::Wilcoxon)
            };
            let adjusted_p = bonferroni(&[raw_p], m)?[0];
            pairs.push(PairResult {
                a: i,
                b: j,
                raw_p,
                adjusted_p,
                level: significance_level(adjusted_p),
                test,
            });
        }
    }
    Ok(SignificanceMatrix {
        database: first.database.clone(),
        mode: first.mode,
        networks: samples.iter().map(|s| s.network.clone()).collect(),
        pairs,
        chance_improvement: samples
            .iter()
            .map(|s| chance_improvement(s.mean(), config.n_classes))
            .collect(),
    })
}

/// One row of the significance-investigation table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub database: String,
    pub level_sum: u32,
    pub significant_count: u32,
    pub subjects: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceSummary {
    pub rows: Vec<SummaryRow>,
    /// Pearson of subject counts against level sums.
    pub correlation: TestOutcome,
    pub df: usize,
}

/// Correlates subject counts with significance-level sums over the given rows.
pub fn correlate_rows(rows: Vec<SummaryRow>) -> Result<SignificanceSummary> {
    if rows.len() < 3 {
        return Err(Error::invalid(format!(
            "significance summary needs at least 3 databases, got {}",
            rows.len()
        )));
    }
    let x: Vec<f64> = rows.iter().map(|r| r.subjects as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.level_sum as f64).collect();
    let correlation = pearson(&x, &y)?;
    let df = rows.len() - 2;
    Ok(SignificanceSummary { rows, correlation, df })
}

/// Sums levels and counts significant pairs over every matrix (all modes) of each database.
pub fn significance_summary(databases: &[(String, usize, Vec<SignificanceMatrix>)]) -> Result<SignificanceSummary> {
    let rows = databases
        .iter()
        .map(|(name, subjects, matrices)| SummaryRow {
            database: name.clone(),
            level_sum: matrices.iter().map(SignificanceMatrix::level_sum).sum(),
            significant_count: matrices.iter().map(SignificanceMatrix::significant_count).sum(),
            subjects: *subjects,
        })
        .collect();
    correlate_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn shapiro_matches_reference_values() {
        // reference values from an independent Shapiro-Wilk implementation
        let x: Vec<f64> = (1..=10).map(f64::from).chain([30.0]).collect();
        let o = normality_test(&x).unwrap();
        assert!((o.statistic - 0.69945).abs() < 1e-4, "{o:?}");
        assert!((o.p - 4.6024e-4).abs() < 1e-6, "{o:?}");
        let o = normality_test(&[0.1, 0.4, 0.2, 0.9, 0.5]).unwrap();
        assert!((o.statistic - 0.94062).abs() < 1e-4, "{o:?}");
        assert!((o.p - 0.67032).abs() < 1e-4, "{o:?}");
    }

    #[test]
    fn shapiro_monte_carlo() {
        let mut uniform_rejects = 0;
        let mut gauss_accepts = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Vec<f64> = (0..50).map(|_| rng.gen::<f64>()).collect();
            let g: Vec<f64> = (0..50).map(|_| StandardNormal.sample(&mut rng)).collect();
            let pu = normality_test(&u).unwrap();
            let pg = normality_test(&g).unwrap();
            assert!(pu.statistic <= 1.0 && pg.statistic <= 1.0);
            uniform_rejects += (pu.p < 0.05) as usize;
            gauss_accepts += (pg.p >= 0.05) as usize;
        }
        assert!(uniform_rejects > 50, "{uniform_rejects}");
        assert!(gauss_accepts >= 90, "{gauss_accepts}");
    }

    #[test]
    fn shapiro_constant_sample() {
        assert_eq!(normality_test(&[2.0; 8]).unwrap().p, 0.0);
        assert!(normality_test(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn wilcoxon_examples() {
        let a = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        assert_eq!(wilcoxon_signed_rank(&a, &a).unwrap().p, 1.0);
        let d: Vec<f64> = (1..=6).map(f64::from).collect();
        let o = wilcoxon_signed_rank(&d, &[0.0; 6]).unwrap();
        assert_eq!(o.p, 0.03125);
        assert_eq!(o.statistic, 0.0);
    }

    #[test]
    fn wilcoxon_normal_approximation_tracks_exact() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.5)).collect();
            let (ranks, ties) = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
            let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
            let approx = signed_rank_normal_p(30, &ties, w_plus);
            let exact = signed_rank_exact_p(&ranks, w_plus);
            assert!((approx - exact).abs() < 0.01, "{approx} vs {exact}");
        }
    }

    #[test]
    fn t_test_examples() {
        let o = paired_t_test(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]).unwrap();
        assert_eq!(o.statistic, 0.0);
        assert!((o.p - 1.0).abs() < 1e-12);
        assert!(paired_t_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(paired_t_test(&[1.5, 2.5, 3.5], &[1.0, 2.0, 3.0]).is_err());
    }

    /// Two-sided Student t tail by composite Simpson integration of the density.
    fn t_two_sided_quadrature(t: f64, df: f64) -> f64 {
        let ln_c = statrs::function::gamma::ln_gamma((df + 1.0) / 2.0)
            - statrs::function::gamma::ln_gamma(df / 2.0)
            - 0.5 * (df * PI).ln();
        let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let n = 200_000;
        let h = t / n as f64;
        let mut s = pdf(0.0) + pdf(t);
        for i in 1..n {
            s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        1.0 - 2.0 * s * h / 3.0
    }

    #[test]
    fn t_test_matches_quadrature() {
        let d = [0.5, 0.6, 0.7, 0.8, 0.9];
        let o = paired_t_test(&d, &[0.0; 5]).unwrap();
        let mean = 0.7;
        let sd = (0.1f64 / 4.0).sqrt();
        assert!((o.statistic - mean / (sd / 5f64.sqrt())).abs() < 1e-9);
        let oracle = t_two_sided_quadrature(o.statistic, 4.0);
        assert!((o.p - oracle).abs() < 1e-6, "{} vs {oracle}", o.p);
    }

    #[test]
    fn bonferroni_and_levels() {
        assert_eq!(bonferroni(&[0.01, 0.5], 10).unwrap(), vec![0.1, 1.0]);
        let adj = bonferroni(&[0.004], 10).unwrap()[0];
        assert!((adj - 0.04).abs() < 1e-15);
        assert_eq!(significance_level(adj), 1);
        assert!(bonferroni(&[0.1], 0).is_err());
        assert_eq!(significance_level(0.004), 2);
        assert_eq!(significance_level(1e-4), 4);
        assert_eq!(significance_level(0.06), 0);
        assert_eq!(significance_level(0.05), 1);
        assert_eq!(significance_level(1e-3), 3);
        assert_eq!(significance_level(1e-2), 2);
    }

    #[test]
    fn ranking_metrics() {
        assert!((chance_improvement(0.725, 2) - 0.225).abs() < 1e-12);
        assert!(chance_improvement(0.25, 4).abs() < 1e-12);
        assert!((chance_improvement(0.4646, 4) - 0.2146).abs() < 1e-12);
        assert!((transfer_gain(0.719, 0.733) - 0.0141).abs() < 5e-4);
        assert_eq!(transfer_gain(0.6, 0.6), 0.0);
        let deep = [0.1557, 0.1418, 0.0708, 0.0614];
        assert!((deep.iter().sum::<f64>() / 4.0 - 0.1075).abs() < 1e-3);
    }

    #[test]
    fn pearson_examples() {
        let x = [105.0, 108.0, 25.0, 18.0, 9.0];
        let y = [63.0, 49.0, 45.0, 31.0, 0.0];
        let o = pearson(&x, &y).unwrap();
        assert!((o.statistic - 0.7709).abs() < 1e-4);
        assert!((o.p - 0.1270).abs() < 1e-3);
        let lin: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &lin).unwrap().statistic - 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 5]).is_err());
    }

    fn sample(net: &str, values: &[f64]) -> AccuracySample {
        let mut s = AccuracySample::new(net, "synthetic", Mode::Within);
        for (i, v) in values.iter().enumerate() {
            s.push(format!("s{}", i / 5), i % 5, *v);
        }
        s
    }

    #[test]
    fn compare_identical_and_shifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base: Vec<f64> = (0..50).map(|_| rng.gen_range(0.55..0.8)).collect();
        let shifted: Vec<f64> = base.iter().map(|v| v + 0.1 + rng.gen_range(-0.03..0.03)).collect();
        let a = sample("a", &base);
        let m = compare_networks(&[a.clone(), a.clone()], &CompareConfig::default()).unwrap();
        assert_eq!(m.adjusted_p(0, 1), 1.0);
        assert_eq!(m.significant_count(), 0);
        let b = sample("b", &shifted);
        let c = sample("c", &base);
        let m = compare_networks(&[a, b, c], &CompareConfig::default()).unwrap();
        assert!(m.adjusted_p(0, 1) < 0.05);
        assert_eq!(m.adjusted_p(0, 1), m.adjusted_p(1, 0));
        assert_eq!(m.adjusted_p(2, 2), 1.0);
        assert_eq!(m.ranking()[0].0, "b");
    }

    #[test]
    fn compare_rejects_misaligned() {
        let a = sample("a", &[0.5, 0.6, 0.7]);
        let b = sample("b", &[0.5, 0.6]);
        assert!(compare_networks(&[a, b], &CompareConfig::default()).is_err());
    }

    #[test]
    fn table5_summary() {
        let rows: Vec<SummaryRow> = [("physionet", 63, 18, 105), ("giga", 49, 15, 108), ("ttk", 45, 16, 25), ("bci_iv_2a", 31, 15, 18), ("bci_iv_2a_merged", 0, 0, 9)]
            .iter()
            .map(|&(d, s, c, n)| SummaryRow {
                database: d.into(),
                level_sum: s,
                significant_count: c,
                subjects: n,
            })
            .collect();
        assert!(rows.iter().all(|r| r.level_sum >= r.significant_count));
        let s = correlate_rows(rows).unwrap();
        assert_eq!(s.df, 3);
        assert!((s.correlation.statistic - 0.7709).abs() < 1e-4);
        assert!((s.correlation.p - 0.127014).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn levels_monotone(p in 0.0f64..1.0, q in 0.0f64..1.0) {
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            prop_assert!(significance_level(lo) >= significance_level(hi));
        }

        #[test]
        fn pearson_symmetric_and_affine_invariant(
            xs in proptest::collection::vec(-100.0f64..100.0, 4..20),
            scale in 0.1f64..10.0,
            shift in -50.0f64..50.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ys: Vec<f64> = xs.iter().map(|x| x + rng.gen_range(-50.0..50.0)).collect();
            if let (Ok(a), Ok(b)) = (pearson(&xs, &ys), pearson(&ys, &xs)) {
                prop_assert!((a.statistic - b.statistic).abs() < 1e-12);
                let moved: Vec<f64> = xs.iter().map(|x| scale * x + shift).collect();
                let c = pearson(&moved, &ys).unwrap();
                prop_assert!((a.statistic - c.statistic).abs() < 1e-9);
            }
        }
    }
}
