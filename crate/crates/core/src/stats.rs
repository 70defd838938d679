//! Comparison of RMSE distributions by subset resampling.
//!
//! For a pair of methods and a subset size `n_syn`, many index subsets of
//! the experiments are drawn; the fraction of subsets on which method `a`
//! has the smaller mean RMSE estimates the probability that `a` outperforms
//! `b` when only `n_syn` experiments are run.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::RmseTable;
use crate::rng::{self, Purpose};

/// Number of random subsets drawn per probability estimate.
pub const DEFAULT_RESAMPLES: usize = 10_000;

/// Probability threshold above which a difference counts as significant.
pub const SIGNIFICANCE: f64 = 0.95;

pub fn rmse_mean(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("rmse distribution"));
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

/// Fractions of resampled subsets in which `a` beats `b`, `b` beats `a`, or
/// the subset means are exactly equal. The three sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Outperformance {
    pub a_lt_b: f64,
    pub b_lt_a: f64,
    pub ties: f64,
}

fn check_subset(n: usize, n_syn: usize) -> Result<()> {
    if n_syn == 0 {
        return Err(Error::invalid("n_syn must be at least 1"));
    }
    if n_syn > n {
        return Err(Error::invalid(format!("n_syn = {n_syn} exceeds the {n} available experiments")));
    }
    Ok(())
}

/// Paired resampling: each subset of experiment indices, drawn without
/// replacement, is applied to both distributions. Subsets come from the
/// stream `(seed, n_syn)`, so every pair evaluated with the same seed sees
/// the same subsets.
pub fn outperformance_probability(a: &[f64], b: &[f64], n_syn: usize, n_resamples: usize, seed: u64) -> Result<Outperformance> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: a.len(), found: b.len() });
    }
    check_subset(a.len(), n_syn)?;
    if n_resamples == 0 {
        return Err(Error::invalid("n_resamples must be at least 1"));
    }
    let mut rng = rng::stream(seed, n_syn as u64, Purpose::Resample);
    let (mut lt, mut gt) = (0usize, 0usize);
    for _ in 0..n_resamples {
        let idx = sample(&mut rng, a.len(), n_syn);
        let (mut sa, mut sb) = (0.0, 0.0);
        for i in idx.iter() {
            sa += a[i];
            sb += b[i];
        }
        if sa < sb {
            lt += 1;
        } else if sb < sa {
            gt += 1;
        }
    }
    Ok(fractions(lt, gt, n_resamples))
}

fn fractions(lt: usize, gt: usize, n: usize) -> Outperformance {
    let n_f = n as f64;
    Outperformance { a_lt_b: lt as f64 / n_f, b_lt_a: gt as f64 / n_f, ties: (n - lt - gt) as f64 / n_f }
}

/// Unpaired resampling: independent subsets for `a` and `b`, for
/// sensitivity checks against the paired default.
pub fn outperformance_unpaired(a: &[f64], b: &[f64], n_syn: usize, n_resamples: usize, seed: u64) -> Result<Outperformance> {
    check_subset(a.len().min(b.len()), n_syn)?;
    let mut rng = rng::stream(seed, n_syn as u64, Purpose::Resample);
    let (mut lt, mut gt) = (0usize, 0usize);
    for _ in 0..n_resamples {
        let sa: f64 = sample(&mut rng, a.len(), n_syn).iter().map(|i| a[i]).sum();
        let sb: f64 = sample(&mut rng, b.len(), n_syn).iter().map(|i| b[i]).sum();
        if sa < sb {
            lt += 1;
        } else if sb < sa {
            gt += 1;
        }
    }
    Ok(fractions(lt, gt, n_resamples))
}

/// Means of `n_resamples` random subsets of size `n_syn`.
pub fn subset_means(samples: &[f64], n_syn: usize, n_resamples: usize, seed: u64) -> Result<Vec<f64>> {
    check_subset(samples.len(), n_syn)?;
    let mut rng = rng::stream(seed, n_syn as u64, Purpose::Resample);
    Ok((0..n_resamples)
        .map(|_| sample(&mut rng, samples.len(), n_syn).iter().map(|i| samples[i]).sum::<f64>() / n_syn as f64)
        .collect())
}

/// Quotient `q = smaller mean / larger mean` and relative difference
/// `d = 1 - q` of two distributions.
pub fn quotient_and_reldiff(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let (ma, mb) = (rmse_mean(a)?, rmse_mean(b)?);
    quotient_of_means(ma, mb)
}

pub fn quotient_of_means(ma: f64, mb: f64) -> Result<(f64, f64)> {
    let (lo, hi) = if ma <= mb { (ma, mb) } else { (mb, ma) };
    if !(hi > 0.0) || lo < 0.0 {
        return Err(Error::invalid(format!("means must be positive, got {ma} and {mb}")));
    }
    let q = lo / hi;
    Ok((q, 1.0 - q))
}

/// Comparison of one unordered variant pair, oriented so that `better` has
/// the smaller (or equal) mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonResult {
    pub better: String,
    pub worse: String,
    pub n_e: usize,
    pub n_syn: usize,
    pub mean_better: f64,
    pub mean_worse: f64,
    /// Probability that `better` has the smaller subset mean.
    pub p: f64,
    pub p_reverse: f64,
    pub ties: f64,
    pub q: f64,
    pub d: f64,
}

impl ComparisonResult {
    pub fn significant(&self) -> bool {
        self.p > SIGNIFICANCE
    }
}

/// Compares every unordered pair of `variants` at `n_e` and `n_syn`.
pub fn compare_all(
    table: &RmseTable,
    variants: &[String],
    n_e: usize,
    n_syn: usize,
    n_resamples: usize,
    seed: u64,
) -> Result<Vec<ComparisonResult>> {
    let dists: Vec<Vec<f64>> = variants.iter().map(|v| table.distribution(v, n_e)).collect();
    let mut out = Vec::new();
    for i in 0..variants.len() {
        for j in i + 1..variants.len() {
            let (mi, mj) = (rmse_mean(&dists[i])?, rmse_mean(&dists[j])?);
            let (b, w) = if mi <= mj { (i, j) } else { (j, i) };
            let (q, d) = quotient_of_means(mi, mj)?;
            let o = outperformance_probability(&dists[b], &dists[w], n_syn, n_resamples, seed)?;
            out.push(ComparisonResult {
                better: variants[b].clone(),
                worse: variants[w].clone(),
                n_e,
                n_syn,
                mean_better: mi.min(mj),
                mean_worse: mi.max(mj),
                p: o.a_lt_b,
                p_reverse: o.b_lt_a,
                ties: o.ties,
                q,
                d,
            });
        }
    }
    Ok(out)
}

/// Relative differences split by significance, with the extremes used to
/// choose a threshold.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignificanceSummary {
    pub d_plus: Vec<f64>,
    pub d_minus: Vec<f64>,
    /// Smallest significant relative difference.
    pub d_min_plus: Option<f64>,
    /// Largest insignificant relative difference.
    pub d_max_minus: Option<f64>,
    /// The sets overlap, so a threshold has to be chosen by inspection.
    pub manual: bool,
    /// Pairs inside the overlap `[d_min_plus, d_max_minus]`.
    pub offending: Vec<ComparisonResult>,
}

pub fn significance_sets(comparisons: &[ComparisonResult]) -> SignificanceSummary {
    let (plus, minus): (Vec<&ComparisonResult>, Vec<&ComparisonResult>) =
        comparisons.iter().partition(|c| c.significant());
    let d_plus: Vec<f64> = plus.iter().map(|c| c.d).collect();
    let d_minus: Vec<f64> = minus.iter().map(|c| c.d).collect();
    let d_min_plus = d_plus.iter().copied().reduce(f64::min);
    let d_max_minus = d_minus.iter().copied().reduce(f64::max);
    let (manual, offending) = match (d_min_plus, d_max_minus) {
        (Some(lo), Some(hi)) if lo < hi => {
            (true, comparisons.iter().filter(|c| c.d >= lo && c.d <= hi).cloned().collect())
        }
        _ => (false, Vec::new()),
    };
    SignificanceSummary { d_plus, d_minus, d_min_plus, d_max_minus, manual, offending }
}

/// Equal-width histogram over `[min, max]` of `values`; returns
/// `(lower edge, upper edge, count)` per bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts.into_iter().enumerate().map(|(k, c)| (lo + k as f64 * width, lo + (k + 1) as f64 * width, c)).collect()
}

/// Settings for [`write_reports`].
#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub n_syn: Vec<usize>,
    pub n_resamples: usize,
    pub seed: u64,
    pub histogram_bins: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { n_syn: vec![1, 10, 100], n_resamples: DEFAULT_RESAMPLES, seed: 0, histogram_bins: 40 }
    }
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, csv::Writer<fs::File>)> {
    let path = dir.join(name);
    let file = fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
    Ok((path, csv::Writer::from_writer(file)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes every report for `table` into `out` and returns the written paths.
///
/// * `means.csv`: `scenario,variant,n_e,n,mean_rmse,n_diverged`
/// * `quotients.csv`: `n_e,better,worse,mean_better,mean_worse,q,d`
/// * `probabilities_nsyn<k>.csv`: `n_e,a,b,p_a_lt_b,ties` for every ordered pair
/// * `comparisons.csv`: every oriented pair with `p` and its significance
/// * `thresholds.csv`: one row per `n_syn`, one column group per `n_e`
/// * `histograms.csv`: `variant,n_e,n_syn,bin_lo,bin_hi,count` of subset means
///
/// Subset sizes larger than the number of experiments are skipped.
pub fn write_reports(table: &RmseTable, out: &Path, options: &ReportOptions) -> Result<Vec<PathBuf>> {
    let missing = table.missing_pairs();
    if !missing.is_empty() {
        return Err(Error::MissingPairs(missing));
    }
    if table.records.is_empty() {
        return Err(Error::Empty("rmse table"));
    }
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let scenario = table.records[0].scenario.clone();
    if let Some(other) = table.records.iter().find(|r| r.scenario != scenario) {
        return Err(Error::invalid(format!(
            "reports cover one scenario at a time; table mixes {scenario} and {}",
            other.scenario
        )));
    }
    let variants = table.variants();
    let sizes = table.sizes();
    let mut written = Vec::new();

    let (path, mut w) = create(out, "means.csv")?;
    w.write_record(["scenario", "variant", "n_e", "n", "mean_rmse", "n_diverged"])?;
    for v in &variants {
        for &n_e in &sizes {
            let cell = table.cell(v, n_e);
            if cell.is_empty() {
                continue;
            }
            let mean = rmse_mean(&cell.iter().map(|r| r.rmse).collect::<Vec<_>>())?;
            let div = cell.iter().filter(|r| r.diverged).count();
            w.write_record([scenario.clone(), v.clone(), n_e.to_string(), cell.len().to_string(), mean.to_string(), div.to_string()])?;
        }
    }
    w.flush()?;
    written.push(path);

    let (path, mut w) = create(out, "quotients.csv")?;
    w.write_record(["n_e", "better", "worse", "mean_better", "mean_worse", "q", "d"])?;
    for &n_e in &sizes {
        let present: Vec<String> = variants.iter().filter(|v| !table.cell(v, n_e).is_empty()).cloned().collect();
        for c in compare_all(table, &present, n_e, 1, 1, options.seed)? {
            w.write_record([n_e.to_string(), c.better, c.worse, c.mean_better.to_string(), c.mean_worse.to_string(), c.q.to_string(), c.d.to_string()])?;
        }
    }
    w.flush()?;
    written.push(path);

    let (cpath, mut cw) = create(out, "comparisons.csv")?;
    cw.write_record(["n_e", "n_syn", "better", "worse", "mean_better", "mean_worse", "p", "p_reverse", "ties", "q", "d", "significant"])?;
    let mut thresholds: Vec<(usize, usize, SignificanceSummary)> = Vec::new();
    for &n_syn in &options.n_syn {
        let (path, mut w) = create(out, &format!("probabilities_nsyn{n_syn}.csv"))?;
        w.write_record(["n_e", "a", "b", "p_a_lt_b", "ties"])?;
        for &n_e in &sizes {
            let present: Vec<String> = variants.iter().filter(|v| !table.cell(v, n_e).is_empty()).cloned().collect();
            let n_avail = table.cell(&present[0], n_e).len();
            if n_syn > n_avail {
                continue;
            }
            let comps = compare_all(table, &present, n_e, n_syn, options.n_resamples, options.seed)?;
            for c in &comps {
                w.write_record([n_e.to_string(), c.better.clone(), c.worse.clone(), c.p.to_string(), c.ties.to_string()])?;
                w.write_record([n_e.to_string(), c.worse.clone(), c.better.clone(), c.p_reverse.to_string(), c.ties.to_string()])?;
                cw.write_record([
                    n_e.to_string(),
                    n_syn.to_string(),
                    c.better.clone(),
                    c.worse.clone(),
                    c.mean_better.to_string(),
                    c.mean_worse.to_string(),
                    c.p.to_string(),
                    c.p_reverse.to_string(),
                    c.ties.to_string(),
                    c.q.to_string(),
                    c.d.to_string(),
                    c.significant().to_string(),
                ])?;
            }
            if !comps.is_empty() {
                thresholds.push((n_syn, n_e, significance_sets(&comps)));
            }
        }
        w.flush()?;
        written.push(path);
    }
    cw.flush()?;
    written.push(cpath);

    // Table layout: rows (scenario, n_syn), a column group per ensemble size.
    let path = out.join("thresholds.csv");
    let mut text = String::from("scenario,n_syn");
    for n_e in &sizes {
        text.push_str(&format!(",threshold_ne{n_e},d_min_plus_ne{n_e},d_max_minus_ne{n_e},manual_ne{n_e}"));
    }
    text.push('\n');
    for &n_syn in &options.n_syn {
        text.push_str(&format!("{scenario},{n_syn}"));
        for &n_e in &sizes {
            match thresholds.iter().find(|(s, n, _)| *s == n_syn && *n == n_e) {
                Some((_, _, sum)) => {
                    let threshold = if sum.manual { "manual".to_string() } else { fmt_opt(sum.d_min_plus) };
                    text.push_str(&format!(",{threshold},{},{},{}", fmt_opt(sum.d_min_plus), fmt_opt(sum.d_max_minus), sum.manual));
                }
                None => text.push_str(",,,,"),
            }
        }
        text.push('\n');
    }
    fs::write(&path, text).map_err(|e| Error::file(&path, e))?;
    written.push(path);

    let path = out.join("manual_thresholds.txt");
    let mut f = fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
    for (n_syn, n_e, sum) in &thresholds {
        if sum.manual {
            writeln!(
                f,
                "n_e={n_e} n_syn={n_syn}: d_min+={} < d_max-={}",
                fmt_opt(sum.d_min_plus),
                fmt_opt(sum.d_max_minus)
            )
            .map_err(|e| Error::file(&path, e))?;
            for c in &sum.offending {
                writeln!(f, "  {} vs {}: d={} p={} significant={}", c.better, c.worse, c.d, c.p, c.significant())
                    .map_err(|e| Error::file(&path, e))?;
            }
        }
    }
    written.push(path);

    let (path, mut w) = create(out, "histograms.csv")?;
    w.write_record(["variant", "n_e", "n_syn", "bin_lo", "bin_hi", "count"])?;
    for v in &variants {
        for &n_e in &sizes {
            let dist = table.distribution(v, n_e);
            for &n_syn in &options.n_syn {
                if dist.is_empty() || n_syn > dist.len() {
                    continue;
                }
                let means = subset_means(&dist, n_syn, options.n_resamples, options.seed)?;
                for (lo, hi, c) in histogram(&means, options.histogram_bins) {
                    w.write_record([v.clone(), n_e.to_string(), n_syn.to_string(), lo.to_string(), hi.to_string(), c.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, mean: f64, sd: f64, seed: u64) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    #[test]
    fn mean_examples() {
        assert_abs_diff_eq!(rmse_mean(&[0.3, 0.5]).unwrap(), 0.4, epsilon = 1e-15);
        assert_eq!(rmse_mean(&[0.75; 8]).unwrap(), 0.75);
        assert!(rmse_mean(&[]).is_err());
    }

    #[test]
    fn dominance_and_identity() {
        let a: Vec<f64> = (0..50).map(|i| 0.1 + 0.001 * i as f64).collect();
        let b: Vec<f64> = (0..50).map(|i| 0.5 + 0.001 * i as f64).collect();
        for n_syn in [1, 10, 50] {
            assert_eq!(outperformance_probability(&a, &b, n_syn, 500, 1).unwrap().a_lt_b, 1.0);
        }
        let o = outperformance_probability(&a, &a, 10, 500, 1).unwrap();
        assert_eq!((o.a_lt_b, o.b_lt_a, o.ties), (0.0, 0.0, 1.0));
        assert!(outperformance_probability(&a, &b, 51, 10, 1).is_err());
        assert!(outperformance_probability(&a, &b[..10], 1, 10, 1).is_err());
    }

    #[test]
    fn symmetric_populations_give_one_half() {
        let a = gaussian(1000, 0.0, 1.0, 1);
        let b = gaussian(1000, 0.0, 1.0, 2);
        let p = outperformance_probability(&a, &b, 10, DEFAULT_RESAMPLES, 3).unwrap().a_lt_b;
        // Finite populations have slightly different means; allow sampling noise on top.
        let ma = rmse_mean(&a).unwrap();
        let mb = rmse_mean(&b).unwrap();
        assert!((ma - mb).abs() < 0.1);
        assert!((p - 0.5).abs() < 0.1, "p = {p}");
        let u = outperformance_unpaired(&a, &b, 10, DEFAULT_RESAMPLES, 3).unwrap().a_lt_b;
        assert!((u - 0.5).abs() < 0.1, "unpaired p = {u}");
    }

    #[test]
    fn quotient_examples() {
        let (q, d) = quotient_of_means(0.36, 0.40).unwrap();
        assert_abs_diff_eq!(q, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(d, 0.1, epsilon = 1e-12);
        assert_eq!(quotient_of_means(0.4, 0.36).unwrap(), quotient_of_means(0.36, 0.4).unwrap());
        assert_eq!(quotient_and_reldiff(&[0.5], &[0.5]).unwrap(), (1.0, 0.0));
        assert!(quotient_of_means(0.0, 0.0).is_err());
    }

    fn comp(d: f64, p: f64) -> ComparisonResult {
        ComparisonResult {
            better: "a".into(),
            worse: format!("b{d}"),
            n_e: 50,
            n_syn: 1,
            mean_better: 1.0 - d,
            mean_worse: 1.0,
            p,
            p_reverse: 1.0 - p,
            ties: 0.0,
            q: 1.0 - d,
            d,
        }
    }

    #[test]
    fn significance_set_extremes() {
        let all_sig = significance_sets(&[comp(0.1, 1.0), comp(0.2, 1.0)]);
        assert_eq!(all_sig.d_min_plus, Some(0.1));
        assert_eq!(all_sig.d_max_minus, None);
        assert!(!all_sig.manual);

        let overlap = significance_sets(&[comp(0.11, 0.97), comp(0.13, 0.9), comp(0.2, 0.99)]);
        assert_eq!(overlap.d_min_plus, Some(0.11));
        assert_eq!(overlap.d_max_minus, Some(0.13));
        assert!(overlap.manual);
        assert_eq!(overlap.offending.len(), 2);

        let clean = significance_sets(&[comp(0.05, 0.6), comp(0.15, 0.99)]);
        assert!(!clean.manual);
        assert_eq!((clean.d_min_plus, clean.d_max_minus), (Some(0.15), Some(0.05)));
    }

    #[test]
    fn histogram_counts_everything() {
        let h = histogram(&[0.0, 0.5, 1.0, 1.0], 2);
        assert_eq!(h, vec![(0.0, 0.5, 1), (0.5, 1.0, 3)]);
        assert_eq!(histogram(&[2.0, 2.0], 3).iter().map(|b| b.2).sum::<usize>(), 2);
    }

    #[test]
    fn subset_means_narrow_with_size() {
        let pop = gaussian(1000, 0.35, 0.05, 9);
        let sd = |v: &[f64]| {
            let m = rmse_mean(v).unwrap();
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        };
        let s1 = sd(&subset_means(&pop, 1, DEFAULT_RESAMPLES, 1).unwrap());
        let s100 = sd(&subset_means(&pop, 100, DEFAULT_RESAMPLES, 1).unwrap());
        // Without replacement from a finite population the variance shrinks by
        // the extra factor (N - n) / (N - 1).
        let expected = s1 / 10.0 * ((1000.0 - 100.0) / 999.0f64).sqrt();
        assert!((s100 / expected - 1.0).abs() < 0.15, "{s100} vs {expected}");
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(
            a in proptest::collection::vec(0.0f64..1.0, 20),
            b in proptest::collection::vec(0.0f64..1.0, 20),
            n_syn in 1usize..20,
        ) {
            let o = outperformance_probability(&a, &b, n_syn, 200, 5).unwrap();
            prop_assert!((o.a_lt_b + o.b_lt_a + o.ties - 1.0).abs() < 1e-12);
            let r = outperformance_probability(&b, &a, n_syn, 200, 5).unwrap();
            prop_assert_eq!(o.a_lt_b, r.b_lt_a);
        }

        #[test]
        fn quotient_bounds(ma in 0.01f64..2.0, mb in 0.01f64..2.0) {
            let (q, d) = quotient_of_means(ma, mb).unwrap();
            prop_assert!(q <= 1.0 && (0.0..1.0).contains(&d));
        }
    }
}
