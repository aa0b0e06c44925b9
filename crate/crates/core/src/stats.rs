//! Small statistics toolbox shared by the estimators and the test suites:
//! summary statistics, two-sample Kolmogorov-Smirnov, chi-square tests,
//! one-sided Mann-Whitney, least-squares slopes, and exponential tail fits.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn std_err(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (sample_var(xs) / xs.len() as f64).sqrt()
}

/// Mean with a normal-approximation 95% confidence interval.
pub fn mean_ci95(xs: &[f64]) -> (f64, f64, f64) {
    let m = mean(xs);
    let se = std_err(xs);
    (m, m - 1.96 * se, m + 1.96 * se)
}

/// Wald 95% interval for a binomial proportion.
pub fn proportion_ci95(successes: u64, trials: u64) -> (f64, f64, f64) {
    if trials == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = successes as f64 / trials as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    (p, (p - 1.96 * se).max(0.0), (p + 1.96 * se).min(1.0))
}

#[derive(Clone, Copy, Debug)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
///
/// With atoms in the data the p-value is conservative, which is the safe
/// direction for the equality-in-law assertions used here.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    assert!(!a.is_empty() && !b.is_empty(), "ks on empty sample");
    let mut a: Vec<f64> = a.to_vec();
    let mut b: Vec<f64> = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        let fa = i as f64 / n as f64;
        let fb = j as f64 / m as f64;
        d = d.max((fa - fb).abs());
    }
    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    let sq = ne.sqrt();
    let lambda = (sq + 0.12 + 0.11 / sq) * d;
    KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    }
}

/// Plain two-sample KS statistic (no p-value), for distance thresholds.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    ks_two_sample(a, b).statistic
}

#[derive(Clone, Copy, Debug)]
pub struct Chi2Result {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

fn chi2_survival(stat: f64, df: usize) -> f64 {
    if df == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(df as f64).expect("positive df");
    (1.0 - dist.cdf(stat)).clamp(0.0, 1.0)
}

/// Goodness-of-fit chi-square against given expected counts.
/// Bins with tiny expectation must be merged by the caller.
pub fn chi2_gof(observed: &[f64], expected: &[f64]) -> Chi2Result {
    assert_eq!(observed.len(), expected.len());
    let mut stat = 0.0;
    for (o, e) in observed.iter().zip(expected) {
        if *e > 0.0 {
            stat += (o - e) * (o - e) / e;
        }
    }
    let df = observed.len().saturating_sub(1);
    Chi2Result {
        statistic: stat,
        df,
        p_value: chi2_survival(stat, df),
    }
}

/// Chi-square GOF of observed nonnegative integer counts against a Poisson
/// law. Bins are merged from the upper tail until every expected count is
/// at least five.
pub fn poisson_gof(samples: &[u64], lambda: f64) -> Chi2Result {
    let n = samples.len() as f64;
    let max = samples.iter().copied().max().unwrap_or(0) as usize;
    // pmf via recurrence, numerically fine for the lambdas used here
    let mut pmf = vec![0.0f64; max + 2];
    pmf[0] = (-lambda).exp();
    for k in 1..pmf.len() {
        pmf[k] = pmf[k - 1] * lambda / k as f64;
    }
    let mut observed = vec![0.0f64; max + 2];
    for &s in samples {
        observed[s as usize] += 1.0;
    }
    // tail bin
    let tail_p = (1.0 - pmf.iter().sum::<f64>()).max(0.0);
    *pmf.last_mut().unwrap() += tail_p;
    let mut obs_bins: Vec<f64> = Vec::new();
    let mut exp_bins: Vec<f64> = Vec::new();
    let (mut acc_o, mut acc_e) = (0.0, 0.0);
    for k in 0..pmf.len() {
        acc_o += observed[k];
        acc_e += pmf[k] * n;
        if acc_e >= 5.0 {
            obs_bins.push(acc_o);
            exp_bins.push(acc_e);
            acc_o = 0.0;
            acc_e = 0.0;
        }
    }
    if acc_e > 0.0 {
        if let (Some(o), Some(e)) = (obs_bins.last_mut(), exp_bins.last_mut()) {
            *o += acc_o;
            *e += acc_e;
        } else {
            obs_bins.push(acc_o);
            exp_bins.push(acc_e);
        }
    }
    chi2_gof(&obs_bins, &exp_bins)
}

/// Chi-square independence test on a contingency table of counts.
/// Rows/columns with tiny totals are merged into their neighbor.
pub fn chi2_independence(table: &[Vec<u64>]) -> Chi2Result {
    let mut t: Vec<Vec<f64>> = table
        .iter()
        .map(|r| r.iter().map(|&c| c as f64).collect())
        .collect();
    // merge sparse rows, then sparse columns
    merge_sparse_rows(&mut t, 5.0);
    let mut tt = transpose(&t);
    merge_sparse_rows(&mut tt, 5.0);
    let t = transpose(&tt);

    let rows = t.len();
    let cols = if rows > 0 { t[0].len() } else { 0 };
    if rows < 2 || cols < 2 {
        return Chi2Result {
            statistic: 0.0,
            df: 0,
            p_value: 1.0,
        };
    }
    let total: f64 = t.iter().flatten().sum();
    let row_sums: Vec<f64> = t.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<f64> = (0..cols).map(|j| t.iter().map(|r| r[j]).sum()).collect();
    let mut stat = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let e = row_sums[i] * col_sums[j] / total;
            if e > 0.0 {
                stat += (t[i][j] - e) * (t[i][j] - e) / e;
            }
        }
    }
    let df = (rows - 1) * (cols - 1);
    Chi2Result {
        statistic: stat,
        df,
        p_value: chi2_survival(stat, df),
    }
}

fn transpose(t: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if t.is_empty() {
        return Vec::new();
    }
    (0..t[0].len())
        .map(|j| t.iter().map(|r| r[j]).collect())
        .collect()
}

fn merge_sparse_rows(t: &mut Vec<Vec<f64>>, min_total: f64) {
    let mut i = 0;
    while i < t.len() && t.len() > 2 {
        let sum: f64 = t[i].iter().sum();
        if sum < min_total {
            let row = t.remove(i);
            let target = if i == 0 { 0 } else { i - 1 };
            for (a, b) in t[target].iter_mut().zip(row) {
                *a += b;
            }
        } else {
            i += 1;
        }
    }
}

/// One-sided Mann-Whitney: p-value for observing this much evidence that
/// `a` tends to exceed `b`. Small values reject "a is not larger".
pub fn mann_whitney_p_greater(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let m = b.len() as f64;
    assert!(n > 0.0 && m > 0.0);
    // rank-sum with midranks for ties
    let mut all: Vec<(f64, usize)> = a
        .iter()
        .map(|&x| (x, 0usize))
        .chain(b.iter().map(|&x| (x, 1usize)))
        .collect();
    all.sort_by(|p, q| p.0.total_cmp(&q.0));
    let total = all.len();
    let mut rank_sum_a = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j < total && all[j].0 == all[i].0 {
            j += 1;
        }
        let ties = (j - i) as f64;
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 == 0 {
                rank_sum_a += midrank;
            }
        }
        tie_term += ties * ties * ties - ties;
        i = j;
    }
    let u = rank_sum_a - n * (n + 1.0) / 2.0;
    let mu = n * m / 2.0;
    let nt = n + m;
    let var = n * m / 12.0 * ((nt + 1.0) - tie_term / (nt * (nt - 1.0)));
    if var <= 0.0 {
        return 0.5;
    }
    let z = (u - mu) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    // high U => a larger => small p for the one-sided alternative "a > b"
    (1.0 - normal.cdf(z)).clamp(0.0, 1.0)
}

/// Least-squares slope of y on x, with its standard error.
pub fn linear_slope(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return (0.0, 0.0);
    }
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return (0.0, 0.0);
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut rss = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let r = y - (intercept + slope * x);
        rss += r * r;
    }
    let dof = (n - 2.0).max(1.0);
    let se = (rss / dof / sxx).sqrt();
    (slope, se)
}

/// Fit an exponential decay rate to the empirical tail `P(X > k)`.
///
/// Regresses the log survival on k over the range where at least
/// `min_count` samples remain; returns `(rate, se)` with positive rate
/// meaning decay. `None` when the tail is too short to fit.
pub fn fit_exp_tail(samples: &[f64], min_count: usize) -> Option<(f64, f64)> {
    let n = samples.len();
    if n < 10 {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[(n as f64 * 0.5) as usize];
    let hi = sorted[n - min_count.min(n - 1)];
    if !(hi > lo) {
        return None;
    }
    let grid = 12;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for g in 0..grid {
        let k = lo + (hi - lo) * g as f64 / grid as f64;
        let above = sorted.iter().filter(|&&x| x > k).count();
        if above >= min_count {
            xs.push(k);
            ys.push((above as f64 / n as f64).ln());
        }
    }
    if xs.len() < 3 {
        return None;
    }
    let (slope, se) = linear_slope(&xs, &ys);
    Some((-slope, se))
}

pub fn pearson_corr(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ma = mean(a);
    let mb = mean(b);
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    num / (va * vb).sqrt()
}
