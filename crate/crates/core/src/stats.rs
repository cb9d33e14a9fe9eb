//! Goodness-of-fit tests and Monte Carlo estimators.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::analytics::GeomLaw;
use crate::error::{ensure, Error, Result};

/// Significance level used by the chi-square tests.
pub const CHISQ_ALPHA: f64 = 1e-3;

/// Smallest sample accepted by [`ks_statistic`].
pub const KS_MIN_SAMPLES: usize = 100;

/// Asymptotic Kolmogorov-Smirnov critical value at level about 0.01.
pub fn ks_threshold(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

/// Plain Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl Estimate {
    pub fn proportion(hits: usize, n: usize) -> Self {
        let p = hits as f64 / n as f64;
        Estimate { value: p, std_error: (p * (1.0 - p) / n as f64).sqrt(), n_samples: n }
    }

    /// Sample mean with the standard error from the unbiased sample variance.
    pub fn mean_of(xs: &[f64]) -> Self {
        let n = xs.len();
        let (mean, var) = mean_var(xs);
        Estimate { value: mean, std_error: (var / n as f64).sqrt(), n_samples: n }
    }

    /// `|value - target| <= k * std_error`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.std_error
    }
}

/// Mean and unbiased variance (Welford).
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    let var = if xs.len() > 1 { m2 / (xs.len() - 1) as f64 } else { 0.0 };
    (mean, var)
}

/// Self-normalised importance sampling estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub effective_sample_size: f64,
}

/// Collects `(log weight, value)` pairs and forms the ratio estimator
/// `sum w f / sum w`.
///
/// Weights are kept in log space and rescaled by their maximum when the
/// estimate is formed, so arbitrarily small weights are harmless. Pairs are
/// reduced in insertion order.
#[derive(Debug, Clone, Default)]
pub struct WeightedSamples {
    log_w: Vec<f64>,
    f: Vec<f64>,
}

impl WeightedSamples {
    pub fn new() -> Self {
        Self::default()
    }

    /// A weight of zero is passed as `f64::NEG_INFINITY`.
    pub fn push(&mut self, log_w: f64, f: f64) {
        self.log_w.push(log_w);
        self.f.push(f);
    }

    pub fn len(&self) -> usize {
        self.f.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f.is_empty()
    }

    pub fn extend(&mut self, other: WeightedSamples) {
        self.log_w.extend(other.log_w);
        self.f.extend(other.f);
    }

    /// `log (1/N) sum w_k`, the log of the plain mean weight.
    pub fn log_mean_weight(&self) -> f64 {
        let m = self.max_log_w();
        if m == f64::NEG_INFINITY {
            return m;
        }
        let s: f64 = self.log_w.iter().map(|&l| (l - m).exp()).sum();
        m + (s / self.len() as f64).ln()
    }

    fn max_log_w(&self) -> f64 {
        self.log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn estimate(&self) -> Result<WeightedEstimate> {
        let n = self.len();
        ensure(n > 0, || "no samples".into())?;
        let m = self.max_log_w();
        if m == f64::NEG_INFINITY {
            return Err(Error::Internal("all importance weights are zero".into()));
        }
        let w: Vec<f64> = self.log_w.iter().map(|&l| (l - m).exp()).collect();
        let sw: f64 = w.iter().sum();
        let sw2: f64 = w.iter().map(|x| x * x).sum();
        let value = w.iter().zip(&self.f).map(|(w, f)| w * f).sum::<f64>() / sw;
        // delta-method variance of the ratio estimator
        let var = w.iter().zip(&self.f).map(|(w, f)| (w * (f - value)).powi(2)).sum::<f64>() / (sw * sw);
        Ok(WeightedEstimate {
            value,
            std_error: var.sqrt(),
            n_samples: n,
            effective_sample_size: sw * sw / sw2,
        })
    }
}

/// Residual of a fit at one point or bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDetail {
    pub at: f64,
    pub observed: f64,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub test_name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub n_samples: usize,
    pub seed: Option<u64>,
    pub pass: bool,
    pub details: Vec<FitDetail>,
}

impl FitReport {
    pub fn new(test_name: impl Into<String>, statistic: f64, threshold: f64, n_samples: usize) -> Self {
        FitReport {
            test_name: test_name.into(),
            statistic,
            threshold,
            n_samples,
            seed: None,
            pass: statistic <= threshold,
            details: Vec::new(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self.pass = self.statistic <= threshold;
        self
    }
}

/// Kolmogorov-Smirnov distance between the sample and `cdf`, with the
/// default threshold `1.63 / sqrt(N)`.
///
/// Details hold the empirical and target CDF at the sample deciles.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<FitReport> {
    ensure(!samples.is_empty(), || "empty sample".into())?;
    ensure(samples.len() >= KS_MIN_SAMPLES, || {
        format!("need at least {KS_MIN_SAMPLES} samples, got {}", samples.len())
    })?;
    ensure(samples.iter().all(|x| !x.is_nan()), || "sample contains NaN".into())?;
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    let nf = n as f64;
    let mut d = 0.0f64;
    let mut details = Vec::new();
    let mut next_decile = 1;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / nf).max((i + 1) as f64 / nf - f);
        if (i + 1) * 10 >= next_decile * n && next_decile < 10 {
            details.push(FitDetail { at: x, observed: (i + 1) as f64 / nf, expected: f });
            next_decile += 1;
        }
    }
    let mut r = FitReport::new("ks", d, ks_threshold(n), n);
    r.details = details;
    Ok(r)
}

/// Histogram of positive integer samples: `counts[k - 1]` is the number of
/// samples equal to `k`.
pub fn counts_of(samples: &[u64]) -> Result<Vec<u64>> {
    ensure(samples.iter().all(|&k| k >= 1), || "geometric samples must be >= 1".into())?;
    let max = samples.iter().copied().max().unwrap_or(0) as usize;
    let mut counts = vec![0u64; max];
    for &k in samples {
        counts[k as usize - 1] += 1;
    }
    Ok(counts)
}

/// Pearson chi-square test of a histogram on `{1, 2, ...}` against the
/// geometric law with parameter `p`.
///
/// Bins run over single values while their expected count is at least 5;
/// the remaining mass (including everything beyond the histogram) forms one
/// tail bin, merged into its neighbour if it is itself below 5. The
/// threshold is the chi-square quantile at level [`CHISQ_ALPHA`] with
/// `bins - 1` degrees of freedom.
pub fn chisq_geometric(counts: &[u64], p: f64) -> Result<FitReport> {
    let law = GeomLaw::new(p)?;
    let n: u64 = counts.iter().sum();
    ensure(n > 0, || "empty histogram".into())?;
    let nf = n as f64;
    // (lower value, observed, expected); the last bin is open-ended
    let mut bins: Vec<(u64, f64, f64)> = Vec::new();
    let mut k = 1u64;
    loop {
        let e = nf * law.pmf(k);
        let tail_after = nf * law.tail(k + 1);
        if e < 5.0 || tail_after < 5.0 {
            break;
        }
        bins.push((k, counts.get(k as usize - 1).copied().unwrap_or(0) as f64, e));
        k += 1;
    }
    let tail_obs: u64 = counts.iter().skip(k as usize - 1).sum();
    let tail_exp = nf * law.tail(k);
    bins.push((k, tail_obs as f64, tail_exp));
    if tail_exp < 5.0 && bins.len() > 1 {
        let (_, o, e) = bins.pop().expect("tail bin");
        let last = bins.last_mut().expect("bins nonempty");
        last.1 += o;
        last.2 += e;
    }
    if bins.len() < 2 || bins.iter().any(|b| b.2 < 5.0) {
        return Err(Error::domain(format!(
            "cannot pool {n} samples into at least two bins with expected count >= 5 (p = {p})"
        )));
    }
    let stat: f64 = bins.iter().map(|(_, o, e)| (o - e) * (o - e) / e).sum();
    let df = (bins.len() - 1) as f64;
    let threshold = ChiSquared::new(df).map_err(|e| Error::Numeric(e.to_string()))?.inverse_cdf(1.0 - CHISQ_ALPHA);
    let mut r = FitReport::new("chisq_geometric", stat, threshold, n as usize);
    r.details = bins.into_iter().map(|(k, o, e)| FitDetail { at: k as f64, observed: o, expected: e }).collect();
    Ok(r)
}

/// KS test of `samples / scale` against the unit exponential law.
pub fn exp_rescaled_test(samples: &[f64], scale: f64) -> Result<FitReport> {
    ensure(scale > 0.0 && scale.is_finite(), || format!("scale must be positive, got {scale}"))?;
    let rescaled: Vec<f64> = samples.iter().map(|x| x / scale).collect();
    let mut r = ks_statistic(&rescaled, |x| if x <= 0.0 { 0.0 } else { -(-x).exp_m1() })?;
    r.test_name = "exp_rescaled".into();
    Ok(r)
}
