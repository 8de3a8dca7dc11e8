//! Threshold selection on batch-norm scale distributions.
//!
//! After L1-sparsity training the per-layer scale magnitudes split into a
//! negligible mode near zero and an important mode several orders of
//! magnitude above it. The per-layer threshold is the first sorted magnitude
//! whose cumulative sum of squares reaches `delta` times the layer total;
//! everything strictly below it is pruned. The same rule applied to the
//! network-wide set yields the global threshold used for whole-branch
//! removal. A fixed-percentile global threshold is kept as the baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug)]
pub struct GammaSet {
    /// Non-negative scale magnitudes.
    pub values: Vec<f64>,
    /// Layer identifier, or "network-global" for the union set.
    pub origin: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum ThresholdError {
    #[error("degenerate distribution in {origin}: sum of squared scales is zero")]
    DegenerateDistribution { origin: String },
    #[error("empty scale set in {origin}")]
    Empty { origin: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl GammaSet {
    pub fn new(values: impl IntoIterator<Item = f64>, origin: impl Into<String>) -> Self {
        let values: Vec<f64> = values.into_iter().map(f64::abs).collect();
        GammaSet { values, origin: origin.into() }
    }

    pub fn from_gamma(gamma: &[f32], origin: impl Into<String>) -> Self {
        Self::new(gamma.iter().map(|&g| g.abs() as f64), origin)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ThresholdConfig {
    /// Fraction of the sum of squared scales allowed on the pruned side.
    pub delta: f64,
    /// Exponent of the cumulative-sum criterion.
    pub p: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig { delta: 1e-3, p: 2.0 }
    }
}

impl ThresholdConfig {
    pub fn check(&self) -> Result<(), ThresholdError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(ThresholdError::InvalidConfig(format!(
                "delta must lie in (0,1), got {}",
                self.delta
            )));
        }
        if self.p < 1.0 {
            return Err(ThresholdError::InvalidConfig(format!("p must be >= 1, got {}", self.p)));
        }
        Ok(())
    }
}

/// Separation diagnostics of a split, with the delta-validity bounds they
/// imply.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationStats {
    /// inf of the important mode over sup of the negligible mode.
    pub alpha: f64,
    /// Spread within the important mode: sup over inf.
    pub beta: f64,
    /// |negligible| / |important|.
    pub ratio_n_i: f64,
    /// ratio_n_i * alpha^(-p): delta must exceed this.
    pub lower_bound: f64,
    /// beta^(-p) / |set|: delta up to this splits exactly at the gap.
    pub upper_bound: f64,
    /// True when one side of the split is empty; the ratio fields are
    /// meaningless in that case.
    pub one_sided: bool,
}

/// Per-layer optimal threshold: the first scale, in ascending order, whose
/// cumulative sum of p-th powers reaches `delta` times the set total. The
/// returned value is a member of the set; the prune set is exactly the
/// strictly-smaller values.
pub fn find_threshold(gammas: &GammaSet, cfg: &ThresholdConfig) -> Result<f64, ThresholdError> {
    cfg.check()?;
    if gammas.is_empty() {
        return Err(ThresholdError::Empty { origin: gammas.origin.clone() });
    }
    let mut sorted = gammas.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("magnitudes are finite"));
    let total: f64 = sorted.iter().map(|&g| g.powf(cfg.p)).sum();
    if total <= 0.0 {
        return Err(ThresholdError::DegenerateDistribution { origin: gammas.origin.clone() });
    }
    let target = cfg.delta * total;
    let mut cum = 0.0;
    for &g in &sorted {
        cum += g.powf(cfg.p);
        if cum >= target {
            return Ok(g);
        }
    }
    // delta < 1 guarantees the cumulative sum crosses the target; floating
    // point can land here only through rounding on the last element.
    Ok(*sorted.last().expect("non-empty"))
}

/// Eq-applied-to-everything variant: one threshold from the network-wide
/// scale set. Used to decide whole-branch removal.
pub fn global_threshold(all_gammas: &GammaSet, cfg: &ThresholdConfig) -> Result<f64, ThresholdError> {
    find_threshold(all_gammas, cfg)
}

/// Percentile baseline: sorts all magnitudes ascending and returns the value
/// at index `floor(percent * n)`, so with distinct values exactly that many
/// fall strictly below the threshold.
pub fn ns_threshold(all_gammas: &GammaSet, percent: f64) -> Result<f64, ThresholdError> {
    if !(0.0..1.0).contains(&percent) {
        return Err(ThresholdError::InvalidConfig(format!(
            "percent must lie in [0,1), got {percent}"
        )));
    }
    if all_gammas.is_empty() {
        return Err(ThresholdError::Empty { origin: all_gammas.origin.clone() });
    }
    let mut sorted = all_gammas.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("magnitudes are finite"));
    let idx = (percent * sorted.len() as f64).floor() as usize;
    Ok(sorted[idx.min(sorted.len() - 1)])
}

/// Splits the set at `gamma_th` and reports the separation statistics of the
/// two sides. One-sided splits return flagged partial stats.
pub fn separation_stats(gammas: &GammaSet, gamma_th: f64, p: f64) -> SeparationStats {
    let negligible: Vec<f64> = gammas.values.iter().copied().filter(|&g| g < gamma_th).collect();
    let important: Vec<f64> = gammas.values.iter().copied().filter(|&g| g >= gamma_th).collect();
    let n = gammas.len() as f64;
    if negligible.is_empty() || important.is_empty() {
        let beta = if important.is_empty() {
            f64::NAN
        } else {
            max(&important) / min(&important)
        };
        return SeparationStats {
            alpha: f64::INFINITY,
            beta,
            ratio_n_i: if important.is_empty() { f64::INFINITY } else { 0.0 },
            lower_bound: 0.0,
            upper_bound: if beta.is_nan() { f64::NAN } else { beta.powf(-p) / n },
            one_sided: true,
        };
    }
    let inf_i = min(&important);
    let sup_i = max(&important);
    let sup_n = max(&negligible);
    let alpha = inf_i / sup_n;
    let beta = sup_i / inf_i;
    let ratio = negligible.len() as f64 / important.len() as f64;
    SeparationStats {
        alpha,
        beta,
        ratio_n_i: ratio,
        lower_bound: ratio * alpha.powf(-p),
        upper_bound: beta.powf(-p) / n,
        one_sided: false,
    }
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Histogram of a scale set. In log10 mode the positive values are binned on
/// a log scale and zeros land in a dedicated leading underflow bin, so the
/// counts always sum to the set size.
pub fn histogram(gammas: &GammaSet, bins: usize, log10_scale: bool) -> Vec<HistogramBin> {
    assert!(bins >= 1, "bins must be >= 1");
    if gammas.is_empty() {
        return Vec::new();
    }
    if !log10_scale {
        let lo = min(&gammas.values);
        let hi = max(&gammas.values);
        return fill_bins(&gammas.values, lo, hi, bins, |x| x);
    }
    let zeros = gammas.values.iter().filter(|&&g| g == 0.0).count();
    let positives: Vec<f64> = gammas.values.iter().copied().filter(|&g| g > 0.0).collect();
    let mut out = Vec::new();
    if zeros > 0 || positives.is_empty() {
        out.push(HistogramBin { low: 0.0, high: 0.0, count: zeros });
    }
    if !positives.is_empty() {
        let lo = min(&positives).log10();
        let hi = max(&positives).log10();
        out.extend(fill_bins(&positives, lo, hi, bins, |x| x.log10()));
        for b in &mut out[if zeros > 0 { 1 } else { 0 }..] {
            b.low = 10f64.powf(b.low);
            b.high = 10f64.powf(b.high);
        }
    }
    out
}

fn fill_bins(values: &[f64], lo: f64, hi: f64, bins: usize, key: impl Fn(f64) -> f64) -> Vec<HistogramBin> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = key(v);
        let mut i = if width > 0.0 { ((k - lo) / width) as usize } else { 0 };
        if i >= bins {
            i = bins - 1;
        }
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            low: lo + width * i as f64,
            high: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count,
        })
        .collect()
}

/// Emits a histogram as `bin_low,bin_high,count` CSV.
pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("bin_low,bin_high,count\n");
    for b in bins {
        s.push_str(&format!("{},{},{}\n", b.low, b.high, b.count));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(values: &[f64]) -> GammaSet {
        GammaSet::new(values.iter().copied(), "test")
    }

    /// Literal restatement of the threshold condition, evaluated over every
    /// candidate value: the strictly-smaller squared mass stays below
    /// delta * total, and adding the candidate's own square reaches it.
    fn exhaustive_threshold(values: &[f64], delta: f64) -> Option<f64> {
        let total: f64 = values.iter().map(|g| g * g).sum();
        let target = delta * total;
        let mut hits: Vec<f64> = values
            .iter()
            .copied()
            .filter(|&cand| {
                let before: f64 = values.iter().filter(|&&g| g < cand).map(|g| g * g).sum();
                before < target && target <= before + cand * cand
            })
            .collect();
        hits.sort_by(|a, b| a.partial_cmp(b).unwrap());
        hits.dedup();
        match hits.len() {
            0 => None,
            1 => Some(hits[0]),
            _ => panic!("threshold condition not unique on {values:?}"),
        }
    }

    #[test]
    fn prunes_two_tiny_values() {
        // Cumulative squares before 0.5 are 5e-6; delta * total = 6.10005e-4
        // falls inside (5e-6, 5e-6 + 0.25].
        let th = find_threshold(&set(&[0.001, 0.002, 0.5, 0.6]), &ThresholdConfig::default()).unwrap();
        assert_eq!(th, 0.5);
    }

    #[test]
    fn uniform_set_keeps_everything() {
        let th = find_threshold(&set(&[1.0, 1.0, 1.0, 1.0]), &ThresholdConfig::default()).unwrap();
        assert_eq!(th, 1.0);
        assert_eq!(set(&[1.0; 4]).values.iter().filter(|&&g| g < th).count(), 0);
    }

    #[test]
    fn crosses_at_first_important_value() {
        // delta * total = 5.0e-5 (to within rounding), before-sum 3e-12.
        let th =
            find_threshold(&set(&[1e-6, 1e-6, 1e-6, 0.1, 0.2]), &ThresholdConfig::default()).unwrap();
        assert_eq!(th, 0.1);
    }

    #[test]
    fn all_zero_set_is_degenerate() {
        let err = find_threshold(&set(&[0.0, 0.0, 0.0]), &ThresholdConfig::default()).unwrap_err();
        assert!(matches!(err, ThresholdError::DegenerateDistribution { .. }));
    }

    #[test]
    fn matches_exhaustive_oracle_on_small_sets() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..2000 {
            let n = rng.gen_range(1..=12);
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    let exp = rng.gen_range(-7.0..0.5);
                    10f64.powf(exp)
                })
                .collect();
            let delta = 10f64.powf(rng.gen_range(-5.0..-0.01));
            let cfg = ThresholdConfig { delta, p: 2.0 };
            let got = find_threshold(&set(&values), &cfg).unwrap();
            let want = exhaustive_threshold(&values, delta).expect("solvable for distinct values");
            assert_eq!(got, want, "values {values:?} delta {delta}");
        }
    }

    #[test]
    fn duplication_leaves_threshold_unchanged() {
        let layer = [1e-5, 1e-5, 0.3, 0.4];
        let cfg = ThresholdConfig::default();
        let single = find_threshold(&set(&layer), &cfg).unwrap();
        let mut doubled = layer.to_vec();
        doubled.extend_from_slice(&layer);
        let union = find_threshold(&set(&doubled), &cfg).unwrap();
        assert_eq!(single, union);
    }

    #[test]
    fn ns_threshold_index_arithmetic() {
        let ten: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let th = ns_threshold(&set(&ten), 0.3).unwrap();
        assert_eq!(th, 0.4);
        assert_eq!(ten.iter().filter(|&&g| g < th).count(), 3);
        let th0 = ns_threshold(&set(&ten), 0.0).unwrap();
        assert_eq!(th0, 0.1);
        assert_eq!(ten.iter().filter(|&&g| g < th0).count(), 0);
    }

    #[test]
    fn separation_stats_formulas() {
        let s = separation_stats(&set(&[1e-6, 1e-6, 1e-6, 0.1, 0.2]), 0.1, 2.0);
        assert!(!s.one_sided);
        assert!((s.alpha - 1e5).abs() / 1e5 < 1e-12);
        assert_eq!(s.beta, 2.0);
        assert_eq!(s.ratio_n_i, 1.5);
        assert!((s.lower_bound - 1.5e-10).abs() < 1e-22);
        assert!((s.upper_bound - 0.05).abs() < 1e-15);
    }

    #[test]
    fn one_sided_split_is_flagged() {
        let s = separation_stats(&set(&[0.2, 0.3, 0.4]), 0.1, 2.0);
        assert!(s.one_sided);
        assert_eq!(s.ratio_n_i, 0.0);
    }

    #[test]
    fn histogram_counts_are_conserved() {
        let bins = histogram(&set(&[1.0, 1.0, 1.0]), 1, false);
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].count, 3);

        let with_zeros = histogram(&set(&[0.0, 0.0, 1e-6, 0.5, 0.7]), 4, true);
        let total: usize = with_zeros.iter().map(|b| b.count).sum();
        assert_eq!(total, 5);
        assert_eq!(with_zeros[0].count, 2, "zeros go to the underflow bin");
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut values in proptest::collection::vec(1e-8f64..1.0, 1..40), seed in 0u64..1000) {
            let cfg = ThresholdConfig::default();
            let a = find_threshold(&set(&values), &cfg).unwrap();
            // Deterministic shuffle.
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            values.shuffle(&mut rng);
            let b = find_threshold(&set(&values), &cfg).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn scale_equivariant(values in proptest::collection::vec(1e-8f64..1.0, 1..40), c in 1e-3f64..1e3) {
            let cfg = ThresholdConfig::default();
            let base = find_threshold(&set(&values), &cfg).unwrap();
            let scaled: Vec<f64> = values.iter().map(|&v| v * c).collect();
            let th = find_threshold(&set(&scaled), &cfg).unwrap();
            prop_assert!((th - base * c).abs() <= 1e-12 * th.abs().max(base * c));
            let prune_a: Vec<usize> = values.iter().enumerate().filter(|(_, &v)| v < base).map(|(i, _)| i).collect();
            let prune_b: Vec<usize> = scaled.iter().enumerate().filter(|(_, &v)| v < th).map(|(i, _)| i).collect();
            prop_assert_eq!(prune_a, prune_b);
        }

        #[test]
        fn monotone_in_delta(values in proptest::collection::vec(1e-8f64..1.0, 1..40), d1 in 1e-6f64..0.9, d2 in 1e-6f64..0.9) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let a = find_threshold(&set(&values), &ThresholdConfig { delta: lo, p: 2.0 }).unwrap();
            let b = find_threshold(&set(&values), &ThresholdConfig { delta: hi, p: 2.0 }).unwrap();
            prop_assert!(a <= b);
        }

        #[test]
        fn threshold_condition_holds_post_hoc(values in proptest::collection::vec(1e-8f64..1.0, 1..40)) {
            // Continuous draws make ties measure-zero, so the double
            // inequality is satisfiable and the crossing must satisfy it.
            let cfg = ThresholdConfig::default();
            let th = find_threshold(&set(&values), &cfg).unwrap();
            let total: f64 = values.iter().map(|g| g * g).sum();
            let before: f64 = values.iter().filter(|&&g| g < th).map(|g| g * g).sum();
            prop_assert!(before < cfg.delta * total);
            prop_assert!(cfg.delta * total <= before + th * th);
        }
    }
}
