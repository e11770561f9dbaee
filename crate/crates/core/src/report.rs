//! Number formatting, empirical CDFs and fixed-width histograms shared by the
//! fleet summary and its CSV artifacts.

use serde::{Deserialize, Serialize};

/// Histogram bin width in milliseconds.
pub const BIN_WIDTH_MS: f64 = 15.0;
/// Regular bins [0,15) .. [990,1005); one overflow bin follows.
pub const REGULAR_BINS: usize = 67;

/// Formats with six significant digits in fixed notation, trailing zeros
/// trimmed.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.5e}");
    let (_, exp) = sci.split_once('e').expect("scientific notation has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let rounded: f64 = sci.parse().expect("round trip");
    let decimals = (5 - exp).max(0) as usize;
    let mut s = format!("{rounded:.decimals$}");
    if s.contains('.') {
        let trimmed = s.trim_end_matches('0').trim_end_matches('.').len();
        s.truncate(trimmed);
    }
    s
}

/// Rounds to the value that `fmt_sig6` prints, so aggregates computed in
/// memory agree exactly with aggregates recomputed from CSV.
pub fn quantize(x: f64) -> f64 {
    fmt_sig6(x).parse().expect("fmt_sig6 output parses")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub value_ms: f64,
    pub cumulative_fraction: f64,
}

/// Empirical CDF: one point per distinct value, at the fraction of samples
/// less than or equal to it.
pub fn empirical_cdf(values: &[f64]) -> Vec<CdfPoint> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<CdfPoint> = Vec::new();
    for (i, &x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.value_ms == x => last.cumulative_fraction = frac,
            _ => out.push(CdfPoint { value_ms: x, cumulative_fraction: frac }),
        }
    }
    out
}

/// Nearest-rank percentile of unsorted values.
pub fn percentile(values: &[f64], pct: u32) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (pct as usize * v.len()).div_ceil(100).max(1);
    Some(v[rank - 1])
}

pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 50)
}

/// Bin index for a value; the last index is the overflow bin.
pub fn bin_index(value_ms: f64) -> usize {
    let i = (value_ms / BIN_WIDTH_MS).floor();
    if i < 0.0 {
        0
    } else {
        (i as usize).min(REGULAR_BINS)
    }
}

/// `(low, high)` edges of a bin; the overflow bin's high edge is infinite.
pub fn bin_edges(index: usize) -> (f64, f64) {
    let low = index as f64 * BIN_WIDTH_MS;
    if index >= REGULAR_BINS {
        (low, f64::INFINITY)
    } else {
        (low, low + BIN_WIDTH_MS)
    }
}

/// Fractions of values per bin, `REGULAR_BINS + 1` entries.
pub fn histogram(values: &[f64]) -> Vec<f64> {
    let mut counts = vec![0u64; REGULAR_BINS + 1];
    for &v in values {
        counts[bin_index(v)] += 1;
    }
    let n = values.len();
    counts
        .into_iter()
        .map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect()
}
