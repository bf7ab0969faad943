use serde::{Deserialize, Serialize};

/// Five-number summary with Tukey outliers. Statistics are `None` for an
/// empty sample.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxplotSummary {
    pub count: usize,
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
    pub outliers: Vec<f64>,
    pub excluded_undefined: usize,
}

/// Linear-interpolation quantile of a sorted sample, position `p * (n - 1)`.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quartiles over all values. Whiskers reach the most extreme values inside
/// the fences but never end inside the box.
pub fn boxplot_summary(values: &[f64], excluded_undefined: usize) -> BoxplotSummary {
    if values.is_empty() {
        return BoxplotSummary {
            excluded_undefined,
            ..BoxplotSummary::default()
        };
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let (inside, outliers): (Vec<f64>, Vec<f64>) =
        sorted.iter().partition(|&&v| v >= lo && v <= hi);
    BoxplotSummary {
        count: sorted.len(),
        min: inside.first().map(|v| v.min(q1)),
        q1: Some(q1),
        median: Some(median),
        q3: Some(q3),
        max: inside.last().map(|v| v.max(q3)),
        outliers,
        excluded_undefined,
    }
}
