//! Coarse-to-fine outlier detection, weight truncation and activation
//! channel scaling.
//!
//! Coarse detection flags everything above `Q3 + λ1·IQR`. Fine detection
//! then splits the flagged values at the point that maximises the squared
//! gap between the two parts minus `λ2` times the spread of the lower part;
//! only the upper part counts as outliers.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OutlierConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for OutlierConfig {
    fn default() -> Self {
        OutlierConfig {
            lambda1: 1.5,
            lambda2: 1.0,
        }
    }
}

impl OutlierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0) || !(self.lambda2 >= 0.0) {
            return Err(Error::config(format!(
                "outlier thresholds need lambda1 > 0 and lambda2 >= 0, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Coarse {
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub threshold: f64,
    /// Ascending values strictly above the threshold.
    pub outliers: Vec<f64>,
}

/// IQR threshold on ascending `sorted` values using direct quartile indexing
/// (`values[n/4]`, `values[3n/4]`).
pub fn detect_coarse(sorted: &[f64], cfg: &OutlierConfig) -> Result<Coarse> {
    let n = sorted.len();
    if n < 4 {
        return Err(Error::data(format!("outlier detection needs at least 4 values, got {n}")));
    }
    let q1 = sorted[n / 4];
    let q3 = sorted[3 * n / 4];
    let iqr = q3 - q1;
    let threshold = q3 + cfg.lambda1 * iqr;
    let start = sorted.partition_point(|&x| x <= threshold);
    Ok(Coarse {
        q1,
        q3,
        iqr,
        threshold,
        outliers: sorted[start..].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fine {
    /// Upper part of the best split (the final outliers).
    pub outliers: Vec<f64>,
    /// Index into the coarse set where the final outliers begin.
    pub split: Option<usize>,
    /// Best split metric; `None` when there was no split to evaluate.
    pub metric: Option<f64>,
    pub m_intra: Option<f64>,
    pub m_inter: Option<f64>,
}

/// Population variance of `xs`, two-pass with sequential summation.
fn variance(xs: &[f64], sum: f64) -> f64 {
    let n = xs.len() as f64;
    let mean = sum / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Best split of ascending coarse outliers. Splits `1..len` are scored with
/// `(min(upper) - max(lower))² - λ2·var(lower)`; the lowest index wins ties.
pub fn detect_fine(coarse: &[f64], cfg: &OutlierConfig) -> Fine {
    if coarse.len() <= 1 {
        return Fine {
            outliers: coarse.to_vec(),
            split: None,
            metric: None,
            m_intra: None,
            m_inter: None,
        };
    }
    let mut best = (f64::NEG_INFINITY, 0usize, 0.0, 0.0);
    let mut prefix = 0.0;
    for i in 1..coarse.len() {
        prefix += coarse[i - 1];
        let intra = variance(&coarse[..i], prefix);
        let gap = coarse[i] - coarse[i - 1];
        let inter = gap * gap;
        let m = inter - cfg.lambda2 * intra;
        if m > best.0 {
            best = (m, i, intra, inter);
        }
    }
    let (metric, split, intra, inter) = best;
    Fine {
        outliers: coarse[split..].to_vec(),
        split: Some(split),
        metric: Some(metric),
        m_intra: Some(intra),
        m_inter: Some(inter),
    }
}

/// Full detection result over one set of values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutlierReport {
    pub n: usize,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub threshold: f64,
    pub coarse: Vec<f64>,
    pub outliers: Vec<f64>,
    /// Largest value outside the final outlier set.
    pub reserved_max: f64,
    pub split: Option<usize>,
    pub metric: Option<f64>,
    pub m_intra: Option<f64>,
    pub m_inter: Option<f64>,
}

impl OutlierReport {
    pub fn has_outliers(&self) -> bool {
        !self.outliers.is_empty()
    }
}

/// Sorts `values` and runs both detection stages.
pub fn detect(values: &[f64], cfg: &OutlierConfig) -> Result<OutlierReport> {
    if values.iter().any(|x| x.is_nan()) {
        return Err(Error::data("outlier detection input contains NaN"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let coarse = detect_coarse(&sorted, cfg)?;
    let fine = detect_fine(&coarse.outliers, cfg);
    let kept = sorted.len() - fine.outliers.len();
    Ok(OutlierReport {
        n: sorted.len(),
        q1: coarse.q1,
        q3: coarse.q3,
        iqr: coarse.iqr,
        threshold: coarse.threshold,
        reserved_max: sorted[kept - 1],
        coarse: coarse.outliers,
        outliers: fine.outliers,
        split: fine.split,
        metric: fine.metric,
        m_intra: fine.m_intra,
        m_inter: fine.m_inter,
    })
}

/// Detection on `|W|`.
pub fn detect_weight(w: &Tensor, cfg: &OutlierConfig) -> Result<OutlierReport> {
    let mags: Vec<f64> = w.data().iter().map(|x| x.abs()).collect();
    detect(&mags, cfg)
}

/// Clamps every element whose magnitude lies in the final outlier set to
/// `±reserved_max`, keeping its sign.
pub fn truncate_weights(w: &Tensor, report: &OutlierReport) -> Tensor {
    if !report.has_outliers() {
        return w.clone();
    }
    let cut = report.reserved_max;
    w.map(|x| if x.abs() > cut { x.signum() * cut } else { x })
}

/// Per-channel divisors for an activation (always ≥ 1).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelScales {
    pub s: Vec<f64>,
}

impl ChannelScales {
    pub fn identity(channels: usize) -> Self {
        ChannelScales { s: vec![1.0; channels] }
    }

    pub fn is_identity(&self) -> bool {
        self.s.iter().all(|&s| s == 1.0)
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::vector(self.s.clone())
    }
}

/// Per-channel `max|x|` over a `[..., C]` activation.
pub fn channel_max_abs(x: &Tensor) -> Vec<f64> {
    let c = x.cols();
    let mut m = vec![0.0_f64; c];
    for (i, v) in x.data().iter().enumerate() {
        m[i % c] = m[i % c].max(v.abs());
    }
    m
}

/// Channel scales from per-channel maxima: a flagged channel `i` gets
/// `s_i = max_i / reserved_max`, every other channel 1.
pub fn scales_from_maxima(channel_max: &[f64], cfg: &OutlierConfig) -> Result<(ChannelScales, OutlierReport)> {
    let report = detect(channel_max, cfg)?;
    let cut = report.reserved_max;
    let s = channel_max
        .iter()
        .map(|&m| {
            if report.has_outliers() && cut > 0.0 && m > cut {
                m / cut
            } else {
                1.0
            }
        })
        .collect();
    Ok((ChannelScales { s }, report))
}

/// Multiplies row `i` of a `[C, out]` weight by `s_i`, so that
/// `(x / s) · W' == x · W`.
pub fn fold_scales(w: &Tensor, scales: &ChannelScales) -> Result<Tensor> {
    if w.rank() != 2 || w.shape()[0] != scales.s.len() {
        return Err(Error::ShapeMismatch {
            op: "fold_scales",
            lhs: w.shape().to_vec(),
            rhs: vec![scales.s.len()],
        });
    }
    let col = Tensor::new([scales.s.len(), 1], scales.s.clone())?;
    w.mul(&col)
}

/// Divides channel `i` of a `[..., C]` activation by `s_i`.
pub fn apply_scales(x: &Tensor, scales: &ChannelScales) -> Result<Tensor> {
    x.div(&scales.as_tensor())
}

/// Detects outlier channels in calibration activations and migrates them
/// into the consuming weight.
pub fn scale_activations(
    x_calib: &Tensor,
    w_next: &Tensor,
    cfg: &OutlierConfig,
) -> Result<(ChannelScales, Tensor, OutlierReport)> {
    let (scales, report) = scales_from_maxima(&channel_max_abs(x_calib), cfg)?;
    let w = fold_scales(w_next, &scales)?;
    Ok((scales, w, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarse_examples() {
        let cfg = OutlierConfig::default();
        let c = detect_coarse(&[1., 2., 3., 4., 100.], &cfg).unwrap();
        assert_eq!((c.q1, c.q3, c.iqr, c.threshold), (2., 4., 2., 7.));
        assert_eq!(c.outliers, vec![100.]);
        let c = detect_coarse(&[1., 1., 1., 1.], &cfg).unwrap();
        assert_eq!(c.threshold, 1.0);
        assert!(c.outliers.is_empty());
        assert!(detect_coarse(&[1., 2., 3.], &cfg).is_err());
    }

    #[test]
    fn fine_examples() {
        let cfg = OutlierConfig::default();
        let f = detect_fine(&[8., 9., 50., 60.], &cfg);
        assert_eq!(f.outliers, vec![50., 60.]);
        assert_eq!(f.split, Some(2));
        assert_eq!(f.metric, Some(1680.75));
        let f = detect_fine(&[5.], &cfg);
        assert_eq!(f.outliers, vec![5.]);
        assert_eq!(f.metric, None);
    }

    #[test]
    fn truncation_keeps_sign() {
        let cfg = OutlierConfig::default();
        let w = Tensor::vector(vec![1., 2., -100., 1.5, 0.5]);
        let report = detect_weight(&w, &cfg).unwrap();
        assert_eq!(report.outliers, vec![100.]);
        assert_eq!(report.reserved_max, 2.0);
        let t = truncate_weights(&w, &report);
        assert_eq!(t.data(), &[1., 2., -2., 1.5, 0.5]);
        assert_eq!(t.max_abs(), report.reserved_max);
    }

    #[test]
    fn channel_scale_example() {
        let cfg = OutlierConfig::default();
        let maxima = [1.0, 2.0, 1.5, 1.2, 8.0, 0.9, 1.1, 1.3];
        let (scales, report) = scales_from_maxima(&maxima, &cfg).unwrap();
        assert_eq!(report.reserved_max, 2.0);
        assert_eq!(scales.s[4], 4.0);
        assert!(scales.s.iter().enumerate().all(|(i, &s)| i == 4 || s == 1.0));
    }

    #[test]
    fn migration_preserves_product() {
        let x = Tensor::matrix(2, 4, vec![1., -9., 0.5, 2., 0.3, 7., -1., 1.]).unwrap();
        let w = Tensor::matrix(4, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]).unwrap();
        let scales = ChannelScales { s: vec![1.0, 4.5, 1.0, 1.0] };
        let lhs = apply_scales(&x, &scales).unwrap().matmul(&fold_scales(&w, &scales).unwrap()).unwrap();
        let rhs = x.matmul(&w).unwrap();
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
        }
    }
}
