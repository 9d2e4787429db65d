//! Depth-estimation metrics, confusion matrices, and probability-curve dumps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretization::OrdinalOutput;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no valid pixels to evaluate")]
    NoValidPixels,
    #[error("length mismatch: pred {pred}, gt {gt}, mask {mask}")]
    Length { pred: usize, gt: usize, mask: usize },
    #[error("non-positive depth at pixel {0}")]
    NonPositive(usize),
    #[error("pixel index {index} out of range for {pixels} pixels")]
    Index { index: usize, pixels: usize },
}

/// Threshold-accuracy bases: 1.25, 1.25², 1.25³.
pub const DELTA_BASE: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub n_valid: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "delta1,delta2,delta3,rmse,rmse_log,abs_rel,sq_rel,n_valid";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.delta1,
            self.delta2,
            self.delta3,
            self.rmse,
            self.rmse_log,
            self.abs_rel,
            self.sq_rel,
            self.n_valid
        )
    }
}

/// Pairwise summation: fixed association order regardless of how callers
/// chunk the data.
fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Metrics over the pixels where `valid` is set.
pub fn evaluate(pred: &[f64], gt: &[f64], valid: &[bool]) -> Result<MetricReport, MetricsError> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(MetricsError::Length {
            pred: pred.len(),
            gt: gt.len(),
            mask: valid.len(),
        });
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| valid[i]).collect();
    if idx.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    if let Some(&i) = idx.iter().find(|&&i| !(pred[i] > 0.0 && gt[i] > 0.0)) {
        return Err(MetricsError::NonPositive(i));
    }
    let n = idx.len() as f64;
    let mean_of = |f: &dyn Fn(f64, f64) -> f64| {
        let terms: Vec<f64> = idx.iter().map(|&i| f(pred[i], gt[i])).collect();
        pairwise_sum(&terms) / n
    };
    let delta = |p: u32| {
        let thr = DELTA_BASE.powi(p as i32);
        mean_of(&|d, g| if (d / g).max(g / d) < thr { 1.0 } else { 0.0 })
    };
    Ok(MetricReport {
        delta1: delta(1),
        delta2: delta(2),
        delta3: delta(3),
        rmse: mean_of(&|d, g| (d - g) * (d - g)).sqrt(),
        rmse_log: mean_of(&|d, g| (d.ln() - g.ln()).powi(2)).sqrt(),
        abs_rel: mean_of(&|d, g| (d - g).abs() / g),
        sq_rel: mean_of(&|d, g| (d - g) * (d - g) / g),
        n_valid: idx.len(),
    })
}

/// Row-normalised `K × K` confusion matrix; rows are true labels, columns
/// predictions. Rows with no pixels stay all zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub bins: usize,
    pub rows: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

impl ConfusionMatrix {
    /// Mean diagonal entry over occupied rows.
    pub fn diagonal_mass(&self) -> f64 {
        let occupied: Vec<usize> = (0..self.bins).filter(|&r| self.counts[r] > 0).collect();
        if occupied.is_empty() {
            return 0.0;
        }
        occupied.iter().map(|&r| self.rows[r][r]).sum::<f64>() / occupied.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Labels at or above `bins` are clamped to the top bin.
pub fn confusion_matrix(
    pred: &[usize],
    gt: &[usize],
    valid: &[bool],
    bins: usize,
) -> ConfusionMatrix {
    assert!(
        pred.len() == gt.len() && gt.len() == valid.len(),
        "length mismatch"
    );
    let mut counts = vec![vec![0usize; bins]; bins];
    for i in (0..gt.len()).filter(|&i| valid[i]) {
        counts[gt[i].min(bins - 1)][pred[i].min(bins - 1)] += 1;
    }
    let totals: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let rows = counts
        .iter()
        .zip(&totals)
        .map(|(r, &t)| {
            r.iter()
                .map(|&c| if t > 0 { c as f64 / t as f64 } else { 0.0 })
                .collect()
        })
        .collect();
    ConfusionMatrix {
        bins,
        rows,
        counts: totals,
    }
}

/// One CSV line per requested pixel: `index,P^0,…,P^{K−1}`.
pub fn dump_probability_curves(
    out: &OrdinalOutput,
    pixels: &[usize],
) -> Result<Vec<String>, MetricsError> {
    pixels
        .iter()
        .map(|&i| {
            if i >= out.pixels() {
                return Err(MetricsError::Index {
                    index: i,
                    pixels: out.pixels(),
                });
            }
            let mut line = i.to_string();
            for p in out.row(i) {
                line.push(',');
                line.push_str(&p.to_string());
            }
            Ok(line)
        })
        .collect()
}

/// True when the curve never rises from one bin to the next.
pub fn is_non_increasing(curve: &[f64]) -> bool {
    curve.windows(2).all(|w| w[1] <= w[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction() {
        let d = [0.7, 2.0, 5.5];
        let r = evaluate(&d, &d, &[true; 3]).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!(
            (r.rmse, r.rmse_log, r.abs_rel, r.sq_rel),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!(r.n_valid, 3);
    }

    #[test]
    fn single_pixel_oracle() {
        let r = evaluate(&[2.0], &[1.0], &[true]).unwrap();
        assert_eq!(r.rmse, 1.0);
        assert_eq!(r.rmse_log, std::f64::consts::LN_2);
        assert_eq!((r.abs_rel, r.sq_rel), (1.0, 1.0));
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn masks_and_errors() {
        let r = evaluate(&[1.0, 100.0], &[1.0, 1.0], &[true, false]).unwrap();
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.n_valid, 1);
        assert_eq!(
            evaluate(&[1.0], &[1.0], &[false]),
            Err(MetricsError::NoValidPixels)
        );
        assert!(matches!(
            evaluate(&[1.0], &[1.0, 2.0], &[true]),
            Err(MetricsError::Length { .. })
        ));
        assert_eq!(
            evaluate(&[0.0], &[1.0], &[true]),
            Err(MetricsError::NonPositive(0))
        );
    }

    #[test]
    fn csv_line_has_header_arity() {
        let r = evaluate(&[2.0], &[1.0], &[true]).unwrap();
        assert_eq!(
            r.to_csv_line().split(',').count(),
            MetricReport::CSV_HEADER.split(',').count()
        );
    }

    #[test]
    fn confusion_examples() {
        let labels = [0, 1, 1, 3];
        let m = confusion_matrix(&labels, &labels, &[true; 4], 4);
        for r in 0..4 {
            for c in 0..4 {
                let want = if r == c && r != 2 { 1.0 } else { 0.0 };
                assert_eq!(m.rows[r][c], want);
            }
        }
        assert!(m.rows[2].iter().all(|&v| v == 0.0 && !v.is_nan()));
        assert_eq!(m.diagonal_mass(), 1.0);
    }

    #[test]
    fn confusion_random_predictions_are_flat() {
        let (k, n) = (5, 50_000);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let m = confusion_matrix(&pred, &gt, &vec![true; n], k);
        let p = 1.0 / k as f64;
        for (r, row) in m.rows.iter().enumerate() {
            let sigma = (p * (1.0 - p) / m.counts[r] as f64).sqrt();
            for &v in row {
                assert!((v - p).abs() < 3.0 * sigma, "{v} vs {p} ± {sigma}");
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn curves_dump() {
        let o = OrdinalOutput::from_probs(2, 3, vec![1.0, 1.0, 0.0, 0.9, 0.2, 0.1]).unwrap();
        let lines = dump_probability_curves(&o, &[1, 0]).unwrap();
        assert_eq!(lines[0], "1,0.9,0.2,0.1");
        assert_eq!(lines[1].split(',').count(), 3 + 1);
        assert!(is_non_increasing(o.row(0)));
        assert!(matches!(
            dump_probability_curves(&o, &[2]),
            Err(MetricsError::Index {
                index: 2,
                pixels: 2
            })
        ));
    }

    #[test]
    fn saturated_logits_make_step_curves() {
        let rows: Vec<f64> = (0..6)
            .flat_map(|k| if k < 4 { [-30.0, 30.0] } else { [30.0, -30.0] })
            .collect();
        let t = crate::tensor::Tensor::new(vec![1, 12], rows).unwrap();
        let o = OrdinalOutput::from_logit_rows(&t).unwrap();
        let c = o.row(0);
        assert!(is_non_increasing(c));
        assert!(c[..4].iter().all(|&p| p > 0.999_999) && c[4..].iter().all(|&p| p < 1e-6));
    }

    proptest! {
        #[test]
        fn deltas_ordered_and_symmetric(
            pairs in proptest::collection::vec((0.1f64..20.0, 0.1f64..20.0), 1..40),
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let valid = vec![true; a.len()];
            let r = evaluate(&a, &b, &valid).unwrap();
            let s = evaluate(&b, &a, &valid).unwrap();
            prop_assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3);
            prop_assert_eq!((r.delta1, r.delta2, r.delta3), (s.delta1, s.delta2, s.delta3));
            prop_assert!(r.rmse >= 0.0);
        }

        #[test]
        fn deltas_scale_invariant(
            pairs in proptest::collection::vec((0.1f64..20.0, 0.1f64..20.0), 1..40),
            scale in 0.25f64..4.0,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let valid = vec![true; a.len()];
            // keep ratios away from the thresholds so rounding cannot flip them
            for (x, y) in a.iter().zip(&b) {
                let r = (x / y).max(y / x);
                for p in 1..=3 {
                    prop_assume!((r - DELTA_BASE.powi(p)).abs() > 1e-9);
                }
            }
            let sa: Vec<f64> = a.iter().map(|x| x * scale).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * scale).collect();
            let r = evaluate(&a, &b, &valid).unwrap();
            let s = evaluate(&sa, &sb, &valid).unwrap();
            prop_assert_eq!((r.delta1, r.delta2, r.delta3), (s.delta1, s.delta2, s.delta3));
        }
    }
}
