//! Evaluation metrics: label-inference success rate (LISR), attack success
//! rate over manipulated samples (mASR), attack success rate over
//! manipulated true-source samples (rASR), and main-task accuracy (MTA).
//!
//! Metrics with an empty denominator are reported as undefined (`None`,
//! serialized as JSON null), never as 0.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VflError};

/// Everything a metric computation looks at for one evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionTrace {
    pub true_labels: Vec<usize>,
    pub predicted_labels: Vec<usize>,
    pub manipulated_mask: Vec<bool>,
    pub source_label: Option<usize>,
    pub target_label: usize,
}

impl PredictionTrace {
    fn check(&self) -> Result<()> {
        if self.true_labels.is_empty() {
            return Err(VflError::Validation("metrics: empty trace".into()));
        }
        if self.predicted_labels.len() != self.true_labels.len()
            || self.manipulated_mask.len() != self.true_labels.len()
        {
            return Err(VflError::Validation(
                "metrics: trace arrays have inconsistent lengths".into(),
            ));
        }
        if self.source_label == Some(self.target_label) {
            return Err(VflError::Validation(
                "metrics: source label equals target label".into(),
            ));
        }
        Ok(())
    }
}

/// One metric value with its denominator; `value` is `None` when the
/// denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: Option<f64>,
    pub numerator: usize,
    pub denominator: usize,
}

impl MetricValue {
    fn from_counts(numerator: usize, denominator: usize) -> Self {
        MetricValue {
            value: (denominator > 0).then(|| numerator as f64 / denominator as f64),
            numerator,
            denominator,
        }
    }
}

/// Aggregated metrics for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub lisr: Option<f64>,
    pub masr: Option<f64>,
    pub rasr: Option<f64>,
    pub mta: Option<f64>,
    pub counts: MetricCounts,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricCounts {
    pub lisr_den: usize,
    pub masr_den: usize,
    pub rasr_den: usize,
    pub mta_den: usize,
}

/// Fraction of training samples whose inferred label matches the true label.
pub fn compute_lisr(inferred: &[usize], true_labels: &[usize]) -> Result<f64> {
    if inferred.is_empty() {
        return Err(VflError::Validation("lisr: empty input".into()));
    }
    if inferred.len() != true_labels.len() {
        return Err(VflError::Validation("lisr: length mismatch".into()));
    }
    let hits = inferred.iter().zip(true_labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / inferred.len() as f64)
}

/// Among manipulated samples, the fraction predicted as the target label.
///
/// Samples whose true label already is the target are excluded: predicting
/// the target on them is not a misclassification, so counting them would
/// floor the metric at the target-class base rate even for a fully
/// neutralized attack. This matches the usual attack-success-rate
/// convention.
pub fn compute_masr(trace: &PredictionTrace) -> Result<MetricValue> {
    trace.check()?;
    let mut num = 0;
    let mut den = 0;
    for i in 0..trace.true_labels.len() {
        if trace.manipulated_mask[i] && trace.true_labels[i] != trace.target_label {
            den += 1;
            if trace.predicted_labels[i] == trace.target_label {
                num += 1;
            }
        }
    }
    Ok(MetricValue::from_counts(num, den))
}

/// Among manipulated samples whose true label is the source label, the
/// fraction predicted as the target label.
pub fn compute_rasr(trace: &PredictionTrace) -> Result<MetricValue> {
    trace.check()?;
    let source = trace.source_label.ok_or_else(|| {
        VflError::Validation("rasr requires a source label".into())
    })?;
    let mut num = 0;
    let mut den = 0;
    for i in 0..trace.true_labels.len() {
        if trace.manipulated_mask[i] && trace.true_labels[i] == source {
            den += 1;
            if trace.predicted_labels[i] == trace.target_label {
                num += 1;
            }
        }
    }
    Ok(MetricValue::from_counts(num, den))
}

/// Fraction of correct predictions over a benign (unmanipulated) trace.
pub fn compute_mta(trace: &PredictionTrace) -> Result<MetricValue> {
    trace.check()?;
    if trace.manipulated_mask.iter().any(|&m| m) {
        return Err(VflError::Validation(
            "mta must be computed over a benign trace with no manipulated samples".into(),
        ));
    }
    let num = trace
        .true_labels
        .iter()
        .zip(&trace.predicted_labels)
        .filter(|(t, p)| t == p)
        .count();
    Ok(MetricValue::from_counts(num, trace.true_labels.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(
        true_labels: Vec<usize>,
        predicted: Vec<usize>,
        manipulated: Vec<bool>,
        source: Option<usize>,
        target: usize,
    ) -> PredictionTrace {
        PredictionTrace {
            true_labels,
            predicted_labels: predicted,
            manipulated_mask: manipulated,
            source_label: source,
            target_label: target,
        }
    }

    #[test]
    fn lisr_trivials() {
        assert_eq!(compute_lisr(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        // balanced labels shifted by one class never match
        assert_eq!(compute_lisr(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert!(compute_lisr(&[], &[]).is_err());
        assert!(compute_lisr(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn masr_counts_only_manipulated_samples() {
        let t = trace(
            vec![0, 1, 2, 3],
            vec![9, 9, 0, 9],
            vec![true, true, true, false],
            None,
            9,
        );
        let m = compute_masr(&t).unwrap();
        assert_eq!(m.value, Some(2.0 / 3.0));
        assert_eq!((m.numerator, m.denominator), (2, 3));
    }

    #[test]
    fn masr_excludes_samples_already_of_the_target_class() {
        // two manipulated true-target samples predicted correctly must not
        // count as attack successes
        let t = trace(
            vec![9, 9, 1, 2],
            vec![9, 9, 9, 1],
            vec![true, true, true, true],
            None,
            9,
        );
        let m = compute_masr(&t).unwrap();
        assert_eq!((m.numerator, m.denominator), (1, 2));
        assert_eq!(m.value, Some(0.5));
    }

    #[test]
    fn masr_undefined_without_manipulation() {
        let t = trace(vec![0, 1], vec![0, 1], vec![false, false], None, 5);
        let m = compute_masr(&t).unwrap();
        assert_eq!(m.value, None);
        assert_eq!(m.denominator, 0);
    }

    #[test]
    fn undefined_serializes_as_null() {
        let report = MetricsReport {
            lisr: None,
            masr: None,
            rasr: Some(0.5),
            mta: None,
            counts: MetricCounts::default(),
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"masr\":null"));
        assert!(json.contains("\"rasr\":0.5"));
    }

    #[test]
    fn rasr_restricts_to_true_source_samples() {
        let t = trace(
            vec![0, 0, 1, 0],
            vec![7, 1, 7, 7],
            vec![true, true, true, false],
            Some(0),
            7,
        );
        let r = compute_rasr(&t).unwrap();
        // qualifying: samples 0 and 1 (manipulated, true label 0); one hit
        assert_eq!(r.value, Some(0.5));
        assert_eq!(r.denominator, 2);
    }

    #[test]
    fn rasr_undefined_when_no_source_samples_manipulated() {
        let t = trace(vec![1, 1], vec![7, 7], vec![true, true], Some(0), 7);
        assert_eq!(compute_rasr(&t).unwrap().value, None);
    }

    #[test]
    fn mta_trivials() {
        let perfect = trace(vec![0, 1, 2], vec![0, 1, 2], vec![false; 3], None, 9);
        assert_eq!(compute_mta(&perfect).unwrap().value, Some(1.0));

        let constant = trace(vec![0, 1, 2], vec![0, 0, 0], vec![false; 3], None, 9);
        assert_eq!(compute_mta(&constant).unwrap().value, Some(1.0 / 3.0));
    }

    #[test]
    fn mta_rejects_manipulated_traces() {
        let t = trace(vec![0, 1], vec![0, 1], vec![true, false], None, 9);
        assert!(compute_mta(&t).is_err());
    }

    #[test]
    fn source_equal_target_rejected() {
        let t = trace(vec![0], vec![0], vec![true], Some(3), 3);
        assert!(compute_masr(&t).is_err());
    }

    #[test]
    fn masr_is_weighted_mean_of_rasr_and_non_source_success() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(5..60);
            let t = trace(
                (0..n).map(|_| rng.random_range(0..4)).collect(),
                (0..n).map(|_| rng.random_range(0..4)).collect(),
                (0..n).map(|_| rng.random_bool(0.7)).collect(),
                Some(0),
                3,
            );
            let masr = compute_masr(&t).unwrap();
            let rasr = compute_rasr(&t).unwrap();
            let non_source_num = masr.numerator - rasr.numerator;
            let non_source_den = masr.denominator - rasr.denominator;
            if masr.denominator == 0 {
                continue;
            }
            let weighted = (rasr.numerator + non_source_num) as f64 / masr.denominator as f64;
            assert_eq!(masr.value, Some(weighted));
            if let (Some(m), Some(r)) = (masr.value, rasr.value) {
                if non_source_den > 0 {
                    let other = non_source_num as f64 / non_source_den as f64;
                    let (lo, hi) = if r <= other { (r, other) } else { (other, r) };
                    assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let t = trace(
            vec![0, 1, 0, 2, 0],
            vec![7, 7, 0, 7, 7],
            vec![true, true, false, true, true],
            Some(0),
            7,
        );
        let perm = [4, 2, 0, 3, 1];
        let tp = trace(
            perm.iter().map(|&i| t.true_labels[i]).collect(),
            perm.iter().map(|&i| t.predicted_labels[i]).collect(),
            perm.iter().map(|&i| t.manipulated_mask[i]).collect(),
            Some(0),
            7,
        );
        assert_eq!(compute_masr(&t).unwrap(), compute_masr(&tp).unwrap());
        assert_eq!(compute_rasr(&t).unwrap(), compute_rasr(&tp).unwrap());
    }
}
