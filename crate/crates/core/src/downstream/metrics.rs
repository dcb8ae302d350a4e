//! Token-level evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged precision, recall and F1 from pooled counts over every
/// class except `ignore`. A prediction of the ignored class is never a
/// false positive, and a gold label of it is never a false negative.
/// When nothing is predicted and nothing is expected the scores are 1.
pub fn micro_prf(preds: &[usize], golds: &[usize], ignore: Option<usize>) -> Result<PrfScore> {
    if preds.len() != golds.len() {
        return invalid(format!("{} predictions for {} gold labels", preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return invalid("micro F1 of an empty set");
    }
    let counted = |c: usize| Some(c) != ignore;
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &g) in preds.iter().zip(golds) {
        if p == g {
            if counted(g) {
                tp += 1;
            }
            continue;
        }
        if counted(p) {
            fp += 1;
        }
        if counted(g) {
            fne += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PrfScore { precision, recall, f1 })
}

/// Micro F1 over all classes.
pub fn micro_f1(preds: &[usize], golds: &[usize]) -> Result<f64> {
    Ok(micro_prf(preds, golds, None)?.f1)
}

pub fn accuracy(preds: &[usize], golds: &[usize]) -> Result<f64> {
    if preds.len() != golds.len() || preds.is_empty() {
        return invalid("accuracy needs equal, non-empty label lists");
    }
    Ok(preds.iter().zip(golds).filter(|(p, g)| p == g).count() as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_case() {
        // gold {q, q, a}, predicted {q, a, a}
        let s = micro_prf(&[1, 2, 2], &[1, 1, 2], None).unwrap();
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_all_wrong() {
        assert_eq!(micro_f1(&[0, 1, 3], &[0, 1, 3]).unwrap(), 1.0);
        assert_eq!(micro_f1(&[1, 0], &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn excluding_a_class() {
        // other = 3: one question found, one question missed as other, one other
        // mislabelled as answer
        let s = micro_prf(&[1, 3, 2], &[1, 1, 3], Some(3)).unwrap();
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.recall, 0.5);
    }

    #[test]
    fn mismatched_or_empty_inputs_fail() {
        assert!(micro_f1(&[], &[]).is_err());
        assert!(micro_f1(&[1], &[1, 2]).is_err());
    }
}
