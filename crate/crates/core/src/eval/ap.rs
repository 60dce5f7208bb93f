//! Average precision with the precision-at-each-positive estimator.

use crate::error::{Error, Result};
use ndarray::Array2;

/// AP for one class: positives ranked by descending score (ties broken by
/// ascending index, a stable order), precision evaluated at each positive,
/// averaged. `None` when the class has no positives.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    debug_assert_eq!(scores.len(), targets.len());
    let num_pos = targets.iter().filter(|&&t| t).count();
    if num_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if targets[idx] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(ap / num_pos as f64)
}

/// Per-class AP and their macro mean. Classes with no positives are excluded
/// from the mean; it is an error for every class to be empty.
pub fn mean_average_precision(
    scores: &Array2<f64>,
    targets: &Array2<bool>,
) -> Result<(Vec<Option<f64>>, f64)> {
    if scores.dim() != targets.dim() {
        return Err(Error::ShapeMismatch(format!(
            "scores {:?} vs targets {:?}",
            scores.dim(),
            targets.dim()
        )));
    }
    let k = scores.ncols();
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..k {
        let s: Vec<f64> = scores.column(c).to_vec();
        let t: Vec<bool> = targets.column(c).to_vec();
        let ap = average_precision(&s, &t);
        if let Some(v) = ap {
            sum += v;
            counted += 1;
        }
        per_class.push(ap);
    }
    if counted == 0 {
        return Err(Error::Other("no class has any positive target".into()));
    }
    Ok((per_class, sum / counted as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_ranking_has_unit_map() {
        let scores = array![[0.9, 0.1], [0.8, 0.2], [0.2, 0.9], [0.1, 0.7]];
        let targets = array![[true, false], [true, false], [false, true], [false, true]];
        let (_, map) = mean_average_precision(&scores, &targets).unwrap();
        assert!((map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_single_class() {
        // scores (0.9, 0.8, 0.7), targets (1, 0, 1): AP = (1/1 + 2/3)/2.
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_index() {
        // Tied scores: order is by index, so (pos, neg) at equal score ranks
        // the earlier index first.
        let ap_pos_first = average_precision(&[0.5, 0.5], &[true, false]).unwrap();
        assert!((ap_pos_first - 1.0).abs() < 1e-12);
        let ap_pos_second = average_precision(&[0.5, 0.5], &[false, true]).unwrap();
        assert!((ap_pos_second - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_classes_are_excluded_not_zeroed() {
        let scores = array![[0.9, 0.4], [0.1, 0.6]];
        let targets = array![[true, false], [false, false]];
        let (per_class, map) = mean_average_precision(&scores, &targets).unwrap();
        assert_eq!(per_class[1], None);
        assert!((map - per_class[0].unwrap()).abs() < 1e-12);
    }

    #[test]
    fn all_empty_is_an_error() {
        let scores = array![[0.9], [0.1]];
        let targets = array![[false], [false]];
        assert!(mean_average_precision(&scores, &targets).is_err());
    }
}
