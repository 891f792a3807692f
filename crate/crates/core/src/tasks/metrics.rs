use crate::error::{Error, Result};
use crate::geom3d::Vec3;

/// `m[t][p]` counts points of true class `t` predicted as `p`.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "confusion_matrix",
            detail: format!("{} predictions for {} labels", pred.len(), truth.len()),
        });
    }
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Precondition(format!("label {} out of {classes} classes", p.max(t))));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// IoU of each class. A class absent from both prediction and truth scores 1.
pub fn iou_per_class(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<f64>> {
    let m = confusion_matrix(pred, truth, classes)?;
    Ok((0..classes)
        .map(|c| {
            let tp = m[c][c];
            let fn_: usize = m[c].iter().sum::<usize>() - tp;
            let fp: usize = (0..classes).map(|t| m[t][c]).sum::<usize>() - tp;
            let union = tp + fn_ + fp;
            if union == 0 {
                1.0
            } else {
                tp as f64 / union as f64
            }
        })
        .collect())
}

/// Mean over instances of the per-instance class-averaged IoU.
pub fn instance_mean_iou(instances: &[(Vec<usize>, Vec<usize>)], classes: usize) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Precondition("no instances".into()));
    }
    let mut total = 0.0;
    for (pred, truth) in instances {
        let per = iou_per_class(pred, truth, classes)?;
        total += per.iter().sum::<f64>() / classes as f64;
    }
    Ok(total / instances.len() as f64)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "accuracy",
            detail: format!("{} predictions for {} labels", pred.len(), truth.len()),
        });
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean squared error per vector component.
pub fn mse(pred: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "mse",
            detail: format!("{} predictions for {} targets", pred.len(), truth.len()),
        });
    }
    let s: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).norm_squared()).sum();
    Ok(s / (3 * pred.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Set-based IoU straight from the definition.
    fn brute_iou(pred: &[usize], truth: &[usize], c: usize) -> f64 {
        let inter = pred.iter().zip(truth).filter(|(p, t)| **p == c && **t == c).count();
        let union = pred.iter().zip(truth).filter(|(p, t)| **p == c || **t == c).count();
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn perfect_labels_score_one() {
        let t = vec![0, 1, 2, 2, 1, 0];
        assert_eq!(instance_mean_iou(&[(t.clone(), t.clone())], 3).unwrap(), 1.0);
        assert_eq!(accuracy(&t, &t).unwrap(), 1.0);
    }

    #[test]
    fn single_class_predictor() {
        let truth: Vec<usize> = (0..30).map(|i| i / 10).collect();
        for c in 0..3 {
            let pred = vec![c; 30];
            let per = iou_per_class(&pred, &truth, 3).unwrap();
            for (k, v) in per.iter().enumerate() {
                let expected = if k == c { 10.0 / 30.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-15);
            }
            // 25% chance for a constant predictor on four balanced classes.
            let four: Vec<usize> = (0..40).map(|i| i / 10).collect();
            assert_eq!(accuracy(&vec![c; 40], &four).unwrap(), 0.25);
        }
    }

    #[test]
    fn mismatched_lengths_error() {
        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
        assert!(confusion_matrix(&[3], &[0], 2).is_err());
        assert!(mse(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn iou_matches_brute_force(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        ) {
            let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let per = iou_per_class(&pred, &truth, 4).unwrap();
            for (c, v) in per.iter().enumerate() {
                prop_assert_eq!(*v, brute_iou(&pred, &truth, c));
            }
            let m = confusion_matrix(&pred, &truth, 4).unwrap();
            prop_assert_eq!(m.iter().flatten().sum::<usize>(), pred.len());
        }

        #[test]
        fn iou_invariant_under_relabeling(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40),
            perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        ) {
            let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let relabel = |v: &[usize]| v.iter().map(|&x| perm[x]).collect::<Vec<_>>();
            let a = instance_mean_iou(&[(pred.clone(), truth.clone())], 3).unwrap();
            let b = instance_mean_iou(&[(relabel(&pred), relabel(&truth))], 3).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
        }
    }
}
