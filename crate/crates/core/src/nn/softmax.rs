use crate::error::{Error, Result};

/// Logit used for masked entries before any softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// Probability floor applied inside the log affinity loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax over the entries with `mask == true`; masked entries get 0.
pub fn masked_softmax(values: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if values.len() != mask.len() {
        return Err(Error::Shape(format!(
            "softmax values {} vs mask {}",
            values.len(),
            mask.len()
        )));
    }
    let max = values
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidInput("softmax over an all-masked input".into()));
    }
    let mut out: Vec<f64> = values
        .iter()
        .zip(mask)
        .map(|(v, m)| if *m { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// `sum(gt * -log(pred)) / sum(gt)`, or `None` when `gt` has no mass.
pub fn log_affinity_loss(pred: &[f64], gt: &[f64]) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "loss prediction {} vs ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let total: f64 = gt.iter().sum();
    if total <= 0.0 {
        return Ok(None);
    }
    let num: f64 = pred
        .iter()
        .zip(gt)
        .filter(|(_, g)| **g != 0.0)
        .map(|(p, g)| -g * p.max(PROB_FLOOR).ln())
        .sum();
    Ok(Some(num / total))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_are_uniform() {
        let p = masked_softmax(&[2.0, 2.0, 2.0, 9.0], &[true, true, true, false]).unwrap();
        for k in 0..3 {
            assert!((p[k] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(p[3], 0.0);
    }

    #[test]
    fn hand_softmax() {
        let p = masked_softmax(&[0.0, 3f64.ln()], &[true, true]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn single_valid_entry_is_certain() {
        let p = masked_softmax(&[-50.0, 1.0], &[true, false]).unwrap();
        assert_eq!(p, vec![1.0, 0.0]);
    }

    #[test]
    fn all_masked_is_an_error() {
        assert!(masked_softmax(&[1.0, 2.0], &[false, false]).is_err());
        assert!(masked_softmax(&[1.0], &[true, false]).is_err());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(log_affinity_loss(&[1.0, 0.3], &[1.0, 0.0]).unwrap(), Some(0.0));
        let l = log_affinity_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap().unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        let l = log_affinity_loss(&[1.0, 0.5], &[1.0, 1.0]).unwrap().unwrap();
        assert!((l - 0.5 * 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.3466).abs() < 1e-4);
        assert_eq!(log_affinity_loss(&[0.2, 0.8], &[0.0, 0.0]).unwrap(), None);
        // floor keeps the loss finite
        let l = log_affinity_loss(&[0.0], &[1.0]).unwrap().unwrap();
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shift_invariance(
                v in prop::collection::vec(-20.0f64..20.0, 1..12),
                c in -100.0f64..100.0,
            ) {
                let mask = vec![true; v.len()];
                let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
                let a = masked_softmax(&v, &mask).unwrap();
                let b = masked_softmax(&shifted, &mask).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn loss_is_non_negative(
                p in prop::collection::vec(0.0f64..=1.0, 1..10),
                g in prop::collection::vec(prop::bool::ANY, 1..10),
            ) {
                let n = p.len().min(g.len());
                let gt: Vec<f64> = g[..n].iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
                if let Some(l) = log_affinity_loss(&p[..n], &gt).unwrap() {
                    prop_assert!(l >= 0.0);
                }
            }
        }
    }
}
