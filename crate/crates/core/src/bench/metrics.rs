//! Error metrics on initial-state estimates.

/// Root-mean-square error over the grid.
pub fn rmse(x_hat: &[f64], x_true: &[f64]) -> f64 {
    assert_eq!(x_hat.len(), x_true.len(), "rmse of vectors with different lengths");
    let sq: f64 = x_hat.iter().zip(x_true).map(|(a, b)| (a - b).powi(2)).sum();
    (sq / x_hat.len() as f64).sqrt()
}

/// Mean error, estimate minus truth (positive means overestimation).
pub fn bias(x_hat: &[f64], x_true: &[f64]) -> f64 {
    assert_eq!(x_hat.len(), x_true.len(), "bias of vectors with different lengths");
    x_hat.iter().zip(x_true).map(|(a, b)| a - b).sum::<f64>() / x_hat.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        let t = [1.0, -2.0, 0.5];
        assert_eq!(rmse(&t, &t), 0.0);
        assert_eq!(bias(&t, &t), 0.0);
        let shifted: Vec<f64> = t.iter().map(|v| v - 1.5).collect();
        assert!((rmse(&shifted, &t) - 1.5).abs() < 1e-15);
        assert!((bias(&shifted, &t) + 1.5).abs() < 1e-15);
        assert!((rmse(&[3.0, 4.0], &[0.0, 0.0]) - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(bias(&[0.7, -0.7], &[0.0, 0.0]), 0.0);
    }

    proptest! {
        #[test]
        fn rmse_dominates_bias(pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..64)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = rmse(&a, &b);
            let m = bias(&a, &b);
            prop_assert!(r >= 0.0);
            prop_assert!(r * r >= m * m - 1e-9 * (1.0 + r * r));
        }
    }
}
