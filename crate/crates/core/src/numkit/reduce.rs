use crate::error::{ensure, Result};

/// log Σ exp(v_i), stabilized by subtracting the maximum.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    ensure!(!v.is_empty(), "logsumexp of an empty vector");
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
}

/// Softmax with the same stabilization.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(logsumexp(&[2.5]).unwrap(), 2.5);
        assert!((logsumexp(&[0.0, 0.0, 0.0]).unwrap() - 3f64.ln()).abs() < 1e-15);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(logsumexp(&[]).is_err());
    }

    proptest! {
        #[test]
        fn bounded_by_max_and_log_len(v in prop::collection::vec(-500.0f64..500.0, 1..20)) {
            let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = logsumexp(&v).unwrap();
            prop_assert!(l >= m);
            prop_assert!(l <= m + (v.len() as f64).ln() + 1e-12);
        }
    }
}
