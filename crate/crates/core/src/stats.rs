//! Plain 64-bit distribution statistics used for diagnostics and sampling.

use crate::tape::LOG_FLOOR;

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// `KL(p ‖ q)` in nats, with `q` clamped at the log floor.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(LOG_FLOOR).ln()))
        .sum()
}

/// Numerically stable softmax of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Elementwise mean of equally sized distributions.
pub fn mean_distribution<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for row in rows {
        if acc.is_empty() {
            acc = vec![0.0; row.len()];
        }
        acc.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count.max(1) as f64);
    acc
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let uniform = vec![1.0 / 49.0; 49];
        assert!((entropy(&uniform) - 49f64.ln()).abs() < 1e-12);
        assert!((entropy(&uniform) - 3.8918).abs() < 1e-4);
        let mut one_hot = vec![0.0; 49];
        one_hot[3] = 1.0;
        assert_eq!(entropy(&one_hot), 0.0);
        assert!((entropy(&[0.5, 0.5, 0.0]) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.14384).abs() < 1e-5);
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
    }
}
