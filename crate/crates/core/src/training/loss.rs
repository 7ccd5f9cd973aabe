use serde::{Deserialize, Serialize};

/// Softmax cross-entropy of one sample. Returns the loss and writes
/// `∂loss/∂logits` into `grad`.
pub fn cross_entropy(logits: &[f64], label: usize, grad: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (g, &z) in grad.iter_mut().zip(logits) {
        *g = (z - max).exp();
        sum += *g;
    }
    for g in grad.iter_mut() {
        *g /= sum;
    }
    let loss = sum.ln() - (logits[label] - max);
    grad[label] -= 1.0;
    loss
}

/// Post-training objective: mean cross-entropy plus `(ζ / N) Σ λ²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub bound_penalty_weight: f64,
    pub neuron_count: usize,
}

impl LossSpec {
    pub fn penalty(&self, bounds: impl IntoIterator<Item = f64>) -> f64 {
        if self.neuron_count == 0 {
            return 0.0;
        }
        let sq: f64 = bounds.into_iter().map(|l| l * l).sum();
        self.bound_penalty_weight / self.neuron_count as f64 * sq
    }

    pub fn total(&self, base: f64, bounds: impl IntoIterator<Item = f64>) -> f64 {
        base + self.penalty(bounds)
    }

    /// `∂ penalty / ∂λ`.
    pub fn penalty_grad(&self, lambda: f64) -> f64 {
        if self.neuron_count == 0 {
            return 0.0;
        }
        2.0 * self.bound_penalty_weight / self.neuron_count as f64 * lambda
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut g = [0.0; 4];
        let l = cross_entropy(&[0.3; 4], 2, &mut g);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g[2] + 0.75).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn stable_for_large_logits() {
        let mut g = [0.0; 2];
        let l = cross_entropy(&[1000.0, 0.0], 0, &mut g);
        assert!(l.abs() < 1e-12);
        let l = cross_entropy(&[1000.0, 0.0], 1, &mut g);
        assert!((l - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let z = [0.2, -1.3, 0.7];
        let mut g = [0.0; 3];
        cross_entropy(&z, 1, &mut g);
        let mut scratch = [0.0; 3];
        for i in 0..3 {
            let mut p = z;
            p[i] += 1e-6;
            let mut m = z;
            m[i] -= 1e-6;
            let fd = (cross_entropy(&p, 1, &mut scratch) - cross_entropy(&m, 1, &mut scratch)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn penalty_composition() {
        let spec = LossSpec {
            bound_penalty_weight: 0.5,
            neuron_count: 4,
        };
        // 0.5 / 4 * (1 + 4 + 9 + 16)
        assert_eq!(spec.total(2.0, [1.0, 2.0, 3.0, 4.0]), 2.0 + 3.75);
        assert_eq!(spec.penalty_grad(2.0), 0.5);
    }
}
