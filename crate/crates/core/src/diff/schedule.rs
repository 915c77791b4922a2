/// Cosine annealing from `lr0` at `step = 0` to `lr1` at `step = total`.
///
/// Written as a convex combination so both endpoints are reproduced exactly.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, lr1: f64) -> f64 {
    let total = total.max(1);
    let step = step.min(total);
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
    lr0 * w + lr1 * (1.0 - w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        for total in [1, 7, 2000] {
            assert_eq!(cosine_lr(0, total, 1e-3, 1e-6), 1e-3);
            assert_eq!(cosine_lr(total, total, 1e-3, 1e-6), 1e-6);
        }
    }

    #[test]
    fn midpoint_and_monotone() {
        let mid = cosine_lr(1000, 2000, 1e-3, 1e-6);
        assert!((mid - 5.005e-4).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=50 {
            let lr = cosine_lr(s, 50, 1e-3, 1e-6);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
