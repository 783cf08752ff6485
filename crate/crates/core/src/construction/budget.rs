//! Per-layer error budgets. `eps_l` is the largest per-parameter error in
//! target layer `l` that still keeps the propagated output error below
//! `eps`.

use crate::error::{Error, Result};
use crate::network::{count_nonzero, NetworkSpec};

fn check(eps: f64, t: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must lie in (0, 1), got {eps}")));
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::InvalidArgument(format!("Lipschitz constant must be positive, got {t}")));
    }
    Ok(())
}

/// `eps_l = eps / ((3T)^(L-l+1) prod_{s=l..L} N_s)` from per-layer nonzero
/// counts `N_1 .. N_L`.
pub fn budget_2l_from_counts(counts: &[usize], eps: f64, t: f64) -> Result<Vec<f64>> {
    check(eps, t)?;
    if let Some(l) = counts.iter().position(|&n| n == 0) {
        return Err(Error::DegenerateTarget { layer: l + 1 });
    }
    let mut out = vec![0.0; counts.len()];
    let mut denom = 1.0;
    for l in (0..counts.len()).rev() {
        denom *= 3.0 * t * counts[l] as f64;
        out[l] = eps / denom;
    }
    Ok(out)
}

/// `eps_l = eps / (2 T N_{w,l} prod_{s=l+1..L} 2 (T N_{w,s} + N_{m,s}))`.
pub fn budget_lp1_from_counts(weights: &[usize], skips: &[usize], eps: f64, t: f64) -> Result<Vec<f64>> {
    check(eps, t)?;
    if weights.len() != skips.len() {
        return Err(Error::InvalidArgument("weight and skip counts differ in length".into()));
    }
    if let Some(l) = weights.iter().position(|&n| n == 0) {
        return Err(Error::DegenerateTarget { layer: l + 1 });
    }
    let depth = weights.len();
    let mut out = vec![0.0; depth];
    let mut tail = 1.0;
    for l in (0..depth).rev() {
        out[l] = eps / (2.0 * t * weights[l] as f64 * tail);
        tail *= 2.0 * (t * weights[l] as f64 + skips[l] as f64);
    }
    Ok(out)
}

pub fn error_budget_2l(target: &NetworkSpec, eps: f64, t: f64) -> Result<Vec<f64>> {
    let c = count_nonzero(target);
    let totals: Vec<usize> = (1..=target.depth()).map(|l| c.layer_total(l)).collect();
    budget_2l_from_counts(&totals, eps, t)
}

pub fn error_budget_lp1(target: &NetworkSpec, eps: f64, t: f64) -> Result<Vec<f64>> {
    let c = count_nonzero(target);
    budget_lp1_from_counts(&c.weights, &c.skips, eps, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_l_examples() {
        let b = budget_2l_from_counts(&[10, 10], 0.1, 1.0).unwrap();
        assert_eq!(b, vec![0.1 / 900.0, 0.1 / 30.0]);
        assert_eq!(budget_2l_from_counts(&[1], 0.3, 1.0).unwrap(), vec![0.3 / 3.0]);
        assert!((budget_2l_from_counts(&[1], 0.3, 1.0).unwrap()[0] - 0.1).abs() < 1e-16);
    }

    #[test]
    fn lp1_examples() {
        let b = budget_lp1_from_counts(&[10, 10], &[0, 0], 0.1, 1.0).unwrap();
        assert_eq!(b, vec![0.1 / 400.0, 0.1 / 20.0]);
        assert!((b[1] - 5e-3).abs() < 1e-18 && (b[0] - 2.5e-4).abs() < 1e-18);
        let b = budget_lp1_from_counts(&[10, 10], &[0, 10], 0.1, 1.0).unwrap();
        assert_eq!(b[0], 0.1 / 800.0);
        assert!((b[0] - 1.25e-4).abs() < 1e-18);
    }

    #[test]
    fn degenerate_layers_rejected() {
        assert!(matches!(
            budget_2l_from_counts(&[3, 0], 0.1, 1.0),
            Err(Error::DegenerateTarget { layer: 2 })
        ));
        assert!(matches!(
            budget_lp1_from_counts(&[0, 3], &[0, 0], 0.1, 1.0),
            Err(Error::DegenerateTarget { layer: 1 })
        ));
    }

    proptest! {
        #[test]
        fn budgets_increase_with_depth_and_scale_linearly(
            // monotonicity needs 2 T N >= 1, which holds for any realistic layer
            counts in prop::collection::vec(4usize..200, 1..5),
            skips in prop::collection::vec(0usize..50, 5),
            eps in 0.001f64..0.45,
            t in prop::sample::select(vec![0.25, 1.0]),
        ) {
            let skips = &skips[..counts.len()];
            for b in [
                budget_2l_from_counts(&counts, eps, t).unwrap(),
                budget_lp1_from_counts(&counts, skips, eps, t).unwrap(),
            ] {
                for w in b.windows(2) {
                    prop_assert!(w[0] <= w[1]);
                }
            }
            let a = budget_2l_from_counts(&counts, eps, t).unwrap();
            let d = budget_2l_from_counts(&counts, 2.0 * eps, t).unwrap();
            for (x, y) in a.iter().zip(&d) {
                prop_assert!((2.0 * x - y).abs() <= 1e-15 * y);
            }
        }
    }
}
