//! Binomial coefficients, exact and in log space.

/// Exact binomial coefficient. Returns `None` on u128 overflow (far beyond
/// the block counts this crate works with; `choose(128, 64)` still fits).
/// `r > n` yields 0 by convention.
pub fn choose(n: u64, r: u64) -> Option<u128> {
    if r > n {
        return Some(0);
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 1..=r {
        // acc * (n - r + i) is divisible by i at every step.
        acc = acc.checked_mul((n - r + i) as u128)? / i as u128;
    }
    Some(acc)
}

/// ln C(n, r); `-inf` when r > n. Accurate to ~1e-14 relative for the
/// population sizes used here.
pub fn ln_choose(n: u64, r: u64) -> f64 {
    if r > n {
        return f64::NEG_INFINITY;
    }
    let r = r.min(n - r);
    let mut acc = 0.0;
    for i in 1..=r {
        acc += ((n - r + i) as f64).ln() - (i as f64).ln();
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_product_cases() {
        // 28*27/2 and 40*39*38*37*36*35/720, computed by hand.
        assert_eq!(choose(28, 2), Some(378));
        assert_eq!(choose(40, 6), Some(3_838_380));
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(choose(17, 0), Some(1));
        assert_eq!(choose(0, 0), Some(1));
        assert_eq!(choose(3, 5), Some(0));
        assert!(ln_choose(3, 5).is_infinite());
    }

    #[test]
    fn log_space_matches_exact_to_1e12_relative() {
        for n in 0..=64u64 {
            for r in 0..=n {
                let exact = choose(n, r).unwrap() as f64;
                let vialn = ln_choose(n, r).exp();
                let rel = (vialn - exact).abs() / exact;
                assert!(rel < 1e-12, "C({n},{r}): rel err {rel}");
            }
        }
    }
}
