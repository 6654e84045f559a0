//! Small descriptive statistics used across modules.

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation with the `n - 1` divisor; zero for fewer than two values.
pub fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile_sorted(s: &[f64], p: f64) -> f64 {
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

pub fn median(v: &[f64]) -> f64 {
    quantile_sorted(&sorted(v), 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_values() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(mean(&v), 2.5);
        assert!((sd(&v) - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile_sorted(&sorted(&v), 0.0), 1.0);
        assert_eq!(quantile_sorted(&sorted(&v), 1.0), 4.0);
        assert_eq!(sd(&[1.0]), 0.0);
    }
}
