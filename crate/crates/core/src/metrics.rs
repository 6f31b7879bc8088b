//! Sample-based distance between feature distributions.

use crate::error::{Error, Result};
use crate::numerics::NdArray;

fn mean_pairwise(a: &NdArray, b: &NdArray) -> f64 {
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let mut total = 0.0;
    for i in 0..n {
        let x = a.row(i);
        for j in 0..m {
            let d2: f64 = x.iter().zip(b.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
            total += d2.sqrt();
        }
    }
    total / (n * m) as f64
}

/// Energy distance `2·E‖X − Y‖ − E‖X − X'‖ − E‖Y − Y'‖` between the
/// empirical distributions of two row sets `[n, d]` and `[m, d]`. Always
/// non-negative, and zero for identical sets.
pub fn energy_distance(x: &NdArray, y: &NdArray) -> Result<f64> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[1] {
        return Err(Error::invalid(format!(
            "energy distance needs row sets of equal width, got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.shape()[0] == 0 || y.shape()[0] == 0 {
        return Err(Error::invalid("energy distance needs non-empty samples"));
    }
    let v = 2.0 * mean_pairwise(x, y) - mean_pairwise(x, x) - mean_pairwise(y, y);
    Ok(v.max(0.0))
}

/// First `n` rows (or all of them).
pub fn head_rows(x: &NdArray, n: usize) -> NdArray {
    let n = n.min(x.shape()[0]);
    let cols = x.shape()[1];
    NdArray::from_vec(&[n, cols], x.data()[..n * cols].to_vec()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::{prop_assert, proptest};

    fn erf(x: f64) -> f64 {
        // Abramowitz & Stegun 7.1.26
        let s = x.signum();
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let p = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        s * (1.0 - p * (-x * x).exp())
    }

    /// `E|N(m, s²)|`.
    fn folded_mean(m: f64, s: f64) -> f64 {
        s * (2.0 / std::f64::consts::PI).sqrt() * (-m * m / (2.0 * s * s)).exp() + m * erf(m / (s * 2f64.sqrt()))
    }

    #[test]
    fn point_masses() {
        let x = NdArray::from_vec(&[1, 1], vec![0.0]).unwrap();
        let y = NdArray::from_vec(&[1, 1], vec![1.0]).unwrap();
        assert_eq!(energy_distance(&x, &y).unwrap(), 2.0);
        let p = NdArray::from_vec(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        assert_eq!(energy_distance(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn shifted_gaussians_match_closed_form() {
        let mut rng = Rng::new(4);
        let n = 2000;
        let mu = 1.5;
        let x = NdArray::from_vec(&[n, 1], rng.normals(n)).unwrap();
        let y = NdArray::from_vec(&[n, 1], rng.normals(n).iter().map(|v| v + mu).collect()).unwrap();
        let expect = 2.0 * folded_mean(mu, 2f64.sqrt()) - 2.0 * folded_mean(0.0, 2f64.sqrt());
        let got = energy_distance(&x, &y).unwrap();
        assert!((got - expect).abs() < 0.05 * expect, "{got} vs {expect}");
    }

    #[test]
    fn mismatched_widths_rejected() {
        assert!(energy_distance(&NdArray::zeros(&[2, 2]), &NdArray::zeros(&[2, 3])).is_err());
        assert!(energy_distance(&NdArray::zeros(&[0, 2]), &NdArray::zeros(&[2, 2])).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_nonnegative_translation_invariant(seed in 0u64..200, shift in -5.0f64..5.0) {
            let mut rng = Rng::new(seed);
            let x = NdArray::from_vec(&[7, 3], rng.normals(21)).unwrap();
            let y = NdArray::from_vec(&[5, 3], rng.normals(15)).unwrap();
            let a = energy_distance(&x, &y).unwrap();
            let b = energy_distance(&y, &x).unwrap();
            let c = energy_distance(&x.map(|v| v + shift), &y.map(|v| v + shift)).unwrap();
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((a - c).abs() < 1e-9);
        }
    }
}
