//! Block-floating-point dot-product emulation for the high-precision
//! correction path.
//!
//! A dot product runs in six steps: per-element exponent addition, largest
//! exponent identification, normalization shift of each product mantissa,
//! mantissa truncation to M bits (round toward zero), exact integer
//! accumulation, and final renormalization. Mantissa arithmetic is done with
//! exact 128-bit integers so truncation is the only loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mantissa width of the fixed-point accumulator lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BfpConfig {
    pub mantissa_bits: u32,
}

impl BfpConfig {
    pub fn new(mantissa_bits: u32) -> Result<Self> {
        if !(4..=52).contains(&mantissa_bits) {
            return Err(Error::Config(format!(
                "mantissa_bits must be in [4, 52], got {mantissa_bits}"
            )));
        }
        Ok(Self { mantissa_bits })
    }
}

/// Exact decomposition |v| = mant * 2^(exp-53) with mant in [2^52, 2^53),
/// plus the sign. `exp` is the frexp-style exponent: |v| in [2^(exp-1), 2^exp).
fn decompose(v: f64) -> (u64, i64, i64) {
    debug_assert!(v.is_finite() && v != 0.0);
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { -1 } else { 1 };
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & 0xf_ffff_ffff_ffff;
    if raw_exp == 0 {
        // Subnormal: normalize the fraction.
        let shift = frac.leading_zeros() as i64 - 11;
        let mant = frac << shift;
        let exp = -1021 - shift;
        (mant, exp, sign)
    } else {
        let mant = frac | (1u64 << 52);
        let exp = raw_exp - 1022;
        (mant, exp, sign)
    }
}

/// Block-floating-point dot product of two equal-length vectors.
///
/// Exact zero is returned when every product vanishes (the shared exponent is
/// undefined in that case).
pub fn bfp_dot(x: &[f64], w: &[f64], cfg: &BfpConfig) -> Result<f64> {
    if x.len() != w.len() {
        return Err(Error::Dimension(format!(
            "bfp_dot of lengths {} and {}",
            x.len(),
            w.len()
        )));
    }
    if !x.iter().chain(w.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite input to bfp_dot".into()));
    }

    // Steps 1-2: exponent sums and the shared maximum.
    let mut terms: Vec<(u128, i64, i64)> = Vec::with_capacity(x.len());
    let mut e_max = i64::MIN;
    for (&xv, &wv) in x.iter().zip(w) {
        if xv == 0.0 || wv == 0.0 {
            continue;
        }
        let (mx, ex, sx) = decompose(xv);
        let (mw, ew, sw) = decompose(wv);
        // Product value = mx*mw * 2^(ex+ew-106); exponent sum e = ex+ew bounds
        // it: |p| < 2^e.
        let e = ex + ew;
        terms.push((u128::from(mx) * u128::from(mw), e, sx * sw));
        e_max = e_max.max(e);
    }
    if terms.is_empty() {
        return Ok(0.0);
    }

    // Steps 3-5: shift each product mantissa to the shared exponent, truncate
    // toward zero to M fractional bits, accumulate exactly.
    let mbits = i64::from(cfg.mantissa_bits);
    let mut acc: i128 = 0;
    for (mant, e, sign) in terms {
        // q = trunc(|p| * 2^(mbits - e_max)) = (mx*mw) >> (106 - mbits + (e_max - e))
        let shift = 106 - mbits + (e_max - e);
        debug_assert!(shift > 0);
        let q = if shift >= 128 { 0 } else { (mant >> shift) as i128 };
        acc += i128::from(sign) * q;
    }

    // Step 6: renormalize to a real result with the shared exponent.
    Ok((acc as f64) * f64::powi(2.0, (e_max - mbits) as i32))
}

/// Per-output-column dot products of `x` against a D x H matrix, each with
/// its own shared exponent.
pub fn bfp_matvec(x: &[f64], w: &Tensor, cfg: &BfpConfig) -> Result<Vec<f64>> {
    if !w.is_2d() || w.rows() != x.len() {
        return Err(Error::Dimension(format!(
            "bfp_matvec of length {} against {:?}",
            x.len(),
            w.shape()
        )));
    }
    let (d, h) = (w.rows(), w.cols());
    let mut column = vec![0.0; d];
    let mut out = Vec::with_capacity(h);
    for j in 0..h {
        for (i, c) in column.iter_mut().enumerate() {
            *c = w.data()[i * h + j];
        }
        out.push(bfp_dot(x, &column, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn fp64_dot(x: &[f64], w: &[f64]) -> f64 {
        x.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn power_of_two_inputs_are_exact() {
        // Power-of-two products have mantissa 1.0, so nothing truncates as
        // long as the block's exponent spread fits in the mantissa width.
        let x = vec![1.0, 2.0, 0.25, -8.0, 0.5];
        let w = vec![4.0, -0.5, 2.0, 0.125, -16.0];
        let cfg = BfpConfig::new(8).unwrap();
        assert_eq!(bfp_dot(&x, &w, &cfg).unwrap(), fp64_dot(&x, &w));
    }

    #[test]
    fn zero_vector_gives_zero() {
        let cfg = BfpConfig::new(24).unwrap();
        assert_eq!(bfp_dot(&[0.0; 8], &[1.0; 8], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn random_vectors_meet_truncation_bound() {
        // FP64 reference oracle; worst-case truncation bound: each of the n
        // terms loses at most 2^(e_max - M) toward zero, and the reference is
        // good to ~n ulps, so |diff| <= n * 2^(e_max - M) * 2 is safe.
        let mut rng = substream(99, "bfp.rand");
        let n = 128;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = BfpConfig::new(24).unwrap();
        let got = bfp_dot(&x, &w, &cfg).unwrap();
        let want = fp64_dot(&x, &w);
        let rel = (got - want).abs() / want.abs().max(1e-300);
        assert!(
            rel < (n as f64) * 2f64.powi(-18),
            "relative error {rel:e} out of bound"
        );
    }

    #[test]
    fn matvec_agrees_with_dot_loop() {
        let mut rng = substream(3, "bfp.matvec");
        let (d, h) = (16, 5);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = Tensor::from_rows(
            d,
            h,
            (0..d * h).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap();
        let cfg = BfpConfig::new(16).unwrap();
        let got = bfp_matvec(&x, &w, &cfg).unwrap();
        for j in 0..h {
            let col: Vec<f64> = (0..d).map(|i| w.data()[i * h + j]).collect();
            assert_eq!(got[j], bfp_dot(&x, &col, &cfg).unwrap());
        }
    }

    #[test]
    fn identity_reproduces_power_of_two_input() {
        let d = 4;
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        let w = Tensor::from_rows(d, d, w).unwrap();
        let x = vec![0.5, -2.0, 4.0, 0.0625];
        let cfg = BfpConfig::new(8).unwrap();
        assert_eq!(bfp_matvec(&x, &w, &cfg).unwrap(), x);
    }

    #[test]
    fn scaling_by_two_is_exact_covariance() {
        let mut rng = substream(17, "bfp.scale");
        let x: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let cfg = BfpConfig::new(12).unwrap();
        assert_eq!(
            bfp_dot(&x2, &w, &cfg).unwrap(),
            2.0 * bfp_dot(&x, &w, &cfg).unwrap()
        );
    }

    #[test]
    fn mantissa_width_out_of_range_is_rejected() {
        assert!(BfpConfig::new(3).is_err());
        assert!(BfpConfig::new(53).is_err());
    }
}
