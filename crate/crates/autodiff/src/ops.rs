//! Exposed numeric operations with validated contracts. The tape uses the
//! same underlying kernels, so these value-level functions double as the
//! reference path in tests.

use crate::nd::{softmax_rows_inplace, NdArray, Scalar};
use crate::{Error, Result};

/// Default floor applied inside `ln` to keep hard targets finite.
pub const LOG_FLOOR_EPS: f64 = 1e-12;

/// Temperature softmax over the trailing axis.
///
/// Errors on non-positive temperature (domain) and non-finite logits (input).
pub fn softmax_temp<T: Scalar>(logits: &NdArray<T>, tau: T) -> Result<NdArray<T>> {
    if tau <= T::zero() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax_temp logits"));
    }
    let mut out = logits.map(|x| x / tau);
    softmax_rows_inplace(&mut out);
    Ok(out)
}

fn validate_distribution<T: Scalar>(x: &NdArray<T>, what: &'static str) -> Result<()> {
    let (rows, cols) = x.as_2d();
    let tol = T::of(1e-5);
    for r in 0..rows {
        let mut sum = T::zero();
        for c in 0..cols {
            let v = x.data()[r * cols + c];
            if v < -tol {
                return Err(Error::InvalidArgument(format!(
                    "{what} has negative entry {v} in row {r}"
                )));
            }
            sum += v;
        }
        if (sum - T::one()).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "{what} row {r} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy between target distributions `q` and predictions `p`
/// over the trailing axis, with `ln` floored at `eps`.
pub fn cross_entropy_with_floor<T: Scalar>(q: &NdArray<T>, p: &NdArray<T>, eps: T) -> Result<T> {
    if q.shape() != p.shape() {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy",
            left: q.shape().to_vec(),
            right: p.shape().to_vec(),
        });
    }
    validate_distribution(q, "target")?;
    validate_distribution(p, "prediction")?;
    let (rows, cols) = q.as_2d();
    let mut total = T::zero();
    for r in 0..rows {
        for c in 0..cols {
            let qv = q.data()[r * cols + c];
            if qv == T::zero() {
                continue; // 0 * log 0 = 0 by convention
            }
            let pv = p.data()[r * cols + c];
            let lp = if pv > eps { pv.ln() } else { eps.ln() };
            total -= qv * lp;
        }
    }
    Ok(total / T::of(rows as f64))
}

/// Mean cross-entropy with the default log floor.
pub fn cross_entropy<T: Scalar>(q: &NdArray<T>, p: &NdArray<T>) -> Result<T> {
    cross_entropy_with_floor(q, p, T::of(LOG_FLOOR_EPS))
}

/// Mean Shannon entropy of the trailing-axis slices, in nats.
pub fn entropy<T: Scalar>(q: &NdArray<T>) -> T {
    let (rows, cols) = q.as_2d();
    let mut total = T::zero();
    for r in 0..rows {
        for c in 0..cols {
            let v = q.data()[r * cols + c];
            if v > T::zero() {
                total -= v * v.ln();
            }
        }
    }
    total / T::of(rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let l = NdArray::<f64>::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let p = softmax_temp(&l, 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_half_temperature_closed_form() {
        // softmax([1, 0], tau = 0.5) = [e^2, 1] / (e^2 + 1)
        let l = NdArray::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let p = softmax_temp(&l, 0.5).unwrap();
        let e2 = (2.0f64).exp();
        let want = e2 / (e2 + 1.0);
        assert!((p.data()[0] - want).abs() < 1e-12);
        assert!((p.data()[0] - 0.8808).abs() < 1e-4);
        assert!((p.data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn student_temperature_sharpens_distribution() {
        let l = NdArray::<f64>::from_vec(&[4], vec![0.9, -0.3, 0.2, -0.7]).unwrap();
        let sharp = softmax_temp(&l, 0.1).unwrap();
        let broad = softmax_temp(&l, 1.0).unwrap();
        assert!(entropy(&sharp) < entropy(&broad));
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        let l = NdArray::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(softmax_temp(&l, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(softmax_temp(&l, -1.0), Err(Error::InvalidArgument(_))));
        let nan = NdArray::<f64>::from_vec(&[2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_temp(&nan, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_perfect_one_hot_is_zero() {
        let q = NdArray::<f64>::from_vec(&[3], vec![0.0, 1.0, 0.0]).unwrap();
        let p = NdArray::<f64>::from_vec(&[3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&q, &p).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_self_is_ln4() {
        let u = NdArray::<f64>::full(&[4], 0.25);
        let ce = cross_entropy(&u, &u).unwrap();
        assert!((ce - (4.0f64).ln()).abs() < 1e-12);
        assert!((ce - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_one_hot_against_soft_prediction() {
        let q = NdArray::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let e2 = (2.0f64).exp();
        let p0 = e2 / (e2 + 1.0);
        let p = NdArray::<f64>::from_vec(&[2], vec![p0, 1.0 - p0]).unwrap();
        let ce = cross_entropy(&q, &p).unwrap();
        assert!((ce - (-p0.ln())).abs() < 1e-12);
        assert!((ce - 0.1269).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_bounded_below_by_entropy() {
        let q = NdArray::<f64>::from_vec(&[4], vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let p = NdArray::<f64>::from_vec(&[4], vec![0.25, 0.25, 0.3, 0.2]).unwrap();
        assert!(cross_entropy(&q, &p).unwrap() >= entropy(&q) - 1e-7);
        assert!((cross_entropy(&q, &q).unwrap() - entropy(&q)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_non_distributions() {
        let q = NdArray::<f64>::from_vec(&[2], vec![0.9, 0.3]).unwrap();
        let p = NdArray::<f64>::full(&[2], 0.5);
        assert!(cross_entropy(&q, &p).is_err());
        let q2 = NdArray::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let p2 = NdArray::<f64>::from_vec(&[3], vec![0.5, 0.25, 0.25]).unwrap();
        assert!(matches!(
            cross_entropy(&q2, &p2),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn hard_target_on_floored_prediction_stays_finite() {
        let q = NdArray::<f64>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let p = NdArray::<f64>::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let ce = cross_entropy(&q, &p).unwrap();
        assert!(ce.is_finite());
        assert!((ce - (-LOG_FLOOR_EPS.ln())).abs() < 1e-9);
    }
}
