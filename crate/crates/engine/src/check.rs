use crate::error::{EngineError, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Tensor};
use crate::DENOM_EPS;

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<T: Scalar>(
    f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let all: Vec<usize> = (0..x.numel()).collect();
    let entries = finite_diff_entries(f, x, eps, &all)?;
    Tensor::new(x.shape().to_vec(), entries)
}

/// Central differences for a subset of flat coordinates of `x`.
pub fn finite_diff_entries<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: T,
    indices: &[usize],
) -> Result<Vec<T>> {
    if !(eps > T::zero()) {
        return Err(EngineError::Invalid(format!(
            "finite-difference step {eps} must be > 0"
        )));
    }
    let mut probe = x.clone();
    let two_eps = eps + eps;
    indices
        .iter()
        .map(|&i| {
            if i >= x.numel() {
                return Err(EngineError::Invalid(format!("coordinate {i} out of range")));
            }
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + eps;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - eps;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(EngineError::NonFinite {
                    node: format!("finite difference at coordinate {i}"),
                });
            }
            Ok((plus - minus) / two_eps)
        })
        .collect()
}

/// Cosine of the angle between two tensors, flattened. `None` when either
/// norm is below the denominator guard.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Option<T>> {
    a.check_same("cosine_similarity", b)?;
    let (na, nb) = (a.norm(), b.norm());
    let guard = T::of(DENOM_EPS);
    if na < guard || nb < guard {
        return Ok(None);
    }
    let c = dot(a.data(), b.data()) / (na * nb);
    Ok(Some(c.max(-T::one()).min(T::one())))
}
