//! Server-side parameter averaging.
//!
//! Each coordinate is accumulated in f64 over terms sorted by value, so the
//! result is bit-identical under any permutation of the client list.

use crate::error::{Error, Result};
use crate::tensor::Element;

fn check_lengths<T>(params: &[&[T]]) -> Result<usize> {
    let first = params
        .first()
        .ok_or_else(|| Error::param("aggregation needs at least one client"))?;
    let n = first.len();
    if let Some(bad) = params.iter().find(|p| p.len() != n) {
        return Err(Error::dim(format!(
            "parameter vectors of length {n} and {} cannot be averaged",
            bad.len()
        )));
    }
    Ok(n)
}

fn combine<T: Element>(params: &[&[T]], weights: &[f64], denom: f64) -> Vec<T> {
    let n = params[0].len();
    let mut terms = vec![0.0f64; params.len()];
    (0..n)
        .map(|j| {
            for (t, (p, w)) in terms.iter_mut().zip(params.iter().zip(weights)) {
                *t = p[j].as_f64() * w;
            }
            terms.sort_unstable_by(f64::total_cmp);
            T::from_f64_lossy(terms.iter().sum::<f64>() / denom)
        })
        .collect()
}

/// `sum_k (n_k / n) w_k` with `n = sum_k n_k`.
pub fn aggregate_weighted<T: Element>(params: &[&[T]], counts: &[usize]) -> Result<Vec<T>> {
    check_lengths(params)?;
    if counts.len() != params.len() {
        return Err(Error::dim(format!(
            "{} parameter vectors but {} sample counts",
            params.len(),
            counts.len()
        )));
    }
    if counts.contains(&0) {
        return Err(Error::param("sample counts must be positive"));
    }
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let total = weights.iter().sum();
    Ok(combine(params, &weights, total))
}

/// Unweighted mean `(1/K) sum_k w_k`.
pub fn aggregate_uniform<T: Element>(params: &[&[T]]) -> Result<Vec<T>> {
    check_lengths(params)?;
    let weights = vec![1.0; params.len()];
    Ok(combine(params, &weights, params.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_example() {
        let a = [0.0f64];
        let b = [2.0f64];
        assert_eq!(aggregate_weighted(&[&a, &b], &[1, 3]).unwrap(), vec![1.5]);
    }

    #[test]
    fn equal_counts_give_mean() {
        let a = [1.0f64, 4.0];
        let b = [3.0f64, 0.0];
        assert_eq!(
            aggregate_weighted(&[&a, &b], &[7, 7]).unwrap(),
            aggregate_uniform(&[&a, &b]).unwrap()
        );
    }

    #[test]
    fn single_client_is_identity() {
        let a = [0.1f32, -3.5, 7.25];
        assert_eq!(aggregate_weighted(&[&a], &[42]).unwrap(), a.to_vec());
        assert_eq!(aggregate_uniform(&[&a]).unwrap(), a.to_vec());
    }

    #[test]
    fn uniform_examples() {
        let z = [0.0f64; 3];
        let two = [2.0f64; 3];
        assert_eq!(aggregate_uniform(&[&z, &two]).unwrap(), vec![1.0; 3]);
        let x = [0.3f32, 0.7, -1.1];
        assert_eq!(aggregate_uniform(&[&x, &x, &x, &x, &x]).unwrap(), x.to_vec());
    }

    #[test]
    fn permutation_gives_identical_bits() {
        let a = [0.1f32, 1e7, -3.3];
        let b = [0.2f32, -1e-7, 8.1];
        let c = [0.3f32, 3.0, 0.9];
        let x = aggregate_uniform(&[&a, &b, &c]).unwrap();
        let y = aggregate_uniform(&[&c, &a, &b]).unwrap();
        assert_eq!(x, y);
        let x = aggregate_weighted(&[&a, &b, &c], &[5, 9, 2]).unwrap();
        let y = aggregate_weighted(&[&b, &c, &a], &[9, 2, 5]).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn errors() {
        let a = [1.0f64];
        let b = [1.0f64, 2.0];
        assert!(matches!(aggregate_uniform(&[&a, &b]), Err(Error::Dimension(_))));
        assert!(matches!(aggregate_weighted(&[&a], &[1, 2]), Err(Error::Dimension(_))));
        assert!(aggregate_weighted(&[&a], &[0]).is_err());
        assert!(aggregate_uniform::<f64>(&[]).is_err());
    }
}
