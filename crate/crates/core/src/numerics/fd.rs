use super::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a time:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_difference_gradient(|t| t.data()[0].powi(2), &Tensor::from_vec(vec![3.0]), 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_sum() {
        let g = finite_difference_gradient(|t| t.sum(), &Tensor::from_vec(vec![5.0, 7.0]), 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
