use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference check of `f` at `x`.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`. `x` must
/// be a trainable leaf; its stored gradient is overwritten.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    finite_difference_check_many(|| f(x), &[x], step)
}

/// Central-difference check of a closure over several trainable leaves.
pub fn finite_difference_check_many<F>(f: F, params: &[&Tensor], step: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    for p in params {
        if !p.requires_grad() || !p.is_leaf() {
            return Err(Error::Contract("gradient check needs trainable leaves".into()));
        }
        p.zero_grad();
    }
    f()?.backward()?;
    let mut worst: f64 = 0.0;
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + step;
            let plus = f()?.item();
            p.data_mut()[i] = orig - step;
            let minus = f()?.item();
            p.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
        p.zero_grad();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::param(&[4], vec![0.3, -1.0, 2.0, 5.0]).unwrap();
        let err = finite_difference_check(|t| Ok(t.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn pointwise_ops_pass() {
        let x = Tensor::param(&[6], vec![-2.0, -0.3, 0.2, 0.7, 1.5, 3.0]).unwrap();
        let w = Tensor::new(&[6], vec![0.5, -1.0, 2.0, 0.1, -0.4, 1.2]).unwrap();
        type Check<'a> = Box<dyn Fn(&Tensor) -> Result<Tensor> + 'a>;
        let checks: Vec<Check> = vec![
            Box::new(|t: &Tensor| Ok(t.sigmoid().mul(&w)?.sum())),
            Box::new(|t: &Tensor| Ok(t.softplus().mul(&w)?.sum())),
            Box::new(|t: &Tensor| Ok(t.leaky_relu(0.2)?.mul(&w)?.sum())),
            Box::new(|t: &Tensor| Ok(t.square().add_scalar(1.0).mul(&w)?.mean())),
            Box::new(|t: &Tensor| Ok(t.reshape(&[2, 3])?.neg().mul(&w.reshape(&[2, 3])?)?.sum())),
        ];
        for c in checks {
            assert!(finite_difference_check(&c, &x, 1e-5).unwrap() < 1e-4);
        }
    }
}
