//! Central finite differences, the independent oracle every analytic
//! gradient in this crate is checked against.

use crate::error::Result;
use crate::scalar::Scalar;

use super::Tensor;

/// (f(x+h) − f(x−h)) / 2h per element. `f` must be a pure function of the
/// tensor's current contents; the input is restored afterwards.
pub fn finite_difference_grad<T, F>(f: F, input: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<T>,
{
    let n = input.len();
    let mut grad = vec![T::zero(); n];
    let two_h = h + h;
    for i in 0..n {
        let orig = input.data()[i];
        input.data_mut()[i] = orig + h;
        let fp = f(input)?;
        input.data_mut()[i] = orig - h;
        let fm = f(input)?;
        input.data_mut()[i] = orig;
        grad[i] = (fp - fm) / two_h;
    }
    Tensor::from_vec(input.shape(), grad)
}

/// Worst relative error between an analytic and a numeric gradient.
/// Near-zero entries are compared absolutely.
pub fn max_rel_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    let floor = 1e-6;
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| {
            let (a, n) = (a.to_f64_lossy(), n.to_f64_lossy());
            let err = (a - n).abs();
            let den = a.abs().max(n.abs());
            if den < floor {
                err
            } else {
                err / den
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mul, sum, Tape};

    #[test]
    fn quadratic_slope() {
        let x = Tensor::scalar(3.0f64);
        let g = finite_difference_grad(
            |t| {
                let v = t.item()?;
                Ok(v * v)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!((g.item().unwrap() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_is_flat() {
        let x = Tensor::from_vec(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let g = finite_difference_grad(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn agrees_with_backward_on_square() {
        let x = Tensor::from_vec(&[4], vec![0.3f64, -1.2, 2.0, 0.0]).unwrap().requires_grad(true);
        let tape = Tape::new();
        let y = mul(&tape, &x, &x).unwrap();
        let loss = sum(&tape, &y);
        tape.backward(&loss).unwrap();
        let analytic = x.grad().unwrap();
        x.set_requires_grad(false);
        let numeric = finite_difference_grad(
            |t| {
                let tape = Tape::new();
                let y = mul(&tape, t, t)?;
                sum(&tape, &y).item()
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(&analytic, &numeric.to_vec()) <= 1e-6);
    }
}
