//! Rectified Adam and parameter averaging.

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RAdam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for RAdam<T> {
    fn default() -> Self {
        Self {
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
        }
    }
}

impl<T: Scalar> RAdam<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: T| b >= T::zero() && b < T::one();
        if !(unit(self.beta1) && unit(self.beta2)) || !(self.eps > T::zero()) {
            return Err(invalid("optimizer needs betas in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

/// Advances the moments by one step and returns the parameter delta.
///
/// While the variance rectification is undefined (`rho_t <= 5`) the update is
/// the bias-corrected momentum step `-lr * m_hat`.
pub fn optimizer_step<T: Scalar>(opt: &RAdam<T>, moments: &mut Moments<T>, grad: &[T], lr: T) -> Result<Vec<T>> {
    if grad.len() != moments.m.len() {
        return Err(Error::DimensionMismatch {
            expected: moments.m.len(),
            got: grad.len(),
        });
    }
    moments.t += 1;
    let t = moments.t as f64;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let bc1 = 1.0 - b1.as_f64().powf(t);
    let b2t = b2.as_f64().powf(t);
    let bc2 = 1.0 - b2t;
    let rho_inf = 2.0 / (1.0 - b2.as_f64()) - 1.0;
    let rho_t = rho_inf - 2.0 * t * b2t / bc2;
    let rect = if rho_t > 5.0 {
        Some(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
    } else {
        None
    };
    let step = lr / T::of(bc1);
    let mut delta = Vec::with_capacity(grad.len());
    for ((m, v), &g) in moments.m.iter_mut().zip(moments.v.iter_mut()).zip(grad) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let d = match rect {
            Some(r) => -step * *m * T::of(r * bc2.sqrt()) / (v.sqrt() + opt.eps),
            None => -step * *m,
        };
        delta.push(d);
    }
    Ok(delta)
}

/// `ema <- rate * ema + (1 - rate) * params`.
pub fn ema_update<T: Scalar>(ema: &mut [T], params: &[T], rate: T) -> Result<()> {
    if !(rate >= T::zero() && rate < T::one()) {
        return Err(invalid(format!("EMA rate must be in [0, 1), got {rate}")));
    }
    if ema.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: ema.len(),
            got: params.len(),
        });
    }
    if rate == T::zero() {
        ema.copy_from_slice(params);
        return Ok(());
    }
    let keep = T::one() - rate;
    for (e, &p) in ema.iter_mut().zip(params) {
        *e = rate * *e + keep * p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_basics() {
        let mut e = vec![3.0, -1.0];
        ema_update(&mut e, &[1.0, 2.0], 0.0).unwrap();
        assert_eq!(e, vec![1.0, 2.0]);
        let mut e = vec![0.0];
        ema_update(&mut e, &[2.0], 0.5).unwrap();
        assert_eq!(e, vec![1.0]);
        assert!(ema_update(&mut e, &[2.0], 1.0).is_err());
        assert!(ema_update(&mut e, &[2.0], -0.1).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut e = vec![0.0f64];
        for k in 1..=50 {
            ema_update(&mut e, &[1.0], 0.9).unwrap();
            assert!((1.0 - e[0] - 0.9f64.powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grad_gives_zero_update() {
        let opt = RAdam::<f64>::default();
        let mut m = Moments::zeros(3);
        for _ in 0..10 {
            assert_eq!(optimizer_step(&opt, &mut m, &[0.0; 3], 1e-3).unwrap(), vec![0.0; 3]);
        }
    }

    #[test]
    fn constant_grad_update_tends_to_lr() {
        let opt = RAdam::<f64>::default();
        let mut m = Moments::zeros(2);
        let mut d = vec![];
        for _ in 0..20_000 {
            d = optimizer_step(&opt, &mut m, &[0.3, -2.0], 1e-3).unwrap();
        }
        assert!((d[0] + 1e-3).abs() < 1e-6);
        assert!((d[1] - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn early_steps_use_momentum_form() {
        let opt = RAdam::<f64>::default();
        let mut m = Moments::zeros(1);
        let d = optimizer_step(&opt, &mut m, &[0.5], 0.1).unwrap();
        // bias-corrected first moment equals the gradient after one step
        assert!((d[0] + 0.05).abs() < 1e-15);
    }
}
