use crate::error::Result;

use super::params::ParamSet;
use super::scalar::Scalar;

/// Adam optimiser state.
#[derive(Debug, Clone)]
pub struct OptimState<T = f32> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Default for OptimState<T> {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl<T: Scalar> OptimState<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Bias-corrected adaptive-moment update of every trainable parameter.
    /// Frozen groups are skipped. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        params.check_grads()?;
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| vec![T::zero(); p.tensor.len()])
                .collect();
            self.second = self.first.clone();
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step = T::of(self.learning_rate / c1);
        let c2_sqrt = T::of(c2.sqrt());
        let eps = T::of(self.epsilon);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));

        let frozen = params.frozen().clone();
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if frozen.contains(&p.group) {
                continue;
            }
            let g = p.tensor.grad().expect("checked above").to_vec();
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                m[i] = b1t * m[i] + ob1 * g[i];
                v[i] = b2t * v[i] + ob2 * g[i] * g[i];
                data[i] = data[i] - step * m[i] / (v[i].sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Adam step as a free function.
pub fn adam_step<T: Scalar>(params: &mut ParamSet<T>, opt: &mut OptimState<T>) -> Result<()> {
    opt.step(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::ndcore::Tensor;

    fn one_param(values: &[f64]) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.add("g", "w", Tensor::from_f64(&[values.len()], values).unwrap());
        ps
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut ps = one_param(&[1.0, 1.0]);
        ps.iter_mut()
            .next()
            .unwrap()
            .tensor
            .accumulate_grad(&[3.0, -0.5]);
        let mut opt = OptimState::new(1e-3);
        opt.step(&mut ps).unwrap();
        let d = ps.iter().next().unwrap().tensor.data().to_vec();
        assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((d[1] - (1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut ps = one_param(&[0.25, -2.0]);
        ps.iter_mut()
            .next()
            .unwrap()
            .tensor
            .accumulate_grad(&[0.0, 0.0]);
        let mut opt = OptimState::new(1e-2);
        for _ in 0..5 {
            opt.step(&mut ps).unwrap();
        }
        assert_eq!(ps.iter().next().unwrap().tensor.data(), &[0.25, -2.0]);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = one_param(&[1.0]);
        let mut opt = OptimState::new(1e-3);
        assert!(matches!(opt.step(&mut ps), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let mut ps = one_param(&[1.0]);
        ps.freeze("g");
        let mut opt = OptimState::new(1e-1);
        opt.step(&mut ps).unwrap();
        assert_eq!(ps.iter().next().unwrap().tensor.data(), &[1.0]);
    }
}
