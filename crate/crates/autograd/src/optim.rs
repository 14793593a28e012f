use crate::{Real, Tensor};

/// Adaptive-moment gradient descent with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `params[i]` and `grads[i]` must keep the same
    /// shapes and ordering across calls; a missing gradient counts as zero.
    pub fn update(&mut self, lr: f64, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(
            self.first.len(),
            params.len(),
            "parameter count changed between updates"
        );
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        for (i, param) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let data = param.data_mut();
            for j in 0..data.len() {
                let g = grads[i].map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first step is lr * sign(g).
        let mut p = Tensor::new(&[2], vec![1.0f64, -1.0]);
        let g = Tensor::new(&[2], vec![0.5, -3.0]);
        let mut adam = Adam::new();
        adam.update(0.1, &mut [&mut p], &[Some(&g)]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Tensor::new(&[1], vec![5.0f64]);
        let mut adam = Adam::new();
        for _ in 0..2000 {
            let g = Tensor::new(&[1], vec![2.0 * (p.data()[0] - 2.0)]);
            adam.update(0.05, &mut [&mut p], &[Some(&g)]);
        }
        assert!((p.data()[0] - 2.0).abs() < 1e-3);
    }
}
