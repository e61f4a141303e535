use super::Tensor;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape must match parameter");
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let mut opt = Adam::new(0.1);
        for _ in 0..10 {
            opt.step(params.iter_mut(), &[Tensor::zeros(&[3])]);
        }
        assert_eq!(params, before);
        assert_eq!(opt.steps(), 10);
    }

    fn minimize_quadratic() -> f64 {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(params[0].clone());
            let d = g.add_scalar(x, -3.0).unwrap();
            let loss = g.square(d).unwrap();
            let grads = g.backward(loss).unwrap();
            let gx = grads.get(x).unwrap().clone();
            opt.step(params.iter_mut(), &[gx]);
        }
        params[0].item()
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let x = minimize_quadratic();
        assert!((x - 3.0).abs() < 1e-3, "x = {x}");
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        assert_eq!(minimize_quadratic().to_bits(), minimize_quadratic().to_bits());
    }
}
