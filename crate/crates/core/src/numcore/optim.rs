//! Full-batch Adam.

use super::matrix::Matrix;

/// Adam with bias-corrected first and second moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<&Matrix>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_a_quadratic() {
        // f(w) = sum((w - 3)^2)
        let mut w = Matrix::filled(1, 3, 0.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = w.map(|x| 2.0 * (x - 3.0));
            opt.step(&mut [&mut w], &[Some(&g)]);
        }
        assert!(w.data().iter().all(|x| (x - 3.0).abs() < 1e-3), "{w:?}");
    }

    #[test]
    fn skips_parameters_without_gradient() {
        let mut a = Matrix::filled(2, 2, 1.5);
        let mut b = Matrix::filled(1, 2, -0.5);
        let before = a.clone();
        let g = Matrix::filled(1, 2, 1.0);
        let mut opt = Adam::new(0.01);
        opt.step(&mut [&mut a, &mut b], &[None, Some(&g)]);
        assert_eq!(a, before);
        assert!(b.data().iter().all(|&x| x < -0.5));
    }
}
