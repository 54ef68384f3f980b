//! Adam with global-norm gradient clipping.

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor], learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |t: &&Tensor| Tensor::zeros(t.shape());
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// Applies one bias-corrected update.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let g = Tensor::vector(vec![0.5, -3.0]);
        let mut adam = Adam::new(&[&p], 0.1, 0.9, 0.98, 1e-12);
        adam.update(vec![&mut p], &[g]);
        assert!((p.data()[0] - 0.9).abs() < 1e-9);
        assert!((p.data()[1] + 1.9).abs() < 1e-9);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::vector(vec![3.0, -4.0]);
        let mut adam = Adam::new(&[&p], 0.05, 0.9, 0.98, 1e-8);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            adam.update(vec![&mut p], &[g]);
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2), "{:?}", p);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }
}
