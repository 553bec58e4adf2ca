//! Adam optimizer with decoupled-by-convention L2 weight decay (the decay
//! term is added to the gradient before the moment updates, the behaviour of
//! the reference implementations this model family trains with).

use crate::tensor::{Real, Tensor};

/// First/second-moment Adam state over an indexed parameter list. Parameter
/// order must stay stable across steps; moments are allocated lazily on the
/// first update of each index.
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Advance the shared step counter; call once before the per-parameter
    /// updates of an optimization step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one Adam update to parameter `idx`.
    pub fn update(&mut self, idx: usize, param: &mut Tensor<T>, grad: &Tensor<T>) {
        debug_assert!(self.step >= 1, "begin_step must precede update");
        if self.m.len() <= idx {
            self.m.resize(idx + 1, None);
            self.v.resize(idx + 1, None);
        }
        let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(param.shape()));
        let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(param.shape()));

        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let wd = T::from_f64(self.weight_decay);
        let eps = T::from_f64(self.eps);
        // bias-corrected step size
        let corr1 = 1.0 - self.beta1.powi(self.step);
        let corr2 = 1.0 - self.beta2.powi(self.step);
        let alpha = T::from_f64(self.lr * corr2.sqrt() / corr1);

        for ((p, g0), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            let g = *g0 + wd * *p;
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            *p -= alpha * *mi / (vi.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        // With zero moments, m̂ = g and v̂ = g², so the first update is
        // lr·g/(|g|+eps) ≈ lr·sign(g).
        let mut opt = Adam::<f64>::new(0.01, 0.0);
        let mut p = Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::from_vec(vec![2], vec![0.5, -0.25]).unwrap();
        opt.begin_step();
        opt.update(0, &mut p, &g);
        assert!((p.data()[0] - (1.0 - 0.01)).abs() < 1e-6, "{}", p.data()[0]);
        assert!((p.data()[1] - (-2.0 + 0.01)).abs() < 1e-6, "{}", p.data()[1]);
    }

    #[test]
    fn weight_decay_shrinks_params_without_data_gradient() {
        let mut opt = Adam::<f64>::new(0.01, 0.1);
        let mut p = Tensor::from_vec(vec![1], vec![5.0]).unwrap();
        let zero_grad = Tensor::zeros(&[1]);
        let mut prev = 5.0f64;
        for _ in 0..10 {
            opt.begin_step();
            opt.update(0, &mut p, &zero_grad);
            let now: f64 = p.data()[0];
            assert!(now.abs() < prev.abs(), "{now} should shrink from {prev}");
            prev = now;
        }
    }

    #[test]
    fn converges_on_a_quadratic() {
        // minimize (p - 3)²; gradient 2(p - 3)
        let mut opt = Adam::<f64>::new(0.05, 0.0);
        let mut p = Tensor::from_vec(vec![1], vec![-4.0]).unwrap();
        for _ in 0..2000 {
            let g = Tensor::from_vec(vec![1], vec![2.0 * (p.data()[0] - 3.0)]).unwrap();
            opt.begin_step();
            opt.update(0, &mut p, &g);
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-3, "{}", p.data()[0]);
    }

    #[test]
    fn distinct_param_indices_keep_separate_moments() {
        let mut opt = Adam::<f64>::new(0.01, 0.0);
        let mut a = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let mut b = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let big = Tensor::from_vec(vec![1], vec![100.0]).unwrap();
        let tiny = Tensor::from_vec(vec![1], vec![1e-4]).unwrap();
        opt.begin_step();
        opt.update(0, &mut a, &big);
        opt.update(1, &mut b, &tiny);
        // both move ≈ lr in magnitude (Adam normalizes), in the right direction
        assert!(a.data()[0] < 0.0 && b.data()[0] < 0.0);
        assert!((a.data()[0] + 0.01).abs() < 1e-4);
    }
}
